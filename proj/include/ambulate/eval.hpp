#pragma once

#include "ambulate/datasets.hpp"
#include "ambulate/dcnn_model.hpp"
#include "ambulate/transfer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ambulate {

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 1;
  std::vector<Fold> folds;
  /// Stratum per subject: its label when all of its epochs share one,
  /// otherwise every subject falls in stratum 0.
  std::map<std::string, int> strata;
  std::vector<std::string> warnings;
};

/// Subjects dealt to k folds per stratum; about 10% of each fold's training
/// subjects (per stratum) held out for validation. Throws SpecError.
FoldPlan make_folds(const Dataset& d, int k = 5, std::uint64_t seed = 1);

struct EpochPrediction {
  int fold = 0;
  std::size_t record = 0;  // position in the evaluated epoch list
  std::string subject_id;
  std::string test_id;
  int epoch_index = 0;
  int true_label = 0;
  int predicted = 0;
  std::vector<double> posterior;
};

/// An aggregated test or subject: majority label of its members.
struct VotePrediction {
  int fold = 0;
  std::string id;
  std::string subject_id;
  int true_label = 0;
  int predicted = 0;
  std::size_t members = 0;
  std::vector<double> mean_posterior;
};

/// Most frequent predicted label; ties go to the higher mean posterior, then
/// to the lower label index.
int majority_vote(const std::vector<int>& labels, const std::vector<std::vector<double>>& posteriors);

/// Epochs -> tests (by test id) -> subjects. Output is ordered by id.
std::pair<std::vector<VotePrediction>, std::vector<VotePrediction>> aggregate_votes(
    const std::vector<EpochPrediction>& epochs);

struct Metrics {
  double acc = 0.0;        // mean recall over classes present in y_true
  double plain_acc = 0.0;  // fraction correct
  double kappa = 0.0;
  double mf1 = 0.0;        // mean F1 over classes in y_true or y_pred
  Eigen::MatrixXi confusion;  // rows true, columns predicted
};

/// Throws SpecError on empty or unequal-length inputs.
Metrics compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred, int n_classes);
Metrics metrics_from_confusion(const Eigen::MatrixXi& confusion);

enum class Recipe { end_to_end, direct, fixed, full };
std::string_view to_string(Recipe r);
Recipe recipe_from_string(std::string_view name, bool allow_full = false);

struct EvalConfig {
  int folds = 5;
  std::uint64_t seed = 1;
  int tests_per_subject = 10;  // 0 disables per-subject test sampling
  bool balance = true;
  nn::TrainConfig train;
};

struct LevelReport {
  Metrics epoch, test, subject;
};

struct FoldReport {
  int fold = 0;
  std::vector<std::string> test_subjects;
  LevelReport metrics;
  int best_pass = 0;
};

struct Spread {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

struct EvalReport {
  std::string dataset;
  std::vector<std::string> task_labels;
  Recipe recipe = Recipe::end_to_end;
  EvalConfig config;
  std::vector<FoldReport> folds;
  LevelReport pooled;  // all folds' predictions together
  /// Test-level metrics across folds.
  Spread test_acc, test_kappa, test_mf1;
  std::vector<EpochPrediction> epoch_preds;
  std::vector<VotePrediction> test_preds;
  std::vector<VotePrediction> subject_preds;
  std::vector<std::string> warnings;
};

/// Restricts the dataset to `task_labels` (in that order) and relabels.
/// Throws SpecError when a task label is missing from the dataset.
Dataset select_task(const Dataset& d, const std::vector<std::string>& task_labels);

/// Subject-wise cross-validation. Transfer recipes need `source`. When
/// `plan` is given its folds are used as-is. Fold failures are rethrown
/// with the fold index.
EvalReport run_cv(const Dataset& d, const std::vector<std::string>& task_labels, Recipe recipe,
                  const EvalConfig& config, const ModelBundle* source = nullptr,
                  const FoldPlan* plan = nullptr);

/// Writes report.json, epoch_preds.csv, test_preds.csv, subject_preds.csv
/// and metrics.csv. Throws IoError.
void write_report(const EvalReport& r, const std::filesystem::path& dir);
nlohmann::json report_json(const EvalReport& r);

}  // namespace ambulate
