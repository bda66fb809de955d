#pragma once

#include "ambulate/types.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ambulate {

struct WarpResult {
  double cost = 0.0;
  std::vector<std::pair<int, int>> path;  // (i, j) from (0, 0) to (n-1, m-1)
};

/// Full DTW between C x n and C x m sequences with squared Euclidean local
/// cost. Backtracking prefers the diagonal, then the (1,0) step.
/// Throws ShapeError.
WarpResult dtw(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Cost only; same recursion without storing the path.
double dtw_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct DbaResult {
  Eigen::MatrixXd average;
  /// Summed DTW cost to the average: entry 0 for the initial medoid, then
  /// one per completed update.
  std::vector<double> inertia;
  std::size_t medoid_index = 0;
};

/// Medoid by total DTW cost. Sets larger than `exact_limit` use evenly
/// spaced candidate and reference subsets of that size.
std::size_t dtw_medoid(const std::vector<Eigen::MatrixXd>& seqs, std::size_t exact_limit = 50);

/// DTW barycenter averaging from the medoid. Stops after `iterations`
/// updates or when the relative inertia improvement drops below 1e-6.
/// Throws SpecError / ShapeError.
DbaResult dba_average(const std::vector<Eigen::MatrixXd>& seqs, int iterations = 10);

struct RepresentativeSelection {
  double min_posterior = 0.85;
  int max_epochs_per_test = 40;
  int target_count = 2000;
  std::uint64_t seed = 1;

  void validate() const;
};

/// One classified epoch; `record` indexes the epoch list it came from.
struct PosteriorRow {
  std::size_t record = 0;
  std::string test_id;
  int epoch_index = 0;
  int true_label = 0;
  std::vector<double> posterior;
};

/// Correctly classified epochs of `cls` with posterior > min_posterior,
/// at most max_epochs_per_test per (unsampled) test, then target_count drawn
/// without replacement. Repeated copies of a sampled test count once.
/// Throws SelectionEmpty.
EpochList select_representative_epochs(const std::vector<PosteriorRow>& rows,
                                       const EpochList& epochs, int cls,
                                       const RepresentativeSelection& sel);

Eigen::MatrixXd to_matrix(const EpochData& e);

}  // namespace ambulate
