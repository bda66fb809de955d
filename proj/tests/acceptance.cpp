// Acceptance run: one PASS / FAIL / SKIP line per criterion.
//
//   acceptance            all criteria
//   acceptance 5 6 9      a subset
//
// Criteria 1-3 need the public HAR datasets: AMBULATE_UCIHAR_DIR (the
// unpacked "UCI HAR Dataset" folder) and AMBULATE_WISDM_FILE (the WISDM raw
// text file). Without them those criteria print SKIP, and criterion 4 takes
// its source model from a synthetic activity proxy instead of UCI HAR.
// Exit code: 1 if any criterion fails, else 0.

#include "ambulate/datasets.hpp"
#include "ambulate/dba.hpp"
#include "ambulate/dcnn_model.hpp"
#include "ambulate/error.hpp"
#include "ambulate/eval.hpp"
#include "ambulate/lrp.hpp"
#include "ambulate/random.hpp"
#include "ambulate/signal_prep.hpp"
#include "ambulate/timefreq.hpp"
#include "ambulate/transfer.hpp"
#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

using namespace ambulate;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances and budgets ----------------------------------------

constexpr double kHarMinAcc = 0.86, kHarMinKappa = 0.80, kHarMaxSeconds = 1800.0;
constexpr double kWisdmAccLo = 0.55, kWisdmAccHi = 0.72;
constexpr double kStaticDynamicMinAcc = 0.97;
constexpr int kCohortSeeds = 5, kCohortMinWins = 4;
constexpr double kFixedMinKappa = 0.5;
constexpr int kGradTrials = 20;
constexpr double kGradMaxRelError = 1e-4;
constexpr int kLrpEpochs = 100;
constexpr double kLrpMaxDeviation = 1e-5;
constexpr double kBurstHalfWindowS = 0.2;
// required factor; the observed value is reported in the detail line
constexpr double kLocalizationFactor = 2.0;
constexpr int kDbaSets = 20;
constexpr double kInertiaSlack = 1e-9;
constexpr int kDtwPairs = 100, kDtwMaxLen = 12;
constexpr int kMetricVectors = 200;
constexpr double kRidgeMinFraction = 0.95;
constexpr double kFilter20Hz = 0.215, kFilter20HzTol = 0.02;

nn::TrainConfig har_training() {
  nn::TrainConfig t;
  t.epochs = 30;
  t.batch_size = 64;
  t.learning_rate = 1e-3;
  t.patience = 5;
  t.seed = 11;
  return t;
}

nn::TrainConfig cohort_training() {
  nn::TrainConfig t;
  t.epochs = 15;
  t.batch_size = 64;
  t.learning_rate = 1e-3;
  t.patience = 4;
  return t;
}

// ---- reporting ---------------------------------------------------------

enum class Status { pass, fail, skip };

struct Outcome {
  Status status = Status::skip;
  std::string detail;
};

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Status::pass : Status::fail, detail}; }

std::string fmt(double x, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << x;
  return os.str();
}

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

int argmax(const nn::Mat<float>& post, Eigen::Index row) {
  Eigen::Index a = 0;
  post.row(row).maxCoeff(&a);
  return static_cast<int>(a);
}

Epoch random_epoch(Rng& rng) {
  Epoch e;
  for (int c = 0; c < kEpochChannels; ++c)
    for (int i = 0; i < kEpochLength; ++i) e.data(c, i) = static_cast<float>(rng.normal());
  return e;
}

// ---- shared state ------------------------------------------------------

std::optional<fs::path> env_path(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return fs::path(v);
}

struct HarRun {
  Dataset data;
  ModelBundle model;
  Metrics test;
  double seconds = 0.0;
};

std::optional<HarRun> g_uci;
std::optional<EvalReport> g_wisdm;
std::optional<ModelBundle> g_source;
std::string g_source_name;

// Held-out epochs are the distributed test partition; 10% of the training
// subjects validate.
HarRun train_uci(const fs::path& dir) {
  const auto t0 = Clock::now();
  HarRun r;
  r.data = load_ucihar(dir);
  EpochList pool, test;
  for (const auto& e : r.data.epochs) (e.test_id.find("_test_") != std::string::npos ? test : pool).push_back(e);
  std::vector<std::string> subjects;
  for (const auto& e : pool)
    if (subjects.empty() || subjects.back() != e.subject_id) subjects.push_back(e.subject_id);
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  Rng rng(7);
  rng.shuffle(subjects);
  const std::set<std::string> val_ids(subjects.begin(),
                                      subjects.begin() + std::max<std::ptrdiff_t>(1, std::lround(0.1 * subjects.size())));
  EpochList train, val;
  for (const auto& e : pool) (val_ids.contains(e.subject_id) ? val : train).push_back(e);
  const int n = static_cast<int>(r.data.label_space.size());
  train = balance_classes(train, n, 5);
  auto b = build_default_dcnn(r.data.label_space, 3);
  b.provenance.source_dataset = r.data.name;
  r.model = fine_tune(b, train, val, har_training()).bundle;
  const auto post = nn::predict(r.model.spec, r.model.params, test);
  std::vector<int> yt, yp;
  for (std::size_t i = 0; i < test.size(); ++i) {
    yt.push_back(test[i].label);
    yp.push_back(argmax(post, static_cast<Eigen::Index>(i)));
  }
  r.test = compute_metrics(yt, yp, n);
  r.seconds = seconds_since(t0);
  return r;
}

// Synthetic stand-in for a HAR source: two gait-like activities and three
// near-static postures, one subject pool per activity.
Dataset har_proxy() {
  SynthCohortSpec s;
  s.tests_per_subject = 2;
  s.test_duration_s = 20.0;
  s.seed = 2024;
  auto cls = [](std::string name, std::array<double, 2> f, std::vector<double> h, double rate, double amp,
                double noise) {
    SynthClassSpec c;
    c.name = std::move(name);
    c.subjects = 20;
    c.step_frequency_hz = f;
    c.harmonic_amplitudes = std::move(h);
    c.perturbation_rate = rate;
    c.perturbation_band_hz = {4.0, 10.0};
    c.perturbation_amplitude = amp;
    c.noise_std = noise;
    return c;
  };
  s.classes = {cls("walking", {1.7, 2.1}, {0.35, 0.15, 0.06}, 0.0, 0.0, 0.05),
               cls("stairs", {1.3, 1.7}, {0.5, 0.3, 0.15}, 0.6, 0.5, 0.05),
               cls("sitting", {0.2, 0.3}, {0.01}, 0.0, 0.0, 0.01),
               cls("standing", {0.3, 0.5}, {0.03, 0.01}, 0.0, 0.0, 0.02),
               cls("laying", {0.1, 0.2}, {0.005}, 0.0, 0.0, 0.005)};
  Dataset d = generate_synthetic_cohort(s);
  d.name = "har_proxy";
  d.role = DatasetRole::source;
  return d;
}

const ModelBundle& source_model() {
  if (g_source) return *g_source;
  if (g_uci) {
    g_source = g_uci->model;
    g_source_name = "UCI HAR";
    return *g_source;
  }
  progress("training the source model on the synthetic activity proxy");
  const Dataset d = har_proxy();
  const auto plan = make_folds(d, 10, 1);
  EpochList train, val;
  const std::set<std::string> val_ids(plan.folds[0].test.begin(), plan.folds[0].test.end());
  for (const auto& e : d.epochs) (val_ids.contains(e.subject_id) ? val : train).push_back(e);
  auto b = build_default_dcnn(d.label_space, 3);
  b.provenance.source_dataset = d.name;
  const auto r = fine_tune(b, train, val, har_training());
  g_source = r.bundle;
  const auto& best = r.history[static_cast<std::size_t>(std::max(r.best_pass - 1, 0))];
  g_source_name = "activity proxy (val acc " + fmt(best.val_acc, 3) + ")";
  return *g_source;
}

// ---- criteria ----------------------------------------------------------

Outcome criterion_1() {
  const auto dir = env_path("AMBULATE_UCIHAR_DIR");
  if (!dir) return {Status::skip, "UCI HAR not available (set AMBULATE_UCIHAR_DIR)"};
  progress("training on UCI HAR");
  g_uci = train_uci(*dir);
  const auto& m = g_uci->test;
  return verdict(m.acc >= kHarMinAcc && m.kappa >= kHarMinKappa && g_uci->seconds <= kHarMaxSeconds,
                 "epoch acc " + fmt(m.acc) + " (>= " + fmt(kHarMinAcc) + "), kappa " + fmt(m.kappa) + " (>= " +
                     fmt(kHarMinKappa) + "), " + fmt(g_uci->seconds, 5) + " s (<= " + fmt(kHarMaxSeconds) + ")");
}

Outcome criterion_2() {
  const auto file = env_path("AMBULATE_WISDM_FILE");
  if (!file) return {Status::skip, "WISDM not available (set AMBULATE_WISDM_FILE)"};
  progress("5-fold CV on WISDM");
  const Dataset d = load_wisdm(*file);
  EvalConfig cfg;
  cfg.folds = 5;
  cfg.seed = 1;
  cfg.tests_per_subject = 0;
  cfg.train = har_training();
  g_wisdm = run_cv(d, d.label_space, Recipe::end_to_end, cfg);
  double acc = 0.0;
  for (const auto& f : g_wisdm->folds) acc += f.metrics.epoch.acc;
  acc /= static_cast<double>(g_wisdm->folds.size());
  const auto& c = g_wisdm->pooled.epoch.confusion;
  const auto idx = [&](const char* name) { return d.label_index(name); };
  const int walk = idx("walking"), jog = idx("jogging"), stairs = idx("stairs"), sit = idx("sitting");
  const int dynamic_mass = c(jog, walk) + c(walk, jog);
  const int mixed_mass = c(stairs, sit) + c(sit, stairs);
  return verdict(acc >= kWisdmAccLo && acc <= kWisdmAccHi && dynamic_mass > mixed_mass,
                 "mean epoch acc " + fmt(acc) + " (in [" + fmt(kWisdmAccLo) + ", " + fmt(kWisdmAccHi) +
                     "]), jogging<->walking errors " + std::to_string(dynamic_mass) + " vs stairs<->sitting " +
                     std::to_string(mixed_mass));
}

// Collapses a multi-class confusion onto static (0) vs dynamic (1).
double static_dynamic_acc(const Eigen::MatrixXi& c, const std::vector<std::string>& labels) {
  const std::set<std::string> dynamic = {"walking", "stairs", "jogging"};
  Eigen::MatrixXi b = Eigen::MatrixXi::Zero(2, 2);
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      b(dynamic.contains(labels[static_cast<std::size_t>(i)]), dynamic.contains(labels[static_cast<std::size_t>(j)])) +=
          c(i, j);
  return metrics_from_confusion(b).acc;
}

Outcome criterion_3() {
  if (!g_uci || !g_wisdm) return {Status::skip, "needs both UCI HAR and WISDM runs (criteria 1 and 2)"};
  const double uci = static_dynamic_acc(g_uci->test.confusion, g_uci->data.label_space);
  const double wisdm = static_dynamic_acc(g_wisdm->pooled.epoch.confusion, g_wisdm->task_labels);
  return verdict(uci >= kStaticDynamicMinAcc && wisdm >= kStaticDynamicMinAcc,
                 "static/dynamic acc UCI HAR " + fmt(uci) + ", WISDM " + fmt(wisdm) + " (>= " +
                     fmt(kStaticDynamicMinAcc) + ")");
}

Outcome criterion_4() {
  const auto& source = source_model();
  const Dataset cohort = generate_synthetic_cohort(default_synth_spec());
  int wins = 0;
  std::vector<double> kappas;
  std::ostringstream per_seed;
  for (int s = 1; s <= kCohortSeeds; ++s) {
    EvalConfig cfg;
    cfg.folds = 5;
    cfg.seed = static_cast<std::uint64_t>(s);
    cfg.tests_per_subject = 10;
    cfg.train = cohort_training();
    progress("cohort seed " + std::to_string(s) + ": fixed transfer");
    const auto fixed = run_cv(cohort, cohort.label_space, Recipe::fixed, cfg, &source);
    progress("cohort seed " + std::to_string(s) + ": end-to-end");
    const auto e2e = run_cv(cohort, cohort.label_space, Recipe::end_to_end, cfg);
    const double a_fixed = fixed.pooled.subject.acc, a_e2e = e2e.pooled.subject.acc;
    wins += a_fixed >= a_e2e;
    kappas.push_back(fixed.pooled.subject.kappa);
    per_seed << (s > 1 ? "; " : "") << fmt(a_fixed, 3) << " vs " << fmt(a_e2e, 3);
  }
  std::vector<double> sorted = kappas;
  std::sort(sorted.begin(), sorted.end());
  const double median_kappa = sorted[sorted.size() / 2];
  return verdict(wins >= kCohortMinWins && median_kappa > kFixedMinKappa,
                 "(a) fixed >= end-to-end subject acc in " + std::to_string(wins) + "/" +
                     std::to_string(kCohortSeeds) + " seeds (need " + std::to_string(kCohortMinWins) + ") [" +
                     per_seed.str() + "]; (b) fixed subject kappa median " + fmt(median_kappa) + " (> " +
                     fmt(kFixedMinKappa) + "); source: " + g_source_name);
}

Outcome criterion_5() {
  using nn::LayerSpec;
  Rng rng(2025);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int trial = 0; trial < kGradTrials; ++trial) {
    const int c1 = 2 + static_cast<int>(rng.index(6));
    const int k1 = 3 + 2 * static_cast<int>(rng.index(3));
    const int c2 = 2 + static_cast<int>(rng.index(6));
    const int k2 = 3 + 2 * static_cast<int>(rng.index(2));
    const int hidden = 4 + static_cast<int>(rng.index(12));
    const int classes = 2 + static_cast<int>(rng.index(4));
    const int len = ((kEpochLength - k1 + 1) / 2 - k2 + 1) / 2;
    const nn::ModelSpec spec = {LayerSpec::conv1d(4, c1, k1), LayerSpec::relu(), LayerSpec::maxpool1d(),
                                LayerSpec::conv1d(c1, c2, k2), LayerSpec::relu(), LayerSpec::maxpool1d(),
                                LayerSpec::flatten(), LayerSpec::dense(c2 * len, hidden), LayerSpec::relu(),
                                LayerSpec::dropout(0.5), LayerSpec::dense(hidden, classes), LayerSpec::softmax()};
    auto p = nn::he_uniform_parameters<double>(spec, rng.next());
    for (auto& l : p)
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = 0.05 * rng.normal();
    const auto r = nn::check_gradients(spec, p, random_epoch(rng), static_cast<int>(rng.index(classes)), rng.next());
    worst = std::max(worst, r.max_relative_error);
    checked += r.checked;
  }
  return verdict(worst < kGradMaxRelError, "worst relative error " + fmt(worst, 3) + " over " +
                                               std::to_string(checked) + " coordinates (< " + fmt(kGradMaxRelError) + ")");
}

Outcome criterion_6() {
  const auto b = build_default_dcnn({"a", "b", "c", "d", "e"}, 17);
  const LrpRuleConfig exact{1.0, 0.0, 0.0};
  Rng rng(606);
  double worst_layer = 0.0, worst_input = 0.0;
  for (int k = 0; k < kLrpEpochs; ++k) {
    const auto m = lrp_explain(b, random_epoch(rng), -1, exact);
    for (double d : conservation_report(m)) worst_layer = std::max(worst_layer, d);
    worst_input = std::max(worst_input, std::abs(m.relevance.sum() - m.explained_logit) /
                                            std::max(std::abs(m.explained_logit), 1e-12));
  }
  return verdict(worst_layer < kLrpMaxDeviation && worst_input < kLrpMaxDeviation,
                 "worst per-layer deviation " + fmt(worst_layer, 3) + ", input sum vs logit " + fmt(worst_input, 3) +
                     " (< " + fmt(kLrpMaxDeviation) + ", " + std::to_string(kLrpEpochs) + " epochs)");
}

Outcome criterion_7() {
  const auto& source = source_model();
  const Dataset cohort = generate_synthetic_cohort(default_synth_spec());
  const int mod = cohort.label_index("PwMSmod");
  const auto plan = make_folds(cohort, 5, 1);
  const auto& fold = plan.folds[0];
  auto part = [&](const std::vector<std::string>& ids, std::uint64_t seed) {
    const std::set<std::string> keep(ids.begin(), ids.end());
    Dataset p = cohort;
    p.epochs.clear();
    p.subjects = keep;
    for (const auto& e : cohort.epochs)
      if (keep.contains(e.subject_id)) p.epochs.push_back(e);
    return sample_tests_per_subject(p, 10, seed);
  };
  const int n = static_cast<int>(cohort.label_space.size());
  const auto train = balance_classes(part(fold.train, 1).epochs, n, 2);
  const auto val = part(fold.val, 3).epochs;
  progress("training the explained model (fixed transfer, fold 0)");
  const auto t = apply_transfer(source, {TransferMode::fixed, source.label_space, cohort.label_space, cohort.name}, 4);
  auto tc = cohort_training();
  tc.seed = 5;
  const auto model = fine_tune(t, train, val, tc).bundle;

  const std::set<std::string> test_ids(fold.test.begin(), fold.test.end());
  EpochList candidates;
  for (const auto& e : cohort.epochs)
    if (test_ids.contains(e.subject_id) && e.label == mod) candidates.push_back(e);
  const auto post = nn::predict(model.spec, model.params, candidates);
  const auto params = nn::cast_params<double>(model.params);

  constexpr double dt = 1.0 / kTargetRateHz;
  double in_mass = 0.0, all_mass = 0.0;
  Eigen::Vector4d ch_in = Eigen::Vector4d::Zero(), ch_all = Eigen::Vector4d::Zero();
  std::size_t in_samples = 0, all_samples = 0, used = 0, correct = 0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto& e = candidates[k];
    if (argmax(post, static_cast<Eigen::Index>(k)) != mod) continue;
    ++correct;
    const double t0 = e.epoch_index * kEpochHop * dt;
    const double t1 = t0 + kEpochLength * dt;
    const auto& centers = cohort.burst_centers_s.at(e.test_id);
    if (std::none_of(centers.begin(), centers.end(), [&](double c) { return c >= t0 && c < t1; })) continue;
    ++used;
    const auto m = lrp_explain(model.spec, params, e, mod, LrpRuleConfig{});
    for (int i = 0; i < kEpochLength; ++i) {
      const double t = t0 + i * dt;
      const bool near = std::any_of(centers.begin(), centers.end(),
                                    [&](double c) { return std::abs(t - c) <= kBurstHalfWindowS + 1e-9; });
      const Eigen::Vector4d col = m.relevance.col(i).cwiseMax(0.0);
      const double pos = col.sum();
      all_mass += pos;
      ch_all += col;
      if (near) ch_in += col;
      ++all_samples;
      if (near) {
        in_mass += pos;
        ++in_samples;
      }
    }
  }
  if (used == 0) return {Status::fail, "no correctly classified moderate epoch with a burst (" +
                                           std::to_string(correct) + "/" + std::to_string(candidates.size()) +
                                           " correct)"};
  const double mass_fraction = in_mass / all_mass;
  const double time_fraction = static_cast<double>(in_samples) / static_cast<double>(all_samples);
  const double factor = mass_fraction / time_fraction;
  std::ostringstream per_channel;
  const char* names[] = {"x", "y", "z", "mag"};
  for (int c = 0; c < 4; ++c)
    per_channel << (c ? ", " : "") << names[c] << " " << fmt(ch_in[c] / ch_all[c] / time_fraction, 3) << " ("
                << fmt(ch_all[c] / all_mass, 2) << " of mass)";
  return verdict(factor >= kLocalizationFactor,
                 "positive relevance near bursts " + fmt(mass_fraction) + " vs time fraction " + fmt(time_fraction) +
                     " -> factor " + fmt(factor) + " (>= " + fmt(kLocalizationFactor) + "; " + std::to_string(used) +
                     " epochs, " + std::to_string(correct) + "/" + std::to_string(candidates.size()) +
                     " moderate epochs correct; per channel " + per_channel.str() + ")");
}

// Every monotone path enumerated; sums accumulate from the start so the
// floating-point order matches a forward recursion.
double exhaustive_dtw(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index n = a.cols(), m = b.cols();
  Eigen::MatrixXd local(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) local(i, j) = (a.col(i) - b.col(j)).squaredNorm();
  double best = std::numeric_limits<double>::infinity();
  std::function<void(Eigen::Index, Eigen::Index, double)> walk = [&](Eigen::Index i, Eigen::Index j, double acc) {
    acc += local(i, j);
    if (i == n - 1 && j == m - 1) {
      best = std::min(best, acc);
      return;
    }
    if (i + 1 < n && j + 1 < m) walk(i + 1, j + 1, acc);
    if (i + 1 < n) walk(i + 1, j, acc);
    if (j + 1 < m) walk(i, j + 1, acc);
  };
  walk(0, 0, 0.0);
  return best;
}

Outcome criterion_8() {
  Rng rng(808);
  // fixed point
  Eigen::MatrixXd x(4, 128);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.normal();
  const auto fp = dba_average(std::vector<Eigen::MatrixXd>(5, x), 10);
  const bool fixed_point = fp.average == x && fp.inertia.back() == 0.0;

  // monotone inertia on random epoch sets
  bool monotone = true;
  double worst_rise = 0.0;
  for (int s = 0; s < kDbaSets; ++s) {
    std::vector<Eigen::MatrixXd> seqs;
    const double f = rng.uniform(1.0, 2.5);
    const auto count = 3 + rng.index(8);
    for (std::size_t k = 0; k < count; ++k) {
      Eigen::MatrixXd e(4, 128);
      const double ph = rng.uniform(0.0, 6.28), g = f * rng.uniform(0.85, 1.15);
      for (Eigen::Index c = 0; c < 4; ++c)
        for (Eigen::Index i = 0; i < 128; ++i)
          e(c, i) = std::sin(2 * 3.141592653589793 * g * i / 50.0 + ph + c) + 0.3 * rng.normal();
      seqs.push_back(e);
    }
    const auto r = dba_average(seqs, 10);
    for (std::size_t i = 1; i < r.inertia.size(); ++i) {
      const double rise = r.inertia[i] - r.inertia[i - 1];
      worst_rise = std::max(worst_rise, rise);
      if (rise > kInertiaSlack) monotone = false;
    }
  }

  // DTW against exhaustive enumeration
  int exact = 0;
  for (int p = 0; p < kDtwPairs; ++p) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.index(kDtwMaxLen));
    const auto m = 1 + static_cast<Eigen::Index>(rng.index(kDtwMaxLen));
    Eigen::MatrixXd a(4, n), b(4, m);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.normal();
    exact += dtw(a, b).cost == exhaustive_dtw(a, b);
  }
  return verdict(fixed_point && monotone && exact == kDtwPairs,
                 std::string("fixed point ") + (fixed_point ? "exact" : "NOT exact") + "; inertia max rise " +
                     fmt(worst_rise, 3) + " over " + std::to_string(kDbaSets) + " sets (<= " + fmt(kInertiaSlack) +
                     "); dtw == exhaustive on " + std::to_string(exact) + "/" + std::to_string(kDtwPairs) + " pairs");
}

// Exact fractions for the metric oracles.
struct Q {
  std::int64_t n = 0, d = 1;
  Q(std::int64_t num = 0, std::int64_t den = 1) : n(num), d(den) {
    if (d < 0) n = -n, d = -d;
    const auto g = std::gcd(n, d);
    if (g > 1) n /= g, d /= g;
  }
  Q operator+(Q o) const { return {n * o.d + o.n * d, d * o.d}; }
  Q operator-(Q o) const { return {n * o.d - o.n * d, d * o.d}; }
  Q operator*(Q o) const { return {n * o.n, d * o.d}; }
  Q operator/(Q o) const { return {n * o.d, d * o.n}; }
  double value() const { return static_cast<double>(n) / static_cast<double>(d); }
};

Outcome criterion_9() {
  Rng rng(909);
  int kappa_exact = 0, mf1_exact = 0;
  for (int v = 0; v < kMetricVectors; ++v) {
    const int k = 2 + static_cast<int>(rng.index(4));
    const auto len = 1 + rng.index(80);
    std::vector<int> t(len), p(len);
    for (std::size_t i = 0; i < len; ++i) {
      t[i] = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
      p[i] = rng.bernoulli(0.6) ? t[i] : static_cast<int>(rng.index(static_cast<std::size_t>(k)));
    }
    const auto m = compute_metrics(t, p, k);
    const auto N = static_cast<std::int64_t>(len);
    Q po, pe;
    for (std::size_t i = 0; i < len; ++i) po = po + Q(t[i] == p[i], N);
    for (int c = 0; c < k; ++c)
      pe = pe + Q(std::count(t.begin(), t.end(), c), N) * Q(std::count(p.begin(), p.end(), c), N);
    const double kappa = pe.n == pe.d ? 1.0 : ((po - pe) / (Q(1) - pe)).value();
    Q f1sum;
    int classes = 0;
    for (int c = 0; c < k; ++c) {
      std::int64_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < len; ++i) {
        tp += t[i] == c && p[i] == c;
        fp += t[i] != c && p[i] == c;
        fn += t[i] == c && p[i] != c;
      }
      if (tp + fp + fn == 0) continue;
      ++classes;
      if (tp > 0) {
        const Q prec(tp, tp + fp), rec(tp, tp + fn);
        f1sum = f1sum + Q(2) * prec * rec / (prec + rec);
      }
    }
    kappa_exact += m.kappa == kappa;
    mf1_exact += m.mf1 == (f1sum / Q(classes)).value();
  }
  Eigen::MatrixXi c(2, 2);
  c << 40, 10, 20, 30;
  const double k04 = metrics_from_confusion(c).kappa;
  return verdict(kappa_exact == kMetricVectors && mf1_exact == kMetricVectors && k04 == 0.4,
                 "kappa exact " + std::to_string(kappa_exact) + "/" + std::to_string(kMetricVectors) + ", MF1 exact " +
                     std::to_string(mf1_exact) + "/" + std::to_string(kMetricVectors) +
                     ", kappa([[40,10],[20,30]]) = " + fmt(k04, 17));
}

Outcome criterion_10() {
  // ridge of a 2 Hz tone
  const double fs = 50.0;
  Eigen::VectorXd x(1500);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = std::sin(2 * 3.141592653589793 * 2.0 * i / fs);
  const auto s = cwt_morlet(x, fs, default_cwt_freqs());
  std::size_t row2 = 0;
  for (std::size_t r = 0; r < s.freqs_hz.size(); ++r)
    if (std::abs(std::log(s.freqs_hz[r] / 2.0)) < std::abs(std::log(s.freqs_hz[row2] / 2.0))) row2 = r;
  int interior = 0, on_ridge = 0;
  const double voice = std::pow(2.0, 1.0 / 12.0);
  for (Eigen::Index t = s.coi_samples[row2]; t < x.size() - s.coi_samples[row2]; ++t) {
    Eigen::Index best = 0;
    s.magnitudes.col(t).maxCoeff(&best);
    const double ratio = s.freqs_hz[static_cast<std::size_t>(best)] / 2.0;
    ++interior;
    on_ridge += ratio <= voice * (1 + 1e-12) && ratio >= 1 / voice * (1 - 1e-12);
  }
  const double ridge_fraction = static_cast<double>(on_ridge) / interior;

  // zero-phase low-pass applied to a 20 Hz tone
  const auto sections = signal_prep::butterworth_lowpass(signal_prep::kFilterOrder, signal_prep::kCutoffHz, fs);
  Eigen::VectorXd tone(2000);
  for (Eigen::Index i = 0; i < tone.size(); ++i) tone(i) = std::sin(2 * 3.141592653589793 * 20.0 * i / fs + 0.3);
  const auto y = signal_prep::filtfilt(sections, tone, signal_prep::kPadSamples);
  const double amp = y.segment(500, 1000).cwiseAbs().maxCoeff() / tone.segment(500, 1000).cwiseAbs().maxCoeff();
  const double single = signal_prep::magnitude_response(sections, 20.0, fs);

  const bool ridge_ok = ridge_fraction >= kRidgeMinFraction;
  const bool filter_ok = std::abs(amp - kFilter20Hz) <= kFilter20HzTol;
  return verdict(ridge_ok && filter_ok,
                 "(a) ridge within one voice of 2 Hz in " + std::to_string(on_ridge) + "/" + std::to_string(interior) +
                     " interior columns, fraction " + fmt(ridge_fraction) + " (>= " + fmt(kRidgeMinFraction) + ") " + (ridge_ok ? "ok" : "FAIL") +
                     "; (b) zero-phase amplitude at 20 Hz " + fmt(amp) + " (single pass " + fmt(single) +
                     "), expected " + fmt(kFilter20Hz) + " +/- " + fmt(kFilter20HzTol) + " " +
                     (filter_ok ? "ok" : "FAIL"));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

Outcome criterion_11() {
  const auto dir = fs::temp_directory_path() / "ambulate_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "config.json");
    f << R"({"epochs": 2, "folds": 5, "tests_per_subject": 10})";
  }
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "ambulate");
    const int code = cli::run(args, sink, sink);
    if (code != 0) throw std::runtime_error("ambulate " + args[1] + " exited " + std::to_string(code) + ": " + sink.str());
  };
  progress("two identically seeded evaluate runs");
  run({"synth", "--out", (dir / "cohort").string()});
  for (const char* out : {"a", "b"}) {
    run({"evaluate", "--data", (dir / "cohort").string(), "--task", "all", "--recipe", "end2end", "--config",
         (dir / "config.json").string(), "--seed", "3", "--out", (dir / out).string()});
  }
  int same = 0, total = 0;
  std::size_t bytes = 0;
  for (const char* f : {"epoch_preds.csv", "test_preds.csv", "subject_preds.csv", "metrics.csv", "report.json"}) {
    const auto a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    ++total;
    same += !a.empty() && a == b;
    bytes += a.size();
  }
  fs::remove_all(dir);
  return verdict(same == total, std::to_string(same) + "/" + std::to_string(total) + " output files bitwise identical (" +
                                    std::to_string(bytes) + " bytes)");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4},   {5, criterion_5},  {6, criterion_6},
      {7, criterion_7}, {8, criterion_8}, {9, criterion_9}, {10, criterion_10}, {11, criterion_11}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  bool failed = false;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.contains(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {Status::fail, std::string("error: ") + e.what()};
    }
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    std::cout << "[" << tag << "] criterion " << id << ": " << o.detail << "  (" << fmt(seconds_since(t0), 3) << " s)"
              << std::endl;
    failed |= o.status == Status::fail;
  }
  return failed ? 1 : 0;
}
