#include "ambulate/eval.hpp"

#include "ambulate/error.hpp"
#include "ambulate/random.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <utility>

namespace ambulate {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- folds --------------------------------------------------------------

FoldPlan make_folds(const Dataset& d, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::SpecError, "need at least 2 folds");
  std::map<std::string, std::set<int>> labels_of;
  for (const auto& e : d.epochs) labels_of[e.subject_id].insert(e.label);
  if (labels_of.size() < static_cast<std::size_t>(k)) {
    throw Error(ErrorKind::SpecError, "only " + std::to_string(labels_of.size()) +
                                          " subjects with data for " + std::to_string(k) + " folds");
  }
  const bool subject_level = std::all_of(labels_of.begin(), labels_of.end(),
                                         [](const auto& kv) { return kv.second.size() == 1; });

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.folds.resize(static_cast<std::size_t>(k));
  std::map<int, std::vector<std::string>> strata;
  for (const auto& [s, labels] : labels_of) {
    const int stratum = subject_level ? *labels.begin() : 0;
    plan.strata[s] = stratum;
    strata[stratum].push_back(s);
  }

  Rng rng(seed);
  std::size_t offset = 0;
  for (auto& [stratum, subjects] : strata) {
    if (subjects.size() < static_cast<std::size_t>(k)) {
      plan.warnings.push_back("stratum " + std::to_string(stratum) + " has only " +
                              std::to_string(subjects.size()) + " subjects for " +
                              std::to_string(k) + " folds");
    }
    rng.shuffle(subjects);
    for (const auto& s : subjects) {
      plan.folds[offset % static_cast<std::size_t>(k)].test.push_back(s);
      ++offset;
    }
  }

  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    auto& fold = plan.folds[f];
    const std::set<std::string> test(fold.test.begin(), fold.test.end());
    Rng vrng(mix_seed(seed, 1000 + f));
    for (auto& [stratum, subjects] : strata) {
      std::vector<std::string> rest;
      for (const auto& s : subjects)
        if (!test.contains(s)) rest.push_back(s);
      std::sort(rest.begin(), rest.end());
      vrng.shuffle(rest);
      const std::size_t n_val =
          rest.size() < 2 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(rest.size()))));
      fold.val.insert(fold.val.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
      fold.train.insert(fold.train.end(), rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    }
    std::sort(fold.train.begin(), fold.train.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.test.begin(), fold.test.end());
  }
  return plan;
}

// ---- votes --------------------------------------------------------------

int majority_vote(const std::vector<int>& labels, const std::vector<std::vector<double>>& posteriors) {
  if (labels.empty()) throw Error(ErrorKind::SpecError, "vote over an empty group");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  std::size_t top = 0;
  for (const auto& [l, c] : counts) top = std::max(top, c);
  int best = -1;
  double best_mean = -1.0;
  for (const auto& [l, c] : counts) {
    if (c != top) continue;
    double mean = 0.0;
    for (const auto& p : posteriors) mean += static_cast<std::size_t>(l) < p.size() ? p[static_cast<std::size_t>(l)] : 0.0;
    mean /= static_cast<double>(std::max<std::size_t>(posteriors.size(), 1));
    // ascending label order: strict > keeps the lower label on equal means
    if (mean > best_mean) {
      best_mean = mean;
      best = l;
    }
  }
  return best;
}

namespace {

VotePrediction vote_group(const std::string& id, const std::vector<const VotePrediction*>& members) {
  std::vector<int> labels;
  std::vector<std::vector<double>> post;
  for (const auto* m : members) {
    labels.push_back(m->predicted);
    post.push_back(m->mean_posterior);
  }
  VotePrediction v;
  v.fold = members.front()->fold;
  v.id = id;
  v.subject_id = members.front()->subject_id;
  v.members = members.size();
  v.predicted = majority_vote(labels, post);
  std::map<int, std::size_t> truth;
  for (const auto* m : members) ++truth[m->true_label];
  v.true_label = std::max_element(truth.begin(), truth.end(), [](const auto& a, const auto& b) {
                   return a.second < b.second;
                 })->first;
  v.mean_posterior.assign(members.front()->mean_posterior.size(), 0.0);
  for (const auto& p : post)
    for (std::size_t c = 0; c < p.size() && c < v.mean_posterior.size(); ++c) v.mean_posterior[c] += p[c];
  for (auto& x : v.mean_posterior) x /= static_cast<double>(members.size());
  return v;
}

}  // namespace

std::pair<std::vector<VotePrediction>, std::vector<VotePrediction>> aggregate_votes(
    const std::vector<EpochPrediction>& epochs) {
  // epochs seen as one-member groups so both levels share the vote code
  std::vector<VotePrediction> unit(epochs.size());
  std::map<std::string, std::vector<const VotePrediction*>> by_test;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& e = epochs[i];
    unit[i] = {e.fold, e.test_id, e.subject_id, e.true_label, e.predicted, 1, e.posterior};
    by_test[e.test_id].push_back(&unit[i]);
  }
  std::vector<VotePrediction> tests;
  for (const auto& [id, members] : by_test) tests.push_back(vote_group(id, members));

  std::map<std::string, std::vector<const VotePrediction*>> by_subject;
  for (const auto& t : tests) by_subject[t.subject_id].push_back(&t);
  std::vector<VotePrediction> subjects;
  for (const auto& [id, members] : by_subject) subjects.push_back(vote_group(id, members));
  return {std::move(tests), std::move(subjects)};
}

// ---- metrics ------------------------------------------------------------

namespace {

struct Fraction {
  __int128 num = 0, den = 1;
  Fraction() = default;
  Fraction(__int128 n, __int128 d) : num(n), den(d) { reduce(); }
  static __int128 gcd(__int128 a, __int128 b) {
    if (a < 0) a = -a;
    while (b != 0) a = std::exchange(b, a % b);
    return a;
  }
  void reduce() {
    const auto g = gcd(num, den);
    if (g > 1) num /= g, den /= g;
  }
  Fraction& operator+=(const Fraction& o) {
    const auto g = gcd(den, o.den);
    num = num * (o.den / g) + o.num * (den / g);
    den = den / g * o.den;
    reduce();
    return *this;
  }
  Fraction operator/(int k) const { return {num, den * k}; }
  // IEEE division of exactly representable operands is correctly rounded
  double to_double() const {
    constexpr __int128 exact = __int128(1) << 53;
    if (num < exact && -num < exact && den < exact) return static_cast<double>(num) / static_cast<double>(den);
    return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
  }
};

}  // namespace

Metrics metrics_from_confusion(const Eigen::MatrixXi& confusion) {
  const Eigen::Index n = confusion.rows();
  Metrics m;
  m.confusion = confusion;
  std::int64_t total = 0, agree = 0, chance = 0;
  std::vector<std::int64_t> row(static_cast<std::size_t>(n), 0), col(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      row[static_cast<std::size_t>(i)] += confusion(i, j);
      col[static_cast<std::size_t>(j)] += confusion(i, j);
      total += confusion(i, j);
    }
    agree += confusion(i, i);
  }
  if (total == 0) throw Error(ErrorKind::SpecError, "metrics of an empty prediction set");
  for (Eigen::Index i = 0; i < n; ++i) chance += row[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(i)];

  // kappa = (p_o - p_e) / (1 - p_e) = (N*agree - chance) / (N^2 - chance)
  const std::int64_t num = total * agree - chance;
  const std::int64_t den = total * total - chance;
  m.kappa = den == 0 ? (num == 0 ? 1.0 : 0.0) : static_cast<double>(num) / static_cast<double>(den);
  m.plain_acc = static_cast<double>(agree) / static_cast<double>(total);

  // macro means summed as exact fractions so the result is correctly rounded
  Fraction recall_sum, f1_sum;
  int recall_n = 0, f1_n = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = row[static_cast<std::size_t>(i)], c = col[static_cast<std::size_t>(i)];
    const std::int64_t tp = confusion(i, i);
    if (r > 0) {
      recall_sum += Fraction(tp, r);
      ++recall_n;
    }
    if (r > 0 || c > 0) {
      // 2TP / (2TP + FP + FN) with FP + FN = r + c - 2TP
      f1_sum += Fraction(2 * tp, r + c);
      ++f1_n;
    }
  }
  m.acc = (recall_sum / recall_n).to_double();
  m.mf1 = (f1_sum / f1_n).to_double();
  return m;
}

Metrics compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred, int n_classes) {
  if (y_true.empty() || y_true.size() != y_pred.size()) {
    throw Error(ErrorKind::SpecError, "metrics need equal-length, non-empty label vectors");
  }
  Eigen::MatrixXi conf = Eigen::MatrixXi::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= n_classes || y_pred[i] < 0 || y_pred[i] >= n_classes) {
      throw Error(ErrorKind::SpecError, "label outside [0, n_classes)");
    }
    ++conf(y_true[i], y_pred[i]);
  }
  return metrics_from_confusion(conf);
}

// ---- cross-validation ---------------------------------------------------

std::string_view to_string(Recipe r) {
  switch (r) {
    case Recipe::end_to_end: return "end2end";
    case Recipe::direct: return "direct";
    case Recipe::fixed: return "fixed";
    case Recipe::full: return "full";
  }
  return "unknown";
}

Recipe recipe_from_string(std::string_view name, bool allow_full) {
  if (name == "end2end" || name == "end_to_end") return Recipe::end_to_end;
  if (name == "direct") return Recipe::direct;
  if (name == "fixed") return Recipe::fixed;
  if (name == "full") {
    if (!allow_full) throw Error(ErrorKind::SpecError, "recipe 'full' needs the extra-modes flag");
    return Recipe::full;
  }
  throw Error(ErrorKind::SpecError, "unknown recipe '" + std::string(name) + "'");
}

Dataset select_task(const Dataset& d, const std::vector<std::string>& task_labels) {
  if (task_labels.size() < 2) throw Error(ErrorKind::SpecError, "a task needs at least 2 classes");
  std::vector<int> remap(d.label_space.size(), -1);
  for (std::size_t t = 0; t < task_labels.size(); ++t) {
    const int i = d.label_index(task_labels[t]);
    if (i < 0) throw Error(ErrorKind::SpecError, "task label '" + task_labels[t] + "' is not in the dataset");
    remap[static_cast<std::size_t>(i)] = static_cast<int>(t);
  }
  Dataset out = d;
  out.label_space = task_labels;
  out.epochs.clear();
  out.subjects.clear();
  for (const auto& e : d.epochs) {
    const int l = remap[static_cast<std::size_t>(e.label)];
    if (l < 0) continue;
    Epoch c = e;
    c.label = l;
    out.subjects.insert(c.subject_id);
    out.epochs.push_back(std::move(c));
  }
  std::set<int> present;
  for (const auto& e : out.epochs) present.insert(e.label);
  if (present.size() != task_labels.size()) {
    throw Error(ErrorKind::SpecError, "some task labels have no epochs in the dataset");
  }
  return out;
}

namespace {

Dataset subset(const Dataset& d, const std::vector<std::string>& subjects) {
  const std::set<std::string> keep(subjects.begin(), subjects.end());
  Dataset out = d;
  out.epochs.clear();
  out.subjects = keep;
  for (const auto& e : d.epochs)
    if (keep.contains(e.subject_id)) out.epochs.push_back(e);
  return out;
}

Spread spread(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  if (v.empty()) return {};
  return {q(0.5), q(0.25), q(0.75)};
}

template <typename Rows>
Metrics level_metrics(const Rows& rows, int n) {
  std::vector<int> t, p;
  for (const auto& r : rows) {
    t.push_back(r.true_label);
    p.push_back(r.predicted);
  }
  return compute_metrics(t, p, n);
}

TransferMode mode_of(Recipe r) {
  switch (r) {
    case Recipe::direct: return TransferMode::direct;
    case Recipe::fixed: return TransferMode::fixed;
    case Recipe::full: return TransferMode::full;
    case Recipe::end_to_end: break;
  }
  return TransferMode::end_to_end;
}

}  // namespace

EvalReport run_cv(const Dataset& d, const std::vector<std::string>& task_labels, Recipe recipe,
                  const EvalConfig& config, const ModelBundle* source, const FoldPlan* plan) {
  if (recipe != Recipe::end_to_end && source == nullptr) {
    throw Error(ErrorKind::SpecError, "recipe '" + std::string(to_string(recipe)) + "' needs a source model");
  }
  if (config.tests_per_subject < 0) throw Error(ErrorKind::SpecError, "tests_per_subject must be >= 0");
  const Dataset task = select_task(d, task_labels);
  const int n = static_cast<int>(task_labels.size());
  const FoldPlan folds = plan != nullptr ? *plan : make_folds(task, config.folds, config.seed);

  std::map<std::tuple<std::string, std::string, int>, std::size_t> record_of;
  for (std::size_t i = 0; i < d.epochs.size(); ++i) {
    const auto& e = d.epochs[i];
    record_of.emplace(std::tuple{e.subject_id, base_test_id(e.test_id), e.epoch_index}, i);
  }

  EvalReport report;
  report.dataset = d.name;
  report.task_labels = task_labels;
  report.recipe = recipe;
  report.config = config;
  report.warnings = folds.warnings;

  for (std::size_t f = 0; f < folds.folds.size(); ++f) {
    const auto& fold = folds.folds[f];
    try {
      std::set<std::string> seen(fold.train.begin(), fold.train.end());
      seen.insert(fold.val.begin(), fold.val.end());
      for (const auto& s : fold.test) {
        if (seen.contains(s)) throw Error(ErrorKind::SpecError, "subject " + s + " is in both training and test data");
      }
      const std::uint64_t fseed = mix_seed(config.seed, f);
      auto role = [&](const std::vector<std::string>& subjects, std::uint64_t tag) {
        Dataset part = subset(task, subjects);
        if (config.tests_per_subject > 0 && !part.epochs.empty()) {
          part = sample_tests_per_subject(part, config.tests_per_subject, mix_seed(fseed, tag));
        }
        return part;
      };
      const Dataset train = role(fold.train, 1);
      const Dataset val = role(fold.val, 2);
      const Dataset test = role(fold.test, 3);
      if (train.epochs.empty() || test.epochs.empty()) {
        throw Error(ErrorKind::SpecError, "empty training or test split");
      }

      EpochList train_epochs = config.balance ? balance_classes(train.epochs, n, mix_seed(fseed, 4)) : train.epochs;
      EpochList val_epochs = val.epochs;
      if (config.balance && !val_epochs.empty()) {
        std::set<int> present;
        for (const auto& e : val_epochs) present.insert(e.label);
        if (present.size() == static_cast<std::size_t>(n)) {
          val_epochs = balance_classes(val_epochs, n, mix_seed(fseed, 5));
        } else {
          report.warnings.push_back("fold " + std::to_string(f) + ": validation split lacks a class; left unbalanced");
        }
      }

      ModelBundle model;
      if (recipe == Recipe::end_to_end) {
        model = build_default_dcnn(task_labels, mix_seed(fseed, 6));
        model.provenance.source_dataset = d.name;
        model.provenance.transfer_mode = "end_to_end";
      } else {
        model = apply_transfer(*source, {mode_of(recipe), source->label_space, task_labels, d.name},
                               mix_seed(fseed, 6));
      }
      nn::TrainConfig tc = config.train;
      tc.seed = mix_seed(fseed, 7);
      const auto tuned = fine_tune(model, train_epochs, val_epochs, tc);
      const auto post = nn::predict(tuned.bundle.spec, tuned.bundle.params, test.epochs);

      std::vector<EpochPrediction> preds;
      for (std::size_t i = 0; i < test.epochs.size(); ++i) {
        const auto& e = test.epochs[i];
        EpochPrediction p;
        p.fold = static_cast<int>(f);
        const auto it = record_of.find({e.subject_id, base_test_id(e.test_id), e.epoch_index});
        p.record = it == record_of.end() ? i : it->second;
        p.subject_id = e.subject_id;
        p.test_id = e.test_id;
        p.epoch_index = e.epoch_index;
        p.true_label = e.label;
        Eigen::Index arg;
        post.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
        p.predicted = static_cast<int>(arg);
        for (Eigen::Index c = 0; c < post.cols(); ++c) p.posterior.push_back(post(static_cast<Eigen::Index>(i), c));
        preds.push_back(std::move(p));
      }
      auto [tests, subjects] = aggregate_votes(preds);

      FoldReport fr;
      fr.fold = static_cast<int>(f);
      fr.test_subjects = fold.test;
      fr.best_pass = tuned.best_pass;
      fr.metrics = {level_metrics(preds, n), level_metrics(tests, n), level_metrics(subjects, n)};
      report.folds.push_back(std::move(fr));
      report.epoch_preds.insert(report.epoch_preds.end(), preds.begin(), preds.end());
      report.test_preds.insert(report.test_preds.end(), tests.begin(), tests.end());
      report.subject_preds.insert(report.subject_preds.end(), subjects.begin(), subjects.end());
    } catch (const Error& e) {
      throw Error(e.kind(), "fold " + std::to_string(f) + ": " + e.detail());
    }
  }

  report.pooled = {level_metrics(report.epoch_preds, n), level_metrics(report.test_preds, n),
                   level_metrics(report.subject_preds, n)};
  std::vector<double> acc, kappa, mf1;
  for (const auto& fr : report.folds) {
    acc.push_back(fr.metrics.test.acc);
    kappa.push_back(fr.metrics.test.kappa);
    mf1.push_back(fr.metrics.test.mf1);
  }
  report.test_acc = spread(acc);
  report.test_kappa = spread(kappa);
  report.test_mf1 = spread(mf1);
  return report;
}

// ---- serialization ------------------------------------------------------

namespace {

json metrics_json(const Metrics& m) {
  json conf = json::array();
  for (Eigen::Index i = 0; i < m.confusion.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.confusion.cols(); ++j) row.push_back(m.confusion(i, j));
    conf.push_back(row);
  }
  return {{"acc", m.acc}, {"plain_acc", m.plain_acc}, {"kappa", m.kappa}, {"mf1", m.mf1}, {"confusion", conf}};
}

json level_json(const LevelReport& l) {
  return {{"epoch", metrics_json(l.epoch)}, {"test", metrics_json(l.test)}, {"subject", metrics_json(l.subject)}};
}

json spread_json(const Spread& s) { return {{"median", s.median}, {"q1", s.q1}, {"q3", s.q3}}; }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + p.string());
}

std::string vote_csv(const std::vector<VotePrediction>& rows, const std::vector<std::string>& labels,
                     const char* id_name) {
  std::ostringstream os;
  os << std::setprecision(9) << "fold," << id_name << ",subject_id,members,true,predicted";
  for (const auto& l : labels) os << ",p_" << l;
  os << '\n';
  for (const auto& r : rows) {
    os << r.fold << ',' << r.id << ',' << r.subject_id << ',' << r.members << ','
       << labels[static_cast<std::size_t>(r.true_label)] << ',' << labels[static_cast<std::size_t>(r.predicted)];
    for (double p : r.mean_posterior) os << ',' << p;
    os << '\n';
  }
  return os.str();
}

}  // namespace

json report_json(const EvalReport& r) {
  json j;
  j["dataset"] = r.dataset;
  j["task_labels"] = r.task_labels;
  j["recipe"] = std::string(to_string(r.recipe));
  const auto& t = r.config.train;
  j["config"] = {{"folds", r.config.folds},
                 {"seed", r.config.seed},
                 {"tests_per_subject", r.config.tests_per_subject},
                 {"balance", r.config.balance},
                 {"train",
                  {{"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"learning_rate", t.learning_rate},
                   {"optimizer", t.optimizer == nn::Optimizer::adam ? "adam" : "sgd"},
                   {"beta1", t.beta1},
                   {"beta2", t.beta2},
                   {"adam_eps", t.adam_eps},
                   {"patience", t.patience}}}};
  j["folds"] = json::array();
  for (const auto& f : r.folds) {
    j["folds"].push_back({{"fold", f.fold}, {"test_subjects", f.test_subjects}, {"best_pass", f.best_pass},
                          {"metrics", level_json(f.metrics)}});
  }
  j["pooled"] = level_json(r.pooled);
  j["test_wise"] = {{"acc", spread_json(r.test_acc)}, {"kappa", spread_json(r.test_kappa)},
                    {"mf1", spread_json(r.test_mf1)}};
  j["warnings"] = r.warnings;
  return j;
}

void write_report(const EvalReport& r, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "report.json", report_json(r).dump(2) + "\n");

  std::ostringstream ep;
  ep << std::setprecision(9) << "fold,record,subject_id,test_id,epoch_index,true,predicted";
  for (const auto& l : r.task_labels) ep << ",p_" << l;
  ep << '\n';
  for (const auto& e : r.epoch_preds) {
    ep << e.fold << ',' << e.record << ',' << e.subject_id << ',' << e.test_id << ',' << e.epoch_index << ','
       << r.task_labels[static_cast<std::size_t>(e.true_label)] << ','
       << r.task_labels[static_cast<std::size_t>(e.predicted)];
    for (double p : e.posterior) ep << ',' << p;
    ep << '\n';
  }
  write_text(dir / "epoch_preds.csv", ep.str());
  write_text(dir / "test_preds.csv", vote_csv(r.test_preds, r.task_labels, "test_id"));
  write_text(dir / "subject_preds.csv", vote_csv(r.subject_preds, r.task_labels, "subject"));

  std::ostringstream m;
  m << std::setprecision(9) << "fold,level,acc,plain_acc,kappa,mf1\n";
  auto rows = [&](const std::string& fold, const LevelReport& l) {
    for (const auto& [name, x] : {std::pair<const char*, const Metrics*>{"epoch", &l.epoch},
                                  {"test", &l.test}, {"subject", &l.subject}}) {
      m << fold << ',' << name << ',' << x->acc << ',' << x->plain_acc << ',' << x->kappa << ',' << x->mf1 << '\n';
    }
  };
  for (const auto& f : r.folds) rows(std::to_string(f.fold), f.metrics);
  rows("pooled", r.pooled);
  write_text(dir / "metrics.csv", m.str());
}

}  // namespace ambulate
