#include "cli.hpp"

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

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

namespace ambulate::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "0.1.0";

/// Bad flags, arguments or config: exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- config -------------------------------------------------------------

struct RunConfig {
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int patience = 10;
  int folds = 5;
  int tests_per_subject = 10;
  bool balance = true;
  double val_fraction = 0.1;

  json to_json() const {
    return {{"epochs", epochs},       {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"optimizer", optimizer}, {"beta1", beta1},           {"beta2", beta2},
            {"adam_eps", adam_eps},   {"patience", patience},     {"folds", folds},
            {"tests_per_subject", tests_per_subject}, {"balance", balance}, {"val_fraction", val_fraction}};
  }

  nn::TrainConfig train(std::uint64_t seed) const {
    nn::TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.optimizer = optimizer == "sgd" ? nn::Optimizer::sgd : nn::Optimizer::adam;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.adam_eps = adam_eps;
    t.patience = patience;
    t.seed = seed;
    return t;
  }
};

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw UsageError("cannot read config " + p.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + p.string() + " is not valid JSON: " + e.what());
  }
}

RunConfig load_config(const std::optional<fs::path>& path) {
  RunConfig c;
  if (!path) return c;
  const json j = read_json(*path);
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  const std::set<std::string> known = [&] {
    std::set<std::string> k;
    const json defaults = c.to_json();
    for (const auto& [key, v] : defaults.items()) k.insert(key);
    return k;
  }();
  std::vector<std::string> bad;
  auto get = [&](const char* key, auto& field, auto ok) {
    if (!j.contains(key)) return;
    using T = std::decay_t<decltype(field)>;
    const auto& v = j.at(key);
    bool typed = false;
    if constexpr (std::is_same_v<T, bool>) typed = v.is_boolean();
    else if constexpr (std::is_same_v<T, int>) typed = v.is_number_integer();
    else if constexpr (std::is_same_v<T, double>) typed = v.is_number();
    else typed = v.is_string();
    if (!typed) {
      bad.push_back(std::string(key) + " (wrong type)");
      return;
    }
    field = v.template get<T>();
    if (!ok(field)) bad.push_back(std::string(key) + " (out of range)");
  };
  for (const auto& [key, v] : j.items())
    if (!known.contains(key)) bad.push_back(key + " (unknown key)");
  get("epochs", c.epochs, [](int x) { return x >= 0; });
  get("batch_size", c.batch_size, [](int x) { return x >= 1; });
  get("learning_rate", c.learning_rate, [](double x) { return x > 0.0 && std::isfinite(x); });
  get("optimizer", c.optimizer, [](const std::string& x) { return x == "adam" || x == "sgd"; });
  get("beta1", c.beta1, [](double x) { return x >= 0.0 && x < 1.0; });
  get("beta2", c.beta2, [](double x) { return x >= 0.0 && x < 1.0; });
  get("adam_eps", c.adam_eps, [](double x) { return x > 0.0; });
  get("patience", c.patience, [](int x) { return x >= 1; });
  get("folds", c.folds, [](int x) { return x >= 2; });
  get("tests_per_subject", c.tests_per_subject, [](int x) { return x >= 0; });
  get("balance", c.balance, [](bool) { return true; });
  get("val_fraction", c.val_fraction, [](double x) { return x >= 0.0 && x < 1.0; });
  if (!bad.empty()) {
    std::string msg = "invalid config " + path->string() + ":";
    for (const auto& b : bad) msg += " " + b + ";";
    msg.pop_back();
    throw UsageError(msg);
  }
  return c;
}

std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::uint64_t hash_text(const std::string& s) {
  return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

// ---- run manifest -------------------------------------------------------

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Directories hash their files in path order, names included.
std::string checksum(const fs::path& p) {
  if (fs::is_regular_file(p)) return hex64(hash_text(file_bytes(p)));
  if (!fs::is_directory(p)) return "missing";
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    all += fs::relative(f, p).generic_string();
    all += '\0';
    all += hex64(hash_text(file_bytes(f)));
  }
  return hex64(hash_text(all));
}

struct RunManifest {
  std::vector<std::string> command_line;
  json config = json::object();
  std::optional<std::uint64_t> seed;
  std::vector<fs::path> inputs;
  std::string started = utc_now();

  // temp file + rename so a reader never sees a partial manifest
  void write(const fs::path& out_dir) const {
    json j;
    j["command_line"] = command_line;
    j["config"] = config;
    j["config_hash"] = hex64(hash_text(config.dump()));
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["tool_version"] = kVersion;
    j["inputs"] = json::array();
    for (const auto& p : inputs) j["inputs"].push_back({{"path", p.string()}, {"fnv1a64", checksum(p)}});
    j["started_at"] = started;
    j["finished_at"] = utc_now();
    fs::create_directories(out_dir);
    const auto tmp = out_dir / "run_manifest.json.tmp";
    {
      std::ofstream f(tmp, std::ios::trunc);
      f << j.dump(2) << '\n';
      if (!f) throw Error(ErrorKind::IoError, "cannot write " + tmp.string());
    }
    fs::rename(tmp, out_dir / "run_manifest.json");
  }
};

fs::path dir_of_file(const fs::path& file) {
  const auto parent = file.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

void write_file(const fs::path& p, const std::string& text) {
  if (!dir_of_file(p).empty()) fs::create_directories(dir_of_file(p));
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + p.string());
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("AMBULATE_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw UsageError("AMBULATE_SEED is not an unsigned integer: " + std::string(env));
    return v;
  }
  return 1;
}

template <typename T>
const T& need(const std::optional<T>& v, const char* flag) {
  if (!v) throw UsageError(std::string("missing ") + flag);
  return *v;
}

// Subject-level split of `d` into train and validation epochs.
std::pair<EpochList, EpochList> split_validation(const EpochList& epochs, double fraction, std::uint64_t seed) {
  std::set<std::string> ids;
  for (const auto& e : epochs) ids.insert(e.subject_id);
  std::vector<std::string> subjects(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(subjects);
  const auto n_val = subjects.size() < 2 ? 0
                                         : std::max<std::size_t>(fraction > 0.0 ? 1 : 0,
                                                                 static_cast<std::size_t>(std::lround(fraction * static_cast<double>(subjects.size()))));
  const std::set<std::string> val(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_val));
  EpochList tr, va;
  for (const auto& e : epochs) (val.contains(e.subject_id) ? va : tr).push_back(e);
  return {tr, va};
}

std::vector<std::string> task_labels(const Dataset& d, const std::string& task) {
  if (task == "all") return d.label_space;
  if (task == "hc-mild") return {"HC", "PwMSmild"};
  if (task == "mild-mod") return {"PwMSmild", "PwMSmod"};
  if (task == "hc-mod") return {"HC", "PwMSmod"};
  throw UsageError("unknown task '" + task + "'");
}

void print_metrics(std::ostream& out, const std::string& level, const Metrics& m) {
  out << std::setprecision(4) << level << ": acc " << m.acc << "  kappa " << m.kappa << "  mf1 " << m.mf1
      << "  (plain acc " << m.plain_acc << ")\n";
}

json metrics_json(const Metrics& m) {
  json conf = json::array();
  for (Eigen::Index i = 0; i < m.confusion.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.confusion.cols(); ++j) row.push_back(m.confusion(i, j));
    conf.push_back(row);
  }
  return {{"acc", m.acc}, {"plain_acc", m.plain_acc}, {"kappa", m.kappa}, {"mf1", m.mf1}, {"confusion", conf}};
}

json history_json(const std::vector<nn::PassRecord>& h) {
  json a = json::array();
  for (const auto& p : h) {
    a.push_back({{"pass", p.pass}, {"train_loss", p.train_loss}, {"train_acc", p.train_acc},
                 {"val_loss", p.val_loss}, {"val_acc", p.val_acc}});
  }
  return a;
}

// ---- commands -----------------------------------------------------------

struct Options {
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> config, out, data, path, source, target, model, epochs, in, preds;
  std::optional<std::string> dataset, task, recipe, mode, cls, channel;
  std::string subject = "S01", test, label = "unlabeled";
  double alpha = 1.0, beta = 0.0, epsilon = 0.01;
  bool svg = false, extra_modes = false;
  int limit = 0;
  double min_posterior = 0.85;
  int per_test = 40, count = 2000, iterations = 10;
};

int cmd_load(const Options& o, RunManifest& m, std::ostream& out, std::ostream& err) {
  const auto& kind = need(o.dataset, "--dataset");
  const auto& path = need(o.path, "--path");
  const auto& dst = need(o.out, "--out");
  m.inputs = {path};
  const Dataset d = kind == "ucihar" ? load_ucihar(path) : load_wisdm(path);
  for (const auto& w : d.warnings) err << "warning: " << w << '\n';
  save_container(d, dst);
  m.write(dst);
  out << d.name << ": " << d.epochs.size() << " epochs from " << d.subjects.size() << " subjects -> " << dst.string()
      << '\n';
  return 0;
}

int cmd_synth(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& dst = need(o.out, "--out");
  SynthCohortSpec spec = default_synth_spec();
  if (o.config) {
    m.inputs = {*o.config};
    try {
      spec = synth_spec_from_json(read_json(*o.config));
    } catch (const Error& e) {
      throw UsageError(e.detail());
    }
  }
  if (o.seed || std::getenv("AMBULATE_SEED") != nullptr) spec.seed = resolve_seed(o.seed);
  m.seed = spec.seed;
  m.config = to_json(spec);
  const Dataset d = generate_synthetic_cohort(spec);
  save_container(d, dst);
  m.write(dst);
  out << "synthetic cohort: " << d.epochs.size() << " epochs from " << d.subjects.size() << " subjects -> "
      << dst.string() << '\n';
  return 0;
}

int cmd_preprocess(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& in = need(o.in, "--in");
  const auto& dst = need(o.out, "--out");
  m.inputs = {in};
  SensorTrace raw = read_trace_csv(in);
  raw.subject_id = o.subject;
  raw.test_id = o.test.empty() ? o.subject + "_t01" : o.test;
  const EpochList epochs = signal_prep::preprocess_pipeline(raw);
  if (dst.extension() == ".csv") {
    write_file(dst, epochs_csv(epochs));
    m.write(dir_of_file(dst));
  } else {
    Dataset d;
    d.name = in.stem().string();
    d.role = DatasetRole::target;
    d.label_space = {o.label};
    d.epochs = epochs;
    d.subjects = {raw.subject_id};
    save_container(d, dst);
    m.write(dst);
  }
  out << epochs.size() << " epochs -> " << dst.string() << '\n';
  return 0;
}

int cmd_train_har(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& data = need(o.data, "--data");
  const auto& dst = need(o.out, "--out");
  const RunConfig cfg = load_config(o.config);
  const auto seed = resolve_seed(o.seed);
  m.inputs = {data};
  if (o.config) m.inputs.push_back(*o.config);
  m.config = cfg.to_json();
  m.seed = seed;

  const Dataset d = load_container(data);
  // the distributed UCI HAR partition is kept when the ids carry it
  EpochList pool, test;
  for (const auto& e : d.epochs) (e.test_id.find("_test_") != std::string::npos ? test : pool).push_back(e);
  auto [train, val] = split_validation(pool, cfg.val_fraction, mix_seed(seed, 1));
  const int n = static_cast<int>(d.label_space.size());
  if (cfg.balance) train = balance_classes(train, n, mix_seed(seed, 2));

  ModelBundle b = build_default_dcnn(d.label_space, mix_seed(seed, 3));
  b.provenance.source_dataset = d.name;
  b.provenance.config_hash = hex64(hash_text(m.config.dump()));
  const auto r = fine_tune(b, train, val, cfg.train(mix_seed(seed, 4)));
  save_model(r.bundle, dst);

  json report = {{"train_epochs", train.size()}, {"val_epochs", val.size()}, {"test_epochs", test.size()},
                 {"best_pass", r.best_pass}, {"history", history_json(r.history)}};
  out << "trained on " << train.size() << " epochs, best pass " << r.best_pass << '\n';
  if (!test.empty()) {
    const auto post = nn::predict(r.bundle.spec, r.bundle.params, test);
    std::vector<int> yt, yp;
    for (std::size_t i = 0; i < test.size(); ++i) {
      Eigen::Index arg;
      post.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      yt.push_back(test[i].label);
      yp.push_back(static_cast<int>(arg));
    }
    const auto met = compute_metrics(yt, yp, n);
    report["test"] = metrics_json(met);
    print_metrics(out, "held-out epochs", met);
  }
  write_file(dst / "train_report.json", report.dump(2) + "\n");
  m.write(dst);
  return 0;
}

int cmd_transfer(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& src = need(o.source, "--source");
  const auto& mode_name = need(o.mode, "--mode");
  const auto& tgt = need(o.target, "--target");
  const auto& dst = need(o.out, "--out");
  const RunConfig cfg = load_config(o.config);
  const auto seed = resolve_seed(o.seed);
  TransferMode mode;
  try {
    mode = transfer_mode_from_string(mode_name, o.extra_modes);
  } catch (const Error& e) {
    throw UsageError(e.detail());
  }
  m.inputs = {src, tgt};
  if (o.config) m.inputs.push_back(*o.config);
  m.config = cfg.to_json();
  m.config["mode"] = mode_name;
  m.seed = seed;

  const ModelBundle source = load_model(src);
  const Dataset d = load_container(tgt);
  const ModelBundle t = apply_transfer(source, {mode, source.label_space, d.label_space, d.name}, mix_seed(seed, 1));
  auto [train, val] = split_validation(d.epochs, cfg.val_fraction, mix_seed(seed, 2));
  if (cfg.balance) train = balance_classes(train, static_cast<int>(d.label_space.size()), mix_seed(seed, 3));
  auto r = fine_tune(t, train, val, cfg.train(mix_seed(seed, 4)));
  r.bundle.provenance.config_hash = hex64(hash_text(m.config.dump()));
  save_model(r.bundle, dst);
  write_file(dst / "train_report.json",
             json({{"best_pass", r.best_pass}, {"history", history_json(r.history)}}).dump(2) + "\n");
  m.write(dst);
  out << to_string(mode) << " transfer " << r.bundle.provenance.source_dataset << ", best pass " << r.best_pass
      << " -> " << dst.string() << '\n';
  return 0;
}

int cmd_evaluate(const Options& o, RunManifest& m, std::ostream& out, std::ostream& err) {
  const auto& data = need(o.data, "--data");
  const auto& dst = need(o.out, "--out");
  const std::string task = o.task.value_or("all");
  const std::string recipe_name = o.recipe.value_or("end2end");
  const RunConfig cfg = load_config(o.config);
  const auto seed = resolve_seed(o.seed);
  Recipe recipe;
  try {
    recipe = recipe_from_string(recipe_name, o.extra_modes);
  } catch (const Error& e) {
    throw UsageError(e.detail());
  }
  if (recipe != Recipe::end_to_end && !o.source) throw UsageError("missing --source");
  m.inputs = {data};
  if (o.source) m.inputs.push_back(*o.source);
  if (o.config) m.inputs.push_back(*o.config);
  m.config = cfg.to_json();
  m.config["task"] = task;
  m.config["recipe"] = recipe_name;
  m.seed = seed;

  const Dataset d = load_container(data);
  std::optional<ModelBundle> source;
  if (o.source) source = load_model(*o.source);
  EvalConfig ec;
  ec.folds = cfg.folds;
  ec.seed = seed;
  ec.tests_per_subject = cfg.tests_per_subject;
  ec.balance = cfg.balance;
  ec.train = cfg.train(seed);
  const auto report = run_cv(d, task_labels(d, task), recipe, ec, source ? &*source : nullptr);
  for (const auto& w : report.warnings) err << "warning: " << w << '\n';
  write_report(report, dst);
  m.write(dst);
  print_metrics(out, "epoch", report.pooled.epoch);
  print_metrics(out, "test", report.pooled.test);
  print_metrics(out, "subject", report.pooled.subject);
  out << "test-wise acc median " << report.test_acc.median << " (IQR " << report.test_acc.q1 << "-"
      << report.test_acc.q3 << ")\n";
  return 0;
}

int cmd_explain(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& model_dir = need(o.model, "--model");
  const auto& src = need(o.epochs, "--epochs");
  const auto& dst = need(o.out, "--out");
  const LrpRuleConfig rules{o.alpha, o.beta, o.epsilon};
  try {
    rules.validate();
  } catch (const Error& e) {
    throw UsageError(e.detail());
  }
  m.inputs = {model_dir, src};
  m.config = {{"alpha", o.alpha}, {"beta", o.beta}, {"epsilon", o.epsilon},
              {"class", o.cls.value_or("argmax")}, {"svg", o.svg}, {"limit", o.limit}};

  const ModelBundle b = load_model(model_dir);
  int target = -1;
  if (o.cls && *o.cls != "argmax") {
    const auto it = std::find(b.label_space.begin(), b.label_space.end(), *o.cls);
    if (it == b.label_space.end()) throw UsageError("class '" + *o.cls + "' is not in the model's label space");
    target = static_cast<int>(it - b.label_space.begin());
  }
  EpochList epochs = fs::is_directory(src) ? load_container(src).epochs : read_epochs_csv(src);
  if (o.limit > 0 && epochs.size() > static_cast<std::size_t>(o.limit)) epochs.resize(static_cast<std::size_t>(o.limit));

  fs::create_directories(dst);
  const auto params = nn::cast_params<double>(b.params);
  std::ostringstream report;
  report << std::setprecision(9)
         << "epoch,subject_id,test_id,epoch_index,class,logit,input_relevance,max_layer_deviation\n";
  for (std::size_t k = 0; k < epochs.size(); ++k) {
    const auto& e = epochs[k];
    const auto map = lrp_explain(b.spec, params, e, target, rules);
    std::ostringstream stem;
    stem << "epoch_" << std::setw(5) << std::setfill('0') << k;
    export_heatmap(map, e, dst / stem.str(), o.svg);
    const auto dev = conservation_report(map);
    report << k << ',' << e.subject_id << ',' << e.test_id << ',' << e.epoch_index << ','
           << b.label_space[static_cast<std::size_t>(map.explained_class)] << ',' << map.explained_logit << ','
           << map.relevance.sum() << ',' << (dev.empty() ? 0.0 : *std::max_element(dev.begin(), dev.end())) << '\n';
  }
  write_file(dst / "conservation.csv", report.str());
  m.write(dst);
  out << "explained " << epochs.size() << " epochs -> " << dst.string() << '\n';
  return 0;
}

int cmd_cwt(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& in = need(o.in, "--in");
  const auto& dst = need(o.out, "--out");
  const std::string channel = o.channel.value_or("mag");
  const std::vector<std::string> names = {"x", "y", "z", "mag"};
  const auto it = std::find(names.begin(), names.end(), channel);
  if (it == names.end()) throw UsageError("unknown channel '" + channel + "' (x, y, z or mag)");
  m.inputs = {in};
  m.config = {{"channel", channel}};
  const SensorTrace t = signal_prep::preprocess_trace(read_trace_csv(in));
  const Eigen::VectorXd sig = t.samples.row(it - names.begin()).transpose();
  const auto s = cwt_morlet(sig, t.sample_rate_hz, default_cwt_freqs());
  write_file(dst, scalogram_csv(s));
  m.write(dir_of_file(dst));
  out << s.freqs_hz.size() << " x " << sig.size() << " scalogram -> " << dst.string() << '\n';
  return 0;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string x;
  while (std::getline(ss, x, ',')) f.push_back(x);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

int cmd_dba(const Options& o, RunManifest& m, std::ostream& out) {
  const auto& preds = need(o.preds, "--preds");
  const auto& cls_name = need(o.cls, "--class");
  const auto& src = need(o.epochs, "--epochs");
  const auto& dst = need(o.out, "--out");
  RepresentativeSelection sel{o.min_posterior, o.per_test, o.count, resolve_seed(o.seed)};
  try {
    sel.validate();
  } catch (const Error& e) {
    throw UsageError(e.detail());
  }
  if (o.iterations < 0) throw UsageError("--iterations must be >= 0");
  m.inputs = {preds, src};
  m.seed = sel.seed;
  m.config = {{"class", cls_name}, {"min_posterior", sel.min_posterior}, {"per_test", sel.max_epochs_per_test},
              {"count", sel.target_count}, {"iterations", o.iterations}};

  std::ifstream f(preds);
  if (!f) throw Error(ErrorKind::IoError, "cannot read " + preds.string());
  std::string line;
  std::getline(f, line);
  const auto header = split_csv(line);
  auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorKind::DatasetFormatError, preds.string() + ": no column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_subject = col("subject_id"), c_test = col("test_id"), c_epoch = col("epoch_index"), c_true = col("true");
  std::vector<std::string> labels;
  std::vector<std::size_t> c_post;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i].rfind("p_", 0) == 0) {
      labels.push_back(header[i].substr(2));
      c_post.push_back(i);
    }
  }
  const auto cls_it = std::find(labels.begin(), labels.end(), cls_name);
  if (cls_it == labels.end()) throw UsageError("class '" + cls_name + "' is not in " + preds.string());
  const int cls = static_cast<int>(cls_it - labels.begin());

  const Dataset d = load_container(src);
  std::map<std::tuple<std::string, std::string, int>, std::size_t> index;
  for (std::size_t i = 0; i < d.epochs.size(); ++i) {
    const auto& e = d.epochs[i];
    index.emplace(std::tuple{e.subject_id, base_test_id(e.test_id), e.epoch_index}, i);
  }
  std::vector<PosteriorRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != header.size()) {
      throw Error(ErrorKind::DatasetFormatError, preds.string() + ":" + std::to_string(lineno) + ": wrong field count");
    }
    PosteriorRow r;
    r.test_id = fields[c_test];
    r.epoch_index = std::stoi(fields[c_epoch]);
    const auto li = std::find(labels.begin(), labels.end(), fields[c_true]);
    if (li == labels.end()) throw Error(ErrorKind::DatasetFormatError, preds.string() + ": unknown label " + fields[c_true]);
    r.true_label = static_cast<int>(li - labels.begin());
    for (auto c : c_post) r.posterior.push_back(std::stod(fields[c]));
    const auto it = index.find({fields[c_subject], base_test_id(r.test_id), r.epoch_index});
    if (it == index.end()) {
      throw Error(ErrorKind::DatasetFormatError,
                  preds.string() + ":" + std::to_string(lineno) + ": epoch not found in " + src.string());
    }
    r.record = it->second;
    rows.push_back(std::move(r));
  }

  const EpochList chosen = select_representative_epochs(rows, d.epochs, cls, sel);
  std::vector<Eigen::MatrixXd> seqs;
  for (const auto& e : chosen) seqs.push_back(to_matrix(e.data));
  const auto avg = dba_average(seqs, o.iterations);
  Epoch result;
  result.data = avg.average.cast<float>();
  result.label = cls;
  write_file(dst, epochs_csv({result}));
  m.write(dir_of_file(dst));
  out << "DBA over " << chosen.size() << " epochs of " << cls_name << ", inertia " << avg.inertia.front() << " -> "
      << avg.inertia.back() << '\n';
  return 0;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  const auto b = load_model(need(o.model, "--model"));
  out << describe_model(b);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gait and activity classification with explanations", "ambulate"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options o;

  auto seed_opt = [&](CLI::App* s) { s->add_option("--seed", o.seed, "random seed (default: $AMBULATE_SEED or 1)"); };
  auto config_opt = [&](CLI::App* s) { s->add_option("--config", o.config, "JSON config"); };

  auto* load = app.add_subcommand("load", "convert a public HAR dataset to a container");
  load->add_option("--dataset", o.dataset, "ucihar or wisdm")->check(CLI::IsMember({"ucihar", "wisdm"}));
  load->add_option("--path", o.path, "dataset directory or raw file");
  load->add_option("--out", o.out, "output container");

  auto* synth = app.add_subcommand("synth", "generate the synthetic gait cohort");
  config_opt(synth);
  synth->add_option("--out", o.out, "output container");
  seed_opt(synth);

  auto* prep = app.add_subcommand("preprocess", "cut a raw t,ax,ay,az trace into epochs");
  prep->add_option("--in", o.in, "trace CSV");
  prep->add_option("--out", o.out, "container directory, or a .csv file");
  prep->add_option("--subject", o.subject, "subject id");
  prep->add_option("--test", o.test, "test id");
  prep->add_option("--label", o.label, "label name");

  auto* har = app.add_subcommand("train-har", "train the default network on a HAR container");
  har->add_option("--data", o.data, "source container");
  config_opt(har);
  har->add_option("--out", o.out, "model directory");
  seed_opt(har);

  auto* transfer = app.add_subcommand("transfer", "transfer a source model and fine-tune it on a target");
  transfer->add_option("--source", o.source, "source model directory");
  transfer->add_option("--mode", o.mode, "direct, fixed or end_to_end");
  transfer->add_option("--target", o.target, "target container");
  config_opt(transfer);
  transfer->add_option("--out", o.out, "model directory");
  transfer->add_flag("--extra-modes", o.extra_modes, "allow the 'full' mode");
  seed_opt(transfer);

  auto* evaluate = app.add_subcommand("evaluate", "subject-wise cross-validation");
  evaluate->add_option("--data", o.data, "container");
  evaluate->add_option("--task", o.task, "hc-mild, mild-mod, hc-mod or all");
  evaluate->add_option("--recipe", o.recipe, "end2end, direct or fixed");
  evaluate->add_option("--source", o.source, "source model for transfer recipes");
  config_opt(evaluate);
  evaluate->add_option("--out", o.out, "report directory");
  evaluate->add_flag("--extra-modes", o.extra_modes, "allow the 'full' recipe");
  seed_opt(evaluate);

  auto* explain = app.add_subcommand("explain", "relevance heatmaps for epochs");
  explain->add_option("--model", o.model, "model directory");
  explain->add_option("--epochs", o.epochs, "container or epoch CSV");
  explain->add_option("--class", o.cls, "class name or argmax");
  explain->add_option("--alpha", o.alpha, "alpha for convolutional layers");
  explain->add_option("--beta", o.beta, "beta for convolutional layers");
  explain->add_option("--epsilon", o.epsilon, "epsilon for dense layers");
  explain->add_option("--limit", o.limit, "explain at most N epochs (0: all)");
  explain->add_flag("--svg", o.svg, "also write SVG heatmaps");
  explain->add_option("--out", o.out, "output directory");

  auto* cwt = app.add_subcommand("cwt", "Morlet scalogram of a preprocessed trace");
  cwt->add_option("--in", o.in, "trace CSV");
  cwt->add_option("--channel", o.channel, "x, y, z or mag");
  cwt->add_option("--out", o.out, "scalogram CSV");

  auto* dba = app.add_subcommand("dba", "DTW barycenter of confidently classified epochs");
  dba->add_option("--preds", o.preds, "epoch_preds.csv from evaluate");
  dba->add_option("--class", o.cls, "class name");
  dba->add_option("--epochs", o.epochs, "container the predictions came from");
  dba->add_option("--out", o.out, "epoch CSV");
  dba->add_option("--min-posterior", o.min_posterior, "posterior threshold");
  dba->add_option("--per-test", o.per_test, "epochs per test cap");
  dba->add_option("--count", o.count, "epochs to average");
  dba->add_option("--iterations", o.iterations, "DBA iterations");
  seed_opt(dba);

  auto* inspect = app.add_subcommand("inspect", "print a model's layers and parameter counts");
  inspect->add_option("--model", o.model, "model directory");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  RunManifest manifest;
  manifest.command_line = args;
  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "load") return cmd_load(o, manifest, out, err);
    if (name == "synth") return cmd_synth(o, manifest, out);
    if (name == "preprocess") return cmd_preprocess(o, manifest, out);
    if (name == "train-har") return cmd_train_har(o, manifest, out);
    if (name == "transfer") return cmd_transfer(o, manifest, out);
    if (name == "evaluate") return cmd_evaluate(o, manifest, out, err);
    if (name == "explain") return cmd_explain(o, manifest, out);
    if (name == "cwt") return cmd_cwt(o, manifest, out);
    if (name == "dba") return cmd_dba(o, manifest, out);
    return cmd_inspect(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::SpecError ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace ambulate::cli
