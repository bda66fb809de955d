#include "ambulate/datasets.hpp"

#include "ambulate/error.hpp"
#include "ambulate/random.hpp"
#include "ambulate/signal_prep.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace ambulate {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(DatasetRole role) {
  return role == DatasetRole::source ? "source" : "target";
}

DatasetRole dataset_role_from_string(std::string_view name) {
  if (name == "source") return DatasetRole::source;
  if (name == "target") return DatasetRole::target;
  throw Error(ErrorKind::DatasetFormatError, "unknown dataset role '" + std::string(name) + "'");
}

int Dataset::label_index(std::string_view name) const {
  for (std::size_t i = 0; i < label_space.size(); ++i) {
    if (label_space[i] == name) return static_cast<int>(i);
  }
  return -1;
}

void validate_dataset(const Dataset& d) {
  const int n = static_cast<int>(d.label_space.size());
  for (const auto& e : d.epochs) {
    if (e.label < 0 || e.label >= n) {
      throw Error(ErrorKind::DatasetFormatError,
                  "epoch of test " + e.test_id + " has label outside the label space");
    }
    if (!d.subjects.contains(e.subject_id)) {
      throw Error(ErrorKind::DatasetFormatError, "epoch refers to unknown subject " + e.subject_id);
    }
  }
}

std::string base_test_id(std::string_view test_id) {
  return std::string(test_id.substr(0, test_id.find('#')));
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorKind::DatasetFormatError, "cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- UCI HAR ------------------------------------------------------------

std::vector<std::array<double, kEpochLength>> read_window_matrix(const fs::path& file) {
  const auto text = slurp(file);
  std::vector<std::array<double, kEpochLength>> rows;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::array<double, kEpochLength> row{};
    std::istringstream fields(line);
    std::string tok;
    int n = 0;
    while (fields >> tok) {
      double v = 0.0;
      if (n >= kEpochLength || !parse_number(tok, v)) {
        throw Error(ErrorKind::DatasetFormatError, file.string() + ":" + std::to_string(lineno) +
                                                       ": expected " +
                                                       std::to_string(kEpochLength) + " numbers");
      }
      row[static_cast<std::size_t>(n++)] = v;
    }
    if (n != kEpochLength) {
      throw Error(ErrorKind::DatasetFormatError, file.string() + ":" + std::to_string(lineno) +
                                                     ": row has " + std::to_string(n) +
                                                     " values, expected " +
                                                     std::to_string(kEpochLength));
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<int> read_int_column(const fs::path& file) {
  const auto text = slurp(file);
  std::vector<int> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    int v = 0;
    if (!parse_number(t, v)) {
      throw Error(ErrorKind::DatasetFormatError, file.string() + ": bad integer '" + std::string(t) + "'");
    }
    out.push_back(v);
  }
  return out;
}

struct UciWindow {
  std::array<std::array<double, kEpochLength>, 3> xyz;
  int subject = 0;
  int label = 0;
  std::string test_id;
  int epoch_index = 0;
};

void read_ucihar_partition(const fs::path& root, const std::string& part,
                           std::vector<UciWindow>& out) {
  const fs::path sig = root / part / "Inertial Signals";
  std::array<std::vector<std::array<double, kEpochLength>>, 3> axes;
  const char* names[3] = {"x", "y", "z"};
  for (int a = 0; a < 3; ++a) {
    const auto f = sig / ("total_acc_" + std::string(names[a]) + "_" + part + ".txt");
    if (!fs::exists(f)) throw Error(ErrorKind::DatasetFormatError, "missing " + f.string());
    axes[static_cast<std::size_t>(a)] = read_window_matrix(f);
  }
  for (const auto& f : {root / part / ("y_" + part + ".txt"), root / part / ("subject_" + part + ".txt")}) {
    if (!fs::exists(f)) throw Error(ErrorKind::DatasetFormatError, "missing " + f.string());
  }
  const auto labels = read_int_column(root / part / ("y_" + part + ".txt"));
  const auto subjects = read_int_column(root / part / ("subject_" + part + ".txt"));
  const std::size_t n = labels.size();
  if (subjects.size() != n || axes[0].size() != n || axes[1].size() != n || axes[2].size() != n) {
    throw Error(ErrorKind::DatasetFormatError, part + " partition files disagree on row count");
  }

  // 1 walking, 2 upstairs, 3 downstairs, 4 sitting, 5 standing, 6 laying
  static constexpr int kFold[7] = {-1, 0, 1, 1, 2, 3, 4};
  int run = -1;
  int index_in_run = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 1 || labels[i] > 6) {
      throw Error(ErrorKind::DatasetFormatError, "activity label " + std::to_string(labels[i]) +
                                                     " outside 1..6 in " + part);
    }
    const bool new_run = i == 0 || labels[i] != labels[i - 1] || subjects[i] != subjects[i - 1];
    if (new_run) {
      ++run;
      index_in_run = 0;
    }
    UciWindow w;
    for (int a = 0; a < 3; ++a) w.xyz[static_cast<std::size_t>(a)] = axes[static_cast<std::size_t>(a)][i];
    w.subject = subjects[i];
    w.label = kFold[labels[i]];
    std::ostringstream id;
    id << "S" << std::setfill('0') << std::setw(2) << subjects[i] << "_" << part << "_r"
       << std::setw(3) << run;
    w.test_id = id.str();
    w.epoch_index = index_in_run++;
    out.push_back(std::move(w));
  }
}

std::string subject_name(int s) {
  std::ostringstream os;
  os << "S" << std::setfill('0') << std::setw(2) << s;
  return os.str();
}

}  // namespace

Dataset load_ucihar(const fs::path& dir) {
  fs::path root = dir;
  if (!fs::exists(root / "train") && fs::exists(root / "UCI HAR Dataset" / "train")) {
    root = root / "UCI HAR Dataset";
  }
  if (!fs::is_directory(root / "train") || !fs::is_directory(root / "test")) {
    throw Error(ErrorKind::DatasetFormatError,
                dir.string() + " does not contain the train/ and test/ partitions");
  }
  std::vector<UciWindow> windows;
  read_ucihar_partition(root, "train", windows);
  read_ucihar_partition(root, "test", windows);

  Dataset d;
  d.name = "ucihar";
  d.role = DatasetRole::source;
  d.label_space = kUciharLabels;

  // Windows carry no continuous trace, so a subject's whole session plays the
  // role of the trace: one alignment rotation and one standardization each.
  std::map<int, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < windows.size(); ++i) by_subject[windows[i].subject].push_back(i);

  d.epochs.resize(windows.size());
  for (const auto& [subject, idx] : by_subject) {
    SensorTrace session;
    session.subject_id = subject_name(subject);
    session.test_id = session.subject_id;
    session.samples.resize(3, static_cast<Eigen::Index>(idx.size()) * kEpochLength);
    for (std::size_t w = 0; w < idx.size(); ++w) {
      for (int a = 0; a < 3; ++a)
        for (int s = 0; s < kEpochLength; ++s)
          session.samples(a, static_cast<Eigen::Index>(w) * kEpochLength + s) =
              windows[idx[w]].xyz[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)];
    }
    auto four = signal_prep::append_magnitude(signal_prep::align_axes(session));
    for (Eigen::Index c = 0; c < four.samples.rows(); ++c) {
      auto row = four.samples.row(c);
      const double mean = row.mean();
      const double sd = std::sqrt((row.array() - mean).square().mean());
      if (!(sd > 1e-9)) {
        throw Error(ErrorKind::DegenerateChannel, "subject " + session.subject_id + " channel " +
                                                      std::to_string(c) + " is constant");
      }
      row = (row.array() - mean) / sd;
    }
    d.subjects.insert(session.subject_id);
    d.subject_meta[session.subject_id] = SubjectMeta{session.subject_id, "", NAN, NAN};
    for (std::size_t w = 0; w < idx.size(); ++w) {
      auto& e = d.epochs[idx[w]];
      e.data = four.samples.middleCols(static_cast<Eigen::Index>(w) * kEpochLength, kEpochLength)
                   .cast<float>();
      e.subject_id = session.subject_id;
      e.test_id = windows[idx[w]].test_id;
      e.epoch_index = windows[idx[w]].epoch_index;
      e.label = windows[idx[w]].label;
    }
  }
  return d;
}

// ---- WISDM --------------------------------------------------------------

Dataset load_wisdm(const fs::path& file) {
  if (!fs::is_regular_file(file)) {
    throw Error(ErrorKind::DatasetFormatError, "cannot read " + file.string());
  }
  const auto text = slurp(file);

  struct Record {
    int user;
    std::string activity;
    std::int64_t ts;
    double x, y, z;
  };
  static const std::map<std::string, std::string, std::less<>> kMap = {
      {"Walking", "walking"}, {"Jogging", "jogging"},   {"Upstairs", "stairs"},
      {"Downstairs", "stairs"}, {"Sitting", "sitting"}, {"Standing", "standing"}};

  std::vector<Record> records;
  std::size_t total = 0;
  std::size_t malformed = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find_first_of(";\n", pos);
    if (end == std::string::npos) end = text.size();
    const auto rec = trim(std::string_view(text).substr(pos, end - pos));
    pos = end + 1;
    if (rec.empty()) continue;
    ++total;
    auto f = split(rec, ',');
    while (f.size() > 6 && trim(f.back()).empty()) f.pop_back();
    Record r{};
    if (f.size() != 6 || !parse_number(f[0], r.user) || !parse_number(f[2], r.ts) ||
        !parse_number(f[3], r.x) || !parse_number(f[4], r.y) || !parse_number(f[5], r.z) ||
        !kMap.contains(trim(f[1])) || !std::isfinite(r.x) || !std::isfinite(r.y) ||
        !std::isfinite(r.z)) {
      ++malformed;
      continue;
    }
    r.activity = std::string(trim(f[1]));
    records.push_back(std::move(r));
  }
  if (total == 0) throw Error(ErrorKind::DatasetFormatError, file.string() + " has no records");
  if (static_cast<double>(malformed) > 0.05 * static_cast<double>(total)) {
    throw Error(ErrorKind::DatasetFormatError,
                std::to_string(malformed) + " of " + std::to_string(total) +
                    " records are malformed (more than 5%)");
  }

  Dataset d;
  d.name = "wisdm";
  d.role = DatasetRole::source;
  d.label_space = kWisdmLabels;
  if (malformed > 0) {
    d.warnings.push_back("skipped " + std::to_string(malformed) + " malformed records");
  }

  constexpr std::int64_t kMaxGapNs = 1'000'000'000;
  std::map<int, int> segment_count;
  std::size_t begin = 0;
  auto flush = [&](std::size_t end) {
    if (end <= begin) return;
    const auto& first = records[begin];
    const std::string subject = "U" + std::to_string(first.user);
    const std::string test = subject + "_s" + std::to_string(segment_count[first.user]++);
    SensorTrace t;
    t.subject_id = subject;
    t.test_id = test;
    t.label = d.label_index(kMap.find(first.activity)->second);
    t.sample_rate_hz = 20.0;
    t.samples.resize(3, static_cast<Eigen::Index>(end - begin));
    for (std::size_t i = begin; i < end; ++i) {
      const auto c = static_cast<Eigen::Index>(i - begin);
      t.samples(0, c) = records[i].x;
      t.samples(1, c) = records[i].y;
      t.samples(2, c) = records[i].z;
    }
    const auto resampled = static_cast<std::size_t>(
        std::floor(static_cast<double>(end - begin) * kTargetRateHz / t.sample_rate_hz + 1e-9));
    if (resampled < static_cast<std::size_t>(kEpochLength)) {
      d.warnings.push_back("dropped " + test + ": " + std::to_string(end - begin) +
                           " samples is shorter than one epoch after resampling");
      return;
    }
    try {
      auto epochs = signal_prep::preprocess_pipeline(t);
      for (auto& e : epochs) d.epochs.push_back(std::move(e));
      d.subjects.insert(subject);
      d.subject_meta[subject] = SubjectMeta{subject, "", NAN, NAN};
    } catch (const Error& e) {
      d.warnings.push_back("dropped " + test + ": " + e.what());
    }
  };
  for (std::size_t i = 1; i <= records.size(); ++i) {
    const bool split_here =
        i == records.size() || records[i].user != records[i - 1].user ||
        records[i].activity != records[i - 1].activity || records[i].ts < records[i - 1].ts ||
        records[i].ts - records[i - 1].ts > kMaxGapNs;
    if (split_here) {
      flush(i);
      begin = i;
    }
  }
  return d;
}

// ---- synthetic cohort ---------------------------------------------------

SynthCohortSpec default_synth_spec() {
  SynthCohortSpec s;
  SynthClassSpec hc{"HC", 24, {1.8, 2.2}, {0.35, 0.15, 0.06}, 0.0, {5.0, 12.0}, 0.3, 0.05};
  SynthClassSpec mild{"PwMSmild", 52, {1.6, 2.0}, {0.30, 0.13, 0.05}, 0.2, {5.0, 12.0}, 0.3, 0.05};
  SynthClassSpec mod{"PwMSmod", 21, {1.2, 1.6}, {0.24, 0.11, 0.05}, 0.7, {5.0, 12.0}, 0.3, 0.05};
  s.classes = {hc, mild, mod};
  return s;
}

void validate_synth_spec(const SynthCohortSpec& spec) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::SpecError, msg); };
  if (spec.classes.size() < 2) fail("synthetic cohort needs at least 2 classes");
  if (spec.tests_per_subject < 1) fail("tests_per_subject must be >= 1");
  if (!(spec.test_duration_s * kTargetRateHz >= kEpochLength)) {
    fail("test_duration_s must cover at least one 128-sample epoch");
  }
  std::set<std::string> names;
  for (const auto& c : spec.classes) {
    const std::string where = "class '" + c.name + "': ";
    if (c.name.empty() || !names.insert(c.name).second) fail("class names must be unique and non-empty");
    if (c.subjects < 1) fail(where + "subjects must be >= 1");
    const auto& f = c.step_frequency_hz;
    if (!(f[0] > 0.0 && f[0] <= f[1] && f[1] < 25.0)) fail(where + "bad step_frequency_hz range");
    const auto& b = c.perturbation_band_hz;
    if (!(b[0] > 0.0 && b[0] <= b[1] && b[1] < 25.0)) fail(where + "bad perturbation_band_hz range");
    if (c.harmonic_amplitudes.empty()) fail(where + "harmonic_amplitudes is empty");
    if (c.step_frequency_hz[1] * static_cast<double>(c.harmonic_amplitudes.size()) >= 25.0) {
      fail(where + "highest harmonic reaches the 25 Hz Nyquist limit");
    }
    for (double a : c.harmonic_amplitudes)
      if (!std::isfinite(a)) fail(where + "non-finite harmonic amplitude");
    if (!(c.perturbation_rate >= 0.0 && c.perturbation_rate <= 1.0)) {
      fail(where + "perturbation_rate must lie in [0, 1]");
    }
    if (!(c.perturbation_amplitude >= 0.0)) fail(where + "perturbation_amplitude must be >= 0");
    if (!(c.noise_std >= 0.0)) fail(where + "noise_std must be >= 0");
  }
}

namespace {

template <typename T>
T get_strict(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::SpecError, "synthetic spec key '" + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::SpecError, where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
      throw Error(ErrorKind::SpecError, "unknown key '" + k + "' in " + where);
    }
  }
}

}  // namespace

SynthCohortSpec synth_spec_from_json(const json& j) {
  reject_unknown(j, {"classes", "tests_per_subject", "test_duration_s", "seed"}, "synthetic spec");
  auto s = default_synth_spec();
  if (j.contains("tests_per_subject")) s.tests_per_subject = get_strict<int>(j, "tests_per_subject");
  if (j.contains("test_duration_s")) s.test_duration_s = get_strict<double>(j, "test_duration_s");
  if (j.contains("seed")) s.seed = get_strict<std::uint64_t>(j, "seed");
  if (j.contains("classes")) {
    if (!j["classes"].is_array()) throw Error(ErrorKind::SpecError, "'classes' must be an array");
    s.classes.clear();
    for (const auto& cj : j["classes"]) {
      reject_unknown(cj,
                     {"name", "subjects", "step_frequency_hz", "harmonic_amplitudes",
                      "perturbation_rate", "perturbation_band_hz", "perturbation_amplitude",
                      "noise_std"},
                     "class");
      SynthClassSpec c;
      c.name = get_strict<std::string>(cj, "name");
      c.subjects = get_strict<int>(cj, "subjects");
      c.step_frequency_hz = get_strict<std::array<double, 2>>(cj, "step_frequency_hz");
      if (cj.contains("harmonic_amplitudes"))
        c.harmonic_amplitudes = get_strict<std::vector<double>>(cj, "harmonic_amplitudes");
      if (cj.contains("perturbation_rate")) c.perturbation_rate = get_strict<double>(cj, "perturbation_rate");
      if (cj.contains("perturbation_band_hz"))
        c.perturbation_band_hz = get_strict<std::array<double, 2>>(cj, "perturbation_band_hz");
      if (cj.contains("perturbation_amplitude"))
        c.perturbation_amplitude = get_strict<double>(cj, "perturbation_amplitude");
      if (cj.contains("noise_std")) c.noise_std = get_strict<double>(cj, "noise_std");
      s.classes.push_back(std::move(c));
    }
  }
  validate_synth_spec(s);
  return s;
}

json to_json(const SynthCohortSpec& spec) {
  json j;
  j["tests_per_subject"] = spec.tests_per_subject;
  j["test_duration_s"] = spec.test_duration_s;
  j["seed"] = spec.seed;
  j["classes"] = json::array();
  for (const auto& c : spec.classes) {
    j["classes"].push_back({{"name", c.name},
                            {"subjects", c.subjects},
                            {"step_frequency_hz", c.step_frequency_hz},
                            {"harmonic_amplitudes", c.harmonic_amplitudes},
                            {"perturbation_rate", c.perturbation_rate},
                            {"perturbation_band_hz", c.perturbation_band_hz},
                            {"perturbation_amplitude", c.perturbation_amplitude},
                            {"noise_std", c.noise_std}});
  }
  return j;
}

SynthTest synthesize_test(const SynthClassSpec& cls, double step_hz, double duration_s,
                          std::uint64_t seed) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  constexpr double kBurstSigma = 0.04;  // seconds
  Rng rng(seed);
  const auto n = static_cast<Eigen::Index>(std::floor(duration_s * kTargetRateHz + 1e-9));
  const double f = step_hz;
  const double phase = rng.uniform(0.0, 1.0 / f);

  std::vector<double> theta(cls.harmonic_amplitudes.size());
  for (auto& t : theta) t = rng.uniform(0.0, kTwoPi);
  const double theta_x = rng.uniform(0.0, kTwoPi);
  const double theta_z = rng.uniform(0.0, kTwoPi);

  // device tilt of at most 10 degrees about a random horizontal-ish axis
  Eigen::Vector3d axis(rng.normal(), 0.3 * rng.normal(), rng.normal());
  if (axis.norm() < 1e-6) axis = Eigen::Vector3d::UnitX();
  const double tilt = rng.uniform(0.0, 10.0) * std::numbers::pi / 180.0;
  const Eigen::Matrix3d rot = Eigen::AngleAxisd(tilt, axis.normalized()).toRotationMatrix();

  Eigen::MatrixXd body(3, n);
  const double a1 = cls.harmonic_amplitudes.front();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kTargetRateHz;
    const double w = kTwoPi * f * (t - phase);
    double y = 1.0;
    for (std::size_t h = 0; h < theta.size(); ++h) {
      y += cls.harmonic_amplitudes[h] * std::sin(static_cast<double>(h + 1) * w + theta[h]);
    }
    body(0, i) = 0.4 * a1 * std::sin(w + theta_x);
    body(1, i) = y;
    body(2, i) = 0.6 * a1 * std::sin(w + theta_z);
  }

  SynthTest out;
  for (int k = 0;; ++k) {
    const double center = phase + k / f;
    if (center >= static_cast<double>(n) / kTargetRateHz) break;
    // draws happen for every step so the step sequence does not depend on the rate
    const double u = rng.uniform();
    const double fb = rng.uniform(cls.perturbation_band_hz[0], cls.perturbation_band_hz[1]);
    const double psi = rng.uniform(0.0, kTwoPi);
    if (!(u < cls.perturbation_rate) || cls.perturbation_amplitude == 0.0) continue;
    out.burst_centers_s.push_back(center);
    const auto lo = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor((center - 5 * kBurstSigma) * kTargetRateHz)));
    const auto hi = std::min<Eigen::Index>(n - 1, static_cast<Eigen::Index>(std::ceil((center + 5 * kBurstSigma) * kTargetRateHz)));
    for (Eigen::Index i = lo; i <= hi; ++i) {
      const double dt = static_cast<double>(i) / kTargetRateHz - center;
      const double g = cls.perturbation_amplitude * std::exp(-0.5 * dt * dt / (kBurstSigma * kBurstSigma)) *
                       std::sin(kTwoPi * fb * dt + psi);
      body(1, i) += g;
      body(2, i) += 0.5 * g;
    }
  }
  if (cls.noise_std > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) body(c, i) += cls.noise_std * rng.normal();
  }

  out.trace.sample_rate_hz = kTargetRateHz;
  out.trace.samples = rot * body;
  return out;
}

Dataset generate_synthetic_cohort(const SynthCohortSpec& spec) {
  validate_synth_spec(spec);
  Dataset d;
  d.name = "synthetic";
  d.role = DatasetRole::target;
  for (const auto& c : spec.classes) d.label_space.push_back(c.name);

  std::uint64_t subject_counter = 0;
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    const auto& cls = spec.classes[k];
    for (int s = 0; s < cls.subjects; ++s) {
      Rng rng(mix_seed(spec.seed, subject_counter++));
      std::ostringstream sid;
      sid << cls.name << "_" << std::setfill('0') << std::setw(3) << s + 1;
      const std::string subject = sid.str();
      const auto& fr = cls.step_frequency_hz;
      const double base_hz = rng.uniform(fr[0], fr[1]);
      SynthClassSpec personal = cls;
      for (auto& a : personal.harmonic_amplitudes) a *= rng.uniform(0.85, 1.15);

      SubjectMeta meta{subject, cls.name, NAN, NAN};
      const double sev_lo = k == 0 ? 0.0 : (k == 1 ? 1.5 : 3.5);
      const double sev_hi = k == 0 ? 1.5 : (k == 1 ? 3.0 : 6.5);
      meta.severity = std::round(2.0 * rng.uniform(sev_lo, sev_hi)) / 2.0;
      meta.walk_time_s = std::max(2.5, 3.5 + 3.0 * (2.2 - base_hz) + 0.2 * rng.normal());
      d.subjects.insert(subject);
      d.subject_meta[subject] = meta;

      for (int t = 0; t < spec.tests_per_subject; ++t) {
        const double jitter = 1.0 + 0.02 * rng.normal();
        const double f = std::clamp(base_hz * jitter, fr[0], fr[1]);
        auto test = synthesize_test(personal, f, spec.test_duration_s, rng.next());
        std::ostringstream tid;
        tid << subject << "_t" << std::setfill('0') << std::setw(2) << t + 1;
        test.trace.subject_id = subject;
        test.trace.test_id = tid.str();
        test.trace.label = static_cast<int>(k);
        for (auto& e : signal_prep::preprocess_pipeline(test.trace)) d.epochs.push_back(std::move(e));
        d.burst_centers_s[tid.str()] = std::move(test.burst_centers_s);
      }
    }
  }
  return d;
}

// ---- sampling and balancing ---------------------------------------------

Dataset sample_tests_per_subject(const Dataset& d, int m, std::uint64_t seed) {
  if (m < 1) throw Error(ErrorKind::SpecError, "tests per subject must be >= 1");
  if (d.epochs.empty()) throw Error(ErrorKind::SpecError, "cannot sample tests from an empty dataset");

  // subject -> test -> epoch indices, all in sorted order
  std::map<std::string, std::map<std::string, std::vector<std::size_t>>> tests;
  for (std::size_t i = 0; i < d.epochs.size(); ++i) {
    tests[d.epochs[i].subject_id][d.epochs[i].test_id].push_back(i);
  }

  Dataset out = d;
  out.epochs.clear();
  out.subjects.clear();
  Rng rng(seed);
  for (const auto& [subject, by_test] : tests) {
    std::vector<const std::pair<const std::string, std::vector<std::size_t>>*> list;
    for (const auto& kv : by_test) list.push_back(&kv);
    for (int k = 0; k < m; ++k) {
      const auto& [test_id, idx] = *list[rng.index(list.size())];
      const std::string renamed = test_id + "#" + std::to_string(k);
      for (std::size_t i : idx) {
        Epoch e = d.epochs[i];
        e.test_id = renamed;
        out.epochs.push_back(std::move(e));
      }
    }
    out.subjects.insert(subject);
  }
  for (auto it = out.subject_meta.begin(); it != out.subject_meta.end();) {
    it = out.subjects.contains(it->first) ? std::next(it) : out.subject_meta.erase(it);
  }
  return out;
}

EpochList balance_classes(const EpochList& epochs, int n_classes, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const int l = epochs[i].label;
    if (l < 0 || l >= n_classes) throw Error(ErrorKind::SpecError, "epoch label outside the label space");
    by_class[static_cast<std::size_t>(l)].push_back(i);
  }
  std::size_t majority = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) {
      throw Error(ErrorKind::SpecError, "class " + std::to_string(c) + " has no epochs to balance");
    }
    majority = std::max(majority, by_class[c].size());
  }
  Rng rng(seed);
  std::vector<std::size_t> order;
  order.reserve(majority * by_class.size());
  for (const auto& idx : by_class) {
    order.insert(order.end(), idx.begin(), idx.end());
    for (std::size_t k = idx.size(); k < majority; ++k) order.push_back(idx[rng.index(idx.size())]);
  }
  rng.shuffle(order);
  EpochList out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(epochs[i]);
  return out;
}

// ---- container ----------------------------------------------------------

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double null_or_number(const json& j) { return j.is_null() ? NAN : j.get<double>(); }

void check_id(const std::string& id) {
  if (id.find_first_of(",\n\r\"") != std::string::npos) {
    throw Error(ErrorKind::DatasetFormatError, "identifier '" + id + "' contains a CSV delimiter");
  }
}

}  // namespace

void save_container(const Dataset& d, const fs::path& dir) {
  static_assert(std::endian::native == std::endian::little);
  validate_dataset(d);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());

  std::ofstream bin(dir / "epochs.bin", std::ios::binary | std::ios::trunc);
  std::ofstream idx(dir / "index.csv", std::ios::trunc);
  idx << "record,subject_id,test_id,epoch_index,label\n";
  for (std::size_t r = 0; r < d.epochs.size(); ++r) {
    const auto& e = d.epochs[r];
    check_id(e.subject_id);
    check_id(e.test_id);
    bin.write(reinterpret_cast<const char*>(e.data.data()), sizeof(float) * kEpochChannels * kEpochLength);
    idx << r << ',' << e.subject_id << ',' << e.test_id << ',' << e.epoch_index << ','
        << d.label_space[static_cast<std::size_t>(e.label)] << '\n';
  }

  json meta;
  meta["name"] = d.name;
  meta["role"] = std::string(to_string(d.role));
  meta["label_space"] = d.label_space;
  meta["subjects"] = json::array();
  for (const auto& s : d.subjects) {
    const auto it = d.subject_meta.find(s);
    const SubjectMeta m = it == d.subject_meta.end() ? SubjectMeta{s, "", NAN, NAN} : it->second;
    meta["subjects"].push_back({{"subject_id", s},
                                {"group", m.group},
                                {"severity", number_or_null(m.severity)},
                                {"walk_time_s", number_or_null(m.walk_time_s)}});
  }
  meta["burst_centers_s"] = d.burst_centers_s;
  std::ofstream mf(dir / "meta.json", std::ios::trunc);
  mf << meta.dump(2) << '\n';
  if (!bin || !idx || !mf) throw Error(ErrorKind::IoError, "failed writing container " + dir.string());
}

Dataset load_container(const fs::path& dir) {
  for (const char* f : {"epochs.bin", "index.csv", "meta.json"}) {
    if (!fs::is_regular_file(dir / f)) {
      throw Error(ErrorKind::DatasetFormatError, "container " + dir.string() + " lacks " + f);
    }
  }
  Dataset d;
  try {
    std::ifstream mf(dir / "meta.json");
    const auto meta = json::parse(mf);
    d.name = meta.at("name").get<std::string>();
    d.role = dataset_role_from_string(meta.at("role").get<std::string>());
    d.label_space = meta.at("label_space").get<std::vector<std::string>>();
    for (const auto& sj : meta.at("subjects")) {
      SubjectMeta m{sj.at("subject_id").get<std::string>(), sj.at("group").get<std::string>(),
                    null_or_number(sj.at("severity")), null_or_number(sj.at("walk_time_s"))};
      d.subjects.insert(m.subject_id);
      d.subject_meta[m.subject_id] = m;
    }
    d.burst_centers_s =
        meta.at("burst_centers_s").get<std::map<std::string, std::vector<double>>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::DatasetFormatError, std::string("bad meta.json: ") + e.what());
  }

  const auto blob = slurp(dir / "epochs.bin");
  constexpr std::size_t kRecord = sizeof(float) * kEpochChannels * kEpochLength;
  const auto text = slurp(dir / "index.csv");
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  if (trim(line) != "record,subject_id,test_id,epoch_index,label") {
    throw Error(ErrorKind::DatasetFormatError, "index.csv has an unexpected header");
  }
  std::size_t lineno = 1;
  while (std::getline(lines, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    std::size_t record = 0;
    Epoch e;
    if (f.size() != 5 || !parse_number(f[0], record) || !parse_number(f[3], e.epoch_index)) {
      throw Error(ErrorKind::DatasetFormatError, "index.csv:" + std::to_string(lineno) + ": malformed row");
    }
    if (record != d.epochs.size()) {
      throw Error(ErrorKind::DatasetFormatError, "index.csv records are not consecutive");
    }
    if ((record + 1) * kRecord > blob.size()) {
      throw Error(ErrorKind::DatasetFormatError, "epochs.bin is shorter than index.csv implies");
    }
    e.subject_id = std::string(f[1]);
    e.test_id = std::string(f[2]);
    e.label = d.label_index(f[4]);
    if (e.label < 0) {
      throw Error(ErrorKind::DatasetFormatError, "index.csv:" + std::to_string(lineno) +
                                                     ": label '" + std::string(f[4]) +
                                                     "' not in label space");
    }
    std::memcpy(e.data.data(), blob.data() + record * kRecord, kRecord);
    d.epochs.push_back(std::move(e));
  }
  if (d.epochs.size() * kRecord != blob.size()) {
    throw Error(ErrorKind::DatasetFormatError, "epochs.bin size does not match index.csv");
  }
  validate_dataset(d);
  return d;
}

std::string epochs_csv(const EpochList& epochs) {
  std::ostringstream os;
  os << "epoch_index,channel,sample_index,value\n";
  os << std::setprecision(9);
  for (std::size_t k = 0; k < epochs.size(); ++k)
    for (int c = 0; c < kEpochChannels; ++c)
      for (int i = 0; i < kEpochLength; ++i) os << k << ',' << c << ',' << i << ',' << epochs[k].data(c, i) << '\n';
  return os.str();
}

EpochList read_epochs_csv(const fs::path& file) {
  const auto text = slurp(file);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  if (trim(line) != "epoch_index,channel,sample_index,value") {
    throw Error(ErrorKind::DatasetFormatError, file.string() + ": expected header epoch_index,channel,sample_index,value");
  }
  EpochList out;
  std::vector<std::vector<bool>> seen;
  std::size_t lineno = 1;
  while (std::getline(lines, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    long k = -1, c = -1, i = -1;
    double v = 0.0;
    char s1 = 0, s2 = 0, s3 = 0;
    if (!(ls >> k >> s1 >> c >> s2 >> i >> s3 >> v) || s1 != ',' || s2 != ',' || s3 != ',' || k < 0 ||
        c < 0 || c >= kEpochChannels || i < 0 || i >= kEpochLength || !std::isfinite(v)) {
      throw Error(ErrorKind::DatasetFormatError, file.string() + ":" + std::to_string(lineno) + ": bad row");
    }
    const auto ku = static_cast<std::size_t>(k);
    if (ku >= out.size()) {
      out.resize(ku + 1);
      seen.resize(ku + 1, std::vector<bool>(kEpochChannels * kEpochLength, false));
    }
    out[ku].data(c, i) = static_cast<float>(v);
    out[ku].epoch_index = static_cast<int>(k);
    seen[ku][static_cast<std::size_t>(c * kEpochLength + i)] = true;
  }
  for (std::size_t k = 0; k < seen.size(); ++k) {
    if (std::find(seen[k].begin(), seen[k].end(), false) != seen[k].end()) {
      throw Error(ErrorKind::DatasetFormatError, file.string() + ": epoch " + std::to_string(k) + " is incomplete");
    }
  }
  if (out.empty()) throw Error(ErrorKind::DatasetFormatError, file.string() + ": no epochs");
  return out;
}

SensorTrace read_trace_csv(const fs::path& file) {
  const auto text = slurp(file);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  if (trim(line) != "t,ax,ay,az") {
    throw Error(ErrorKind::DatasetFormatError, file.string() + ": expected header t,ax,ay,az");
  }
  std::vector<std::array<double, 4>> rows;
  std::size_t lineno = 1;
  while (std::getline(lines, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    std::array<double, 4> r{};
    bool ok = f.size() == 4;
    for (std::size_t i = 0; ok && i < 4; ++i) ok = parse_number(f[i], r[i]);
    if (!ok) {
      throw Error(ErrorKind::DatasetFormatError, file.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    if (!rows.empty() && !(r[0] > rows.back()[0])) {
      throw Error(ErrorKind::DatasetFormatError, file.string() + ":" + std::to_string(lineno) +
                                                     ": timestamps must increase");
    }
    rows.push_back(r);
  }
  if (rows.size() < 2) throw Error(ErrorKind::DatasetFormatError, file.string() + ": fewer than 2 samples");
  std::vector<double> dts;
  for (std::size_t i = 1; i < rows.size(); ++i) dts.push_back(rows[i][0] - rows[i - 1][0]);
  std::nth_element(dts.begin(), dts.begin() + static_cast<std::ptrdiff_t>(dts.size() / 2), dts.end());
  SensorTrace t;
  t.subject_id = file.stem().string();
  t.test_id = file.stem().string();
  t.sample_rate_hz = 1.0 / dts[dts.size() / 2];
  t.samples.resize(3, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < 3; ++c) t.samples(c, static_cast<Eigen::Index>(i)) = rows[i][static_cast<std::size_t>(c + 1)];
  return t;
}

}  // namespace ambulate
