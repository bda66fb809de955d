#pragma once

#include "ambulate/types.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ambulate {

enum class DatasetRole { source, target };

std::string_view to_string(DatasetRole role);
DatasetRole dataset_role_from_string(std::string_view name);

struct SubjectMeta {
  std::string subject_id;
  std::string group;  // target cohorts only
  double severity = std::numeric_limits<double>::quiet_NaN();
  double walk_time_s = std::numeric_limits<double>::quiet_NaN();
};

/// Epochs are always stored pre-windowed; traces go through the pipeline at
/// load time.
struct Dataset {
  std::string name;
  DatasetRole role = DatasetRole::source;
  std::vector<std::string> label_space;
  EpochList epochs;
  std::set<std::string> subjects;
  std::map<std::string, SubjectMeta> subject_meta;
  /// Synthetic ground truth: burst centers in seconds from test start, keyed
  /// by the original (unsampled) test id.
  std::map<std::string, std::vector<double>> burst_centers_s;
  /// Non-fatal loader notes (dropped segments, skipped lines). Not persisted.
  std::vector<std::string> warnings;

  int label_index(std::string_view name) const;
};

/// Every label inside the label space, every subject registered.
/// Throws DatasetFormatError.
void validate_dataset(const Dataset& d);

/// "S01_t02#7" -> "S01_t02".
std::string base_test_id(std::string_view test_id);

inline const std::vector<std::string> kUciharLabels = {"walking", "stairs", "sitting", "standing",
                                                       "laying"};
inline const std::vector<std::string> kWisdmLabels = {"walking", "stairs", "sitting", "standing",
                                                      "jogging"};

/// Reads the raw "Inertial Signals" total_acc matrices of both partitions.
/// `dir` is the dataset root (the folder holding train/ and test/).
Dataset load_ucihar(const std::filesystem::path& dir);

/// Parses WISDM v1.1 raw records into per-user, per-activity segments and
/// runs each through the preprocessing pipeline.
Dataset load_wisdm(const std::filesystem::path& file);

struct SynthClassSpec {
  std::string name;
  int subjects = 0;
  std::array<double, 2> step_frequency_hz{1.8, 2.2};
  std::vector<double> harmonic_amplitudes{0.35, 0.15, 0.06};
  double perturbation_rate = 0.0;
  std::array<double, 2> perturbation_band_hz{5.0, 12.0};
  double perturbation_amplitude = 0.3;
  double noise_std = 0.05;
};

struct SynthCohortSpec {
  std::vector<SynthClassSpec> classes;
  int tests_per_subject = 3;
  double test_duration_s = 10.0;
  std::uint64_t seed = 1;
};

/// HC / PwMSmild / PwMSmod with 24 / 52 / 21 subjects.
SynthCohortSpec default_synth_spec();

/// Throws SpecError.
void validate_synth_spec(const SynthCohortSpec& spec);

/// Strict: unknown keys and wrong types are SpecError. Missing keys keep the
/// defaults of default_synth_spec().
SynthCohortSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthCohortSpec& spec);

/// Raw 3-axis traces of one test at 50 Hz and the burst centers it contains.
struct SynthTest {
  SensorTrace trace;
  std::vector<double> burst_centers_s;
};

/// Generates a single test of class `cls` for a subject whose base step rate
/// is `step_hz`. Exposed for the construction examples.
SynthTest synthesize_test(const SynthClassSpec& cls, double step_hz, double duration_s,
                          std::uint64_t seed);

Dataset generate_synthetic_cohort(const SynthCohortSpec& spec);

/// m tests per subject drawn uniformly with replacement; copy k of test T is
/// renamed "T#k". Throws SpecError.
Dataset sample_tests_per_subject(const Dataset& d, int m, std::uint64_t seed);

/// Oversamples minority classes (uniformly, with replacement) up to the
/// majority count, then shuffles. Throws SpecError if any of the
/// `n_classes` labels has no epochs.
EpochList balance_classes(const EpochList& epochs, int n_classes, std::uint64_t seed);

/// Container directory: epochs.bin (little-endian float32, 4x128 per record,
/// channel-major), index.csv, meta.json.
void save_container(const Dataset& d, const std::filesystem::path& dir);
Dataset load_container(const std::filesystem::path& dir);

/// CSV `epoch_index,channel,sample_index,value`, one row per sample.
std::string epochs_csv(const EpochList& epochs);
/// Inverse of epochs_csv; provenance fields are left empty. Throws
/// DatasetFormatError.
EpochList read_epochs_csv(const std::filesystem::path& file);

/// Reads the raw trace format `t,ax,ay,az`; the sample rate is inferred
/// from the median time step. Throws DatasetFormatError.
SensorTrace read_trace_csv(const std::filesystem::path& file);

}  // namespace ambulate
