#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace ambulate {

inline constexpr int kEpochChannels = 4;
inline constexpr int kEpochLength = 128;
inline constexpr int kEpochHop = 64;
inline constexpr double kTargetRateHz = 50.0;

/// Channels in rows, samples in columns.
using SignalMatrix = Eigen::MatrixXd;

/// One recording session. Raw traces carry 3 rows (a_x, a_y, a_z); after
/// append_magnitude a fourth row holds the vector norm.
struct SensorTrace {
  std::string subject_id;
  std::string test_id;
  int label = 0;
  double sample_rate_hz = kTargetRateHz;
  SignalMatrix samples;

  Eigen::Index channels() const { return samples.rows(); }
  Eigen::Index length() const { return samples.cols(); }
};

using EpochData = Eigen::Matrix<float, kEpochChannels, kEpochLength, Eigen::RowMajor>;

/// Network input: one 4x128 window with provenance.
struct Epoch {
  EpochData data = EpochData::Zero();
  std::string subject_id;
  std::string test_id;
  int epoch_index = 0;
  int label = 0;
};

using EpochList = std::vector<Epoch>;

}  // namespace ambulate
