#pragma once

#include "ambulate/types.hpp"

#include <array>
#include <vector>

namespace ambulate::signal_prep {

/// Second-order section with a0 normalized to 1.
struct Biquad {
  std::array<double, 3> b{};
  std::array<double, 3> a{1.0, 0.0, 0.0};
};

/// Digital low-pass Butterworth (bilinear transform with pre-warping) as a
/// cascade of biquads. `order` must be even. Each section has unit DC gain.
std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double sample_rate_hz);

/// |H(f)| of a single forward pass through the cascade.
double magnitude_response(const std::vector<Biquad>& sections, double freq_hz,
                          double sample_rate_hz);

/// Forward-backward filtering with odd reflection padding of `pad` samples
/// and steady-state initial conditions scaled by the edge sample.
Eigen::VectorXd filtfilt(const std::vector<Biquad>& sections, const Eigen::VectorXd& x, int pad);

/// Shape-preserving piecewise cubic (Fritsch-Carlson / pchip) interpolation of
/// samples y at uniform spacing `dt`, evaluated at the times `tq`. Queries
/// outside the sample range use the end polynomial.
Eigen::VectorXd pchip_uniform(const Eigen::VectorXd& y, double dt, const Eigen::VectorXd& tq);

SensorTrace resample_to_50hz(const SensorTrace& trace);
SensorTrace lowpass_filter(const SensorTrace& trace);
SensorTrace align_axes(const SensorTrace& trace);
SensorTrace detrend_normalize(const SensorTrace& trace);
SensorTrace append_magnitude(const SensorTrace& trace);
EpochList epoch_split(const SensorTrace& trace4, int window = kEpochLength, int hop = kEpochHop);

/// resample -> lowpass -> align -> magnitude -> detrend_normalize -> epoch_split
EpochList preprocess_pipeline(const SensorTrace& raw);

/// Same chain without the final split; the 4-channel normalized trace.
SensorTrace preprocess_trace(const SensorTrace& raw);

inline constexpr int kFilterOrder = 4;
inline constexpr double kCutoffHz = 17.0;
inline constexpr int kPadSamples = 3 * kFilterOrder;
inline constexpr int kMinFilterLength = 24;

}  // namespace ambulate::signal_prep
