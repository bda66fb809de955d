#include "ambulate/signal_prep.hpp"

#include "ambulate/error.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>

namespace ambulate::signal_prep {
namespace {

void require_finite(const SensorTrace& trace) {
  if (!trace.samples.allFinite()) {
    throw Error(ErrorKind::InvalidSample, "trace " + trace.test_id + " contains non-finite samples");
  }
}

void require_length(const SensorTrace& trace, Eigen::Index min_len, const char* stage) {
  if (trace.length() < min_len) {
    throw Error(ErrorKind::TraceTooShort, std::string(stage) + " needs at least " +
                                              std::to_string(min_len) + " samples, got " +
                                              std::to_string(trace.length()));
  }
}

// Transposed direct form II, one section, in place.
void run_section(const Biquad& s, Eigen::VectorXd& x, double z0, double z1) {
  for (Eigen::Index n = 0; n < x.size(); ++n) {
    const double in = x[n];
    const double out = s.b[0] * in + z0;
    z0 = s.b[1] * in - s.a[1] * out + z1;
    z1 = s.b[2] * in - s.a[2] * out;
    x[n] = out;
  }
}

// Cascade with steady-state initial conditions for a constant input `level`.
// Every section has unit DC gain, so each sees the same level.
void run_cascade(const std::vector<Biquad>& sections, Eigen::VectorXd& x, double level) {
  for (const auto& s : sections) {
    const double z1 = (s.b[2] - s.a[2]) * level;
    const double z0 = (s.b[1] - s.a[1]) * level + z1;
    run_section(s, x, z0, z1);
  }
}

}  // namespace

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double sample_rate_hz) {
  if (order <= 0 || order % 2 != 0) {
    throw Error(ErrorKind::SpecError, "butterworth order must be positive and even");
  }
  if (!(cutoff_hz > 0.0) || !(cutoff_hz < sample_rate_hz / 2.0)) {
    throw Error(ErrorKind::SpecError, "cutoff must lie in (0, fs/2)");
  }
  using std::numbers::pi;
  const double fs2 = 2.0 * sample_rate_hz;
  const double warped = fs2 * std::tan(pi * cutoff_hz / sample_rate_hz);

  std::vector<Biquad> sections;
  for (int k = 1; k <= order / 2; ++k) {
    const double theta = pi * (2.0 * k + order - 1.0) / (2.0 * order);
    const std::complex<double> s_pole = warped * std::polar(1.0, theta);
    const std::complex<double> z_pole = (fs2 + s_pole) / (fs2 - s_pole);
    Biquad q;
    q.a = {1.0, -2.0 * z_pole.real(), std::norm(z_pole)};
    const double gain = (q.a[0] + q.a[1] + q.a[2]) / 4.0;
    q.b = {gain, 2.0 * gain, gain};
    sections.push_back(q);
  }
  return sections;
}

double magnitude_response(const std::vector<Biquad>& sections, double freq_hz,
                          double sample_rate_hz) {
  const double w = 2.0 * std::numbers::pi * freq_hz / sample_rate_hz;
  const std::complex<double> zi = std::polar(1.0, -w);
  std::complex<double> h = 1.0;
  for (const auto& s : sections) {
    h *= (s.b[0] + s.b[1] * zi + s.b[2] * zi * zi) / (s.a[0] + s.a[1] * zi + s.a[2] * zi * zi);
  }
  return std::abs(h);
}

Eigen::VectorXd filtfilt(const std::vector<Biquad>& sections, const Eigen::VectorXd& x, int pad) {
  const Eigen::Index n = x.size();
  if (n <= pad) {
    throw Error(ErrorKind::TraceTooShort, "filtfilt needs more than " + std::to_string(pad) +
                                              " samples");
  }
  Eigen::VectorXd ext(n + 2 * pad);
  for (int i = 0; i < pad; ++i) {
    ext[i] = 2.0 * x[0] - x[pad - i];
    ext[n + pad + i] = 2.0 * x[n - 1] - x[n - 2 - i];
  }
  ext.segment(pad, n) = x;

  run_cascade(sections, ext, ext[0]);
  ext.reverseInPlace();
  run_cascade(sections, ext, ext[0]);
  ext.reverseInPlace();
  return ext.segment(pad, n);
}

Eigen::VectorXd pchip_uniform(const Eigen::VectorXd& y, double dt, const Eigen::VectorXd& tq) {
  const Eigen::Index n = y.size();
  if (n < 2) throw Error(ErrorKind::TraceTooShort, "pchip needs at least 2 samples");

  Eigen::VectorXd delta = (y.tail(n - 1) - y.head(n - 1)) / dt;
  Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
  if (n == 2) {
    d.setConstant(delta[0]);
  } else {
    for (Eigen::Index k = 1; k < n - 1; ++k) {
      const double a = delta[k - 1];
      const double b = delta[k];
      if (a * b > 0.0) d[k] = 2.0 / (1.0 / a + 1.0 / b);
    }
    auto end_slope = [](double d0, double d1) {
      double s = (3.0 * d0 - d1) / 2.0;
      if (s * d0 <= 0.0) {
        s = 0.0;
      } else if (d0 * d1 < 0.0 && std::abs(s) > 3.0 * std::abs(d0)) {
        s = 3.0 * d0;
      }
      return s;
    };
    d[0] = end_slope(delta[0], delta[1]);
    d[n - 1] = end_slope(delta[n - 2], delta[n - 3]);
  }

  Eigen::VectorXd out(tq.size());
  for (Eigen::Index q = 0; q < tq.size(); ++q) {
    const double pos = tq[q] / dt;
    const auto i = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(pos)), 0, n - 2);
    const double s = pos - static_cast<double>(i);
    const double s2 = s * s;
    const double s3 = s2 * s;
    const double h00 = 2 * s3 - 3 * s2 + 1;
    const double h10 = s3 - 2 * s2 + s;
    const double h01 = -2 * s3 + 3 * s2;
    const double h11 = s3 - s2;
    out[q] = h00 * y[i] + h10 * dt * d[i] + h01 * y[i + 1] + h11 * dt * d[i + 1];
  }
  return out;
}

SensorTrace resample_to_50hz(const SensorTrace& trace) {
  if (!(trace.sample_rate_hz > 0.0)) {
    throw Error(ErrorKind::SpecError, "sample rate must be positive");
  }
  require_length(trace, 4, "resample");
  require_finite(trace);
  if (trace.sample_rate_hz == kTargetRateHz) return trace;

  // Grid covers the trace duration T / fs.
  const double duration = static_cast<double>(trace.length()) / trace.sample_rate_hz;
  const auto n_out = static_cast<Eigen::Index>(std::floor(duration * kTargetRateHz + 1e-9));
  const Eigen::VectorXd tq =
      Eigen::VectorXd::LinSpaced(n_out, 0.0, static_cast<double>(n_out - 1)) / kTargetRateHz;

  SensorTrace out = trace;
  out.sample_rate_hz = kTargetRateHz;
  out.samples.resize(trace.channels(), n_out);
  for (Eigen::Index c = 0; c < trace.channels(); ++c) {
    const Eigen::VectorXd row = trace.samples.row(c).transpose();
    out.samples.row(c) = pchip_uniform(row, 1.0 / trace.sample_rate_hz, tq).transpose();
  }
  return out;
}

SensorTrace lowpass_filter(const SensorTrace& trace) {
  if (trace.sample_rate_hz != kTargetRateHz) {
    throw Error(ErrorKind::SpecError, "lowpass_filter expects 50 Hz input");
  }
  require_length(trace, kMinFilterLength, "lowpass_filter");
  static const std::vector<Biquad> sections =
      butterworth_lowpass(kFilterOrder, kCutoffHz, kTargetRateHz);

  SensorTrace out = trace;
  for (Eigen::Index c = 0; c < trace.channels(); ++c) {
    const Eigen::VectorXd row = trace.samples.row(c).transpose();
    out.samples.row(c) = filtfilt(sections, row, kPadSamples).transpose();
  }
  return out;
}

SensorTrace align_axes(const SensorTrace& trace) {
  if (trace.channels() != 3) throw Error(ErrorKind::ShapeError, "align_axes expects 3 channels");
  const Eigen::Vector3d mean = trace.samples.rowwise().mean();
  const double norm = mean.norm();
  if (!(norm > 1e-6)) {
    throw Error(ErrorKind::DegenerateOrientation, "mean acceleration vector is near zero");
  }
  const Eigen::Vector3d u = mean / norm;
  const Eigen::Vector3d up = Eigen::Vector3d::UnitY();
  const double c = u.dot(up);

  Eigen::Matrix3d rot;
  if (c < -1.0 + 1e-12) {
    // Antiparallel: half-turn about x.
    rot = Eigen::AngleAxisd(std::numbers::pi, Eigen::Vector3d::UnitX()).toRotationMatrix();
  } else {
    const Eigen::Vector3d v = u.cross(up);
    Eigen::Matrix3d vx;
    vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    rot = Eigen::Matrix3d::Identity() + vx + vx * vx / (1.0 + c);
  }

  SensorTrace out = trace;
  out.samples = rot * trace.samples;
  return out;
}

SensorTrace detrend_normalize(const SensorTrace& trace) {
  const Eigen::Index n = trace.length();
  require_length(trace, 2, "detrend_normalize");
  const Eigen::VectorXd idx = Eigen::VectorXd::LinSpaced(n, 0.0, static_cast<double>(n - 1));
  const double idx_mean = idx.mean();
  const Eigen::VectorXd centered = idx.array() - idx_mean;
  const double sxx = centered.squaredNorm();

  SensorTrace out = trace;
  for (Eigen::Index c = 0; c < trace.channels(); ++c) {
    const Eigen::VectorXd row = trace.samples.row(c).transpose();
    const double mean = row.mean();
    const double slope = centered.dot(row.array().matrix() - Eigen::VectorXd::Constant(n, mean)) / sxx;
    Eigen::VectorXd resid = row.array() - mean - slope * centered.array();
    resid.array() -= resid.mean();
    const double sd = std::sqrt(resid.squaredNorm() / static_cast<double>(n));
    if (!(sd > 1e-9)) {
      throw Error(ErrorKind::DegenerateChannel,
                  "channel " + std::to_string(c) + " has no variance after detrending");
    }
    out.samples.row(c) = (resid / sd).transpose();
  }
  return out;
}

SensorTrace append_magnitude(const SensorTrace& trace) {
  if (trace.channels() != 3) {
    throw Error(ErrorKind::ShapeError, "append_magnitude expects 3 channels");
  }
  SensorTrace out = trace;
  out.samples.resize(4, trace.length());
  out.samples.topRows(3) = trace.samples;
  out.samples.row(3) = trace.samples.colwise().norm();
  return out;
}

EpochList epoch_split(const SensorTrace& trace4, int window, int hop) {
  if (trace4.channels() != kEpochChannels) {
    throw Error(ErrorKind::ShapeError, "epoch_split expects 4 channels");
  }
  if (window != kEpochLength || hop <= 0) {
    throw Error(ErrorKind::SpecError, "epoch window must be 128 samples with positive hop");
  }
  require_length(trace4, window, "epoch_split");
  const Eigen::Index count = (trace4.length() - window) / hop + 1;

  EpochList epochs;
  epochs.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index e = 0; e < count; ++e) {
    Epoch ep;
    ep.data = trace4.samples.middleCols(e * hop, window).cast<float>();
    ep.subject_id = trace4.subject_id;
    ep.test_id = trace4.test_id;
    ep.epoch_index = static_cast<int>(e);
    ep.label = trace4.label;
    epochs.push_back(std::move(ep));
  }
  return epochs;
}

SensorTrace preprocess_trace(const SensorTrace& raw) {
  require_finite(raw);
  SensorTrace t = resample_to_50hz(raw);
  t = lowpass_filter(t);
  t = align_axes(t);
  t = append_magnitude(t);
  return detrend_normalize(t);
}

EpochList preprocess_pipeline(const SensorTrace& raw) {
  return epoch_split(preprocess_trace(raw));
}

}  // namespace ambulate::signal_prep
