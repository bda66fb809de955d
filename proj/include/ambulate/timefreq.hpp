#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace ambulate {

struct Scalogram {
  Eigen::MatrixXd magnitudes;  // frequencies x samples
  std::vector<double> freqs_hz;  // descending
  double sample_rate_hz = 0.0;
  /// Cone of influence per row, in samples: columns closer than this to
  /// either edge are affected by the zero padding. Not masked.
  std::vector<int> coi_samples;
};

struct BandEnergy {
  double band_lo_hz = 0.0;
  double band_hi_hz = 0.0;
  double energy = 0.0;
};

inline constexpr double kMorletOmega0 = 6.0;

/// 17 Hz down to 0.3 Hz in steps of 2^(1/12).
std::vector<double> default_cwt_freqs();

/// Morlet CWT (omega0 = 6) computed as a zero-padded frequency-domain
/// product. The wavelet is normalized so a unit sinusoid at a grid
/// frequency has magnitude 1 on its ridge. Throws SpecError.
Scalogram cwt_morlet(const Eigen::VectorXd& signal, double sample_rate_hz,
                     const std::vector<double>& freqs_hz = default_cwt_freqs());

/// Sum of squared magnitudes over rows with lo <= f <= hi. Throws SpecError
/// when no row falls inside the band.
BandEnergy band_energy(const Scalogram& s, double lo_hz, double hi_hz);

/// Header row `freq_hz,<t0>,<t1>,...`, then one row per frequency.
std::string scalogram_csv(const Scalogram& s);

}  // namespace ambulate
