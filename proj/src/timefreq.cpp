#include "ambulate/timefreq.hpp"

#include "ambulate/error.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace ambulate {

std::vector<double> default_cwt_freqs() {
  std::vector<double> f;
  for (int i = 0;; ++i) {
    const double v = 17.0 * std::pow(2.0, -i / 12.0);
    if (v < 0.3) break;
    f.push_back(v);
  }
  return f;
}

Scalogram cwt_morlet(const Eigen::VectorXd& signal, double sample_rate_hz,
                     const std::vector<double>& freqs_hz) {
  if (signal.size() < 16) throw Error(ErrorKind::SpecError, "CWT needs at least 16 samples");
  if (!(sample_rate_hz > 0.0)) throw Error(ErrorKind::SpecError, "sample rate must be positive");
  if (freqs_hz.empty()) throw Error(ErrorKind::SpecError, "empty frequency grid");
  for (std::size_t i = 0; i < freqs_hz.size(); ++i) {
    if (!(freqs_hz[i] > 0.0 && freqs_hz[i] < sample_rate_hz / 2.0)) {
      throw Error(ErrorKind::SpecError, "CWT frequency outside (0, fs/2)");
    }
    if (i > 0 && !(freqs_hz[i] < freqs_hz[i - 1]) && !(freqs_hz[i] > freqs_hz[i - 1])) {
      throw Error(ErrorKind::SpecError, "CWT frequencies must be strictly monotone");
    }
  }

  const Eigen::Index n = signal.size();
  Eigen::Index nfft = 1;
  while (nfft < 2 * n) nfft *= 2;
  std::vector<double> padded(static_cast<std::size_t>(nfft), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) padded[static_cast<std::size_t>(i)] = signal[i];

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, padded);

  Scalogram out;
  out.freqs_hz = freqs_hz;
  out.sample_rate_hz = sample_rate_hz;
  out.magnitudes.resize(static_cast<Eigen::Index>(freqs_hz.size()), n);

  std::vector<std::complex<double>> product(static_cast<std::size_t>(nfft));
  std::vector<std::complex<double>> coeffs;
  for (std::size_t r = 0; r < freqs_hz.size(); ++r) {
    const double scale = kMorletOmega0 * sample_rate_hz / (2.0 * std::numbers::pi * freqs_hz[r]);
    // analytic wavelet: only positive frequencies, Nyquist bin excluded
    for (Eigen::Index k = 0; k < nfft; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      if (k == 0 || 2 * k >= nfft) {
        product[kk] = 0.0;
        continue;
      }
      const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(nfft);
      const double d = scale * w - kMorletOmega0;
      product[kk] = spectrum[kk] * (2.0 * std::exp(-0.5 * d * d));
    }
    fft.inv(coeffs, product);
    for (Eigen::Index t = 0; t < n; ++t) {
      out.magnitudes(static_cast<Eigen::Index>(r), t) = std::abs(coeffs[static_cast<std::size_t>(t)]);
    }
    out.coi_samples.push_back(static_cast<int>(std::ceil(std::numbers::sqrt2 * scale)));
  }
  return out;
}

BandEnergy band_energy(const Scalogram& s, double lo_hz, double hi_hz) {
  if (!(lo_hz < hi_hz)) throw Error(ErrorKind::SpecError, "band needs lo < hi");
  BandEnergy b{lo_hz, hi_hz, 0.0};
  bool any = false;
  for (std::size_t r = 0; r < s.freqs_hz.size(); ++r) {
    if (s.freqs_hz[r] >= lo_hz && s.freqs_hz[r] <= hi_hz) {
      b.energy += s.magnitudes.row(static_cast<Eigen::Index>(r)).squaredNorm();
      any = true;
    }
  }
  if (!any) throw Error(ErrorKind::SpecError, "band contains no grid frequency");
  return b;
}

std::string scalogram_csv(const Scalogram& s) {
  std::ostringstream os;
  os << std::setprecision(9) << "freq_hz";
  for (Eigen::Index t = 0; t < s.magnitudes.cols(); ++t) os << ',' << t / s.sample_rate_hz;
  os << '\n';
  for (Eigen::Index r = 0; r < s.magnitudes.rows(); ++r) {
    os << s.freqs_hz[static_cast<std::size_t>(r)];
    for (Eigen::Index t = 0; t < s.magnitudes.cols(); ++t) os << ',' << s.magnitudes(r, t);
    os << '\n';
  }
  return os.str();
}

}  // namespace ambulate
