#include "ambulate/lrp.hpp"

#include "ambulate/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ambulate {

void LrpRuleConfig::validate() const {
  if (!(beta >= 0.0) || !(std::abs(alpha - beta - 1.0) < 1e-12)) {
    throw Error(ErrorKind::SpecError, "LRP rule needs alpha - beta = 1 and beta >= 0");
  }
  if (!(epsilon >= 0.0)) throw Error(ErrorKind::SpecError, "LRP epsilon must be >= 0");
}

namespace {

using Mat = nn::Mat<double>;

// Inverse of im2col for one sample: scatters column gradients back onto the
// input positions they were read from.
Mat col2im(const Mat& cols, int channels, int length, int kernel) {
  const int l_out = length - kernel + 1;
  Mat out = Mat::Zero(channels, length);
  for (int c = 0; c < channels; ++c)
    for (int k = 0; k < kernel; ++k) out.row(c).segment(k, l_out) += cols.row(c * kernel + k);
  return out;
}

// Elementwise r / z with 0 where z == 0 (no contribution to redistribute).
Mat safe_divide(const Mat& r, const Mat& z) {
  return r.binaryExpr(z, [](double a, double b) { return b == 0.0 ? 0.0 : a / b; });
}

Mat conv_alpha_beta(const nn::LayerSpec& l, const nn::LayerParams<double>& p,
                    const nn::Tensor<double>& x, const Mat& columns, const Mat& r_out,
                    const LrpRuleConfig& rules) {
  const Mat wp = p.weight.cwiseMax(0.0);
  const Mat wn = p.weight.cwiseMin(0.0);
  const Mat cp = columns.cwiseMax(0.0);
  const Mat cn = columns.cwiseMin(0.0);
  const Eigen::VectorXd bp = p.bias.cwiseMax(0.0);
  const Eigen::VectorXd bn = p.bias.cwiseMin(0.0);

  // positive products x*w come from (x+, w+) and (x-, w-); negative ones
  // from (x+, w-) and (x-, w+). Biases sit in the denominators only.
  Mat zp = wp * cp + wn * cn;
  zp.colwise() += bp;
  Mat zn = wn * cp + wp * cn;
  zn.colwise() += bn;

  const Mat sp = safe_divide(r_out, zp);
  const Mat sn = safe_divide(r_out, zn);
  const Mat gp_pos = col2im(wp.transpose() * sp, x.channels, x.length, l.kernel_size);
  const Mat gp_neg = col2im(wn.transpose() * sp, x.channels, x.length, l.kernel_size);
  const Mat gn_pos = col2im(wn.transpose() * sn, x.channels, x.length, l.kernel_size);
  const Mat gn_neg = col2im(wp.transpose() * sn, x.channels, x.length, l.kernel_size);
  const Mat xp = x.data.cwiseMax(0.0);
  const Mat xn = x.data.cwiseMin(0.0);

  Mat r = rules.alpha * (xp.cwiseProduct(gp_pos) + xn.cwiseProduct(gp_neg));
  if (rules.beta != 0.0) r -= rules.beta * (xp.cwiseProduct(gn_pos) + xn.cwiseProduct(gn_neg));
  return r;
}

Mat dense_epsilon(const nn::LayerParams<double>& p, const nn::Tensor<double>& x, const Mat& r_out,
                  double eps) {
  Mat z = p.weight * x.data;
  z.colwise() += p.bias;
  const Mat denom = z.unaryExpr([eps](double v) { return v + (v >= 0.0 ? eps : -eps); });
  const Mat s = safe_divide(r_out, denom);
  return x.data.cwiseProduct(p.weight.transpose() * s);
}

Mat pool_winner(const nn::Tensor<double>& x, const nn::LayerCache<double>& cache, const Mat& r_out) {
  Mat r = Mat::Zero(x.channels, x.data.cols());
  for (Eigen::Index c = 0; c < r_out.rows(); ++c)
    for (Eigen::Index j = 0; j < r_out.cols(); ++j)
      r(c, cache.argmax[static_cast<std::size_t>(c * r_out.cols() + j)]) += r_out(c, j);
  return r;
}

Mat unflatten(const nn::Tensor<double>& x, const Mat& r_out) {
  Mat r(x.channels, x.length);
  for (int c = 0; c < x.channels; ++c)
    r.row(c) = r_out.col(0).segment(static_cast<Eigen::Index>(c) * x.length, x.length).transpose();
  return r;
}

}  // namespace

std::vector<Mat> propagate_relevance(const nn::ModelSpec& spec, const nn::Parameters<double>& params,
                                     const nn::ForwardTrace<double>& trace,
                                     const Eigen::VectorXd& seed, const LrpRuleConfig& rules) {
  rules.validate();
  const std::size_t n = spec.size();
  if (n == 0 || trace.activations.size() != n + 1 || trace.begin != 0 ||
      trace.activations.front().batch != 1) {
    throw Error(ErrorKind::ShapeError, "relevance propagation needs a full single-sample trace");
  }
  std::vector<Mat> rel(n + 1);
  std::size_t top = n;
  if (spec.back().kind == nn::LayerKind::softmax) {
    --top;
  }
  if (seed.size() != trace.activations[top].data.rows()) {
    throw Error(ErrorKind::ShapeError, "seed length differs from the output width");
  }
  rel[top] = seed;
  if (top != n) rel[n] = seed;

  for (std::size_t i = top; i-- > 0;) {
    const auto& l = spec[i];
    const auto& x = trace.activations[i];
    const Mat& r_out = rel[i + 1];
    switch (l.kind) {
      case nn::LayerKind::conv1d:
        rel[i] = conv_alpha_beta(l, params[i], x, trace.cache[i].columns, r_out, rules);
        break;
      case nn::LayerKind::dense:
        rel[i] = dense_epsilon(params[i], x, r_out, rules.epsilon);
        break;
      case nn::LayerKind::maxpool1d:
        rel[i] = pool_winner(x, trace.cache[i], r_out);
        break;
      case nn::LayerKind::flatten:
        rel[i] = unflatten(x, r_out);
        break;
      case nn::LayerKind::relu:
      case nn::LayerKind::dropout:
        rel[i] = r_out;
        break;
      case nn::LayerKind::softmax:
        throw Error(ErrorKind::ShapeError, "softmax must be the final layer");
    }
  }
  return rel;
}

RelevanceMap lrp_explain(const nn::ModelSpec& spec, const nn::Parameters<double>& params,
                         const Epoch& epoch, int target_class, const LrpRuleConfig& rules) {
  rules.validate();
  for (const auto& p : params) {
    if (!p.weight.allFinite() || !p.bias.allFinite()) {
      throw Error(ErrorKind::NumericalError, "model parameters contain non-finite values");
    }
  }
  const std::vector<Epoch> one{epoch};
  const auto input = nn::make_batch<double>(std::span<const Epoch>(one));
  const auto trace = nn::forward(spec, params, input, false, 0);
  const auto& logits = spec.back().kind == nn::LayerKind::softmax ? trace.logits() : trace.output();
  const Eigen::Index classes = logits.data.rows();
  if (target_class < 0) {
    logits.data.col(0).maxCoeff(&target_class);
  }
  if (target_class >= classes) throw Error(ErrorKind::SpecError, "target class outside the label space");

  RelevanceMap map;
  map.explained_class = target_class;
  map.explained_logit = logits.data(target_class, 0);
  Eigen::VectorXd seed = Eigen::VectorXd::Zero(classes);
  seed[target_class] = map.explained_logit;
  const auto rel = propagate_relevance(spec, params, trace, seed, rules);
  for (const auto& r : rel) map.per_layer_sums.push_back(r.sum());
  map.relevance = rel.front();
  map.per_channel_totals = map.relevance.rowwise().sum();
  return map;
}

RelevanceMap lrp_explain(const ModelBundle& bundle, const Epoch& epoch, int target_class,
                         const LrpRuleConfig& rules) {
  if (target_class >= static_cast<int>(bundle.label_space.size())) {
    throw Error(ErrorKind::SpecError, "target class outside the label space");
  }
  return lrp_explain(bundle.spec, nn::cast_params<double>(bundle.params), epoch, target_class, rules);
}

std::vector<double> conservation_report(const RelevanceMap& map) {
  std::vector<double> dev;
  for (std::size_t i = 0; i + 1 < map.per_layer_sums.size(); ++i) {
    const double above = map.per_layer_sums[i + 1];
    dev.push_back(std::abs(map.per_layer_sums[i] - above) / std::max(std::abs(above), 1e-12));
  }
  return dev;
}

std::string heatmap_csv(const RelevanceMap& map, const Epoch& epoch) {
  std::ostringstream os;
  os << "channel,sample_index,time_s,signal_value,relevance\n" << std::setprecision(9);
  for (int c = 0; c < kEpochChannels; ++c)
    for (int i = 0; i < kEpochLength; ++i)
      os << c << ',' << i << ',' << i / kTargetRateHz << ',' << epoch.data(c, i) << ','
         << map.relevance(c, i) << '\n';
  return os.str();
}

namespace {

std::string hex_color(double r, double g, double b) {
  auto byte = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  std::ostringstream os;
  os << '#' << std::hex << std::setfill('0') << std::setw(2) << byte(r) << std::setw(2) << byte(g)
     << std::setw(2) << byte(b);
  return os.str();
}

// t in [-1, 1]: black at 0, red then yellow for positive, blue then cyan for negative.
std::string diverging(double t) {
  const double a = std::min(std::abs(t), 1.0);
  const double lo = std::min(2.0 * a, 1.0);
  const double hi = std::max(2.0 * a - 1.0, 0.0);
  return t >= 0.0 ? hex_color(lo, hi, 0.0) : hex_color(0.0, hi, lo);
}

}  // namespace

std::string heatmap_svg(const RelevanceMap& map, const Epoch& epoch) {
  std::vector<double> mags(static_cast<std::size_t>(map.relevance.size()));
  for (Eigen::Index i = 0; i < map.relevance.size(); ++i) {
    mags[static_cast<std::size_t>(i)] = std::abs(map.relevance.data()[i]);
  }
  std::sort(mags.begin(), mags.end());
  const double scale = mags[static_cast<std::size_t>(std::floor(0.99 * static_cast<double>(mags.size() - 1)))];

  constexpr double kWidth = 800.0, kPanel = 120.0, kMargin = 10.0;
  const char* names[kEpochChannels] = {"a_x", "a_y", "a_z", "|a|"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth + 2 * kMargin << "\" height=\""
     << kEpochChannels * kPanel + 2 * kMargin << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int c = 0; c < kEpochChannels; ++c) {
    const auto row = epoch.data.row(c);
    const double lo = row.minCoeff(), hi = row.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    const double top = kMargin + c * kPanel;
    auto px = [&](int i) { return kMargin + kWidth * i / (kEpochLength - 1); };
    auto py = [&](int i) { return top + 10.0 + (kPanel - 20.0) * (hi - row[i]) / span; };
    os << "<text x=\"" << kMargin << "\" y=\"" << top + 12 << "\" font-size=\"11\">" << names[c] << "</text>\n";
    for (int i = 0; i + 1 < kEpochLength; ++i) {
      const double r = 0.5 * (map.relevance(c, i) + map.relevance(c, i + 1));
      const double t = scale > 0.0 ? r / scale : 0.0;
      os << "<line x1=\"" << px(i) << "\" y1=\"" << py(i) << "\" x2=\"" << px(i + 1) << "\" y2=\""
         << py(i + 1) << "\" stroke=\"" << diverging(t) << "\" stroke-width=\"2\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

void export_heatmap(const RelevanceMap& map, const Epoch& epoch, const std::filesystem::path& stem,
                    bool svg) {
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::trunc);
    f << text;
    if (!f) throw Error(ErrorKind::IoError, "cannot write " + p.string());
  };
  auto csv_path = stem;
  csv_path += ".csv";
  write(csv_path, heatmap_csv(map, epoch));
  if (svg) {
    auto svg_path = stem;
    svg_path += ".svg";
    write(svg_path, heatmap_svg(map, epoch));
  }
}

}  // namespace ambulate
