#include "ambulate/nn.hpp"

#include "ambulate/error.hpp"
#include "ambulate/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ambulate::nn {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool1d: return "maxpool1d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::conv1d, LayerKind::relu, LayerKind::maxpool1d, LayerKind::flatten,
                 LayerKind::dense, LayerKind::dropout, LayerKind::softmax}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::ShapeError, "unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv1d(int in, int out, int kernel) {
  LayerSpec s;
  s.kind = LayerKind::conv1d;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_size = kernel;
  return s;
}

LayerSpec LayerSpec::relu() { return {}; }

LayerSpec LayerSpec::maxpool1d(int pool, int stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool1d;
  s.pool = pool;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

LayerSpec LayerSpec::dense(int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_dim = in;
  s.out_dim = out;
  return s;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::softmax() {
  LayerSpec s;
  s.kind = LayerKind::softmax;
  return s;
}

namespace {

[[noreturn]] void shape_error(std::size_t layer, const std::string& msg) {
  throw Error(ErrorKind::ShapeError, "layer " + std::to_string(layer) + ": " + msg);
}

}  // namespace

std::vector<Shape> infer_shapes(const ModelSpec& spec, Shape input) {
  std::vector<Shape> shapes{input};
  Shape cur = input;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& l = spec[i];
    switch (l.kind) {
      case LayerKind::conv1d:
        if (cur.length == 0 || l.in_channels != cur.channels) shape_error(i, "conv1d in_channels mismatch");
        if (l.out_channels <= 0 || l.kernel_size <= 0 || l.kernel_size > cur.length) {
          shape_error(i, "invalid conv1d geometry");
        }
        cur = {l.out_channels, cur.length - l.kernel_size + 1};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) shape_error(i, "dropout rate must be in [0,1)");
        break;
      case LayerKind::maxpool1d:
        if (l.pool <= 0 || l.stride <= 0 || l.pool > cur.length || cur.length == 1) {
          shape_error(i, "invalid maxpool geometry");
        }
        cur = {cur.channels, (cur.length - l.pool) / l.stride + 1};
        break;
      case LayerKind::flatten:
        cur = {cur.size(), 1};
        break;
      case LayerKind::dense:
        if (cur.length != 1) shape_error(i, "dense layer needs flattened input");
        if (l.in_dim != cur.channels || l.out_dim <= 0) shape_error(i, "dense in_dim mismatch");
        cur = {l.out_dim, 1};
        break;
      case LayerKind::softmax:
        if (i + 1 != spec.size()) shape_error(i, "softmax must be the final layer");
        if (cur.length != 1) shape_error(i, "softmax needs flattened input");
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

template <typename S>
Parameters<S> zero_parameters(const ModelSpec& spec) {
  Parameters<S> p(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& l = spec[i];
    if (l.kind == LayerKind::conv1d) {
      p[i].weight = Mat<S>::Zero(l.out_channels, l.in_channels * l.kernel_size);
      p[i].bias = Vec<S>::Zero(l.out_channels);
    } else if (l.kind == LayerKind::dense) {
      p[i].weight = Mat<S>::Zero(l.out_dim, l.in_dim);
      p[i].bias = Vec<S>::Zero(l.out_dim);
    }
  }
  return p;
}

template <typename S>
Parameters<S> he_uniform_parameters(const ModelSpec& spec, std::uint64_t seed) {
  Parameters<S> p = zero_parameters<S>(spec);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (!spec[i].has_params()) continue;
    Rng rng(mix_seed(seed, i));
    const double fan_in = static_cast<double>(p[i].weight.cols());
    const double limit = std::sqrt(6.0 / fan_in);
    for (Eigen::Index r = 0; r < p[i].weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < p[i].weight.cols(); ++c) {
        p[i].weight(r, c) = static_cast<S>(rng.uniform(-limit, limit));
      }
    }
  }
  return p;
}

template <typename S>
void check_parameters(const ModelSpec& spec, const Parameters<S>& params) {
  const Parameters<S> ref = zero_parameters<S>(spec);
  if (params.size() != spec.size()) {
    throw Error(ErrorKind::ShapeError, "parameter list length does not match layer count");
  }
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (params[i].weight.rows() != ref[i].weight.rows() ||
        params[i].weight.cols() != ref[i].weight.cols() ||
        params[i].bias.size() != ref[i].bias.size()) {
      shape_error(i, "parameter tensor shape mismatch");
    }
  }
}

template <typename S>
Tensor<S> make_batch(std::span<const Epoch> epochs) {
  Tensor<S> t;
  t.channels = kEpochChannels;
  t.length = kEpochLength;
  t.batch = static_cast<int>(epochs.size());
  t.data.resize(kEpochChannels, static_cast<Eigen::Index>(epochs.size()) * kEpochLength);
  for (std::size_t b = 0; b < epochs.size(); ++b) {
    t.data.middleCols(static_cast<Eigen::Index>(b) * kEpochLength, kEpochLength) =
        epochs[b].data.template cast<S>();
  }
  return t;
}

template <typename S>
Tensor<S> make_batch(const EpochList& epochs, std::span<const std::size_t> indices) {
  Tensor<S> t;
  t.channels = kEpochChannels;
  t.length = kEpochLength;
  t.batch = static_cast<int>(indices.size());
  t.data.resize(kEpochChannels, static_cast<Eigen::Index>(indices.size()) * kEpochLength);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    t.data.middleCols(static_cast<Eigen::Index>(b) * kEpochLength, kEpochLength) =
        epochs.at(indices[b]).data.template cast<S>();
  }
  return t;
}

template <typename S>
const Tensor<S>& ForwardTrace<S>::logits() const {
  // Chains end in softmax; its input is the logit tensor.
  return activations[activations.size() - 2];
}

namespace {

template <typename S>
void conv_forward(const LayerSpec& l, const LayerParams<S>& p, const Tensor<S>& x, Tensor<S>& y,
                  LayerCache<S>& cache) {
  const int k_size = l.kernel_size;
  const int l_out = x.length - k_size + 1;
  const Eigen::Index cols = static_cast<Eigen::Index>(x.batch) * l_out;
  Mat<S>& columns = cache.columns;
  columns.resize(static_cast<Eigen::Index>(x.channels) * k_size, cols);
  for (int c = 0; c < x.channels; ++c) {
    for (int k = 0; k < k_size; ++k) {
      auto dst = columns.row(c * k_size + k);
      for (int b = 0; b < x.batch; ++b) {
        dst.segment(static_cast<Eigen::Index>(b) * l_out, l_out) =
            x.data.row(c).segment(static_cast<Eigen::Index>(b) * x.length + k, l_out);
      }
    }
  }
  y.channels = l.out_channels;
  y.length = l_out;
  y.batch = x.batch;
  y.data.noalias() = p.weight * columns;
  y.data.colwise() += p.bias;
}

template <typename S>
void conv_backward(const LayerSpec& l, const LayerParams<S>& p, const Tensor<S>& x,
                   const LayerCache<S>& cache, const Mat<S>& dy, LayerParams<S>* grad, Mat<S>* dx) {
  if (grad != nullptr) {
    grad->weight.noalias() = dy * cache.columns.transpose();
    grad->bias = dy.rowwise().sum();
  }
  if (dx == nullptr) return;
  const int k_size = l.kernel_size;
  const int l_out = x.length - k_size + 1;
  Mat<S> dcols;
  dcols.noalias() = p.weight.transpose() * dy;
  dx->setZero(x.channels, x.data.cols());
  for (int c = 0; c < x.channels; ++c) {
    for (int k = 0; k < k_size; ++k) {
      const auto src = dcols.row(c * k_size + k);
      for (int b = 0; b < x.batch; ++b) {
        dx->row(c).segment(static_cast<Eigen::Index>(b) * x.length + k, l_out) +=
            src.segment(static_cast<Eigen::Index>(b) * l_out, l_out);
      }
    }
  }
}

template <typename S>
void pool_forward(const LayerSpec& l, const Tensor<S>& x, Tensor<S>& y, LayerCache<S>& cache) {
  const int l_out = (x.length - l.pool) / l.stride + 1;
  y.channels = x.channels;
  y.length = l_out;
  y.batch = x.batch;
  y.data.resize(x.channels, static_cast<Eigen::Index>(x.batch) * l_out);
  cache.argmax.resize(static_cast<std::size_t>(y.data.size()));
  for (int c = 0; c < x.channels; ++c) {
    const auto row = x.data.row(c);
    for (int b = 0; b < x.batch; ++b) {
      for (int t = 0; t < l_out; ++t) {
        const Eigen::Index start = static_cast<Eigen::Index>(b) * x.length + t * l.stride;
        Eigen::Index best = start;
        for (int q = 1; q < l.pool; ++q) {
          if (row[start + q] > row[best]) best = start + q;  // first maximum wins ties
        }
        const Eigen::Index out_col = static_cast<Eigen::Index>(b) * l_out + t;
        y.data(c, out_col) = row[best];
        cache.argmax[static_cast<std::size_t>(c * y.data.cols() + out_col)] = best;
      }
    }
  }
}

template <typename S>
void pool_backward(const Tensor<S>& x, const LayerCache<S>& cache, const Mat<S>& dy, Mat<S>& dx) {
  dx.setZero(x.channels, x.data.cols());
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    for (Eigen::Index j = 0; j < dy.cols(); ++j) {
      dx(c, cache.argmax[static_cast<std::size_t>(c * dy.cols() + j)]) += dy(c, j);
    }
  }
}

template <typename S>
void flatten_forward(const Tensor<S>& x, Tensor<S>& y) {
  y.channels = x.channels * x.length;
  y.length = 1;
  y.batch = x.batch;
  y.data.resize(y.channels, x.batch);
  for (int b = 0; b < x.batch; ++b) {
    for (int c = 0; c < x.channels; ++c) {
      y.data.col(b).segment(static_cast<Eigen::Index>(c) * x.length, x.length) =
          x.data.row(c).segment(static_cast<Eigen::Index>(b) * x.length, x.length).transpose();
    }
  }
}

template <typename S>
void flatten_backward(const Tensor<S>& x, const Mat<S>& dy, Mat<S>& dx) {
  dx.resize(x.channels, x.data.cols());
  for (int b = 0; b < x.batch; ++b) {
    for (int c = 0; c < x.channels; ++c) {
      dx.row(c).segment(static_cast<Eigen::Index>(b) * x.length, x.length) =
          dy.col(b).segment(static_cast<Eigen::Index>(c) * x.length, x.length).transpose();
    }
  }
}

template <typename S>
void softmax_columns(const Mat<S>& logits, Mat<S>& out) {
  out.resize(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const S m = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - m).exp();
    out.col(j) /= out.col(j).sum();
  }
}

void fill_dropout_mask(Mat<float>& mask, double rate, Rng& rng) {
  const float scale = static_cast<float>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < rate ? 0.0f : scale;
  }
}

void fill_dropout_mask(Mat<double>& mask, double rate, Rng& rng) {
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < rate ? 0.0 : scale;
  }
}

}  // namespace

template <typename S>
ForwardTrace<S> forward(const ModelSpec& spec, const Parameters<S>& params, const Tensor<S>& input,
                        bool training, std::uint64_t seed, std::size_t begin, std::size_t end) {
  if (end == 0) end = spec.size();
  if (begin > end || end > spec.size()) {
    throw Error(ErrorKind::ShapeError, "invalid layer range");
  }
  if (params.size() != spec.size()) {
    throw Error(ErrorKind::ShapeError, "parameter list length does not match layer count");
  }
  if (input.data.rows() != input.channels ||
      input.data.cols() != static_cast<Eigen::Index>(input.batch) * input.length) {
    throw Error(ErrorKind::ShapeError, "input tensor is inconsistent with its shape");
  }
  // Validates the slice geometry against the actual input shape.
  infer_shapes(ModelSpec(spec.begin() + static_cast<std::ptrdiff_t>(begin),
                         spec.begin() + static_cast<std::ptrdiff_t>(end)),
               input.shape());

  ForwardTrace<S> trace;
  trace.begin = begin;
  trace.activations.resize(end + 1);
  trace.cache.resize(end);
  trace.activations[begin] = input;

  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = spec[i];
    const Tensor<S>& x = trace.activations[i];
    Tensor<S>& y = trace.activations[i + 1];
    auto& cache = trace.cache[i];
    switch (l.kind) {
      case LayerKind::conv1d:
        conv_forward(l, params[i], x, y, cache);
        break;
      case LayerKind::relu:
        y = x;
        y.data = x.data.cwiseMax(S(0));
        break;
      case LayerKind::maxpool1d:
        pool_forward(l, x, y, cache);
        break;
      case LayerKind::flatten:
        flatten_forward(x, y);
        break;
      case LayerKind::dense:
        y.channels = l.out_dim;
        y.length = 1;
        y.batch = x.batch;
        y.data.noalias() = params[i].weight * x.data;
        y.data.colwise() += params[i].bias;
        break;
      case LayerKind::dropout:
        y = x;
        if (training && l.rate > 0.0) {
          Rng rng(mix_seed(seed, i));
          cache.mask.resize(x.data.rows(), x.data.cols());
          fill_dropout_mask(cache.mask, l.rate, rng);
          y.data.array() *= cache.mask.array();
        }
        break;
      case LayerKind::softmax:
        y = x;
        softmax_columns(x.data, y.data);
        break;
    }
    if (!y.data.allFinite()) {
      throw Error(ErrorKind::NumericalError,
                  "non-finite activation after layer " + std::to_string(i) + " (" +
                      std::string(to_string(l.kind)) + ")");
    }
  }
  return trace;
}

template <typename S>
LossResult<S> loss_and_grad(const ForwardTrace<S>& trace, std::span<const int> labels) {
  const Mat<S>& post = trace.output().data;
  if (static_cast<Eigen::Index>(labels.size()) != post.cols()) {
    throw Error(ErrorKind::ShapeError, "label count does not match batch size");
  }
  LossResult<S> r;
  r.logit_grad = post;
  const S inv_b = S(1) / static_cast<S>(labels.size());
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const int y = labels[b];
    if (y < 0 || y >= post.rows()) throw Error(ErrorKind::ShapeError, "label outside label space");
    S p = post(y, static_cast<Eigen::Index>(b));
    if (p < S(1e-12)) {
      p = S(1e-12);
      ++r.clamped;
    }
    total -= std::log(static_cast<double>(p));
    r.logit_grad(y, static_cast<Eigen::Index>(b)) -= S(1);
  }
  r.logit_grad *= inv_b;
  r.loss = static_cast<S>(total / static_cast<double>(labels.size()));
  return r;
}

template <typename S>
Parameters<S> backward(const ModelSpec& spec, const Parameters<S>& params,
                       const ForwardTrace<S>& trace, const Mat<S>& logit_grad,
                       const FrozenMask& frozen) {
  if (frozen.size() != spec.size()) {
    throw Error(ErrorKind::ShapeError, "frozen mask length does not match layer count");
  }
  if (trace.activations.size() != spec.size() + 1) {
    throw Error(ErrorKind::ShapeError, "trace does not cover the full chain");
  }
  Parameters<S> grads = zeros_like(params);

  std::size_t top = spec.size();
  if (!spec.empty() && spec.back().kind == LayerKind::softmax) --top;

  // Lowest layer that still needs a gradient.
  std::size_t lowest = top;
  for (std::size_t i = trace.begin; i < top; ++i) {
    if (spec[i].has_params() && !frozen[i]) {
      lowest = i;
      break;
    }
  }

  Mat<S> dy = logit_grad;
  Mat<S> dx;
  for (std::size_t i = top; i-- > lowest;) {
    const auto& l = spec[i];
    const Tensor<S>& x = trace.activations[i];
    const bool need_dx = i > lowest;
    const bool trainable = l.has_params() && !frozen[i];
    switch (l.kind) {
      case LayerKind::conv1d:
        conv_backward(l, params[i], x, trace.cache[i], dy, trainable ? &grads[i] : nullptr,
                      need_dx ? &dx : nullptr);
        break;
      case LayerKind::dense:
        if (trainable) {
          grads[i].weight.noalias() = dy * x.data.transpose();
          grads[i].bias = dy.rowwise().sum();
        }
        if (need_dx) dx.noalias() = params[i].weight.transpose() * dy;
        break;
      case LayerKind::relu:
        dx = (x.data.array() > S(0)).select(dy.array(), S(0)).matrix();
        break;
      case LayerKind::maxpool1d:
        pool_backward(x, trace.cache[i], dy, dx);
        break;
      case LayerKind::flatten:
        flatten_backward(x, dy, dx);
        break;
      case LayerKind::dropout:
        if (trace.cache[i].mask.size() != 0) {
          dx = dy.cwiseProduct(trace.cache[i].mask);
        } else {
          dx = dy;
        }
        break;
      case LayerKind::softmax:
        throw Error(ErrorKind::ShapeError, "softmax must be the final layer");
    }
    if (need_dx) dy.swap(dx);
  }
  return grads;
}

namespace {

// ReLU activity pattern and pool winners; a change means the perturbation
// crossed a kink of the piecewise-linear network.
std::vector<Eigen::Index> kink_signature(const ModelSpec& spec, const ForwardTrace<double>& t) {
  std::vector<Eigen::Index> sig;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (spec[i].kind == LayerKind::relu) {
      const auto& x = t.activations[i].data;
      for (Eigen::Index j = 0; j < x.size(); ++j) sig.push_back(x.data()[j] > 0.0 ? 1 : 0);
    } else if (spec[i].kind == LayerKind::maxpool1d) {
      sig.insert(sig.end(), t.cache[i].argmax.begin(), t.cache[i].argmax.end());
    }
  }
  return sig;
}

}  // namespace

GradCheckResult check_gradients(const ModelSpec& spec, const Parameters<double>& params,
                                const Epoch& epoch, int label, std::uint64_t seed) {
  check_parameters(spec, params);
  const Tensor<double> input = make_batch<double>(std::span<const Epoch>(&epoch, 1));
  const int labels[1] = {label};

  const auto base = forward(spec, params, input, false, 0);
  const auto base_sig = kink_signature(spec, base);
  const auto lr = loss_and_grad(base, labels);
  const FrozenMask none(spec.size(), false);
  const Parameters<double> grads = backward(spec, params, base, lr.logit_grad, none);

  struct Coord {
    std::size_t layer;
    bool is_bias;
    Eigen::Index index;
  };
  std::vector<Coord> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (Eigen::Index j = 0; j < params[i].weight.size(); ++j) coords.push_back({i, false, j});
    for (Eigen::Index j = 0; j < params[i].bias.size(); ++j) coords.push_back({i, true, j});
  }
  Rng rng(seed);
  rng.shuffle(coords);
  const std::size_t want = std::min(coords.size(), std::max<std::size_t>(50, coords.size() / 100));
  coords.resize(want);

  constexpr double kStep = 1e-5;
  GradCheckResult result;
  Parameters<double> probe = params;
  for (const auto& c : coords) {
    double& slot = c.is_bias ? probe[c.layer].bias.data()[c.index]
                             : probe[c.layer].weight.data()[c.index];
    const double saved = slot;
    slot = saved + kStep;
    const auto plus = forward(spec, probe, input, false, 0);
    slot = saved - kStep;
    const auto minus = forward(spec, probe, input, false, 0);
    slot = saved;
    if (kink_signature(spec, plus) != base_sig || kink_signature(spec, minus) != base_sig) {
      ++result.skipped_kinks;
      continue;
    }
    const double fd = (static_cast<double>(loss_and_grad(plus, labels).loss) -
                       static_cast<double>(loss_and_grad(minus, labels).loss)) /
                      (2.0 * kStep);
    const double bp = c.is_bias ? grads[c.layer].bias.data()[c.index]
                                : grads[c.layer].weight.data()[c.index];
    const double denom = std::max({std::abs(bp), std::abs(fd), 1e-8});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(bp - fd) / denom);
    ++result.checked;
  }
  return result;
}

namespace {

// Samples stored column-blocked like a Tensor, so batches are column gathers.
struct SampleStore {
  Mat<float> data;
  int channels = 0;
  int length = 0;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  Tensor<float> gather(std::span<const std::size_t> idx) const {
    Tensor<float> t;
    t.channels = channels;
    t.length = length;
    t.batch = static_cast<int>(idx.size());
    t.data.resize(channels, static_cast<Eigen::Index>(idx.size()) * length);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      t.data.middleCols(static_cast<Eigen::Index>(b) * length, length) =
          data.middleCols(static_cast<Eigen::Index>(idx[b]) * length, length);
    }
    return t;
  }
};

constexpr std::size_t kEvalChunk = 256;

// Runs layers [0, prefix) once over the whole set in inference mode.
SampleStore build_store(const ModelSpec& spec, const Parameters<float>& params,
                        const EpochList& epochs, std::size_t prefix, Shape shape) {
  SampleStore store;
  store.channels = shape.channels;
  store.length = shape.length;
  store.labels.reserve(epochs.size());
  for (const auto& e : epochs) store.labels.push_back(e.label);
  store.data.resize(shape.channels, static_cast<Eigen::Index>(epochs.size()) * shape.length);
  for (std::size_t start = 0; start < epochs.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, epochs.size() - start);
    Tensor<float> batch = make_batch<float>(std::span<const Epoch>(epochs.data() + start, n));
    const Eigen::Index col0 = static_cast<Eigen::Index>(start) * shape.length;
    if (prefix == 0) {
      store.data.middleCols(col0, batch.data.cols()) = batch.data;
    } else {
      auto t = forward(spec, params, batch, false, 0, 0, prefix);
      store.data.middleCols(col0, t.activations[prefix].data.cols()) = t.activations[prefix].data;
    }
  }
  return store;
}

struct EvalStats {
  double loss = 0.0;
  double acc = 0.0;
};

EvalStats evaluate_store(const ModelSpec& spec, const Parameters<float>& params,
                         const SampleStore& store, std::size_t prefix) {
  EvalStats s;
  if (store.size() == 0) return s;
  std::vector<std::size_t> idx;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < store.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, store.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto t = forward(spec, params, store.gather(idx), false, 0, prefix);
    const auto& post = t.output().data;
    for (std::size_t b = 0; b < n; ++b) {
      const int y = store.labels[start + b];
      Eigen::Index arg = 0;
      post.col(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
      if (arg == y) ++correct;
      loss -= std::log(std::max(static_cast<double>(post(y, static_cast<Eigen::Index>(b))), 1e-12));
    }
  }
  s.loss = loss / static_cast<double>(store.size());
  s.acc = static_cast<double>(correct) / static_cast<double>(store.size());
  return s;
}

// Largest prefix of layers that is deterministic and carries no trainable
// parameters; its output is computed once.
std::size_t frozen_prefix(const ModelSpec& spec, const FrozenMask& frozen) {
  std::size_t f = 0;
  while (f < spec.size() && spec[f].kind != LayerKind::dropout &&
         spec[f].kind != LayerKind::softmax && (!spec[f].has_params() || frozen[f])) {
    ++f;
  }
  bool any_frozen_param = false;
  for (std::size_t i = 0; i < f; ++i) any_frozen_param |= spec[i].has_params();
  return any_frozen_param ? f : 0;
}

}  // namespace

TrainResult train(const ModelSpec& spec, const Parameters<float>& init, const EpochList& train_set,
                  const EpochList& val_set, const TrainConfig& config, const FrozenMask& frozen) {
  check_parameters(spec, init);
  if (frozen.size() != spec.size()) {
    throw Error(ErrorKind::ShapeError, "frozen mask length does not match layer count");
  }
  if (train_set.empty()) throw Error(ErrorKind::SpecError, "training split is empty");
  if (config.epochs < 0 || config.batch_size <= 0 || !(config.learning_rate >= 0.0) ||
      config.patience <= 0) {
    throw Error(ErrorKind::SpecError, "invalid training configuration");
  }

  TrainResult result;
  result.params = init;
  if (config.epochs == 0) return result;

  const auto shapes = infer_shapes(spec);
  const std::size_t prefix = frozen_prefix(spec, frozen);
  const SampleStore train_store = build_store(spec, init, train_set, prefix, shapes[prefix]);
  const SampleStore val_store = build_store(spec, init, val_set, prefix, shapes[prefix]);

  Parameters<float> params = init;
  Parameters<float> m1 = zeros_like(params);
  Parameters<float> m2 = zeros_like(params);
  const auto lr = static_cast<float>(config.learning_rate);
  const auto b1 = static_cast<float>(config.beta1);
  const auto b2 = static_cast<float>(config.beta2);
  const auto eps = static_cast<float>(config.adam_eps);
  long step = 0;

  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  Rng shuffle_rng(mix_seed(config.seed, 0x5eed));
  std::vector<std::size_t> order(train_store.size());
  std::iota(order.begin(), order.end(), 0);

  for (int pass = 1; pass <= config.epochs; ++pass) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto bs = static_cast<std::size_t>(config.batch_size);
    try {
      for (std::size_t start = 0, batch_no = 0; start < order.size(); start += bs, ++batch_no) {
        const std::size_t n = std::min(bs, order.size() - start);
        const std::span<const std::size_t> idx(order.data() + start, n);
        std::vector<int> labels(n);
        for (std::size_t b = 0; b < n; ++b) labels[b] = train_store.labels[idx[b]];

        const std::uint64_t dropout_seed =
            mix_seed(config.seed, (static_cast<std::uint64_t>(pass) << 32) + batch_no);
        auto trace = forward(spec, params, train_store.gather(idx), true, dropout_seed, prefix);
        const auto lg = loss_and_grad(trace, labels);
        if (!std::isfinite(static_cast<double>(lg.loss))) {
          throw Error(ErrorKind::NumericalError, "loss is not finite");
        }
        loss_sum += static_cast<double>(lg.loss) * static_cast<double>(n);
        const auto& post = trace.output().data;
        for (std::size_t b = 0; b < n; ++b) {
          Eigen::Index arg = 0;
          post.col(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
          if (arg == labels[b]) ++correct;
        }

        const auto grads = backward(spec, params, trace, lg.logit_grad, frozen);
        ++step;
        const float c1 = 1.0f - std::pow(b1, static_cast<float>(step));
        const float c2 = 1.0f - std::pow(b2, static_cast<float>(step));
        for (std::size_t i = 0; i < spec.size(); ++i) {
          if (!spec[i].has_params() || frozen[i]) continue;
          auto update = [&](auto& w, const auto& g, auto& m, auto& v) {
            if (config.optimizer == Optimizer::sgd) {
              w.array() -= lr * g.array();
              return;
            }
            m.array() = b1 * m.array() + (1.0f - b1) * g.array();
            v.array() = b2 * v.array() + (1.0f - b2) * g.array().square();
            w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
          };
          update(params[i].weight, grads[i].weight, m1[i].weight, m2[i].weight);
          update(params[i].bias, grads[i].bias, m1[i].bias, m2[i].bias);
        }
      }
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::NumericalError) {
        throw Error(ErrorKind::NumericalError,
                    "training diverged in pass " + std::to_string(pass) + ": " + e.what());
      }
      throw;
    }

    PassRecord rec;
    rec.pass = pass;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    if (val_store.size() > 0) {
      const auto v = evaluate_store(spec, params, val_store, prefix);
      rec.val_loss = v.loss;
      rec.val_acc = v.acc;
    }
    result.history.push_back(rec);

    const double monitor = val_store.size() > 0 ? rec.val_loss : rec.train_loss;
    if (!std::isfinite(monitor)) {
      throw Error(ErrorKind::NumericalError, "training diverged in pass " + std::to_string(pass));
    }
    if (monitor < best_loss) {
      best_loss = monitor;
      result.params = params;
      result.best_pass = pass;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

Mat<float> predict(const ModelSpec& spec, const Parameters<float>& params, const EpochList& epochs) {
  check_parameters(spec, params);
  const auto shapes = infer_shapes(spec);
  Mat<float> out(static_cast<Eigen::Index>(epochs.size()), shapes.back().channels);
  for (std::size_t start = 0; start < epochs.size(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, epochs.size() - start);
    const auto batch = make_batch<float>(std::span<const Epoch>(epochs.data() + start, n));
    const auto t = forward(spec, params, batch, false, 0);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        t.output().data.transpose();
  }
  return out;
}

std::string history_csv(const std::vector<PassRecord>& history) {
  std::ostringstream os;
  os.precision(9);
  os << "pass,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& r : history) {
    os << r.pass << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_loss << ','
       << r.val_acc << '\n';
  }
  return os.str();
}

#define AMBULATE_NN_INSTANTIATE(S)                                                              \
  template Parameters<S> zero_parameters<S>(const ModelSpec&);                                  \
  template Parameters<S> he_uniform_parameters<S>(const ModelSpec&, std::uint64_t);             \
  template void check_parameters<S>(const ModelSpec&, const Parameters<S>&);                    \
  template Tensor<S> make_batch<S>(std::span<const Epoch>);                                     \
  template Tensor<S> make_batch<S>(const EpochList&, std::span<const std::size_t>);             \
  template struct ForwardTrace<S>;                                                              \
  template ForwardTrace<S> forward<S>(const ModelSpec&, const Parameters<S>&, const Tensor<S>&, \
                                      bool, std::uint64_t, std::size_t, std::size_t);           \
  template LossResult<S> loss_and_grad<S>(const ForwardTrace<S>&, std::span<const int>);        \
  template Parameters<S> backward<S>(const ModelSpec&, const Parameters<S>&,                    \
                                     const ForwardTrace<S>&, const Mat<S>&, const FrozenMask&);

AMBULATE_NN_INSTANTIATE(float)
AMBULATE_NN_INSTANTIATE(double)

#undef AMBULATE_NN_INSTANTIATE

}  // namespace ambulate::nn
