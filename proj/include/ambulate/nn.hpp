#pragma once

#include "ambulate/types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ambulate::nn {

enum class LayerKind { conv1d, relu, maxpool1d, flatten, dense, dropout, softmax };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// One layer of a feed-forward chain. Only the fields relevant to `kind` are
/// meaningful; conv1d is stride 1 with valid padding.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 0;
  int pool = 2;
  int stride = 2;
  int in_dim = 0;
  int out_dim = 0;
  double rate = 0.0;

  static LayerSpec conv1d(int in, int out, int kernel);
  static LayerSpec relu();
  static LayerSpec maxpool1d(int pool = 2, int stride = 2);
  static LayerSpec flatten();
  static LayerSpec dense(int in, int out);
  static LayerSpec dropout(double rate);
  static LayerSpec softmax();

  bool has_params() const { return kind == LayerKind::conv1d || kind == LayerKind::dense; }
  bool operator==(const LayerSpec&) const = default;
};

using ModelSpec = std::vector<LayerSpec>;

struct Shape {
  int channels = 0;
  int length = 0;
  int size() const { return channels * length; }
  bool operator==(const Shape&) const = default;
};

inline constexpr Shape kEpochShape{kEpochChannels, kEpochLength};

/// Activation shape at every layer boundary (element 0 is the input).
/// Throws ShapeError when consecutive layers do not compose.
std::vector<Shape> infer_shapes(const ModelSpec& spec, Shape input = kEpochShape);

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// conv1d weight: out x (in*kernel), column c*kernel + k.
/// dense weight: out x in.
/// Non-parameterized layers hold empty tensors.
template <typename S>
struct LayerParams {
  Mat<S> weight;
  Vec<S> bias;

  Eigen::Index size() const { return weight.size() + bias.size(); }
  bool empty() const { return size() == 0; }
};

template <typename S>
using Parameters = std::vector<LayerParams<S>>;

/// One flag per layer; true means the layer's parameters are not updated.
using FrozenMask = std::vector<bool>;

template <typename T, typename S>
Parameters<T> cast_params(const Parameters<S>& p) {
  Parameters<T> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i].weight = p[i].weight.template cast<T>();
    out[i].bias = p[i].bias.template cast<T>();
  }
  return out;
}

template <typename S>
Parameters<S> zeros_like(const Parameters<S>& p) {
  Parameters<S> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i].weight = Mat<S>::Zero(p[i].weight.rows(), p[i].weight.cols());
    out[i].bias = Vec<S>::Zero(p[i].bias.size());
  }
  return out;
}

template <typename S>
std::size_t parameter_count(const Parameters<S>& p) {
  std::size_t n = 0;
  for (const auto& l : p) n += static_cast<std::size_t>(l.size());
  return n;
}

/// Zero-filled parameters of the right shapes. Throws ShapeError.
template <typename S>
Parameters<S> zero_parameters(const ModelSpec& spec);

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases.
template <typename S>
Parameters<S> he_uniform_parameters(const ModelSpec& spec, std::uint64_t seed);

/// Validates parameter shapes against the spec. Throws ShapeError.
template <typename S>
void check_parameters(const ModelSpec& spec, const Parameters<S>& params);

/// Batched activations, channels x (batch * length). Sample b occupies
/// columns [b*length, (b+1)*length). Dense activations have length 1.
template <typename S>
struct Tensor {
  Mat<S> data;
  int channels = 0;
  int length = 0;
  int batch = 0;

  Shape shape() const { return {channels, length}; }
};

template <typename S>
Tensor<S> make_batch(std::span<const Epoch> epochs);

template <typename S>
Tensor<S> make_batch(const EpochList& epochs, std::span<const std::size_t> indices);

template <typename S>
struct LayerCache {
  Mat<S> columns;                         // conv1d im2col matrix
  std::vector<Eigen::Index> argmax;       // maxpool winner column per output element
  Mat<S> mask;                            // dropout keep mask, already scaled
};

/// Activations at every boundary of one forward pass. activations[i] is the
/// input of layer i and activations[i+1] its output. When the pass started
/// at layer `begin`, entries before it are empty.
template <typename S>
struct ForwardTrace {
  std::vector<Tensor<S>> activations;
  std::vector<LayerCache<S>> cache;
  std::size_t begin = 0;

  /// Pre-softmax outputs when the chain ends with softmax.
  const Tensor<S>& logits() const;
  const Tensor<S>& output() const { return activations.back(); }
};

/// Runs layers [begin, end) of the chain (end == 0 means all layers).
/// Dropout draws its mask from `seed` in training mode and is the identity
/// otherwise. Throws ShapeError or NumericalError.
template <typename S>
ForwardTrace<S> forward(const ModelSpec& spec, const Parameters<S>& params, const Tensor<S>& input,
                        bool training, std::uint64_t seed, std::size_t begin = 0,
                        std::size_t end = 0);

template <typename S>
struct LossResult {
  S loss = 0;          // mean cross-entropy over the batch
  Mat<S> logit_grad;   // d loss / d logits, classes x batch
  int clamped = 0;     // samples whose true-class posterior was clamped to 1e-12
};

template <typename S>
LossResult<S> loss_and_grad(const ForwardTrace<S>& trace, std::span<const int> labels);

/// Backpropagates a logit gradient. Frozen layers get zero gradients; the
/// signal still flows through them while a trainable layer lies below.
template <typename S>
Parameters<S> backward(const ModelSpec& spec, const Parameters<S>& params,
                       const ForwardTrace<S>& trace, const Mat<S>& logit_grad,
                       const FrozenMask& frozen);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Central differences (step 1e-5) on a random 1% subset of at least 50
/// parameters. Coordinates whose perturbation flips a ReLU or a maxpool
/// winner are skipped and counted.
GradCheckResult check_gradients(const ModelSpec& spec, const Parameters<double>& params,
                                const Epoch& epoch, int label, std::uint64_t seed);

enum class Optimizer { sgd, adam };

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int patience = 10;
};

struct PassRecord {
  int pass = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  Parameters<float> params;
  std::vector<PassRecord> history;
  int best_pass = 0;
};

/// Mini-batch training; returns the parameters of the pass with the lowest
/// validation loss (training loss when `val` is empty).
/// Throws NumericalError on divergence.
TrainResult train(const ModelSpec& spec, const Parameters<float>& init, const EpochList& train_set,
                  const EpochList& val_set, const TrainConfig& config, const FrozenMask& frozen);

/// Posteriors, one row per epoch, dropout disabled.
Mat<float> predict(const ModelSpec& spec, const Parameters<float>& params, const EpochList& epochs);

/// CSV `pass,train_loss,train_acc,val_loss,val_acc`.
std::string history_csv(const std::vector<PassRecord>& history);

}  // namespace ambulate::nn
