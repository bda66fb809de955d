#pragma once

#include "ambulate/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ambulate {

struct Provenance {
  std::string source_dataset;
  std::string transfer_mode = "none";
  std::string config_hash;

  bool operator==(const Provenance&) const = default;
};

/// A network plus everything needed to use it on its own: architecture,
/// weights, class names, and the layers fine-tuning must not touch.
struct ModelBundle {
  nn::ModelSpec spec;
  nn::Parameters<float> params;
  std::vector<std::string> label_space;
  Provenance provenance;
  nn::FrozenMask frozen;
};

/// conv(4->32,k9) relu pool | conv(32->64,k5) relu pool | conv(64->64,k3) relu pool |
/// flatten | dense(832->128) relu dropout(0.5) | dense(128->n) softmax
nn::ModelSpec default_dcnn_spec(int n_classes);

/// Parameter count of the default architecture: 130464 + 129 * n_classes.
std::size_t default_dcnn_parameter_count(int n_classes);

ModelBundle build_default_dcnn(const std::vector<std::string>& label_space, std::uint64_t seed);

/// Checks the bundle invariants: 4x128 input, output width = |label_space|,
/// parameter shapes, mask length. Throws ShapeError.
void validate_bundle(const ModelBundle& bundle);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const unsigned char> bytes);

/// Writes manifest.json and weights.bin (little-endian float32, layers in
/// order, weight then bias, row-major).
void save_model(const ModelBundle& bundle, const std::filesystem::path& dir);

/// Throws CorruptModel on checksum/size mismatch, ShapeError on manifest
/// shapes that disagree with the architecture.
ModelBundle load_model(const std::filesystem::path& dir);

/// Human-readable layer table with per-layer and total parameter counts.
std::string describe_model(const ModelBundle& bundle);

}  // namespace ambulate
