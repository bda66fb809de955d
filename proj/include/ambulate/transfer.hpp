#pragma once

#include "ambulate/dcnn_model.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace ambulate {

/// `full` (source weights, nothing frozen) is an extra baseline and only
/// parses when explicitly allowed.
enum class TransferMode { direct, fixed, end_to_end, full };

std::string_view to_string(TransferMode mode);
TransferMode transfer_mode_from_string(std::string_view name, bool allow_full = false);

struct TransferPlan {
  TransferMode mode = TransferMode::fixed;
  std::vector<std::string> source_labels;
  std::vector<std::string> target_labels;
  std::string target_name = "target";
};

/// direct: everything below the last dense layer frozen.
/// fixed: the convolutional blocks (through flatten) frozen.
/// end_to_end / full: nothing frozen.
nn::FrozenMask transfer_mask(const nn::ModelSpec& spec, TransferMode mode);

/// Swaps the output layer for a fresh dense(128 -> |target|) and attaches the
/// mode's frozen mask. end_to_end discards every source parameter.
/// Throws ShapeError.
ModelBundle apply_transfer(const ModelBundle& source, const TransferPlan& plan, std::uint64_t seed);

struct FineTuneResult {
  ModelBundle bundle;
  std::vector<nn::PassRecord> history;
  int best_pass = 0;
};

FineTuneResult fine_tune(const ModelBundle& bundle, const EpochList& train_set,
                         const EpochList& val_set, const nn::TrainConfig& config);

}  // namespace ambulate
