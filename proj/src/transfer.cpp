#include "ambulate/transfer.hpp"

#include "ambulate/error.hpp"

namespace ambulate {

std::string_view to_string(TransferMode mode) {
  switch (mode) {
    case TransferMode::direct: return "direct";
    case TransferMode::fixed: return "fixed";
    case TransferMode::end_to_end: return "end_to_end";
    case TransferMode::full: return "full";
  }
  return "unknown";
}

TransferMode transfer_mode_from_string(std::string_view name, bool allow_full) {
  if (name == "direct") return TransferMode::direct;
  if (name == "fixed") return TransferMode::fixed;
  if (name == "end_to_end") return TransferMode::end_to_end;
  if (name == "full") {
    if (!allow_full) throw Error(ErrorKind::SpecError, "mode 'full' needs the extra-modes flag");
    return TransferMode::full;
  }
  throw Error(ErrorKind::SpecError, "unknown transfer mode '" + std::string(name) + "'");
}

namespace {

std::size_t last_dense(const nn::ModelSpec& spec) {
  for (std::size_t i = spec.size(); i-- > 0;) {
    if (spec[i].kind == nn::LayerKind::dense) return i;
  }
  throw Error(ErrorKind::ShapeError, "model has no dense layer");
}

std::size_t first_dense(const nn::ModelSpec& spec) {
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (spec[i].kind == nn::LayerKind::dense) return i;
  }
  throw Error(ErrorKind::ShapeError, "model has no dense layer");
}

}  // namespace

nn::FrozenMask transfer_mask(const nn::ModelSpec& spec, TransferMode mode) {
  nn::FrozenMask mask(spec.size(), false);
  std::size_t boundary = 0;
  switch (mode) {
    case TransferMode::direct: boundary = last_dense(spec); break;
    case TransferMode::fixed: boundary = first_dense(spec); break;
    case TransferMode::end_to_end:
    case TransferMode::full: boundary = 0; break;
  }
  for (std::size_t i = 0; i < boundary; ++i) mask[i] = true;
  return mask;
}

ModelBundle apply_transfer(const ModelBundle& source, const TransferPlan& plan, std::uint64_t seed) {
  validate_bundle(source);
  if (source.label_space != plan.source_labels) {
    throw Error(ErrorKind::ShapeError, "source model label space differs from the plan");
  }
  if (source.spec != default_dcnn_spec(static_cast<int>(source.label_space.size()))) {
    throw Error(ErrorKind::ShapeError, "transfer expects the default architecture");
  }
  if (plan.target_labels.size() < 2) {
    throw Error(ErrorKind::ShapeError, "target label space needs at least 2 classes");
  }

  ModelBundle out;
  out.spec = default_dcnn_spec(static_cast<int>(plan.target_labels.size()));
  out.label_space = plan.target_labels;
  const auto fresh = nn::he_uniform_parameters<float>(out.spec, seed);
  if (plan.mode == TransferMode::end_to_end) {
    out.params = fresh;
  } else {
    out.params = source.params;
    const auto head = last_dense(out.spec);
    out.params[head] = fresh[head];
  }
  out.frozen = transfer_mask(out.spec, plan.mode);
  out.provenance.source_dataset = source.provenance.source_dataset + "->" + plan.target_name;
  out.provenance.transfer_mode = std::string(to_string(plan.mode));
  out.provenance.config_hash = source.provenance.config_hash;
  validate_bundle(out);
  return out;
}

FineTuneResult fine_tune(const ModelBundle& bundle, const EpochList& train_set,
                         const EpochList& val_set, const nn::TrainConfig& config) {
  validate_bundle(bundle);
  auto r = nn::train(bundle.spec, bundle.params, train_set, val_set, config, bundle.frozen);
  FineTuneResult out{bundle, std::move(r.history), r.best_pass};
  out.bundle.params = std::move(r.params);
  return out;
}

}  // namespace ambulate
