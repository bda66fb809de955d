#include "ambulate/dcnn_model.hpp"

#include "ambulate/error.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ambulate {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "weights.bin is written by reinterpreting float memory");

nn::ModelSpec default_dcnn_spec(int n_classes) {
  using nn::LayerSpec;
  return {
      LayerSpec::conv1d(4, 32, 9),  LayerSpec::relu(), LayerSpec::maxpool1d(),
      LayerSpec::conv1d(32, 64, 5), LayerSpec::relu(), LayerSpec::maxpool1d(),
      LayerSpec::conv1d(64, 64, 3), LayerSpec::relu(), LayerSpec::maxpool1d(),
      LayerSpec::flatten(),
      LayerSpec::dense(64 * 13, 128), LayerSpec::relu(), LayerSpec::dropout(0.5),
      LayerSpec::dense(128, n_classes), LayerSpec::softmax(),
  };
}

std::size_t default_dcnn_parameter_count(int n_classes) {
  const std::size_t n = static_cast<std::size_t>(n_classes);
  return (32 * 4 * 9 + 32) + (64 * 32 * 5 + 64) + (64 * 64 * 3 + 64) + (832 * 128 + 128) +
         (128 * n + n);
}

ModelBundle build_default_dcnn(const std::vector<std::string>& label_space, std::uint64_t seed) {
  if (label_space.size() < 2) throw Error(ErrorKind::SpecError, "need at least 2 classes");
  ModelBundle b;
  b.spec = default_dcnn_spec(static_cast<int>(label_space.size()));
  b.params = nn::he_uniform_parameters<float>(b.spec, seed);
  b.label_space = label_space;
  b.frozen.assign(b.spec.size(), false);
  return b;
}

void validate_bundle(const ModelBundle& bundle) {
  const auto shapes = nn::infer_shapes(bundle.spec, nn::kEpochShape);
  if (bundle.spec.empty() || bundle.spec.back().kind != nn::LayerKind::softmax) {
    throw Error(ErrorKind::ShapeError, "model must end with softmax");
  }
  if (shapes.back().channels != static_cast<int>(bundle.label_space.size())) {
    throw Error(ErrorKind::ShapeError, "output width does not match label space");
  }
  nn::check_parameters(bundle.spec, bundle.params);
  if (bundle.frozen.size() != bundle.spec.size()) {
    throw Error(ErrorKind::ShapeError, "frozen mask length does not match layer count");
  }
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

json layer_to_json(const nn::LayerSpec& l) {
  json j;
  j["kind"] = std::string(nn::to_string(l.kind));
  switch (l.kind) {
    case nn::LayerKind::conv1d:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel_size"] = l.kernel_size;
      break;
    case nn::LayerKind::maxpool1d:
      j["pool"] = l.pool;
      j["stride"] = l.stride;
      break;
    case nn::LayerKind::dense:
      j["in_dim"] = l.in_dim;
      j["out_dim"] = l.out_dim;
      break;
    case nn::LayerKind::dropout:
      j["rate"] = l.rate;
      break;
    default:
      break;
  }
  return j;
}

nn::LayerSpec layer_from_json(const json& j) {
  const auto kind = nn::layer_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case nn::LayerKind::conv1d:
      return nn::LayerSpec::conv1d(j.at("in_channels"), j.at("out_channels"), j.at("kernel_size"));
    case nn::LayerKind::relu:
      return nn::LayerSpec::relu();
    case nn::LayerKind::maxpool1d:
      return nn::LayerSpec::maxpool1d(j.at("pool"), j.at("stride"));
    case nn::LayerKind::flatten:
      return nn::LayerSpec::flatten();
    case nn::LayerKind::dense:
      return nn::LayerSpec::dense(j.at("in_dim"), j.at("out_dim"));
    case nn::LayerKind::dropout:
      return nn::LayerSpec::dropout(j.at("rate"));
    case nn::LayerKind::softmax:
      return nn::LayerSpec::softmax();
  }
  throw Error(ErrorKind::ShapeError, "unknown layer");
}

std::vector<std::int64_t> weight_shape(const nn::LayerSpec& l) {
  if (l.kind == nn::LayerKind::conv1d) return {l.out_channels, l.in_channels, l.kernel_size};
  return {l.out_dim, l.in_dim};
}

std::vector<std::int64_t> bias_shape(const nn::LayerSpec& l) {
  return {l.kind == nn::LayerKind::conv1d ? l.out_channels : l.out_dim};
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void append_floats(std::vector<unsigned char>& out, const float* data, std::size_t n) {
  const auto* p = reinterpret_cast<const unsigned char*>(data);
  out.insert(out.end(), p, p + n * sizeof(float));
}

}  // namespace

void save_model(const ModelBundle& bundle, const fs::path& dir) {
  validate_bundle(bundle);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());

  std::vector<unsigned char> blob;
  json tensors = json::array();
  for (std::size_t i = 0; i < bundle.spec.size(); ++i) {
    const auto& l = bundle.spec[i];
    if (!l.has_params()) continue;
    const auto& p = bundle.params[i];
    tensors.push_back({{"layer", i}, {"name", "weight"}, {"shape", weight_shape(l)},
                       {"offset", blob.size()}, {"bytes", p.weight.size() * sizeof(float)}});
    append_floats(blob, p.weight.data(), static_cast<std::size_t>(p.weight.size()));
    tensors.push_back({{"layer", i}, {"name", "bias"}, {"shape", bias_shape(l)},
                       {"offset", blob.size()}, {"bytes", p.bias.size() * sizeof(float)}});
    append_floats(blob, p.bias.data(), static_cast<std::size_t>(p.bias.size()));
  }

  json manifest;
  manifest["format"] = "ambulate-model";
  manifest["version"] = 1;
  manifest["layers"] = json::array();
  for (const auto& l : bundle.spec) manifest["layers"].push_back(layer_to_json(l));
  manifest["label_space"] = bundle.label_space;
  manifest["provenance"] = {{"source_dataset", bundle.provenance.source_dataset},
                            {"transfer_mode", bundle.provenance.transfer_mode},
                            {"config_hash", bundle.provenance.config_hash}};
  manifest["frozen"] = std::vector<bool>(bundle.frozen.begin(), bundle.frozen.end());
  manifest["tensors"] = tensors;
  manifest["weights_bytes"] = blob.size();
  manifest["weights_fnv1a64"] = hex64(fnv1a64(blob));

  std::ofstream wf(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  wf.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  if (!wf || !mf) throw Error(ErrorKind::IoError, "failed writing model to " + dir.string());
}

ModelBundle load_model(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw Error(ErrorKind::IoError, "cannot read " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::CorruptModel, std::string("manifest is not valid JSON: ") + e.what());
  }

  std::ifstream wf(dir / "weights.bin", std::ios::binary);
  if (!wf) throw Error(ErrorKind::CorruptModel, "missing weights.bin");
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());

  ModelBundle b;
  try {
    if (blob.size() != manifest.at("weights_bytes").get<std::size_t>() ||
        hex64(fnv1a64(blob)) != manifest.at("weights_fnv1a64").get<std::string>()) {
      throw Error(ErrorKind::CorruptModel, "weights.bin does not match its manifest checksum");
    }
    for (const auto& lj : manifest.at("layers")) b.spec.push_back(layer_from_json(lj));
    b.label_space = manifest.at("label_space").get<std::vector<std::string>>();
    const auto& pj = manifest.at("provenance");
    b.provenance = {pj.at("source_dataset"), pj.at("transfer_mode"), pj.at("config_hash")};
    const auto frozen = manifest.at("frozen").get<std::vector<bool>>();
    b.frozen.assign(frozen.begin(), frozen.end());
    b.params = nn::zero_parameters<float>(b.spec);

    for (const auto& tj : manifest.at("tensors")) {
      const auto layer = tj.at("layer").get<std::size_t>();
      const auto name = tj.at("name").get<std::string>();
      const auto shape = tj.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = tj.at("offset").get<std::size_t>();
      const auto bytes = tj.at("bytes").get<std::size_t>();
      if (layer >= b.spec.size() || !b.spec[layer].has_params()) {
        throw Error(ErrorKind::ShapeError, "tensor refers to a layer without parameters");
      }
      const bool is_weight = name == "weight";
      if (!is_weight && name != "bias") throw Error(ErrorKind::ShapeError, "unknown tensor " + name);
      const auto expected = is_weight ? weight_shape(b.spec[layer]) : bias_shape(b.spec[layer]);
      if (shape != expected) {
        throw Error(ErrorKind::ShapeError,
                    "tensor " + name + " of layer " + std::to_string(layer) + " has wrong shape");
      }
      float* dst = is_weight ? b.params[layer].weight.data() : b.params[layer].bias.data();
      const auto n = static_cast<std::size_t>(is_weight ? b.params[layer].weight.size()
                                                        : b.params[layer].bias.size());
      if (bytes != n * sizeof(float) || offset + bytes > blob.size()) {
        throw Error(ErrorKind::CorruptModel, "tensor extends past weights.bin");
      }
      std::memcpy(dst, blob.data() + offset, bytes);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::CorruptModel, std::string("malformed manifest: ") + e.what());
  }
  validate_bundle(b);
  return b;
}

std::string describe_model(const ModelBundle& bundle) {
  const auto shapes = nn::infer_shapes(bundle.spec, nn::kEpochShape);
  std::ostringstream os;
  os << "layer  kind        output      params  frozen\n";
  std::size_t total = 0;
  for (std::size_t i = 0; i < bundle.spec.size(); ++i) {
    const auto n = static_cast<std::size_t>(bundle.params[i].size());
    total += n;
    os << std::setw(5) << i << "  " << std::left << std::setw(10) << nn::to_string(bundle.spec[i].kind)
       << std::right << std::setw(5) << shapes[i + 1].channels << "x" << std::left << std::setw(5)
       << shapes[i + 1].length << std::right << std::setw(9) << n << "  "
       << (bundle.frozen[i] ? "yes" : "no") << '\n';
  }
  os << "total parameters: " << total << '\n';
  os << "classes: ";
  for (std::size_t i = 0; i < bundle.label_space.size(); ++i) {
    os << (i ? ", " : "") << bundle.label_space[i];
  }
  os << "\nsource: " << bundle.provenance.source_dataset
     << "  transfer: " << bundle.provenance.transfer_mode << '\n';
  return os.str();
}

}  // namespace ambulate
