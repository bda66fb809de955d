#include "ambulate/dcnn_model.hpp"
#include "ambulate/error.hpp"
#include "ambulate/random.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>

using namespace ambulate;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kHar = {"walking", "stairs", "sitting", "standing", "laying"};

EpochList random_epochs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  EpochList out(n);
  for (auto& e : out) {
    for (int c = 0; c < kEpochChannels; ++c)
      for (int i = 0; i < kEpochLength; ++i) e.data(c, i) = static_cast<float>(rng.normal());
  }
  return out;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ambulate_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("default architecture") {
  const auto b = build_default_dcnn(kHar, 3);
  CHECK(b.spec.size() == 15);
  CHECK(b.spec[13].out_dim == 5);

  // conv 4*32*9+32, 32*64*5+64, 64*64*3+64; dense 832*128+128, 128*5+5
  const std::size_t by_hand = 1184 + 10304 + 12352 + 106624 + 645;
  CHECK(by_hand == 131109);
  CHECK(nn::parameter_count(b.params) == by_hand);
  CHECK(default_dcnn_parameter_count(5) == by_hand);
  CHECK(default_dcnn_parameter_count(3) == 130464 + 3 * 129);

  const auto again = build_default_dcnn(kHar, 3);
  for (std::size_t i = 0; i < b.params.size(); ++i) {
    CHECK(b.params[i].weight == again.params[i].weight);
    CHECK(b.params[i].bias.isZero(0.0));
  }
  CHECK_THROWS_AS(build_default_dcnn({"only"}, 1), Error);
}

TEST_CASE("default DCNN gradients match finite differences") {
  const auto spec = default_dcnn_spec(3);
  auto p = nn::he_uniform_parameters<double>(spec, 5);
  // small nonzero biases so bias gradients are exercised away from zero
  Rng rng(11);
  for (auto& l : p)
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = 0.01 * rng.normal();
  const auto e = random_epochs(1, 8).front();
  const auto r = nn::check_gradients(spec, p, e, 2, 4);
  CHECK(r.checked >= 50);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("save and load") {
  auto b = build_default_dcnn(kHar, 9);
  b.provenance = {"ucihar", "fixed", "abc123"};
  b.frozen = {true, true, true, true, true, true, true, true, true, true, false, false, false, false, false};
  const auto dir = scratch("model_rt");
  save_model(b, dir);

  SUBCASE("round trip is exact") {
    const auto l = load_model(dir);
    CHECK(l.spec == b.spec);
    CHECK(l.label_space == b.label_space);
    CHECK(l.provenance == b.provenance);
    CHECK(l.frozen == b.frozen);
    const auto x = random_epochs(7, 2);
    const auto p0 = nn::predict(b.spec, b.params, x);
    const auto p1 = nn::predict(l.spec, l.params, x);
    CHECK(p0 == p1);
  }
  SUBCASE("byte output depends only on contents") {
    const auto dir2 = scratch("model_rt2");
    save_model(load_model(dir), dir2);
    auto slurp = [](const fs::path& f) {
      std::ifstream in(f, std::ios::binary);
      return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(dir / "weights.bin") == slurp(dir2 / "weights.bin"));
    CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
    fs::remove_all(dir2);
  }
  SUBCASE("truncated weights") {
    fs::resize_file(dir / "weights.bin", fs::file_size(dir / "weights.bin") - 4);
    try {
      load_model(dir);
      FAIL("expected CorruptModel");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::CorruptModel);
    }
  }
  SUBCASE("flipped byte") {
    {
      std::fstream f(dir / "weights.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(100);
      f.put('\x7f');
    }
    try {
      load_model(dir);
      FAIL("expected CorruptModel");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::CorruptModel);
    }
  }
  SUBCASE("edited shape") {
    nlohmann::json m;
    {
      std::ifstream in(dir / "manifest.json");
      m = nlohmann::json::parse(in);
    }
    m["tensors"][0]["shape"] = {32, 4, 8};
    {
      std::ofstream out(dir / "manifest.json");
      out << m.dump(2);
    }
    try {
      load_model(dir);
      FAIL("expected ShapeError");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::ShapeError);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("fnv1a64 reference values") {
  const std::string empty;
  const std::string a = "a";
  CHECK(fnv1a64({reinterpret_cast<const unsigned char*>(empty.data()), 0}) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64({reinterpret_cast<const unsigned char*>(a.data()), 1}) == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("describe lists every layer and the total") {
  const auto b = build_default_dcnn(kHar, 1);
  const auto s = describe_model(b);
  CHECK(s.find("total parameters: 131109") != std::string::npos);
  CHECK(s.find("conv1d") != std::string::npos);
}
