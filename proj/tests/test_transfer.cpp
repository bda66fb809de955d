#include "ambulate/datasets.hpp"
#include "ambulate/error.hpp"
#include "ambulate/transfer.hpp"

#include <doctest.h>

using namespace ambulate;

namespace {

const std::vector<std::string> kSource = {"walking", "stairs", "sitting", "standing", "laying"};
const std::vector<std::string> kTarget = {"HC", "PwMSmild", "PwMSmod"};

ModelBundle source_model() {
  auto b = build_default_dcnn(kSource, 31);
  // nonzero biases so "copied" is distinguishable from "freshly initialized"
  for (auto& l : b.params) l.bias.setConstant(0.01f);
  b.provenance.source_dataset = "ucihar";
  return b;
}

Dataset tiny_target(int subjects_per_class) {
  auto s = default_synth_spec();
  for (auto& c : s.classes) c.subjects = subjects_per_class;
  s.tests_per_subject = 2;
  return generate_synthetic_cohort(s);
}

bool same(const nn::LayerParams<float>& a, const nn::LayerParams<float>& b) {
  return a.weight == b.weight && a.bias == b.bias;
}

// Output of the flatten layer: the convolutional feature vector.
nn::Mat<float> conv_features(const ModelBundle& b, const Epoch& e) {
  const std::vector<Epoch> one{e};
  const auto t = nn::forward(b.spec, b.params, nn::make_batch<float>(std::span<const Epoch>(one)),
                             false, 0);
  return t.activations[10].data;
}

}  // namespace

TEST_CASE("mode masks") {
  const auto spec = default_dcnn_spec(3);
  const auto direct = transfer_mask(spec, TransferMode::direct);
  const auto fixed = transfer_mask(spec, TransferMode::fixed);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    CHECK(direct[i] == (i < 13));
    CHECK(fixed[i] == (i < 10));
    CHECK(!transfer_mask(spec, TransferMode::end_to_end)[i]);
    CHECK(!transfer_mask(spec, TransferMode::full)[i]);
  }
  CHECK(spec[13].kind == nn::LayerKind::dense);
  CHECK(spec[10].kind == nn::LayerKind::dense);
  CHECK(transfer_mode_from_string("fixed") == TransferMode::fixed);
  CHECK_THROWS_AS(transfer_mode_from_string("full"), Error);
  CHECK(transfer_mode_from_string("full", true) == TransferMode::full);
  CHECK_THROWS_AS(transfer_mode_from_string("partial", true), Error);
}

TEST_CASE("apply_transfer") {
  const auto src = source_model();
  SUBCASE("direct copies everything but the head") {
    const auto t = apply_transfer(src, {TransferMode::direct, kSource, {"a", "b"}, "toy"}, 5);
    CHECK(t.spec[13].out_dim == 2);
    for (std::size_t i = 0; i < 13; ++i) CHECK(same(t.params[i], src.params[i]));
    CHECK(t.params[13].bias.isZero(0.0f));
    CHECK(t.provenance.source_dataset == "ucihar->toy");
    CHECK(t.provenance.transfer_mode == "direct");
  }
  SUBCASE("end_to_end starts from a fresh model") {
    const auto t = apply_transfer(src, {TransferMode::end_to_end, kSource, kTarget}, 5);
    const auto fresh = nn::he_uniform_parameters<float>(t.spec, 5);
    for (std::size_t i = 0; i < t.params.size(); ++i) {
      CHECK(same(t.params[i], fresh[i]));
      if (!t.params[i].empty()) CHECK(!same(t.params[i], src.params[i]));
    }
  }
  SUBCASE("full keeps source weights but freezes nothing") {
    const auto t = apply_transfer(src, {TransferMode::full, kSource, kTarget}, 5);
    CHECK(same(t.params[0], src.params[0]));
    CHECK(std::none_of(t.frozen.begin(), t.frozen.end(), [](bool f) { return f; }));
  }
  SUBCASE("label space conflict") {
    CHECK_THROWS_AS(apply_transfer(src, {TransferMode::fixed, kTarget, kTarget}, 1), Error);
    auto odd = src;
    odd.spec[0] = nn::LayerSpec::conv1d(4, 32, 7);
    CHECK_THROWS_AS(apply_transfer(odd, {TransferMode::fixed, kSource, kTarget}, 1), Error);
  }
}

TEST_CASE("fine_tune honours the mask") {
  const auto src = source_model();
  const auto target = tiny_target(2);
  nn::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;

  SUBCASE("fixed: conv blocks bitwise equal, dense layers move") {
    const auto t = apply_transfer(src, {TransferMode::fixed, kSource, kTarget}, 2);
    const auto r = fine_tune(t, target.epochs, {}, cfg);
    for (std::size_t i = 0; i < 10; ++i) CHECK(same(r.bundle.params[i], t.params[i]));
    CHECK(!same(r.bundle.params[10], t.params[10]));
    CHECK(!same(r.bundle.params[13], t.params[13]));
  }
  SUBCASE("direct: probe features identical before and after") {
    const auto t = apply_transfer(src, {TransferMode::direct, kSource, kTarget}, 2);
    const auto r = fine_tune(t, target.epochs, {}, cfg);
    const auto& probe = target.epochs[7];
    CHECK(conv_features(t, probe) == conv_features(r.bundle, probe));
    CHECK(same(r.bundle.params[10], t.params[10]));
    CHECK(!same(r.bundle.params[13], t.params[13]));
  }
  SUBCASE("zero passes leave the bundle unchanged") {
    const auto t = apply_transfer(src, {TransferMode::fixed, kSource, kTarget}, 2);
    cfg.epochs = 0;
    const auto r = fine_tune(t, target.epochs, {}, cfg);
    for (std::size_t i = 0; i < t.params.size(); ++i) CHECK(same(r.bundle.params[i], t.params[i]));
  }
}

TEST_CASE("end_to_end on a tiny target overfits") {
  // two subjects per class: one for training, one held out
  const auto target = tiny_target(2);
  EpochList train, val;
  for (const auto& e : target.epochs) (e.subject_id.ends_with("_001") ? train : val).push_back(e);
  const auto t = apply_transfer(source_model(), {TransferMode::end_to_end, kSource, kTarget}, 3);
  nn::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.patience = 30;
  const auto r = fine_tune(t, train, val, cfg);
  REQUIRE(!r.history.empty());
  double best_train = 0.0, best_val = 0.0;
  for (const auto& h : r.history) {
    best_train = std::max(best_train, h.train_acc);
    best_val = std::max(best_val, h.val_acc);
  }
  MESSAGE("train acc " << best_train << ", held-out acc " << best_val);
  CHECK(best_train >= best_val);
}
