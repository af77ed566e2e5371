#include <catch2/catch_amalgamated.hpp>

#include "dyngest/network.hpp"
#include "test_util.hpp"

using namespace dyngest;
using Catch::Matchers::WithinAbs;
using dyngest::testutil::random_values;
using dyngest::testutil::tiny_config;

namespace {

// 8x8 input, one stride-2 extractor layer -> 4x4x4 features, 2x2 grid with
// 2x2 patches.
NetworkConfig micro_config() {
  NetworkConfig cfg;
  cfg.input_dims = {8, 1, 8, 8};
  cfg.feature_dims = {4, 4, 4, 4};
  cfg.grid = {2, 2};
  cfg.num_classes = 4;
  cfg.extractor_spec = {{4, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}};
  cfg.selector_spec = {2, 2};
  cfg.classifier_spec = {{8, {2, 2, 2}}};
  cfg.seed = 3;
  cfg.validate();
  return cfg;
}

Tensor<float> random_clip(const NetworkConfig& cfg, std::size_t batch,
                          std::uint64_t seed) {
  Xoshiro256 rng(seed);
  const std::size_t n =
      batch * cfg.input_dims.c * cfg.input_dims.t * cfg.input_dims.h * cfg.input_dims.w;
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.next_double());
  return Tensor<float>(
      Shape{batch, cfg.input_dims.c, cfg.input_dims.t, cfg.input_dims.h,
            cfg.input_dims.w},
      std::move(v));
}

}  // namespace

TEST_CASE("patch grid tiles the feature map exactly") {
  NetworkConfig cfg = micro_config();
  GestureNet<float> net(cfg);
  // distinct values so any mis-offset is visible
  std::vector<float> v(2 * 4 * 4 * 4 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  Tensor<float> features(Shape{2, 4, 4, 4, 4}, v);
  PatchGrid<float> grid = net.split_patches(features);
  REQUIRE(grid.m == 2);
  REQUIRE(grid.n == 2);
  REQUIRE(grid.patches.size() == 4);
  for (const auto& p : grid.patches) REQUIRE(p.shape() == Shape{2, 4, 4, 2, 2});
  // Every feature value appears in exactly one patch, at the right offset.
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t h = 0; h < 4; ++h)
          for (std::size_t w = 0; w < 4; ++w) {
            const float expect = features.data()[(((b * 4 + c) * 4 + t) * 4 + h) * 4 + w];
            const auto& patch = grid.at(h / 2, w / 2);
            const float got =
                patch.data()[(((b * 4 + c) * 4 + t) * 2 + (h % 2)) * 2 + (w % 2)];
            REQUIRE(got == expect);
          }
}

TEST_CASE("patch score layout is patch-major with row-major patch order") {
  NetworkConfig cfg = micro_config();
  GestureNet<float> net(cfg);
  auto features = net.extract_features(random_clip(cfg, 3, 77), BnMode::Train);
  auto grid = net.split_patches(features);
  auto ps = net.score_patches(grid, BnMode::Train);
  REQUIRE(ps.scores.shape() == Shape{2 * 2 * 3, 1});
  REQUIRE(ps.selected.size() == 3);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto [i, j] = ps.selected[b];
    CHECK(ps.selected_score[b] == ps.score_at(b, i, j));
    // selected really is the max
    for (std::size_t ii = 0; ii < 2; ++ii)
      for (std::size_t jj = 0; jj < 2; ++jj)
        CHECK(ps.score_at(b, ii, jj) <= ps.selected_score[b]);
    // sigmoid is monotone: the logit argmax must agree
    for (std::size_t ii = 0; ii < 2; ++ii)
      for (std::size_t jj = 0; jj < 2; ++jj)
        CHECK(ps.logit_at(b, ii, jj) <= ps.logit_at(b, i, j));
  }
}

TEST_CASE("tied scores select the first patch in row-major order") {
  NetworkConfig cfg = micro_config();
  GestureNet<float> net(cfg);
  // Zeroing the scorer head makes every patch logit identical.
  for (auto* p : net.selector_parameters())
    std::fill(p->tensor.data().begin(), p->tensor.data().end(), 0.f);
  auto features = net.extract_features(random_clip(cfg, 2, 5), BnMode::Train);
  auto ps = net.score_patches(net.split_patches(features), BnMode::Train);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(ps.selected[b] == std::pair<std::size_t, std::size_t>{0, 0});
    CHECK_THAT(ps.selected_score[b], WithinAbs(0.5, 1e-6));
  }
}

TEST_CASE("forward shapes and determinism across identically seeded models") {
  NetworkConfig cfg = tiny_config();
  GestureNet<float> a(cfg), b(cfg);
  Tensor<float> clip = random_clip(cfg, 2, 9);
  auto fa = a.forward(clip, BnMode::Train);
  auto fb = b.forward(clip, BnMode::Train);
  REQUIRE(fa.logits.shape() == Shape{2, 4});
  CHECK(fa.logits.data() == fb.logits.data());  // bitwise identical
  CHECK(fa.scores.scores.data() == fb.scores.scores.data());
  CHECK(fa.scores.selected == fb.scores.selected);
}

TEST_CASE("static pipeline classifies the full feature map") {
  NetworkConfig cfg = tiny_config();
  GestureNet<float> net(cfg);
  Tensor<float> clip = random_clip(cfg, 2, 10);
  Tensor<float> logits = net.forward_static(clip, BnMode::Train);
  CHECK(logits.shape() == Shape{2, 4});
}

TEST_CASE("classifier rejects wrong channel count") {
  GestureNet<float> net(tiny_config());
  Tensor<float> bad = Tensor<float>::zeros(Shape{1, 3, 4, 4, 4});
  CHECK_THROWS_WITH(net.classify_patch(bad, BnMode::Train),
                    Catch::Matchers::ContainsSubstring("channels"));
}

TEST_CASE("input dims are validated before feature extraction") {
  GestureNet<float> net(tiny_config());
  Tensor<float> bad = Tensor<float>::zeros(Shape{1, 1, 8, 16, 17});
  CHECK_THROWS_WITH(net.extract_features(bad, BnMode::Train),
                    Catch::Matchers::ContainsSubstring("input dims"));
}

TEST_CASE("joint loss arithmetic matches the hand-computed example") {
  // Uniform 4-class logits (CE = ln 4), two patches with scores (0.9, 0.2)
  // and labels (1, 0), weighting 2:
  // total = ln4 + 2*(-ln0.9 - ln0.8) = 2.043304 (to 1e-5)
  NetworkConfig cfg = tiny_config();
  GestureNet<float> net(cfg);
  PatchScores<float> ps;
  ps.m = 2;
  ps.n = 1;
  ps.batch = 1;
  ps.scores = Tensor<float>(Shape{2, 1}, {0.9f, 0.2f});
  Tensor<float> logits = Tensor<float>::zeros(Shape{1, 4});
  auto loss = net.compute_loss(logits, ps, {2}, {{1.f, 0.f}}, 2.f);
  CHECK_THAT(loss.total.item(), WithinAbs(2.043304, 1e-5));
  CHECK_THAT(loss.classification, WithinAbs(std::log(4.0), 1e-6));
  CHECK_THAT(loss.selection, WithinAbs(0.3285041, 1e-5));
  // breakdown additivity
  CHECK_THAT(loss.total.item(), WithinAbs(loss.classification + 2.0 * loss.selection, 1e-6));
}

TEST_CASE("loss is averaged over the batch") {
  NetworkConfig cfg = tiny_config();
  GestureNet<float> net(cfg);
  PatchScores<float> ps;
  ps.m = 2;
  ps.n = 1;
  ps.batch = 2;
  // patch-major layout: patch 0 scores for both samples, then patch 1
  ps.scores = Tensor<float>(Shape{4, 1}, {0.9f, 0.9f, 0.2f, 0.2f});
  Tensor<float> logits = Tensor<float>::zeros(Shape{2, 4});
  auto loss = net.compute_loss(logits, ps, {0, 1}, {{1.f, 0.f}, {1.f, 0.f}}, 2.f);
  // identical samples: batch mean equals the single-sample loss
  CHECK_THAT(loss.total.item(), WithinAbs(2.043304, 1e-5));
  CHECK_THROWS_AS(net.compute_loss(logits, ps, {0}, {{1.f, 0.f}}, 2.f), ConfigError);
  CHECK_THROWS_AS(net.compute_loss(logits, ps, {0, 1}, {{1.f, 0.f}, {0.f, 1.f}}, -1.f),
                  ConfigError);
}

TEST_CASE("lambda=0 sends no gradient into the patch scorer") {
  NetworkConfig cfg = tiny_config();
  GestureNet<float> net(cfg);
  Tensor<float> clip = random_clip(cfg, 2, 31);
  auto fwd = net.forward(clip, BnMode::Train);
  auto loss = net.compute_loss(fwd.logits, fwd.scores, {0, 1},
                               {{1.f, 0.f, 0.f, 0.f}, {0.f, 1.f, 0.f, 0.f}}, 0.f);
  net.zero_grad();
  backward(loss.total);
  for (auto* p : net.selector_parameters()) {
    REQUIRE(p->tensor.has_grad());
    for (const float g : p->tensor.grad()) REQUIRE(g == 0.f);
  }
  bool ext_nonzero = false, cls_nonzero = false;
  for (auto* p : net.extractor_parameters())
    for (const float g : p->tensor.grad()) ext_nonzero = ext_nonzero || g != 0.f;
  for (auto* p : net.classifier_parameters())
    for (const float g : p->tensor.grad()) cls_nonzero = cls_nonzero || g != 0.f;
  CHECK(ext_nonzero);
  CHECK(cls_nonzero);
}

TEST_CASE("selection-only loss leaves the classifier untouched") {
  NetworkConfig cfg = tiny_config();
  GestureNet<float> net(cfg);
  Tensor<float> clip = random_clip(cfg, 2, 32);
  auto fwd = net.forward(clip, BnMode::Train);
  // selection term alone (classification ablated)
  std::vector<float> flat(4 * 2, 0.f);
  flat[0] = flat[1] = 1.f;
  Tensor<float> sel = binary_cross_entropy_sum(fwd.scores.scores, flat);
  net.zero_grad();
  backward(sel);
  for (auto* p : net.classifier_parameters()) CHECK_FALSE(p->tensor.has_grad());
  bool ext_nonzero = false, sel_nonzero = false;
  for (auto* p : net.extractor_parameters()) {
    REQUIRE(p->tensor.has_grad());
    for (const float g : p->tensor.grad()) ext_nonzero = ext_nonzero || g != 0.f;
  }
  for (auto* p : net.selector_parameters()) {
    REQUIRE(p->tensor.has_grad());
    for (const float g : p->tensor.grad()) sel_nonzero = sel_nonzero || g != 0.f;
  }
  CHECK(ext_nonzero);
  CHECK(sel_nonzero);
}

TEST_CASE("patch labels from bounding boxes") {
  NetworkConfig cfg = NetworkConfig::desk_default();
  // 96x96 input -> 24x24 features, 2x3 grid, patches 12 high x 8 wide.
  SECTION("bbox inside one patch") {
    const auto l = derive_patch_labels<float>(BBox{4, 4, 20, 20}, cfg);
    CHECK(l == std::vector<float>{1, 0, 0, 0, 0, 0});
  }
  SECTION("bbox straddling two columns splits 50/50") {
    // feature x span 6..10 crosses the patch boundary at 8
    const auto l = derive_patch_labels<float>(BBox{24, 0, 16, 40}, cfg);
    CHECK(l == std::vector<float>{1, 1, 0, 0, 0, 0});
  }
  SECTION("small overlap below tau stays negative") {
    // 10% of the bbox in column 0, 90% in column 1
    const auto l = derive_patch_labels<float>(BBox{28, 0, 40, 40}, cfg);
    CHECK(l == std::vector<float>{0, 1, 0, 0, 0, 0});
  }
  SECTION("empty bbox yields all zeros") {
    const auto l = derive_patch_labels<float>(BBox{0, 0, 0, 0}, cfg);
    CHECK(l == std::vector<float>(6, 0.f));
  }
  SECTION("bbox partially off-image is clipped first") {
    const auto l = derive_patch_labels<float>(BBox{-40, -40, 60, 60}, cfg);
    CHECK(l == std::vector<float>{1, 0, 0, 0, 0, 0});
  }
  SECTION("centered bbox can light all four neighbors") {
    const auto l = derive_patch_labels<float>(BBox{24, 40, 16, 16}, cfg, 0.2);
    CHECK(l == std::vector<float>{1, 1, 0, 1, 1, 0});
  }
}

TEST_CASE("forced selection routes the chosen patch to the classifier") {
  NetworkConfig cfg = micro_config();
  GestureNet<float> net(cfg);
  Tensor<float> clip = random_clip(cfg, 1, 55);
  const std::vector<std::pair<std::size_t, std::size_t>> f00{{0, 0}}, f11{{1, 1}};
  auto a = net.forward(clip, BnMode::Train, false, f00);
  auto b = net.forward(clip, BnMode::Train, false, f11);
  CHECK(a.logits.data() != b.logits.data());  // different patches, different logits
}
