#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dyngest/evaluator.hpp"
#include "dyngest/stream.hpp"
#include "dyngest/trainer.hpp"
#include "test_util.hpp"

using namespace dyngest;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.input_dims = {8, 3, 64, 64};
  cfg.feature_dims = {4, 4, 32, 32};
  cfg.grid = {2, 2};
  cfg.num_classes = 10;
  cfg.extractor_spec = {{4, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}};
  cfg.selector_spec = {2, 2};
  cfg.classifier_spec = {{8, {2, 2, 2}}};
  cfg.seed = 11;
  cfg.validate();
  return cfg;
}

const fs::path& eval_dataset(double near_fraction = 0.5) {
  static std::map<double, fs::path> cache;
  auto it = cache.find(near_fraction);
  if (it == cache.end()) {
    const fs::path dir = fs::temp_directory_path() /
                         ("dyngest_eval_ds_" + std::to_string(near_fraction));
    fs::remove_all(dir);
    DatasetParams p;
    p.num_clips = 30;
    p.frames = 8;
    p.height = p.width = 64;
    p.seed = 33;
    p.near_fraction = near_fraction;
    generate_dataset(dir, p);
    it = cache.emplace(near_fraction, dir).first;
  }
  return it->second;
}

// An untrained model still needs one training-mode pass so eval-mode
// batchnorm has running statistics.
GestureNet<float>& warmed_model() {
  static GestureNet<float>* model = [] {
    auto* m = new GestureNet<float>(small_config());
    Dataset ds(eval_dataset());
    auto batch = make_batch<float>(ds, {0, 1, 2, 3}, m->config());
    m->forward(batch.clips, BnMode::Train);
    m->forward_static(batch.clips, BnMode::Train);
    return m;
  }();
  return *model;
}

}  // namespace

TEST_CASE("top-1 accuracy") {
  CHECK(top1_accuracy({1, 2, 3, 4}, {1, 2, 0, 4}) == 0.75);
  CHECK(top1_accuracy({0}, {0}) == 1.0);
  CHECK_THROWS_AS(top1_accuracy({}, {}), ConfigError);
  CHECK_THROWS_AS(top1_accuracy({1}, {1, 2}), ConfigError);
}

TEST_CASE("per-class accuracy skips zero-support classes") {
  const auto pc = per_class_accuracy({0, 0, 1, 2}, {0, 1, 1, 2}, 4);
  CHECK_THAT(pc.at(0), WithinAbs(1.0, 1e-12));
  CHECK_THAT(pc.at(1), WithinAbs(0.5, 1e-12));
  CHECK_THAT(pc.at(2), WithinAbs(1.0, 1e-12));
  CHECK(pc.count(3) == 0);  // absent, not 0/0
  CHECK_THROWS_AS(per_class_accuracy({0}, {7}, 4), ConfigError);
}

TEST_CASE("flop report separates blocks and is a pure function of config") {
  const NetworkConfig cfg = small_config();
  FlopReport a = flop_report(cfg);
  FlopReport b = flop_report(cfg);
  CHECK(a.dynamic_total == b.dynamic_total);
  CHECK(a.static_total == b.static_total);
  CHECK(a.dynamic_macs("extractor") == a.static_macs("extractor"));
  CHECK(a.dynamic_macs("selector") > 0);
  CHECK(a.static_macs("selector") == 0);  // baseline never runs the scorer
  CHECK(a.dynamic_total ==
        a.dynamic_macs("extractor") + a.dynamic_macs("selector") +
            a.dynamic_macs("classifier"));
  CHECK_THAT(FlopReport::gflops(500000000), WithinAbs(1.0, 1e-12));  // 2 FLOPs/MAC
}

TEST_CASE("classifier cost scales with the patch-count savings factor") {
  NetworkConfig cfg = small_config();
  const auto r22 = flop_report(cfg);
  const double ratio22 = static_cast<double>(r22.static_macs("classifier")) /
                         static_cast<double>(r22.dynamic_macs("classifier"));
  // savings factor m*n = 4, within 10%
  CHECK(ratio22 > 0.9 * 4);
  CHECK(ratio22 < 1.1 * 4);

  cfg.grid = {1, 1};  // degenerate grid: the "patch" is the whole feature map
  const auto r11 = flop_report(cfg);
  CHECK(r11.dynamic_macs("classifier") == r11.static_macs("classifier"));
}

TEST_CASE("evaluation report on a real dataset") {
  Dataset ds(eval_dataset());
  auto& model = warmed_model();
  std::vector<std::size_t> all(ds.manifest().clips.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  EvalReport r = evaluate(model, ds, all, 8);
  CHECK(r.total_windows == all.size());
  CHECK(r.top1 >= 0.0);
  CHECK(r.top1 <= 1.0);
  std::size_t support = 0;
  for (const auto& [c, s] : r.per_class_support) support += s;
  CHECK(support == all.size());
  std::size_t dist_support = 0;
  for (const auto& [tag, s] : r.distance_support) dist_support += s;
  CHECK(dist_support == all.size());
  if (r.distance_bins.count("near") && r.distance_bins.count("far") &&
      r.distance_bins.at("near") > 0) {
    REQUIRE(r.relative_deterioration.has_value());
    const double expect = (r.distance_bins.at("near") - r.distance_bins.at("far")) /
                          r.distance_bins.at("near") * 100.0;
    CHECK_THAT(*r.relative_deterioration, WithinAbs(expect, 1e-12));
  }
  CHECK_THROWS_AS(evaluate(model, ds, {}, 8), ConfigError);
}

TEST_CASE("deterioration is absent when a distance bin is missing") {
  Dataset ds(eval_dataset(1.0));  // all near
  auto& model = warmed_model();
  std::vector<std::size_t> all(ds.manifest().clips.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  EvalReport r = evaluate(model, ds, all, 8);
  CHECK(r.distance_bins.count("far") == 0);
  CHECK_FALSE(r.relative_deterioration.has_value());
  std::ostringstream text;
  write_report_text(text, r);
  CHECK_THAT(text.str(), ContainsSubstring("absent"));
}

TEST_CASE("report files carry the contract fields") {
  Dataset ds(eval_dataset());
  auto& model = warmed_model();
  EvalReport r = evaluate(model, ds, ds.test_indices(), 8);
  const fs::path dir = fs::temp_directory_path() / "dyngest_eval_out";
  fs::create_directories(dir);
  write_report_csv(dir / "report.csv", r);
  std::ifstream is(dir / "report.csv");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  for (const char* key : {"metric,value", "pipeline,dynamic", "top1,",
                          "selection_accuracy,", "dynamic_macs,", "static_macs,",
                          "dynamic_gflops,"})
    CHECK_THAT(text, ContainsSubstring(key));

  emit_plot_data(dir, r);
  std::ifstream pf(dir / "accuracy_vs_flops.csv");
  std::string ptext((std::istreambuf_iterator<char>(pf)), std::istreambuf_iterator<char>());
  CHECK_THAT(ptext, ContainsSubstring("pipeline,gflops,top1"));
  std::ifstream df(dir / "accuracy_vs_distance.csv");
  std::string dtext((std::istreambuf_iterator<char>(df)), std::istreambuf_iterator<char>());
  CHECK_THAT(dtext, ContainsSubstring("distance,top1"));
  fs::remove_all(dir);
}

TEST_CASE("assemble_batch validates clip sizes against the config") {
  Dataset ds(eval_dataset());
  CHECK_THROWS_WITH(assemble_batch<float>(ds, {0}, Dims4{8, 1, 64, 64}),
                    ContainsSubstring("does not match"));
}

TEST_CASE("sliding window enumeration") {
  using W = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(sliding_windows(32, 16, 16) == W{{0, 16}, {16, 32}});
  CHECK(sliding_windows(16, 16, 1) == W{{0, 16}});
  CHECK(sliding_windows(20, 16, 2) == W{{0, 16}, {2, 18}, {4, 20}});
  CHECK_THROWS_WITH(sliding_windows(10, 16, 1),
                    ContainsSubstring("stream shorter than window"));
  CHECK_THROWS_AS(sliding_windows(32, 16, 0), ConfigError);
}

TEST_CASE("stream inference equals batch evaluation window by window") {
  Dataset ds(eval_dataset());
  auto& model = warmed_model();
  const auto& cfg = model.config();
  const std::size_t C = 3, T = 8, H = 64, W = 64;

  // stream = clip 0 followed by clip 1, per channel
  const auto v0 = ds.load_values(0);
  const auto v1 = ds.load_values(1);
  const std::size_t L = 2 * T;
  std::vector<float> stream(C * L * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    std::copy(v0.begin() + c * T * H * W, v0.begin() + (c + 1) * T * H * W,
              stream.begin() + c * L * H * W);
    std::copy(v1.begin() + c * T * H * W, v1.begin() + (c + 1) * T * H * W,
              stream.begin() + (c * L + T) * H * W);
  }

  for (const std::size_t stride : {std::size_t(2), std::size_t(4), std::size_t(8)}) {
    auto preds = infer_stream(model, stream, L, stride);
    const auto windows = sliding_windows(L, T, stride);
    REQUIRE(preds.size() == windows.size());
    for (std::size_t k = 0; k < windows.size(); ++k) {
      const auto [start, end] = windows[k];
      CHECK(preds[k].start == start);
      CHECK(preds[k].end == end);
      // independently evaluate the same window
      std::vector<float> win(C * T * H * W);
      for (std::size_t c = 0; c < C; ++c)
        std::copy(stream.begin() + (c * L + start) * H * W,
                  stream.begin() + (c * L + end) * H * W,
                  win.begin() + c * T * H * W);
      Tensor<float> clip(Shape{1, C, T, H, W}, std::move(win));
      auto fwd = model.forward(clip, BnMode::Eval);
      Tensor<float> probs = softmax(fwd.logits);
      int best = 0;
      for (std::size_t i = 1; i < cfg.num_classes; ++i)
        if (probs.data()[i] > probs.data()[best]) best = static_cast<int>(i);
      CHECK(preds[k].predicted_class == best);
      for (std::size_t i = 0; i < cfg.num_classes; ++i)
        CHECK(preds[k].probabilities[i] == static_cast<double>(probs.data()[i]));
      CHECK(preds[k].sel_i == fwd.scores.selected[0].first);
      CHECK(preds[k].sel_j == fwd.scores.selected[0].second);
    }
  }
}

TEST_CASE("stream windows are stateless: duplicated stream repeats predictions") {
  Dataset ds(eval_dataset());
  auto& model = warmed_model();
  const std::size_t C = 3, T = 8, H = 64, W = 64;
  const auto v0 = ds.load_values(2);
  const std::size_t L = 2 * T;
  std::vector<float> stream(C * L * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (int rep = 0; rep < 2; ++rep)
      std::copy(v0.begin() + c * T * H * W, v0.begin() + (c + 1) * T * H * W,
                stream.begin() + (c * L + rep * T) * H * W);
  auto preds = infer_stream(model, stream, L, /*stride=*/T);
  REQUIRE(preds.size() == 2);
  CHECK(preds[0].predicted_class == preds[1].predicted_class);
  CHECK(preds[0].probabilities == preds[1].probabilities);
  CHECK(preds[0].sel_i == preds[1].sel_i);
  CHECK(preds[0].macs == preds[1].macs);
}

TEST_CASE("reported MACs are per-window flop_report totals") {
  Dataset ds(eval_dataset());
  auto& model = warmed_model();
  const std::size_t C = 3, T = 8, H = 64, W = 64;
  auto stream = ds.load_values(0);  // exactly one window
  auto preds = infer_stream(model, stream, T, T);
  REQUIRE(preds.size() == 1);
  const auto report = flop_report(model.config());
  CHECK(preds[0].macs == report.dynamic_total);
  // total over a longer run is windows x per-window
  std::vector<float> s2(C * 2 * T * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (int rep = 0; rep < 2; ++rep)
      std::copy(stream.begin() + c * T * H * W, stream.begin() + (c + 1) * T * H * W,
                s2.begin() + (c * 2 * T + rep * T) * H * W);
  auto preds2 = infer_stream(model, s2, 2 * T, 4);
  std::uint64_t total = 0;
  for (const auto& p : preds2) total += p.macs;
  CHECK(total == preds2.size() * report.dynamic_total);
}

TEST_CASE("stream input validation and CSV output") {
  auto& model = warmed_model();
  std::vector<float> tiny(10, 0.f);
  CHECK_THROWS_WITH(infer_stream(model, tiny, 16),
                    ContainsSubstring("does not match"));
  std::vector<float> short_stream(3 * 4 * 64 * 64, 0.f);
  CHECK_THROWS_WITH(infer_stream(model, short_stream, 4),
                    ContainsSubstring("stream shorter than window"));

  WindowPrediction p;
  p.start = 0;
  p.end = 8;
  p.predicted_class = 3;
  p.probabilities = std::vector<double>(10, 0.05);
  p.probabilities[3] = 0.55;
  p.sel_i = 1;
  p.sel_j = 0;
  p.macs = 12345;
  std::ostringstream os;
  write_stream_csv(os, {p}, 4);
  const std::string text = os.str();
  CHECK_THAT(text, ContainsSubstring("# stride=4 attribution=last_frame"));
  CHECK_THAT(text, ContainsSubstring(
                       "window_start,window_end,pred_class,max_prob,sel_i,sel_j,macs"));
  CHECK_THAT(text, ContainsSubstring("0,8,3,0.55"));
  CHECK_THAT(text, ContainsSubstring(",1,0,12345"));
}
