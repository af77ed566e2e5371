#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dyngest/trainer.hpp"
#include "test_util.hpp"

using namespace dyngest;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

// Small 3-channel setup compatible with the synthetic generator: 8-frame
// 64x64 clips, one extractor layer, 2x2 grid.
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

const fs::path& small_dataset() {
  static fs::path root = [] {
    const fs::path dir = fs::temp_directory_path() / "dyngest_trainer_ds";
    fs::remove_all(dir);
    DatasetParams p;
    p.num_clips = 30;
    p.frames = 8;
    p.height = p.width = 64;
    p.seed = 21;
    generate_dataset(dir, p);
    return dir;
  }();
  return root;
}

std::string slurp(const fs::path& f) {
  std::ifstream is(f, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

TrainBatch<float> random_batch(const NetworkConfig& cfg, std::size_t batch,
                               std::uint64_t seed) {
  Xoshiro256 rng(seed);
  const std::size_t n =
      batch * cfg.input_dims.c * cfg.input_dims.t * cfg.input_dims.h * cfg.input_dims.w;
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.next_double());
  TrainBatch<float> b;
  b.clips = Tensor<float>(Shape{batch, cfg.input_dims.c, cfg.input_dims.t,
                                cfg.input_dims.h, cfg.input_dims.w},
                          std::move(v));
  for (std::size_t i = 0; i < batch; ++i) {
    b.labels.push_back(rng.next_below(cfg.num_classes));
    std::vector<float> pl(cfg.grid.m * cfg.grid.n, 0.f);
    pl[rng.next_below(pl.size())] = 1.f;
    b.patch_labels.push_back(std::move(pl));
  }
  return b;
}

float eval_loss(GestureNet<float>& model, const TrainBatch<float>& batch, float lambda) {
  auto fwd = model.forward(batch.clips, BnMode::Train, /*update_stats=*/false);
  return model
      .compute_loss(fwd.logits, fwd.scores, batch.labels, batch.patch_labels, lambda)
      .total.item();
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK_THAT(cosine_lr(0, 30, 1e-3), WithinAbs(1e-3, 1e-12));
  CHECK_THAT(cosine_lr(30, 30, 1e-3), WithinAbs(0.0, 1e-12));
  CHECK_THAT(cosine_lr(15, 30, 1e-3), WithinAbs(5e-4, 1e-12));
  CHECK(cosine_lr(1, 30, 1e-3) < 1e-3);
  CHECK_THROWS_WITH(cosine_lr(31, 30, 1e-3), ContainsSubstring(">"));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3), ConfigError);
}

TEST_CASE("one small step usually reduces the joint loss") {
  NetworkConfig cfg = dyngest::testutil::tiny_config(10);
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    NetworkConfig c = cfg;
    c.seed = 100 + seed;
    GestureNet<float> model(c);
    auto batch = random_batch(c, 4, 500 + seed);
    const float before = eval_loss(model, batch, 2.f);
    train_step(model, batch, 1e-4f, 0.9f, 2.f, Pipeline::Dynamic);
    const float after = eval_loss(model, batch, 2.f);
    if (after < before) ++improved;
  }
  CHECK(improved >= 18);
}

TEST_CASE("lambda=0 training leaves the scorer parameters bitwise unchanged") {
  NetworkConfig cfg = dyngest::testutil::tiny_config(10);
  GestureNet<float> model(cfg);
  std::vector<std::vector<float>> before;
  for (auto* p : model.selector_parameters()) before.push_back(p->tensor.data());
  auto batch = random_batch(cfg, 4, 77);
  for (int i = 0; i < 3; ++i)
    train_step(model, batch, 1e-3f, 0.9f, /*lambda=*/0.f, Pipeline::Dynamic);
  std::size_t i = 0;
  for (auto* p : model.selector_parameters()) CHECK(p->tensor.data() == before[i++]);
}

TEST_CASE("static-pipeline training never touches the scorer") {
  NetworkConfig cfg = dyngest::testutil::tiny_config(10);
  GestureNet<float> model(cfg);
  std::vector<std::vector<float>> before;
  for (auto* p : model.selector_parameters()) before.push_back(p->tensor.data());
  auto batch = random_batch(cfg, 4, 78);
  train_step(model, batch, 1e-3f, 0.9f, 2.f, Pipeline::Static);
  std::size_t i = 0;
  for (auto* p : model.selector_parameters()) CHECK(p->tensor.data() == before[i++]);
}

TEST_CASE("checkpoint round trip restores everything bitwise") {
  NetworkConfig cfg = dyngest::testutil::tiny_config(10);
  GestureNet<float> model(cfg);
  auto batch = random_batch(cfg, 4, 91);
  for (int i = 0; i < 2; ++i)
    train_step(model, batch, 1e-3f, 0.9f, 2.f, Pipeline::Dynamic);

  const fs::path path = fs::temp_directory_path() / "dyngest_ckpt_rt.dgcp";
  Xoshiro256 rng(123);
  rng.next_u64();
  save_checkpoint(path, model, Pipeline::Dynamic, 2, rng.state());

  auto [restored, ck] = load_checkpoint<float>(path);
  CHECK(ck.epoch == 2);
  CHECK(ck.pipeline == Pipeline::Dynamic);
  CHECK(ck.rng_state == rng.state());

  auto pa = model.parameters();
  auto pb = restored->parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->tensor.data() == pb[i]->tensor.data());
    CHECK(pa[i]->momentum == pb[i]->momentum);
  }
  auto ba = model.buffers();
  auto bb = restored->buffers();
  REQUIRE(ba.size() == bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(*ba[i].data == *bb[i].data);

  // identical behavior, including eval-mode batchnorm
  auto probe = random_batch(cfg, 2, 92);
  auto fa = model.forward(probe.clips, BnMode::Eval);
  auto fb = restored->forward(probe.clips, BnMode::Eval);
  CHECK(fa.logits.data() == fb.logits.data());
  fs::remove(path);
}

TEST_CASE("restoring into a mismatched config names the differing fields") {
  NetworkConfig cfg = dyngest::testutil::tiny_config(10);
  GestureNet<float> model(cfg);
  // zero-step checkpoint still needs gradients-free save
  const fs::path path = fs::temp_directory_path() / "dyngest_ckpt_mm.dgcp";
  save_checkpoint(path, model, Pipeline::Dynamic, 0, Xoshiro256(1).state());
  NetworkConfig other = cfg;
  other.lambda = 7.5;
  other.seed = 999;
  GestureNet<float> target(other);
  auto ck = read_checkpoint<float>(path);
  CHECK_THROWS_WITH(restore_checkpoint(ck, target), ContainsSubstring("lambda"));
  CHECK_THROWS_WITH(restore_checkpoint(ck, target), ContainsSubstring("seed"));
  fs::remove(path);
}

TEST_CASE("checkpoint reader rejects corrupt files") {
  const fs::path path = fs::temp_directory_path() / "dyngest_ckpt_bad.dgcp";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_WITH(read_checkpoint<float>(path), ContainsSubstring("magic"));
  CHECK_THROWS_AS(read_checkpoint<float>(fs::path("/nonexistent/x.dgcp")), FormatError);
  fs::remove(path);
}

TEST_CASE("full training runs are reproducible bit for bit") {
  Dataset ds(small_dataset());
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 8;
  tc.lr0 = 1e-3;
  tc.seed = 7;
  tc.checkpoint_every = 2;
  tc.eval_every = 2;

  const fs::path out1 = fs::temp_directory_path() / "dyngest_train_a";
  const fs::path out2 = fs::temp_directory_path() / "dyngest_train_b";
  fs::remove_all(out1);
  fs::remove_all(out2);

  GestureNet<float> m1(small_config());
  auto r1 = train(m1, ds, tc, out1);
  GestureNet<float> m2(small_config());
  auto r2 = train(m2, ds, tc, out2);

  REQUIRE(fs::exists(r1.final_checkpoint));
  CHECK(slurp(r1.final_checkpoint) == slurp(r2.final_checkpoint));
  CHECK(slurp(out1 / "metrics.csv") == slurp(out2 / "metrics.csv"));

  SECTION("metrics CSV has the contract header and one row per epoch") {
    std::ifstream is(out1 / "metrics.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "epoch,lr,loss_total,loss_cls,loss_sel,train_top1,test_top1,sel_acc");
    std::size_t rows = 0;
    std::string line;
    std::vector<std::string> all;
    while (std::getline(is, line))
      if (!line.empty()) {
        ++rows;
        all.push_back(line);
      }
    CHECK(rows == tc.epochs);
    // epoch 0 is not an eval epoch: accuracy fields stay empty
    CHECK_THAT(all[0], ContainsSubstring(",,"));
  }
  SECTION("resolved configs are echoed to the output directory") {
    CHECK(fs::exists(out1 / "network_config.json"));
    CHECK(fs::exists(out1 / "train_config.json"));
    std::ifstream is(out1 / "network_config.json");
    json j;
    is >> j;
    CHECK(NetworkConfig::from_json(j) == small_config());
  }
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("resuming mid-run matches an uninterrupted run bitwise") {
  Dataset ds(small_dataset());
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 8;
  tc.seed = 13;
  tc.checkpoint_every = 2;
  tc.eval_every = 4;

  const fs::path straight = fs::temp_directory_path() / "dyngest_train_straight";
  const fs::path resumed = fs::temp_directory_path() / "dyngest_train_resumed";
  fs::remove_all(straight);
  fs::remove_all(resumed);

  GestureNet<float> m_straight(small_config());
  auto rs = train(m_straight, ds, tc, straight);

  // Pick up the epoch-2 checkpoint of the straight run and finish the
  // schedule in a fresh directory.
  auto [m_resumed, ck] = load_checkpoint<float>(straight / "ckpt_0002.dgcp");
  REQUIRE(ck.epoch == 2);
  auto rr = train(*m_resumed, ds, tc, resumed, Pipeline::Dynamic, ck.epoch, ck.rng_state);

  CHECK(rs.final_checkpoint.filename() == rr.final_checkpoint.filename());
  CHECK(slurp(rs.final_checkpoint) == slurp(rr.final_checkpoint));
  fs::remove_all(straight);
  fs::remove_all(resumed);
}

TEST_CASE("trainer rejects invalid setups") {
  Dataset ds(small_dataset());
  GestureNet<float> model(small_config());
  TrainConfig tc;
  tc.epochs = 0;
  CHECK_THROWS_AS(train(model, ds, tc, fs::temp_directory_path() / "dyngest_bad"),
                  ConfigError);
  tc.epochs = 2;
  CHECK_THROWS_AS(
      train(model, ds, tc, fs::temp_directory_path() / "dyngest_bad", Pipeline::Dynamic,
            /*start_epoch=*/5),
      ConfigError);
}
