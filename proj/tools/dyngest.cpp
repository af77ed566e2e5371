// dyngest: synthetic long-distance gesture data, dynamic patch-selection
// model training/evaluation, streaming inference, and MAC analysis.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include "dyngest/evaluator.hpp"
#include "dyngest/stream.hpp"
#include "dyngest/synthdata.hpp"
#include "dyngest/trainer.hpp"

using namespace dyngest;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

// Applies "a.b.c=value" to an existing key path; unknown paths are usage
// errors so typos never silently no-op.
void apply_override(json& root, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("--set expects key=value, got \"" + kv + "\"");
  const std::string path = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json* node = &root;
  std::size_t start = 0;
  std::vector<std::string> parts;
  while (start <= path.size()) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw UsageError("--set path \"" + path + "\" does not name an existing config key");
    node = &(*node)[parts[i]];
  }
  const std::string& leaf = parts.back();
  if (!node->is_object() || !node->contains(leaf))
    throw UsageError("--set path \"" + path + "\" does not name an existing config key");
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // unquoted strings pass through verbatim
  }
  (*node)[leaf] = value;
}

int threads_cap() {
  // Internal execution is single-threaded; the env var is honored as an
  // upper bound and recorded in resolved configs.
  if (const char* env = std::getenv("DYNGEST_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return 1;  // min(v, available internal parallelism = 1)
  }
  return 1;
}

void echo_resolved(const fs::path& out_dir, const std::string& name, const json& j) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / name);
  os << j.dump(2) << "\n";
}

struct CommonArgs {
  std::string config_path, data_path, out_path, ckpt_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> overrides;
  std::string determinism = "on";
  bool force = false;
};

int cmd_generate(const CommonArgs& a, std::size_t clips, std::size_t frames,
                 std::size_t height, std::size_t width, double near_fraction,
                 double train_fraction, double noise_sigma, int distractors) {
  DatasetParams p;
  p.num_clips = clips;
  p.frames = frames;
  p.height = height;
  p.width = width;
  p.near_fraction = near_fraction;
  p.train_fraction = train_fraction;
  p.noise_sigma = noise_sigma;
  p.num_distractors = distractors;
  p.force = a.force;
  if (a.seed_given) p.seed = a.seed;
  generate_dataset(a.out_path, p);
  json resolved{{"num_clips", p.num_clips},       {"frames", p.frames},
                {"height", p.height},             {"width", p.width},
                {"near_fraction", p.near_fraction},
                {"train_fraction", p.train_fraction},
                {"noise_sigma", p.noise_sigma},
                {"num_distractors", p.num_distractors},
                {"seed", p.seed},                 {"determinism", a.determinism},
                {"threads", threads_cap()}};
  echo_resolved(a.out_path, "generate_config.json", resolved);
  std::cout << "wrote " << p.num_clips << " clips to " << a.out_path << "\n";
  return 0;
}

std::pair<NetworkConfig, TrainConfig> resolve_train_configs(const CommonArgs& a) {
  json net_json = a.config_path.empty() ? NetworkConfig::desk_default().to_json()
                                        : load_json_file(a.config_path);
  json train_json = TrainConfig{}.to_json();
  if (a.seed_given) {
    net_json["seed"] = a.seed;
    train_json["seed"] = a.seed;
  }
  json combined{{"network", net_json}, {"train", train_json}};
  for (const auto& kv : a.overrides) apply_override(combined, kv);
  NetworkConfig net = NetworkConfig::from_json(combined["network"]);
  TrainConfig tc = TrainConfig::from_json(combined["train"]);
  tc.determinism = a.determinism != "off";
  return {net, tc};
}

int cmd_train(const CommonArgs& a, bool static_pipeline) {
  Dataset ds(a.data_path);
  const Pipeline pipeline = static_pipeline ? Pipeline::Static : Pipeline::Dynamic;
  if (!a.ckpt_path.empty()) {
    auto [model, ck] = load_checkpoint<float>(a.ckpt_path);
    json train_json = TrainConfig{}.to_json();
    if (a.seed_given) train_json["seed"] = a.seed;
    json combined{{"network", ck.config}, {"train", train_json}};
    for (const auto& kv : a.overrides) apply_override(combined, kv);
    if (combined["network"] != ck.config)
      throw std::runtime_error("network overrides cannot change a resumed checkpoint");
    TrainConfig tc = TrainConfig::from_json(combined["train"]);
    tc.determinism = a.determinism != "off";
    auto result =
        train(*model, ds, tc, a.out_path, ck.pipeline, ck.epoch, ck.rng_state,
              /*quiet=*/false);
    std::cout << "resumed from epoch " << ck.epoch << "; final checkpoint "
              << result.final_checkpoint << "\n";
    return 0;
  }
  auto [net, tc] = resolve_train_configs(a);
  GestureNet<float> model(net);
  auto result = train(model, ds, tc, a.out_path, pipeline, 0, std::nullopt,
                      /*quiet=*/false);
  std::cout << "trained " << tc.epochs << " epochs (" << pipeline_tag(pipeline)
            << " pipeline); final checkpoint " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& a) {
  Dataset ds(a.data_path);
  auto [model, ck] = load_checkpoint<float>(a.ckpt_path);
  EvalReport r = evaluate(*model, ds, ds.test_indices(),
                          /*batch_size=*/8, ck.pipeline);
  fs::create_directories(a.out_path);
  write_report_csv(fs::path(a.out_path) / "report.csv", r);
  {
    std::ofstream os(fs::path(a.out_path) / "report.txt");
    write_report_text(os, r);
  }
  emit_plot_data(a.out_path, r);
  echo_resolved(a.out_path, "network_config.json", ck.config);
  write_report_text(std::cout, r);
  return 0;
}

int cmd_infer(const CommonArgs& a, std::size_t stride) {
  auto [model, ck] = load_checkpoint<float>(a.ckpt_path);
  Tensor<float> clip = load_clip(a.data_path);
  const auto& d = model->config().input_dims;
  if (clip.dim(0) != d.c || clip.dim(2) != d.h || clip.dim(3) != d.w)
    throw std::runtime_error("clip channels/resolution do not match the model config");
  const std::size_t L = clip.dim(1);
  auto preds = infer_stream(*model, clip.data(), L, stride);
  const std::size_t effective_stride = stride == 0 ? std::max<std::size_t>(1, d.t / 2)
                                                   : stride;
  if (!a.out_path.empty()) {
    fs::create_directories(fs::path(a.out_path));
    std::ofstream os(fs::path(a.out_path) / "stream.csv");
    write_stream_csv(os, preds, effective_stride);
    echo_resolved(a.out_path, "network_config.json", ck.config);
  }
  write_stream_csv(std::cout, preds, effective_stride);
  return 0;
}

int cmd_flops(const CommonArgs& a) {
  json net_json = a.config_path.empty() ? NetworkConfig::desk_default().to_json()
                                        : load_json_file(a.config_path);
  json combined{{"network", net_json}};
  for (const auto& kv : a.overrides) apply_override(combined, kv);
  NetworkConfig net = NetworkConfig::from_json(combined["network"]);
  FlopReport r = flop_report(net);
  std::cout << "per-window MACs (GFLOPS = 2*MACs/1e9)\n";
  std::cout << "block        dynamic      static\n";
  for (const char* label : {"extractor", "selector", "classifier"}) {
    std::printf("%-12s %-12llu %-12llu\n", label,
                static_cast<unsigned long long>(r.dynamic_macs(label)),
                static_cast<unsigned long long>(r.static_macs(label)));
  }
  std::printf("%-12s %-12llu %-12llu\n", "total",
              static_cast<unsigned long long>(r.dynamic_total),
              static_cast<unsigned long long>(r.static_total));
  std::printf("GFLOPS       %-12.4f %-12.4f\n", FlopReport::gflops(r.dynamic_total),
              FlopReport::gflops(r.static_total));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic patch-selection gesture recognition toolkit"};
  app.require_subcommand(1);

  CommonArgs a;
  std::size_t clips = 2000, frames = 16, height = 96, width = 96, stride = 0;
  double near_fraction = 0.5, train_fraction = 0.8, noise_sigma = 0.1;
  int distractors = 2;
  bool static_pipeline = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", a.seed, "seed controlling all randomness")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--set", a.overrides,
                    "override a config key, e.g. --set train.epochs=10");
    cmd->add_option("--determinism", a.determinism, "on|off")
        ->check(CLI::IsMember({"on", "off"}));
  };

  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  gen->add_option("--out", a.out_path, "output dataset directory")->required();
  gen->add_option("--clips", clips, "number of clips");
  gen->add_option("--frames", frames, "frames per clip");
  gen->add_option("--height", height, "frame height");
  gen->add_option("--width", width, "frame width");
  gen->add_option("--near-fraction", near_fraction, "fraction of near-distance clips");
  gen->add_option("--train-fraction", train_fraction, "fraction of training clips");
  gen->add_option("--noise-sigma", noise_sigma, "background Gaussian noise sigma");
  gen->add_option("--distractors", distractors, "distractor blobs per clip");
  gen->add_flag("--force", a.force, "overwrite a non-empty output directory");
  add_common(gen);

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data", a.data_path, "dataset directory")->required();
  tr->add_option("--out", a.out_path, "output run directory")->required();
  tr->add_option("--config", a.config_path, "network config JSON");
  tr->add_option("--ckpt", a.ckpt_path, "checkpoint to resume from");
  tr->add_flag("--static", static_pipeline,
               "train the static full-feature-map baseline");
  add_common(tr);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  ev->add_option("--data", a.data_path, "dataset directory")->required();
  ev->add_option("--ckpt", a.ckpt_path, "checkpoint file")->required();
  ev->add_option("--out", a.out_path, "output report directory")->required();
  add_common(ev);

  auto* in = app.add_subcommand("infer", "sliding-window inference over a clip stream");
  in->add_option("--data", a.data_path, "clip stream file (tensor binary, C,L,H,W)")
      ->required();
  in->add_option("--ckpt", a.ckpt_path, "checkpoint file")->required();
  in->add_option("--out", a.out_path, "output directory for stream.csv");
  in->add_option("--stride", stride, "window stride in frames (default T/2)");
  add_common(in);

  auto* fl = app.add_subcommand("flops", "per-window MAC table for a config");
  fl->add_option("--config", a.config_path, "network config JSON");
  add_common(fl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // exit 0 with help text
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }
  a.seed_given = gen->count("--seed") || tr->count("--seed") || ev->count("--seed") ||
                 in->count("--seed") || fl->count("--seed");

  try {
    if (gen->parsed())
      return cmd_generate(a, clips, frames, height, width, near_fraction,
                          train_fraction, noise_sigma, distractors);
    if (tr->parsed()) return cmd_train(a, static_pipeline);
    if (ev->parsed()) return cmd_eval(a);
    if (in->parsed()) return cmd_infer(a, stride);
    if (fl->parsed()) return cmd_flops(a);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
