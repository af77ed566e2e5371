#ifndef DYNGEST_TRAINER_HPP
#define DYNGEST_TRAINER_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dyngest/config.hpp"
#include "dyngest/evaluator.hpp"
#include "dyngest/network.hpp"
#include "dyngest/synthdata.hpp"

namespace dyngest {

// lr0 * 0.5 * (1 + cos(pi*e/E)); one update per epoch, no restarts.
inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0) {
  if (total_epochs == 0) throw ConfigError("cosine_lr: total epochs must be >= 1");
  if (epoch > total_epochs)
    throw ConfigError("cosine_lr: epoch " + std::to_string(epoch) + " > total " +
                      std::to_string(total_epochs));
  return lr0 * 0.5 *
         (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                         static_cast<double>(total_epochs)));
}

template <typename T>
struct TrainBatch {
  Tensor<T> clips;                        // [B,C,T,H,W]
  std::vector<std::size_t> labels;        // gesture class per sample
  std::vector<std::vector<T>> patch_labels;  // m*n row-major per sample
};

template <typename T>
TrainBatch<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& idxs,
                         const NetworkConfig& cfg) {
  TrainBatch<T> b;
  b.clips = assemble_batch<T>(ds, idxs, cfg.input_dims);
  for (const auto idx : idxs) {
    b.labels.push_back(static_cast<std::size_t>(ds.record(idx).gesture_class));
    b.patch_labels.push_back(derive_patch_labels<T>(ds.center_bbox(idx), cfg));
  }
  return b;
}

// One optimizer step: forward, joint loss, zero_grad, backward, SGD update.
// Returns the batch-mean loss breakdown.
template <typename T>
LossBreakdown<T> train_step(GestureNet<T>& model, const TrainBatch<T>& batch, T lr,
                            T momentum, T lambda, Pipeline pipeline) {
  LossBreakdown<T> loss;
  std::vector<Parameter<T>*> params;
  if (pipeline == Pipeline::Dynamic) {
    auto fwd = model.forward(batch.clips, BnMode::Train);
    loss = model.compute_loss(fwd.logits, fwd.scores, batch.labels, batch.patch_labels,
                              lambda);
    params = model.parameters();
  } else {
    Tensor<T> logits = model.forward_static(batch.clips, BnMode::Train);
    Tensor<T> cls = cross_entropy(logits, batch.labels);
    loss.total = cls;
    loss.classification = cls.item();
    loss.selection = T(0);
    loss.lambda = lambda;
    auto ext = model.extractor_parameters();
    auto clf = model.classifier_parameters();
    params.insert(params.end(), ext.begin(), ext.end());
    params.insert(params.end(), clf.begin(), clf.end());
  }
  zero_grads(params);
  backward(loss.total);
  sgd_momentum_step(params, lr, momentum);
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "DGCP", version u32=1, pipeline u8, epoch u64,
// rng state u64[4], config JSON (u64 length + bytes), tensor count u32,
// then per tensor: name (u64 length + bytes) and a "DGRT" blob.
// Parameters, momentum buffers, and batchnorm running stats all round-trip
// bitwise.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[4] = {'D', 'G', 'C', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  Pipeline pipeline = Pipeline::Dynamic;
  std::uint64_t epoch = 0;
  Xoshiro256::state_type rng_state{};
  json config;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
};

template <typename T>
void save_checkpoint(const fs::path& path, GestureNet<T>& model, Pipeline pipeline,
                     std::uint64_t epoch, const Xoshiro256::state_type& rng_state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint to " + path.string());
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint8_t>(os, pipeline == Pipeline::Dynamic ? 0 : 1);
  detail::write_le<std::uint64_t>(os, epoch);
  for (const auto w : rng_state) detail::write_le<std::uint64_t>(os, w);
  const std::string cfg = model.config().to_json().dump();
  detail::write_le<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  auto params = model.parameters();
  auto buffers = model.buffers();
  detail::write_le<std::uint32_t>(
      os, static_cast<std::uint32_t>(2 * params.size() + buffers.size()));
  auto write_named = [&os](const std::string& name, const Shape& shape,
                           const std::vector<T>& data) {
    detail::write_le<std::uint64_t>(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, shape, data);
  };
  for (auto* p : params) write_named(p->name, p->tensor.shape(), p->tensor.data());
  for (auto* p : params)
    write_named(p->name + ".momentum", p->tensor.shape(), p->momentum);
  for (const auto& b : buffers) write_named(b.name, b.shape, *b.data);
}

template <typename T>
Checkpoint<T> read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("bad checkpoint magic (expected \"DGCP\")");
  std::uint64_t off = 4;
  Checkpoint<T> ck;
  const auto version = detail::read_le<std::uint32_t>(is, off);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  ck.pipeline = detail::read_le<std::uint8_t>(is, off) == 0 ? Pipeline::Dynamic
                                                            : Pipeline::Static;
  ck.epoch = detail::read_le<std::uint64_t>(is, off);
  for (auto& w : ck.rng_state) w = detail::read_le<std::uint64_t>(is, off);
  const auto cfg_len = detail::read_le<std::uint64_t>(is, off);
  std::string cfg_str(cfg_len, '\0');
  is.read(cfg_str.data(), static_cast<std::streamsize>(cfg_len));
  if (static_cast<std::uint64_t>(is.gcount()) != cfg_len)
    throw FormatError("truncated checkpoint config at offset " + std::to_string(off));
  try {
    ck.config = json::parse(cfg_str);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint config: ") + e.what());
  }
  const auto count = detail::read_le<std::uint32_t>(is, off);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_le<std::uint64_t>(is, off);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (static_cast<std::uint64_t>(is.gcount()) != name_len)
      throw FormatError("truncated checkpoint tensor name");
    ck.tensors.emplace_back(std::move(name), read_tensor<T>(is));
  }
  return ck;
}

namespace detail {

inline void flatten_json(const json& j, const std::string& prefix,
                         std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i)
      flatten_json(j[i], prefix + "[" + std::to_string(i) + "]", out);
  } else {
    out[prefix] = j;
  }
}

inline std::vector<std::string> json_diff_keys(const json& a, const json& b) {
  std::map<std::string, json> fa, fb;
  flatten_json(a, "", fa);
  flatten_json(b, "", fb);
  std::vector<std::string> diff;
  for (const auto& [k, v] : fa)
    if (!fb.count(k) || fb.at(k) != v) diff.push_back(k);
  for (const auto& [k, v] : fb)
    if (!fa.count(k)) diff.push_back(k);
  return diff;
}

}  // namespace detail

// Restores all parameters, momentum buffers, and batchnorm state into a
// model built from the same config. Config mismatch lists the differing
// fields.
template <typename T>
void restore_checkpoint(const Checkpoint<T>& ck, GestureNet<T>& model) {
  const auto diff = detail::json_diff_keys(ck.config, model.config().to_json());
  if (!diff.empty()) {
    std::string fields;
    for (const auto& d : diff) fields += (fields.empty() ? "" : ", ") + d;
    throw ConfigError("checkpoint config does not match requested config; differing fields: " +
                      fields);
  }
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : ck.tensors) by_name[name] = &t;
  auto fetch = [&](const std::string& name) -> const Tensor<T>& {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError("checkpoint missing tensor \"" + name + "\"");
    return *it->second;
  };
  for (auto* p : model.parameters()) {
    const auto& t = fetch(p->name);
    if (t.shape() != p->tensor.shape())
      throw FormatError("checkpoint tensor \"" + p->name + "\" has shape " +
                        shape_str(t.shape()) + ", expected " +
                        shape_str(p->tensor.shape()));
    p->tensor.data() = t.data();
    p->momentum = fetch(p->name + ".momentum").data();
  }
  for (auto& b : model.buffers()) *b.data = fetch(b.name).data();
}

// Builds the model stored in a checkpoint file.
template <typename T>
std::pair<std::unique_ptr<GestureNet<T>>, Checkpoint<T>> load_checkpoint(
    const fs::path& path) {
  Checkpoint<T> ck = read_checkpoint<T>(path);
  auto model = std::make_unique<GestureNet<T>>(NetworkConfig::from_json(ck.config));
  restore_checkpoint(ck, *model);
  return {std::move(model), std::move(ck)};
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double loss_total = 0, loss_cls = 0, loss_sel = 0;
  std::optional<double> train_top1, test_top1, sel_acc;
};

namespace detail {

inline void append_metrics_row(std::ofstream& os, const EpochMetrics& m) {
  os.precision(17);
  os << m.epoch << "," << m.lr << "," << m.loss_total << "," << m.loss_cls << ","
     << m.loss_sel << ",";
  if (m.train_top1) os << *m.train_top1;
  os << ",";
  if (m.test_top1) os << *m.test_top1;
  os << ",";
  if (m.sel_acc) os << *m.sel_acc;
  os << "\n";
  os.flush();
}

}  // namespace detail

struct TrainResult {
  fs::path final_checkpoint;
  std::vector<EpochMetrics> metrics;
};

// The joint training loop: seeded per-epoch shuffling, per-epoch cosine
// learning rate, periodic checkpoints and CSV metrics. Fully deterministic
// given (config, seed); resuming from a checkpoint is bitwise transparent.
template <typename T>
TrainResult train(GestureNet<T>& model, const Dataset& ds, const TrainConfig& tc,
                  const fs::path& out_dir, Pipeline pipeline = Pipeline::Dynamic,
                  std::uint64_t start_epoch = 0,
                  std::optional<Xoshiro256::state_type> rng_state = std::nullopt,
                  bool quiet = true) {
  tc.validate();
  if (ds.train_indices().empty()) throw ConfigError("dataset has no training clips");
  if (start_epoch > tc.epochs)
    throw ConfigError("start epoch " + std::to_string(start_epoch) +
                      " is past configured epochs " + std::to_string(tc.epochs));
  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "network_config.json");
    os << model.config().to_json().dump(2) << "\n";
  }
  {
    std::ofstream os(out_dir / "train_config.json");
    os << tc.to_json().dump(2) << "\n";
  }

  Xoshiro256 rng(tc.seed);
  if (rng_state) rng.set_state(*rng_state);

  std::ofstream metrics_os;
  if (start_epoch == 0) {
    metrics_os.open(out_dir / "metrics.csv");
    metrics_os << "epoch,lr,loss_total,loss_cls,loss_sel,train_top1,test_top1,sel_acc\n";
  } else {
    metrics_os.open(out_dir / "metrics.csv", std::ios::app);
  }

  TrainResult result;
  for (std::uint64_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, tc.epochs, tc.lr0);
    // Shuffle from the pristine order every epoch so the permutation is a
    // function of the RNG state alone; a run resumed from a checkpoint then
    // visits the exact same batches as an uninterrupted one.
    std::vector<std::size_t> order = ds.train_indices();
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);

    double sum_total = 0, sum_cls = 0, sum_sel = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      std::vector<std::size_t> idxs(
          order.begin() + start,
          order.begin() + std::min(order.size(), start + tc.batch_size));
      auto batch = make_batch<T>(ds, idxs, model.config());
      auto loss = train_step(model, batch, static_cast<T>(lr),
                             static_cast<T>(tc.momentum), static_cast<T>(tc.lambda),
                             pipeline);
      sum_total += loss.total.item();
      sum_cls += loss.classification;
      sum_sel += loss.selection;
      ++batches;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.loss_total = sum_total / batches;
    m.loss_cls = sum_cls / batches;
    m.loss_sel = sum_sel / batches;
    const bool eval_now = (epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs;
    if (eval_now) {
      auto train_rep = evaluate(model, ds, ds.train_indices(), tc.batch_size, pipeline);
      m.train_top1 = train_rep.top1;
      if (!ds.test_indices().empty()) {
        auto test_rep = evaluate(model, ds, ds.test_indices(), tc.batch_size, pipeline);
        m.test_top1 = test_rep.top1;
        if (pipeline == Pipeline::Dynamic) m.sel_acc = test_rep.selection_accuracy;
      }
    }
    detail::append_metrics_row(metrics_os, m);
    result.metrics.push_back(m);
    if (!quiet) {
      std::ostringstream line;
      line.precision(4);
      line << "epoch " << epoch << " lr " << lr << " loss " << m.loss_total;
      if (m.test_top1) line << " test_top1 " << *m.test_top1;
      std::fprintf(stderr, "%s\n", line.str().c_str());
    }

    if ((epoch + 1) % tc.checkpoint_every == 0 || epoch + 1 == tc.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%04llu.dgcp",
                    static_cast<unsigned long long>(epoch + 1));
      const fs::path ckpt = out_dir / name;
      save_checkpoint(ckpt, model, pipeline, epoch + 1, rng.state());
      result.final_checkpoint = ckpt;
    }
  }
  return result;
}

}  // namespace dyngest

#endif  // DYNGEST_TRAINER_HPP
