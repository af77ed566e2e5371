#ifndef DYNGEST_NETWORK_HPP
#define DYNGEST_NETWORK_HPP

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dyngest/config.hpp"
#include "dyngest/flops.hpp"
#include "dyngest/layers.hpp"
#include "dyngest/ops.hpp"
#include "dyngest/rng.hpp"
#include "dyngest/tensor.hpp"

namespace dyngest {

// Hand bounding box in input pixel coordinates. w<=0 or h<=0 means
// "no gesture".
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  bool empty() const { return w <= 0 || h <= 0; }
};

// The m x n spatial partition of a feature map. Each entry is a batched
// patch tensor [N, C', T', h_patch, w_patch]; gradients flow back into the
// feature map through the slice.
template <typename T>
struct PatchGrid {
  std::size_t m = 0, n = 0, patch_h = 0, patch_w = 0;
  std::vector<Tensor<T>> patches;  // index i*n + j

  const Tensor<T>& at(std::size_t i, std::size_t j) const { return patches[i * n + j]; }
};

// Per-patch confidence scores for a batch. The score tensor is graph-
// connected; index order is patch-major: entry p*N + b is patch p of
// sample b, with p = i*n + j row-major.
template <typename T>
struct PatchScores {
  std::size_t m = 0, n = 0, batch = 0;
  Tensor<T> scores;                                         // [m*n*batch, 1]
  std::vector<T> logits;                                    // same order, detached
  std::vector<std::pair<std::size_t, std::size_t>> selected;  // per sample (i*, j*)
  std::vector<T> selected_score;                            // S_max per sample

  T score_at(std::size_t sample, std::size_t i, std::size_t j) const {
    return scores.data()[(i * n + j) * batch + sample];
  }
  T logit_at(std::size_t sample, std::size_t i, std::size_t j) const {
    return logits[(i * n + j) * batch + sample];
  }
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;    // scalar, graph-connected; backward reaches both terms
  T classification = 0;
  T selection = 0;
  T lambda = 0;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [N, num_classes]
  PatchScores<T> scores;
};

// Maps a hand bbox to {0,1} patch labels: the bbox is scaled into feature
// coordinates, clipped, and a patch is positive iff it holds at least a
// `tau` fraction of the bbox area. Row-major m*n output.
template <typename T>
std::vector<T> derive_patch_labels(const BBox& bbox, const NetworkConfig& cfg,
                                   double tau = 0.25) {
  std::vector<T> labels(cfg.grid.m * cfg.grid.n, T(0));
  if (bbox.empty()) return labels;
  const double sx = static_cast<double>(cfg.feature_dims.w) / cfg.input_dims.w;
  const double sy = static_cast<double>(cfg.feature_dims.h) / cfg.input_dims.h;
  double fx0 = bbox.x * sx, fx1 = (bbox.x + bbox.w) * sx;
  double fy0 = bbox.y * sy, fy1 = (bbox.y + bbox.h) * sy;
  fx0 = std::max(fx0, 0.0);
  fy0 = std::max(fy0, 0.0);
  fx1 = std::min(fx1, static_cast<double>(cfg.feature_dims.w));
  fy1 = std::min(fy1, static_cast<double>(cfg.feature_dims.h));
  if (fx1 <= fx0 || fy1 <= fy0) return labels;
  const double area = (fx1 - fx0) * (fy1 - fy0);
  const double ph = static_cast<double>(cfg.patch_h()), pw = static_cast<double>(cfg.patch_w());
  for (std::size_t i = 0; i < cfg.grid.m; ++i)
    for (std::size_t j = 0; j < cfg.grid.n; ++j) {
      const double px0 = j * pw, px1 = (j + 1) * pw;
      const double py0 = i * ph, py1 = (i + 1) * ph;
      const double ox = std::max(0.0, std::min(fx1, px1) - std::max(fx0, px0));
      const double oy = std::max(0.0, std::min(fy1, py1) - std::max(fy0, py0));
      if (ox * oy / area >= tau) labels[i * cfg.grid.n + j] = T(1);
    }
  return labels;
}

// The full three-block model: preliminary feature extractor, weight-shared
// patch scorer, residual patch classifier. forward() runs the dynamic
// pipeline; forward_static() applies the classifier to the whole feature
// map (the static baseline, selector not run).
template <typename T>
class GestureNet {
public:
  explicit GestureNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Xoshiro256 rng(cfg_.seed);
    std::size_t c = cfg_.input_dims.c;
    for (std::size_t i = 0; i < cfg_.extractor_spec.size(); ++i) {
      const auto& l = cfg_.extractor_spec[i];
      const std::string name = "extractor.conv" + std::to_string(i);
      ext_convs_.emplace_back(name, c, l.out_channels, l.kernel, l.stride, l.padding, rng);
      ext_bns_.emplace_back(name + ".bn", l.out_channels);
      c = l.out_channels;
    }
    const std::size_t cf = cfg_.feature_dims.c;
    sel_conv1_ = Conv3d<T>("selector.conv1", cf, cfg_.selector_spec.conv1_channels,
                           {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
    sel_bn1_ = BatchNorm3d<T>("selector.conv1.bn", cfg_.selector_spec.conv1_channels);
    sel_conv2_ = Conv3d<T>("selector.conv2", cfg_.selector_spec.conv1_channels,
                           cfg_.selector_spec.conv2_channels, {3, 3, 3}, {1, 1, 1},
                           {1, 1, 1}, rng);
    sel_bn2_ = BatchNorm3d<T>("selector.conv2.bn", cfg_.selector_spec.conv2_channels);
    sel_fc_ = Linear<T>("selector.fc", cfg_.selector_spec.conv2_channels, 1, rng);
    c = cf;
    for (std::size_t i = 0; i < cfg_.classifier_spec.size(); ++i) {
      const auto& s = cfg_.classifier_spec[i];
      const std::string name = "classifier.stage" + std::to_string(i);
      Stage st;
      st.conv1 = Conv3d<T>(name + ".conv1", c, s.out_channels, {3, 3, 3}, s.stride,
                           {1, 1, 1}, rng);
      st.bn1 = BatchNorm3d<T>(name + ".conv1.bn", s.out_channels);
      st.conv2 = Conv3d<T>(name + ".conv2", s.out_channels, s.out_channels, {3, 3, 3},
                           {1, 1, 1}, {1, 1, 1}, rng);
      st.bn2 = BatchNorm3d<T>(name + ".conv2.bn", s.out_channels);
      st.proj = Conv3d<T>(name + ".proj", c, s.out_channels, {1, 1, 1}, s.stride,
                          {0, 0, 0}, rng);
      st.proj_bn = BatchNorm3d<T>(name + ".proj.bn", s.out_channels);
      stages_.push_back(std::move(st));
      c = s.out_channels;
    }
    cls_fc_ = Linear<T>("classifier.fc", c, cfg_.num_classes, rng);
  }

  const NetworkConfig& config() const { return cfg_; }

  Tensor<T> extract_features(const Tensor<T>& clip, BnMode mode, bool update_stats = true) {
    if (clip.rank() != 5 || clip.dim(1) != cfg_.input_dims.c ||
        clip.dim(2) != cfg_.input_dims.t || clip.dim(3) != cfg_.input_dims.h ||
        clip.dim(4) != cfg_.input_dims.w)
      throw ConfigError("input clip shape " + shape_str(clip.shape()) +
                        " does not match configured input dims [N," +
                        std::to_string(cfg_.input_dims.c) + "," +
                        std::to_string(cfg_.input_dims.t) + "," +
                        std::to_string(cfg_.input_dims.h) + "," +
                        std::to_string(cfg_.input_dims.w) + "]");
    FlopLabel label("extractor");
    Tensor<T> x = clip;
    for (std::size_t i = 0; i < ext_convs_.size(); ++i) {
      x = ext_convs_[i].forward(x);
      x = ext_bns_[i].forward(x, mode, update_stats);
      x = relu(x);
    }
    return x;
  }

  PatchGrid<T> split_patches(const Tensor<T>& features) const {
    const std::size_t n_batch = features.dim(0);
    PatchGrid<T> grid;
    grid.m = cfg_.grid.m;
    grid.n = cfg_.grid.n;
    grid.patch_h = cfg_.patch_h();
    grid.patch_w = cfg_.patch_w();
    for (std::size_t i = 0; i < grid.m; ++i)
      for (std::size_t j = 0; j < grid.n; ++j)
        grid.patches.push_back(
            slice5d(features, {0, 0, 0, i * grid.patch_h, j * grid.patch_w},
                    {n_batch, features.dim(1), features.dim(2), grid.patch_h,
                     grid.patch_w}));
    return grid;
  }

  PatchScores<T> score_patches(const PatchGrid<T>& grid, BnMode mode,
                               bool update_stats = true) {
    FlopLabel label("selector");
    const std::size_t batch = grid.patches[0].dim(0);
    Tensor<T> x = concat0(grid.patches);  // [m*n*batch, C', T', ph, pw]
    x = relu(sel_bn1_.forward(sel_conv1_.forward(x), mode, update_stats));
    x = avgpool3d(x, {2, 2, 2}, {2, 2, 2});
    x = relu(sel_bn2_.forward(sel_conv2_.forward(x), mode, update_stats));
    Tensor<T> pooled = global_avg_pool(x);
    Tensor<T> logits = sel_fc_.forward(pooled);  // [m*n*batch, 1]
    Tensor<T> scores = sigmoid(logits);

    PatchScores<T> ps;
    ps.m = grid.m;
    ps.n = grid.n;
    ps.batch = batch;
    ps.scores = scores;
    ps.logits = logits.data();
    ps.selected.resize(batch);
    ps.selected_score.resize(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t best = 0;
      T best_score = ps.score_at(b, 0, 0);
      for (std::size_t p = 1; p < grid.m * grid.n; ++p) {
        const T s = scores.data()[p * batch + b];
        if (s > best_score) {  // strict: ties keep the row-major-first index
          best_score = s;
          best = p;
        }
      }
      ps.selected[b] = {best / grid.n, best % grid.n};
      ps.selected_score[b] = best_score;
    }
    return ps;
  }

  // Gathers each sample's selected patch into one batch tensor. The
  // selection index is a constant under differentiation; gradients flow
  // only into the selected patch values.
  Tensor<T> gather_selected(
      const PatchGrid<T>& grid,
      const std::vector<std::pair<std::size_t, std::size_t>>& selected) const {
    std::vector<Tensor<T>> rows;
    const std::size_t batch = grid.patches[0].dim(0);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto [i, j] = selected[b];
      const Tensor<T>& p = grid.at(i, j);
      rows.push_back(slice5d(p, {b, 0, 0, 0, 0},
                             {1, p.dim(1), p.dim(2), p.dim(3), p.dim(4)}));
    }
    return concat0(rows);
  }

  Tensor<T> classify_patch(const Tensor<T>& patch, BnMode mode, bool update_stats = true) {
    if (patch.dim(1) != cfg_.feature_dims.c)
      throw ConfigError("classifier expects C'=" + std::to_string(cfg_.feature_dims.c) +
                        " channels, got " + std::to_string(patch.dim(1)));
    FlopLabel label("classifier");
    Tensor<T> x = patch;
    for (auto& st : stages_) {
      Tensor<T> shortcut = st.proj_bn.forward(st.proj.forward(x), mode, update_stats);
      Tensor<T> y = relu(st.bn1.forward(st.conv1.forward(x), mode, update_stats));
      y = st.bn2.forward(st.conv2.forward(y), mode, update_stats);
      x = relu(add(y, shortcut));
    }
    return cls_fc_.forward(global_avg_pool(x));
  }

  // Dynamic pipeline: extract -> split -> score -> select -> classify.
  // forced_selection overrides the argmax (used to pin the discrete choice
  // during finite-difference checks).
  ForwardResult<T> forward(
      const Tensor<T>& clip, BnMode mode, bool update_stats = true,
      const std::optional<std::vector<std::pair<std::size_t, std::size_t>>>&
          forced_selection = std::nullopt) {
    Tensor<T> features = extract_features(clip, mode, update_stats);
    PatchGrid<T> grid = split_patches(features);
    PatchScores<T> scores = score_patches(grid, mode, update_stats);
    if (forced_selection) scores.selected = *forced_selection;
    Tensor<T> patch = gather_selected(grid, scores.selected);
    Tensor<T> logits = classify_patch(patch, mode, update_stats);
    return {std::move(logits), std::move(scores)};
  }

  // Static baseline: the same classifier applied to the full feature map,
  // selector not run.
  Tensor<T> forward_static(const Tensor<T>& clip, BnMode mode, bool update_stats = true) {
    Tensor<T> features = extract_features(clip, mode, update_stats);
    return classify_patch(features, mode, update_stats);
  }

  LossBreakdown<T> compute_loss(const Tensor<T>& logits, const PatchScores<T>& scores,
                                const std::vector<std::size_t>& clip_labels,
                                const std::vector<std::vector<T>>& patch_labels,
                                T lambda) {
    if (lambda < T(0)) throw ConfigError("lambda must be >= 0");
    const std::size_t batch = scores.batch;
    if (clip_labels.size() != batch || patch_labels.size() != batch)
      throw ConfigError("compute_loss: label count does not match batch size");
    Tensor<T> cls = cross_entropy(logits, clip_labels);
    std::vector<T> flat(scores.m * scores.n * batch);
    for (std::size_t p = 0; p < scores.m * scores.n; ++p)
      for (std::size_t b = 0; b < batch; ++b) flat[p * batch + b] = patch_labels[b][p];
    Tensor<T> sel =
        scale(binary_cross_entropy_sum(scores.scores, flat), T(1) / static_cast<T>(batch));
    LossBreakdown<T> out;
    out.total = add(cls, scale(sel, lambda));
    out.classification = cls.item();
    out.selection = sel.item();
    out.lambda = lambda;
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    auto ext = extractor_parameters();
    auto sel = selector_parameters();
    auto cls = classifier_parameters();
    out.insert(out.end(), ext.begin(), ext.end());
    out.insert(out.end(), sel.begin(), sel.end());
    out.insert(out.end(), cls.begin(), cls.end());
    return out;
  }

  std::vector<Parameter<T>*> extractor_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& c : ext_convs_) c.collect(out);
    for (auto& b : ext_bns_) b.collect(out);
    return out;
  }

  std::vector<Parameter<T>*> selector_parameters() {
    std::vector<Parameter<T>*> out;
    sel_conv1_.collect(out);
    sel_bn1_.collect(out);
    sel_conv2_.collect(out);
    sel_bn2_.collect(out);
    sel_fc_.collect(out);
    return out;
  }

  std::vector<Parameter<T>*> classifier_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& st : stages_) {
      st.conv1.collect(out);
      st.bn1.collect(out);
      st.conv2.collect(out);
      st.bn2.collect(out);
      st.proj.collect(out);
      st.proj_bn.collect(out);
    }
    cls_fc_.collect(out);
    return out;
  }

  std::vector<Buffer<T>> buffers() {
    std::vector<Buffer<T>> out;
    for (auto& b : ext_bns_) b.collect_buffers(out);
    sel_bn1_.collect_buffers(out);
    sel_bn2_.collect_buffers(out);
    for (auto& st : stages_) {
      st.bn1.collect_buffers(out);
      st.bn2.collect_buffers(out);
      st.proj_bn.collect_buffers(out);
    }
    out.reserve(out.size());
    return out;
  }

  void zero_grad() {
    auto params = parameters();
    zero_grads(params);
  }

private:
  struct Stage {
    Conv3d<T> conv1;
    BatchNorm3d<T> bn1;
    Conv3d<T> conv2;
    BatchNorm3d<T> bn2;
    Conv3d<T> proj;
    BatchNorm3d<T> proj_bn;
  };

  NetworkConfig cfg_;
  std::vector<Conv3d<T>> ext_convs_;
  std::vector<BatchNorm3d<T>> ext_bns_;
  Conv3d<T> sel_conv1_, sel_conv2_;
  BatchNorm3d<T> sel_bn1_, sel_bn2_;
  Linear<T> sel_fc_;
  std::vector<Stage> stages_;
  Linear<T> cls_fc_;
};

}  // namespace dyngest

#endif  // DYNGEST_NETWORK_HPP
