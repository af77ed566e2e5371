#ifndef DYNGEST_STREAM_HPP
#define DYNGEST_STREAM_HPP

#include <cstdint>
#include <fstream>
#include <ostream>
#include <utility>
#include <vector>

#include "dyngest/evaluator.hpp"
#include "dyngest/network.hpp"

namespace dyngest {

// Window starts 0, s, 2s, ... while start+T <= L.
inline std::vector<std::pair<std::size_t, std::size_t>> sliding_windows(
    std::size_t stream_len, std::size_t window, std::size_t stride) {
  if (stream_len < window)
    throw ConfigError("stream shorter than window: " + std::to_string(stream_len) +
                      " < " + std::to_string(window));
  if (stride < 1) throw ConfigError("window stride must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start + window <= stream_len; start += stride)
    out.emplace_back(start, start + window);
  return out;
}

struct WindowPrediction {
  std::size_t start = 0, end = 0;
  int predicted_class = 0;
  std::vector<double> probabilities;  // sums to 1
  std::size_t sel_i = 0, sel_j = 0;
  std::uint64_t macs = 0;  // per-window dynamic MACs
};

// Runs the frozen model over each T-frame window of a (C,L,H,W) stream.
// Windows are independent; each prediction is attributed to the window's
// last frame for framewise reporting. Default stride T/2.
template <typename T>
std::vector<WindowPrediction> infer_stream(GestureNet<T>& model,
                                           const std::vector<T>& stream,
                                           std::size_t stream_len,
                                           std::size_t stride = 0) {
  const auto& cfg = model.config();
  const std::size_t C = cfg.input_dims.c, H = cfg.input_dims.h, W = cfg.input_dims.w;
  const std::size_t win = cfg.input_dims.t;
  if (stream.size() != C * stream_len * H * W)
    throw ConfigError("stream buffer size does not match configured channels/resolution");
  if (stride == 0) stride = std::max<std::size_t>(1, win / 2);
  const auto windows = sliding_windows(stream_len, win, stride);
  const std::uint64_t per_window_macs = flop_report(cfg).dynamic_total;

  std::vector<WindowPrediction> out;
  for (const auto& [start, end] : windows) {
    std::vector<T> data(C * win * H * W);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < win; ++t)
        std::copy(stream.begin() + (c * stream_len + start + t) * H * W,
                  stream.begin() + (c * stream_len + start + t + 1) * H * W,
                  data.begin() + (c * win + t) * H * W);
    Tensor<T> clip(Shape{1, C, win, H, W}, std::move(data));
    auto fwd = model.forward(clip, BnMode::Eval);
    Tensor<T> probs = softmax(fwd.logits);

    WindowPrediction p;
    p.start = start;
    p.end = end;
    p.probabilities.resize(cfg.num_classes);
    int best = 0;
    for (std::size_t k = 0; k < cfg.num_classes; ++k) {
      p.probabilities[k] = static_cast<double>(probs.data()[k]);
      if (probs.data()[k] > probs.data()[best]) best = static_cast<int>(k);
    }
    p.predicted_class = best;
    p.sel_i = fwd.scores.selected[0].first;
    p.sel_j = fwd.scores.selected[0].second;
    p.macs = per_window_macs;
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_stream_csv(std::ostream& os,
                             const std::vector<WindowPrediction>& preds,
                             std::size_t stride) {
  os << "# stride=" << stride << " attribution=last_frame\n";
  os << "window_start,window_end,pred_class,max_prob,sel_i,sel_j,macs\n";
  os.precision(17);
  for (const auto& p : preds)
    os << p.start << "," << p.end << "," << p.predicted_class << ","
       << p.probabilities[p.predicted_class] << "," << p.sel_i << "," << p.sel_j << ","
       << p.macs << "\n";
}

}  // namespace dyngest

#endif  // DYNGEST_STREAM_HPP
