#ifndef DYNGEST_EVALUATOR_HPP
#define DYNGEST_EVALUATOR_HPP

#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dyngest/network.hpp"
#include "dyngest/synthdata.hpp"

namespace dyngest {

enum class Pipeline { Dynamic, Static };

inline std::string pipeline_tag(Pipeline p) {
  return p == Pipeline::Dynamic ? "dynamic" : "static";
}

template <typename T>
Tensor<T> assemble_batch(const Dataset& ds, const std::vector<std::size_t>& idxs,
                         const Dims4& dims) {
  const std::size_t clip_sz = dims.c * dims.t * dims.h * dims.w;
  std::vector<T> data(idxs.size() * clip_sz);
  for (std::size_t b = 0; b < idxs.size(); ++b) {
    const auto vals = ds.load_values(idxs[b]);
    if (vals.size() != clip_sz)
      throw ConfigError("clip " + std::to_string(idxs[b]) +
                        " size does not match configured input dims");
    for (std::size_t i = 0; i < clip_sz; ++i)
      data[b * clip_sz + i] = static_cast<T>(vals[i]);
  }
  return Tensor<T>(Shape{idxs.size(), dims.c, dims.t, dims.h, dims.w}, std::move(data));
}

inline double top1_accuracy(const std::vector<int>& predictions,
                            const std::vector<int>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw ConfigError("top1_accuracy: empty or mismatched inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Per-class recall. Classes with zero support are absent from the result.
inline std::map<int, double> per_class_accuracy(const std::vector<int>& predictions,
                                                const std::vector<int>& labels,
                                                int num_classes) {
  std::map<int, std::size_t> support, hits;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ConfigError("label " + std::to_string(labels[i]) + " out of class range");
    ++support[labels[i]];
    if (predictions[i] == labels[i]) ++hits[labels[i]];
  }
  std::map<int, double> out;
  for (const auto& [c, s] : support)
    out[c] = static_cast<double>(hits[c]) / static_cast<double>(s);
  return out;
}

struct FlopReport {
  std::vector<std::pair<std::string, std::uint64_t>> dynamic_entries;
  std::vector<std::pair<std::string, std::uint64_t>> static_entries;
  std::uint64_t dynamic_total = 0;
  std::uint64_t static_total = 0;

  static double gflops(std::uint64_t macs) {
    return 2.0 * static_cast<double>(macs) / 1e9;  // 1 MAC = 2 FLOPs
  }

  std::uint64_t dynamic_macs(const std::string& label) const {
    for (const auto& e : dynamic_entries)
      if (e.first == label) return e.second;
    return 0;
  }
  std::uint64_t static_macs(const std::string& label) const {
    for (const auto& e : static_entries)
      if (e.first == label) return e.second;
    return 0;
  }
};

// Per-window MAC counts for one inference window (batch 1): dynamic pipeline
// vs static baseline (classifier on full features, no selector). Pure
// function of the config.
inline FlopReport flop_report(const NetworkConfig& cfg) {
  GestureNet<float> net(cfg);
  Tensor<float> clip = Tensor<float>::zeros(
      Shape{1, cfg.input_dims.c, cfg.input_dims.t, cfg.input_dims.h, cfg.input_dims.w});
  FlopReport report;
  {
    FlopCounter counter;
    FlopScope scope(counter);
    net.forward(clip, BnMode::Train, /*update_stats=*/false);
    report.dynamic_entries = counter.entries();
    report.dynamic_total = counter.total_macs();
  }
  {
    FlopCounter counter;
    FlopScope scope(counter);
    net.forward_static(clip, BnMode::Train, /*update_stats=*/false);
    report.static_entries = counter.entries();
    report.static_total = counter.total_macs();
  }
  return report;
}

struct EvalReport {
  double top1 = 0;
  std::map<int, double> per_class;
  std::map<int, std::size_t> per_class_support;
  double selection_accuracy = 0;
  FlopReport flops;
  std::map<std::string, double> distance_bins;             // tag -> top1
  std::map<std::string, std::size_t> distance_support;
  std::optional<double> relative_deterioration;            // (near-far)/near*100
  std::size_t total_windows = 0;
  Pipeline pipeline = Pipeline::Dynamic;
};

// Evaluates one window per clip (the whole clip) on the given split.
template <typename T>
EvalReport evaluate(GestureNet<T>& model, const Dataset& ds,
                    const std::vector<std::size_t>& indices, std::size_t batch_size,
                    Pipeline pipeline = Pipeline::Dynamic) {
  if (indices.empty()) throw ConfigError("evaluate: empty index set");
  const auto& cfg = model.config();
  std::vector<int> preds, labels;
  std::vector<Distance> dists;
  std::size_t sel_hits = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    std::vector<std::size_t> batch(
        indices.begin() + start,
        indices.begin() + std::min(indices.size(), start + batch_size));
    Tensor<T> input = assemble_batch<T>(ds, batch, cfg.input_dims);
    Tensor<T> logits;
    std::vector<std::pair<std::size_t, std::size_t>> selected;
    if (pipeline == Pipeline::Dynamic) {
      auto fwd = model.forward(input, BnMode::Eval);
      logits = fwd.logits;
      selected = fwd.scores.selected;
    } else {
      logits = model.forward_static(input, BnMode::Eval);
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const T* row = logits.data().data() + b * cfg.num_classes;
      int best = 0;
      for (std::size_t k = 1; k < cfg.num_classes; ++k)
        if (row[k] > row[best]) best = static_cast<int>(k);
      preds.push_back(best);
      labels.push_back(ds.record(batch[b]).gesture_class);
      dists.push_back(ds.record(batch[b]).distance);
      if (pipeline == Pipeline::Dynamic) {
        const auto lab = derive_patch_labels<T>(ds.center_bbox(batch[b]), cfg);
        const auto [i, j] = selected[b];
        if (lab[i * cfg.grid.n + j] == T(1)) ++sel_hits;
      }
    }
  }

  EvalReport r;
  r.pipeline = pipeline;
  r.total_windows = preds.size();
  r.top1 = top1_accuracy(preds, labels);
  r.per_class = per_class_accuracy(preds, labels, static_cast<int>(cfg.num_classes));
  for (const auto l : labels) ++r.per_class_support[l];
  r.selection_accuracy =
      pipeline == Pipeline::Dynamic
          ? static_cast<double>(sel_hits) / static_cast<double>(preds.size())
          : 0.0;
  r.flops = flop_report(cfg);

  std::map<std::string, std::size_t> bin_hits, bin_total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::string tag = distance_tag(dists[i]);
    ++bin_total[tag];
    if (preds[i] == labels[i]) ++bin_hits[tag];
  }
  for (const auto& [tag, total] : bin_total) {
    r.distance_bins[tag] = static_cast<double>(bin_hits[tag]) / static_cast<double>(total);
    r.distance_support[tag] = total;
  }
  if (r.distance_bins.count("near") && r.distance_bins.count("far") &&
      r.distance_bins["near"] > 0.0)
    r.relative_deterioration =
        (r.distance_bins["near"] - r.distance_bins["far"]) / r.distance_bins["near"] * 100.0;
  return r;
}

inline void write_report_csv(const fs::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write report to " + path.string());
  os.precision(17);
  os << "metric,value\n";
  os << "pipeline," << pipeline_tag(r.pipeline) << "\n";
  os << "windows," << r.total_windows << "\n";
  os << "top1," << r.top1 << "\n";
  os << "selection_accuracy," << r.selection_accuracy << "\n";
  for (const auto& [c, a] : r.per_class) os << "class_" << c << "_top1," << a << "\n";
  for (const auto& [tag, a] : r.distance_bins) os << tag << "_top1," << a << "\n";
  if (r.relative_deterioration)
    os << "relative_deterioration," << *r.relative_deterioration << "\n";
  os << "dynamic_macs," << r.flops.dynamic_total << "\n";
  os << "static_macs," << r.flops.static_total << "\n";
  os << "dynamic_gflops," << FlopReport::gflops(r.flops.dynamic_total) << "\n";
  os << "static_gflops," << FlopReport::gflops(r.flops.static_total) << "\n";
}

inline void write_report_text(std::ostream& os, const EvalReport& r) {
  os << "evaluation report (" << pipeline_tag(r.pipeline) << " pipeline, "
     << r.total_windows << " windows)\n";
  os << "GFLOPS convention: 2*MACs/1e9 per inference window\n\n";
  os.precision(4);
  os << "top-1 accuracy:        " << r.top1 << "\n";
  if (r.pipeline == Pipeline::Dynamic)
    os << "selection accuracy:    " << r.selection_accuracy << "\n";
  os << "\nper-class top-1:\n";
  for (const auto& [c, a] : r.per_class)
    os << "  class " << c << ": " << a << "  (" << r.per_class_support.at(c)
       << " windows)\n";
  os << "\ndistance bins:\n";
  for (const auto& [tag, a] : r.distance_bins)
    os << "  " << tag << ": " << a << "  (" << r.distance_support.at(tag)
       << " windows)\n";
  if (r.relative_deterioration)
    os << "relative deterioration (near->far): " << *r.relative_deterioration << "%\n";
  else
    os << "relative deterioration: absent (missing distance bin)\n";
  os << "\nper-window MACs:\n";
  os << "  dynamic pipeline:\n";
  for (const auto& [label, macs] : r.flops.dynamic_entries)
    os << "    " << label << ": " << macs << " (" << FlopReport::gflops(macs)
       << " GFLOPS)\n";
  os << "    total: " << r.flops.dynamic_total << " ("
     << FlopReport::gflops(r.flops.dynamic_total) << " GFLOPS)\n";
  os << "  static baseline:\n";
  for (const auto& [label, macs] : r.flops.static_entries)
    os << "    " << label << ": " << macs << " (" << FlopReport::gflops(macs)
       << " GFLOPS)\n";
  os << "    total: " << r.flops.static_total << " ("
     << FlopReport::gflops(r.flops.static_total) << " GFLOPS)\n";
}

// (x,y) series for accuracy-vs-FLOPs and accuracy-vs-distance curves.
inline void emit_plot_data(const fs::path& dir, const EvalReport& r) {
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "accuracy_vs_flops.csv");
    os.precision(17);
    os << "pipeline,gflops,top1\n";
    const std::uint64_t macs = r.pipeline == Pipeline::Dynamic ? r.flops.dynamic_total
                                                               : r.flops.static_total;
    os << pipeline_tag(r.pipeline) << "," << FlopReport::gflops(macs) << "," << r.top1
       << "\n";
  }
  {
    std::ofstream os(dir / "accuracy_vs_distance.csv");
    os.precision(17);
    os << "distance,top1\n";
    for (const auto& [tag, a] : r.distance_bins) os << tag << "," << a << "\n";
  }
}

}  // namespace dyngest

#endif  // DYNGEST_EVALUATOR_HPP
