#ifndef DYNGEST_SYNTHDATA_HPP
#define DYNGEST_SYNTHDATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyngest/errors.hpp"
#include "dyngest/network.hpp"
#include "dyngest/rng.hpp"
#include "dyngest/tensor.hpp"

namespace dyngest {

namespace fs = std::filesystem;

enum class Distance { Near, Far };

inline std::string distance_tag(Distance d) { return d == Distance::Near ? "near" : "far"; }
inline Distance distance_from_tag(const std::string& s) {
  if (s == "near") return Distance::Near;
  if (s == "far") return Distance::Far;
  throw FormatError("unknown distance tag \"" + s + "\"");
}

constexpr int kNumGestureClasses = 10;
// 0 swipe-left, 1 swipe-right, 2 swipe-up, 3 swipe-down, 4 circle-cw,
// 5 circle-ccw, 6 static, 7 blink, 8 expand, 9 shrink.

struct ClipSpec {
  std::size_t frames = 16;
  std::size_t channels = 3;
  std::size_t height = 96;
  std::size_t width = 96;
  int gesture_class = 0;
  double anchor_x = 48, anchor_y = 48;
  Distance distance = Distance::Near;
  double blob_size() const { return distance == Distance::Near ? 12.0 : 6.0; }
  double contrast() const { return distance == Distance::Near ? 1.0 : 0.5; }
  double noise_sigma = 0.1;
  int num_distractors = 2;
  std::uint64_t seed = 0;
};

struct GeneratedClip {
  std::vector<float> data;  // (C,T,H,W) row-major, values in [0,1]
  std::vector<BBox> bboxes;  // one per frame, integer pixel rects
};

namespace detail {

constexpr double kSwipeSpeed = 2.0;  // px per frame
constexpr double kDistractorIntensity = 0.3;
constexpr double kDistractorSize = 4.0;

struct BlobFrame {
  double cx, cy, side;
  bool visible;
};

inline BlobFrame blob_at(const ClipSpec& spec, std::size_t t) {
  const double s0 = spec.blob_size();
  const double tt = static_cast<double>(t);
  const double span = static_cast<double>(spec.frames > 1 ? spec.frames - 1 : 1);
  BlobFrame f{spec.anchor_x, spec.anchor_y, s0, true};
  switch (spec.gesture_class) {
    case 0: f.cx = spec.anchor_x - kSwipeSpeed * tt; break;
    case 1: f.cx = spec.anchor_x + kSwipeSpeed * tt; break;
    case 2: f.cy = spec.anchor_y - kSwipeSpeed * tt; break;
    case 3: f.cy = spec.anchor_y + kSwipeSpeed * tt; break;
    case 4: {
      const double a = 2.0 * M_PI * tt / static_cast<double>(spec.frames);
      f.cx = spec.anchor_x + s0 * std::cos(a);
      f.cy = spec.anchor_y + s0 * std::sin(a);
      break;
    }
    case 5: {
      const double a = 2.0 * M_PI * tt / static_cast<double>(spec.frames);
      f.cx = spec.anchor_x + s0 * std::cos(a);
      f.cy = spec.anchor_y - s0 * std::sin(a);
      break;
    }
    case 6: break;
    case 7: f.visible = (t % 4) < 2; break;  // intensity square wave, period 4
    case 8: f.side = s0 * (1.0 + tt / span); break;
    case 9: f.side = s0 * (1.0 - 0.5 * tt / span); break;
    default:
      throw ConfigError("gesture class " + std::to_string(spec.gesture_class) +
                        " out of range [0," + std::to_string(kNumGestureClasses) + ")");
  }
  return f;
}

inline BBox blob_rect(const BlobFrame& f) {
  const double side = std::max(1.0, std::round(f.side));
  const double x0 = std::round(f.cx - side / 2.0);
  const double y0 = std::round(f.cy - side / 2.0);
  return BBox{x0, y0, side, side};
}

}  // namespace detail

// Largest excursion of the blob rect from the anchor, per axis. The anchor
// must be at least this far from every frame edge.
inline std::pair<double, double> required_margin(const ClipSpec& spec) {
  double mx = 0, my = 0;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const auto f = detail::blob_at(spec, t);
    const auto r = detail::blob_rect(f);
    mx = std::max({mx, spec.anchor_x - r.x, r.x + r.w - spec.anchor_x});
    my = std::max({my, spec.anchor_y - r.y, r.y + r.h - spec.anchor_y});
  }
  return {mx, my};
}

// Renders one clip: Gaussian background noise, distractor blobs on linear
// paths, then the class-specific gesture blob. Deterministic given the seed.
inline GeneratedClip generate_clip(const ClipSpec& spec) {
  if (spec.blob_size() >= std::min(spec.height, spec.width) / 4.0)
    throw ConfigError("blob size " + std::to_string(spec.blob_size()) +
                      " must be < min(H,W)/4");
  const auto [mx, my] = required_margin(spec);
  if (spec.anchor_x - mx < 0 || spec.anchor_x + mx > spec.width ||
      spec.anchor_y - my < 0 || spec.anchor_y + my > spec.height)
    throw ConfigError("anchor (" + std::to_string(spec.anchor_x) + "," +
                      std::to_string(spec.anchor_y) + ") too close to border: class " +
                      std::to_string(spec.gesture_class) + " requires margin (" +
                      std::to_string(mx) + "," + std::to_string(my) + ") px");

  const std::size_t C = spec.channels, T = spec.frames, H = spec.height, W = spec.width;
  GeneratedClip out;
  out.data.assign(C * T * H * W, 0.0f);
  Xoshiro256 rng(spec.seed);

  if (spec.noise_sigma > 0) {
    for (auto& v : out.data) {
      const double x = rng.next_normal() * spec.noise_sigma;
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }

  auto draw_square = [&](std::size_t t, double x0, double y0, double side,
                         double intensity) {
    const long xi0 = std::lround(x0), yi0 = std::lround(y0);
    const long s = std::lround(side);
    for (long y = std::max(0L, yi0); y < std::min<long>(H, yi0 + s); ++y)
      for (long x = std::max(0L, xi0); x < std::min<long>(W, xi0 + s); ++x)
        for (std::size_t c = 0; c < C; ++c) {
          float& px = out.data[((c * T + t) * H + y) * W + x];
          px = static_cast<float>(std::clamp(px + intensity, 0.0, 1.0));
        }
  };

  for (int d = 0; d < spec.num_distractors; ++d) {
    const double sx = rng.next_double() * W;
    const double sy = rng.next_double() * H;
    const double vx = (rng.next_double() * 2.0 - 1.0) * detail::kSwipeSpeed;
    const double vy = (rng.next_double() * 2.0 - 1.0) * detail::kSwipeSpeed;
    for (std::size_t t = 0; t < T; ++t)
      draw_square(t, sx + vx * t - detail::kDistractorSize / 2.0,
                  sy + vy * t - detail::kDistractorSize / 2.0, detail::kDistractorSize,
                  detail::kDistractorIntensity * spec.contrast());
  }

  out.bboxes.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto f = detail::blob_at(spec, t);
    const BBox r = detail::blob_rect(f);
    out.bboxes[t] = r;
    if (f.visible) draw_square(t, r.x, r.y, r.w, spec.contrast());
  }
  return out;
}

struct ClipRecord {
  std::size_t id = 0;
  std::string path;  // relative to the dataset root
  int gesture_class = 0;
  Distance distance = Distance::Near;
  std::string split;  // "train" | "test"
  std::vector<BBox> bboxes;
};

struct Manifest {
  std::uint32_t format_version = 1;
  std::vector<ClipRecord> clips;

  json to_json() const {
    json arr = json::array();
    for (const auto& c : clips) {
      json boxes = json::array();
      for (const auto& b : c.bboxes) boxes.push_back({b.x, b.y, b.w, b.h});
      arr.push_back(json{{"id", c.id},
                         {"path", c.path},
                         {"gesture_class", c.gesture_class},
                         {"distance", distance_tag(c.distance)},
                         {"split", c.split},
                         {"bboxes", boxes}});
    }
    return json{{"format_version", format_version}, {"clips", arr}};
  }

  static Manifest from_json(const json& j) {
    Manifest m;
    if (!j.contains("format_version") || !j.contains("clips"))
      throw FormatError("manifest missing format_version or clips");
    m.format_version = j["format_version"].get<std::uint32_t>();
    if (m.format_version != 1)
      throw FormatError("unsupported manifest version " + std::to_string(m.format_version));
    std::vector<bool> seen;
    for (const auto& c : j["clips"]) {
      ClipRecord r;
      r.id = c["id"].get<std::size_t>();
      r.path = c["path"].get<std::string>();
      r.gesture_class = c["gesture_class"].get<int>();
      r.distance = distance_from_tag(c["distance"].get<std::string>());
      r.split = c["split"].get<std::string>();
      for (const auto& b : c["bboxes"])
        r.bboxes.push_back(BBox{b[0].get<double>(), b[1].get<double>(),
                                b[2].get<double>(), b[3].get<double>()});
      if (r.id >= seen.size()) seen.resize(r.id + 1, false);
      if (seen[r.id]) throw FormatError("duplicate clip id " + std::to_string(r.id));
      seen[r.id] = true;
      m.clips.push_back(std::move(r));
    }
    return m;
  }

  void save(const fs::path& path) const {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write manifest to " + path.string());
    os << to_json().dump(2) << "\n";
  }

  static Manifest load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot read manifest from " + path.string());
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }
};

struct DatasetParams {
  std::size_t num_clips = 2000;
  double near_fraction = 0.5;
  double train_fraction = 0.8;
  std::size_t frames = 16;
  std::size_t height = 96, width = 96;
  double noise_sigma = 0.1;
  int num_distractors = 2;
  std::uint64_t seed = 1;
  bool force = false;
};

// Writes a balanced, deterministic dataset: clip files in tensor binary
// format plus manifest.json. Classes are round-robin (balance within +-1),
// anchors uniform inside each class's valid margin, train/test split
// id-disjoint via a seeded shuffle.
inline Manifest generate_dataset(const fs::path& out_dir, const DatasetParams& p) {
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !p.force)
    throw ConfigError("output directory " + out_dir.string() +
                      " is not empty (use --force to overwrite)");
  fs::create_directories(out_dir / "clips");

  Xoshiro256 master(p.seed);
  Manifest manifest;
  for (std::size_t i = 0; i < p.num_clips; ++i) {
    ClipSpec spec;
    spec.frames = p.frames;
    spec.height = p.height;
    spec.width = p.width;
    spec.noise_sigma = p.noise_sigma;
    spec.num_distractors = p.num_distractors;
    spec.gesture_class = static_cast<int>(i % kNumGestureClasses);
    spec.distance = master.next_double() < p.near_fraction ? Distance::Near : Distance::Far;
    spec.seed = derive_seed(p.seed, i);
    // Anchor uniform inside the class's margin box. Margins do not depend
    // on the anchor, so a placeholder anchor is fine here.
    spec.anchor_x = spec.anchor_y = p.width / 2.0;
    // +1 px slack: margins are recomputed with the real (fractional) anchor
    // inside generate_clip and rounding can shift the rect by one pixel.
    auto [mx, my] = required_margin(spec);
    mx += 1;
    my += 1;
    spec.anchor_x = mx + master.next_double() * (p.width - 2 * mx);
    spec.anchor_y = my + master.next_double() * (p.height - 2 * my);

    GeneratedClip clip = generate_clip(spec);

    char name[32];
    std::snprintf(name, sizeof(name), "clips/clip_%05zu.dgt", i);
    std::ofstream os(out_dir / name, std::ios::binary);
    if (!os) throw FormatError("cannot write clip file " + (out_dir / name).string());
    write_tensor<float>(os, Shape{spec.channels, spec.frames, spec.height, spec.width},
                        clip.data);

    ClipRecord rec;
    rec.id = i;
    rec.path = name;
    rec.gesture_class = spec.gesture_class;
    rec.distance = spec.distance;
    rec.bboxes = std::move(clip.bboxes);
    manifest.clips.push_back(std::move(rec));
  }

  std::vector<std::size_t> order(p.num_clips);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[master.next_below(i)]);
  const std::size_t n_train =
      static_cast<std::size_t>(std::lround(p.train_fraction * p.num_clips));
  for (std::size_t r = 0; r < order.size(); ++r)
    manifest.clips[order[r]].split = r < n_train ? "train" : "test";

  manifest.save(out_dir / "manifest.json");
  return manifest;
}

// Manifest-backed dataset view. Clips are read from disk on demand; the
// OS page cache keeps hot clips resident.
class Dataset {
public:
  explicit Dataset(fs::path root) : root_(std::move(root)) {
    manifest_ = Manifest::load(root_ / "manifest.json");
    if (manifest_.clips.empty()) throw FormatError("dataset has no clips");
    for (std::size_t i = 0; i < manifest_.clips.size(); ++i) {
      const auto& c = manifest_.clips[i];
      if (!fs::exists(root_ / c.path))
        throw FormatError("manifest references missing file " + c.path);
      if (c.split == "train")
        train_indices_.push_back(i);
      else
        test_indices_.push_back(i);
    }
  }

  const Manifest& manifest() const { return manifest_; }
  const ClipRecord& record(std::size_t idx) const { return manifest_.clips.at(idx); }
  const std::vector<std::size_t>& train_indices() const { return train_indices_; }
  const std::vector<std::size_t>& test_indices() const { return test_indices_; }

  std::vector<float> load_values(std::size_t idx) const;

  // Center-frame bbox, the per-window label source for a whole-clip window.
  const BBox& center_bbox(std::size_t idx) const {
    const auto& b = record(idx).bboxes;
    return b[b.size() / 2];
  }

private:
  fs::path root_;
  Manifest manifest_;
  std::vector<std::size_t> train_indices_, test_indices_;
};

// Reads a clip file: tensor binary format, rank 4 (C,T,H,W), f32.
inline Tensor<float> load_clip(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open clip file " + path.string());
  Tensor<float> t = read_tensor<float>(is);
  if (t.rank() != 4)
    throw FormatError("clip file " + path.string() + ": expected rank 4, got rank " +
                      std::to_string(t.rank()));
  return t;
}

inline std::vector<float> Dataset::load_values(std::size_t idx) const {
  return load_clip(root_ / record(idx).path).data();
}

}  // namespace dyngest

#endif  // DYNGEST_SYNTHDATA_HPP
