#ifndef DYNGEST_CONFIG_HPP
#define DYNGEST_CONFIG_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyngest/errors.hpp"
#include "dyngest/ops.hpp"

namespace dyngest {

using json = nlohmann::json;

struct Dims4 {
  std::size_t t = 0, c = 0, h = 0, w = 0;
  bool operator==(const Dims4&) const = default;
};

struct ConvLayerSpec {
  std::size_t out_channels = 0;
  Triple kernel{3, 3, 3};
  Triple stride{1, 1, 1};
  Triple padding{1, 1, 1};
  bool operator==(const ConvLayerSpec&) const = default;
};

// The patch scorer is a fixed sequence: conv3d_bn_relu(stride 1) ->
// avgpool(stride 2) -> conv3d_bn_relu(stride 1) -> global avg pool ->
// linear(->1) -> sigmoid. Only the channel widths vary.
struct SelectorSpec {
  std::size_t conv1_channels = 4;
  std::size_t conv2_channels = 8;
  bool operator==(const SelectorSpec&) const = default;
};

struct StageSpec {
  std::size_t out_channels = 0;
  Triple stride{2, 2, 2};
  bool operator==(const StageSpec&) const = default;
};

struct GridSpec {
  std::size_t m = 1, n = 1;
  bool operator==(const GridSpec&) const = default;
};

namespace detail {

inline void reject_unknown(const json& j, const std::vector<std::string>& allowed,
                           const std::string& where) {
  if (!j.is_object()) throw FormatError("expected object at " + where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || a == it.key();
    if (!ok) throw FormatError("unknown key \"" + it.key() + "\" in " + where);
  }
  for (const auto& a : allowed)
    if (!j.contains(a)) throw FormatError("missing key \"" + a + "\" in " + where);
}

inline Triple triple_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw FormatError("expected 3-element array at " + where);
  return Triple{j[0].get<std::size_t>(), j[1].get<std::size_t>(),
                j[2].get<std::size_t>()};
}

inline Dims4 dims4_from(const json& j, const std::string& where) {
  reject_unknown(j, {"t", "c", "h", "w"}, where);
  return Dims4{j["t"].get<std::size_t>(), j["c"].get<std::size_t>(),
               j["h"].get<std::size_t>(), j["w"].get<std::size_t>()};
}

inline json dims4_to(const Dims4& d) {
  return json{{"t", d.t}, {"c", d.c}, {"h", d.h}, {"w", d.w}};
}

}  // namespace detail

struct NetworkConfig {
  Dims4 input_dims{16, 3, 96, 96};
  Dims4 feature_dims{8, 16, 24, 24};
  GridSpec grid{2, 3};
  std::size_t num_classes = 10;
  double lambda = 2.0;
  std::vector<ConvLayerSpec> extractor_spec;
  SelectorSpec selector_spec;
  std::vector<StageSpec> classifier_spec;
  std::uint64_t seed = 1;

  bool operator==(const NetworkConfig&) const = default;

  std::size_t patch_h() const { return feature_dims.h / grid.m; }
  std::size_t patch_w() const { return feature_dims.w / grid.n; }

  // Two conv3d_bn_relu extractor layers into C'=16 features, 2x3 grid,
  // three residual classifier stages. Trainable on a desktop CPU.
  static NetworkConfig desk_default() {
    NetworkConfig c;
    c.extractor_spec = {
        {8, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}},
        {16, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}},
    };
    c.classifier_spec = {
        {32, {2, 2, 2}},
        {64, {2, 2, 2}},
        {64, {2, 2, 2}},
    };
    c.validate();
    return c;
  }

  Dims4 computed_feature_dims() const {
    Dims4 d = input_dims;
    for (const auto& l : extractor_spec) {
      d.t = conv_out_dim(d.t, l.kernel[0], l.stride[0], l.padding[0]);
      d.h = conv_out_dim(d.h, l.kernel[1], l.stride[1], l.padding[1]);
      d.w = conv_out_dim(d.w, l.kernel[2], l.stride[2], l.padding[2]);
      d.c = l.out_channels;
    }
    return d;
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (lambda < 0) throw ConfigError("lambda must be >= 0");
    if (grid.m == 0 || grid.n == 0) throw ConfigError("grid dims must be positive");
    if (feature_dims.h % grid.m != 0)
      throw ConfigError("grid m=" + std::to_string(grid.m) +
                        " does not divide feature height " +
                        std::to_string(feature_dims.h));
    if (feature_dims.w % grid.n != 0)
      throw ConfigError("grid n=" + std::to_string(grid.n) +
                        " does not divide feature width " +
                        std::to_string(feature_dims.w));
    if (extractor_spec.empty()) throw ConfigError("extractor_spec must not be empty");
    if (classifier_spec.empty()) throw ConfigError("classifier_spec must not be empty");
    const Dims4 d = computed_feature_dims();
    if (!(d == feature_dims))
      throw ConfigError(
          "extractor output dims (t=" + std::to_string(d.t) + ",c=" +
          std::to_string(d.c) + ",h=" + std::to_string(d.h) + ",w=" +
          std::to_string(d.w) + ") do not equal declared feature_dims (t=" +
          std::to_string(feature_dims.t) + ",c=" + std::to_string(feature_dims.c) +
          ",h=" + std::to_string(feature_dims.h) + ",w=" +
          std::to_string(feature_dims.w) + ")");
    if (selector_spec.conv1_channels == 0 || selector_spec.conv2_channels == 0)
      throw ConfigError("selector channel widths must be positive");
  }

  json to_json() const {
    json ext = json::array();
    for (const auto& l : extractor_spec)
      ext.push_back(json{{"out_channels", l.out_channels},
                         {"kernel", l.kernel},
                         {"stride", l.stride},
                         {"padding", l.padding}});
    json cls = json::array();
    for (const auto& s : classifier_spec)
      cls.push_back(json{{"out_channels", s.out_channels}, {"stride", s.stride}});
    return json{
        {"input_dims", detail::dims4_to(input_dims)},
        {"feature_dims", detail::dims4_to(feature_dims)},
        {"grid", json{{"m", grid.m}, {"n", grid.n}}},
        {"num_classes", num_classes},
        {"lambda", lambda},
        {"extractor_spec", ext},
        {"selector_spec", json{{"conv1_channels", selector_spec.conv1_channels},
                               {"conv2_channels", selector_spec.conv2_channels}}},
        {"classifier_spec", cls},
        {"seed", seed},
    };
  }

  static NetworkConfig from_json(const json& j) {
    detail::reject_unknown(j,
                           {"input_dims", "feature_dims", "grid", "num_classes",
                            "lambda", "extractor_spec", "selector_spec",
                            "classifier_spec", "seed"},
                           "network config");
    NetworkConfig c;
    c.input_dims = detail::dims4_from(j["input_dims"], "input_dims");
    c.feature_dims = detail::dims4_from(j["feature_dims"], "feature_dims");
    detail::reject_unknown(j["grid"], {"m", "n"}, "grid");
    c.grid = {j["grid"]["m"].get<std::size_t>(), j["grid"]["n"].get<std::size_t>()};
    c.num_classes = j["num_classes"].get<std::size_t>();
    c.lambda = j["lambda"].get<double>();
    c.extractor_spec.clear();
    for (std::size_t i = 0; i < j["extractor_spec"].size(); ++i) {
      const auto& l = j["extractor_spec"][i];
      detail::reject_unknown(l, {"out_channels", "kernel", "stride", "padding"},
                             "extractor_spec[" + std::to_string(i) + "]");
      ConvLayerSpec s;
      s.out_channels = l["out_channels"].get<std::size_t>();
      s.kernel = detail::triple_from(l["kernel"], "kernel");
      s.stride = detail::triple_from(l["stride"], "stride");
      s.padding = detail::triple_from(l["padding"], "padding");
      c.extractor_spec.push_back(s);
    }
    detail::reject_unknown(j["selector_spec"], {"conv1_channels", "conv2_channels"},
                           "selector_spec");
    c.selector_spec.conv1_channels = j["selector_spec"]["conv1_channels"].get<std::size_t>();
    c.selector_spec.conv2_channels = j["selector_spec"]["conv2_channels"].get<std::size_t>();
    c.classifier_spec.clear();
    for (std::size_t i = 0; i < j["classifier_spec"].size(); ++i) {
      const auto& l = j["classifier_spec"][i];
      detail::reject_unknown(l, {"out_channels", "stride"},
                             "classifier_spec[" + std::to_string(i) + "]");
      StageSpec s;
      s.out_channels = l["out_channels"].get<std::size_t>();
      s.stride = detail::triple_from(l["stride"], "stride");
      c.classifier_spec.push_back(s);
    }
    c.seed = j["seed"].get<std::uint64_t>();
    c.validate();
    return c;
  }
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr0 = 1e-3;
  double momentum = 0.9;
  double lambda = 2.0;
  std::uint64_t seed = 1;
  bool determinism = true;
  std::size_t checkpoint_every = 10;
  std::size_t eval_every = 5;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr0 <= 0) throw ConfigError("lr0 must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (lambda < 0) throw ConfigError("lambda must be >= 0");
    if (checkpoint_every < 1 || eval_every < 1)
      throw ConfigError("checkpoint_every and eval_every must be >= 1");
  }

  json to_json() const {
    return json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"lr0", lr0},
                {"momentum", momentum},
                {"lambda", lambda},
                {"seed", seed},
                {"determinism", determinism},
                {"checkpoint_every", checkpoint_every},
                {"eval_every", eval_every}};
  }

  static TrainConfig from_json(const json& j) {
    detail::reject_unknown(j,
                           {"epochs", "batch_size", "lr0", "momentum", "lambda", "seed",
                            "determinism", "checkpoint_every", "eval_every"},
                           "train config");
    TrainConfig c;
    c.epochs = j["epochs"].get<std::size_t>();
    c.batch_size = j["batch_size"].get<std::size_t>();
    c.lr0 = j["lr0"].get<double>();
    c.momentum = j["momentum"].get<double>();
    c.lambda = j["lambda"].get<double>();
    c.seed = j["seed"].get<std::uint64_t>();
    c.determinism = j["determinism"].get<bool>();
    c.checkpoint_every = j["checkpoint_every"].get<std::size_t>();
    c.eval_every = j["eval_every"].get<std::size_t>();
    c.validate();
    return c;
  }
};

}  // namespace dyngest

#endif  // DYNGEST_CONFIG_HPP
