#pragma once

// key=value run configuration shared by the CLI, the trainer and the evaluation tools.

#include "sft/common.hpp"
#include "sft/event_io.hpp"
#include "sft/losses.hpp"
#include "sft/synthgen.hpp"
#include "sft/tracker.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace sft {

struct TrainConfig {
  int epochs = 50;
  int finetune_epochs = 20;
  double lr_backbone = 4e-4;
  double lr_gcn = 5e-4;
  double finetune_lr_backbone = 4e-5;
  double finetune_lr_gcn = 5e-4;
  double weight_decay = 1e-4;
  int batch_size = 38;
  int samples_per_sequence = 16;
  int max_delta = 10;
  double center_jitter = 0.25;  // fraction of sqrt(w h)
  double scale_jitter = 0.1;
  int probe_size = 16;
  LossWeights lambda{};

  static TrainConfig full() { return {}; }
  static TrainConfig desk() {
    TrainConfig t;
    t.epochs = 50 / 5;
    t.finetune_epochs = 20 / 5;
    t.batch_size = 8;
    t.samples_per_sequence = 64;
    return t;
  }
};

struct RunConfig {
  std::string scale = "desk";
  ModelConfig model = ModelConfig::desk();
  TrainConfig train = TrainConfig::desk();
  SynthDatasetConfig data{};
  int k = 3;
  int warmup = 10;
  std::uint64_t seed = 0;

  static RunConfig preset(const std::string& scale) {
    RunConfig c;
    if (scale == "desk") return c;
    if (scale != "full") throw ArgumentError(detail::cat("scale must be desk|full, got '", scale, "'"));
    c.scale = "full";
    c.model = ModelConfig::full();
    c.train = TrainConfig::full();
    return c;
  }
};

namespace config_detail {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else {
    T v{};
    const char* b = text.data();
    const char* e = b + text.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc{} || ptr != e)
      throw ArgumentError(detail::cat("invalid value '", text, "' for key '", key, "'"));
    return v;
  }
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Key make_key(std::string name, Access access) {
  return {name,
          [name, access](RunConfig& c, const std::string& v) { access(c) = parse_value<T>(name, v); },
          [access](const RunConfig& c) { return format_value<T>(access(const_cast<RunConfig&>(c))); }};
}

#define SFT_KEY(T, name, expr) make_key<T>(name, [](RunConfig& c) -> T& { return expr; })

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"scale", [](RunConfig&, const std::string&) {}, [](const RunConfig& c) { return c.scale; }},
      SFT_KEY(std::uint64_t, "seed", c.seed),
      SFT_KEY(int, "embed_dim", c.model.embed_dim),
      SFT_KEY(int, "patch_size", c.model.patch_size),
      SFT_KEY(int, "template_size", c.model.template_size),
      SFT_KEY(int, "search_size", c.model.search_size),
      SFT_KEY(int, "depth_slow", c.model.depth_slow),
      SFT_KEY(int, "depth_fast", c.model.depth_fast),
      SFT_KEY(int, "heads", c.model.heads),
      SFT_KEY(int, "mlp_ratio", c.model.mlp_ratio),
      SFT_KEY(int, "gcn_dim1", c.model.gcn_dim1),
      SFT_KEY(int, "gcn_dim2", c.model.gcn_dim2),
      SFT_KEY(int, "voxel_t", c.model.grid.t),
      SFT_KEY(int, "voxel_y", c.model.grid.y),
      SFT_KEY(int, "voxel_x", c.model.grid.x),
      SFT_KEY(int, "knn_k", c.model.knn_k),
      SFT_KEY(int, "max_points", c.model.max_points),
      SFT_KEY(std::string, "plan_slow", c.model.plan_slow),
      SFT_KEY(std::string, "plan_fast", c.model.plan_fast),
      SFT_KEY(double, "template_factor", c.model.template_factor),
      SFT_KEY(double, "search_factor", c.model.search_factor),
      SFT_KEY(int, "epochs", c.train.epochs),
      SFT_KEY(int, "finetune_epochs", c.train.finetune_epochs),
      SFT_KEY(double, "lr_backbone", c.train.lr_backbone),
      SFT_KEY(double, "lr_gcn", c.train.lr_gcn),
      SFT_KEY(double, "finetune_lr_backbone", c.train.finetune_lr_backbone),
      SFT_KEY(double, "finetune_lr_gcn", c.train.finetune_lr_gcn),
      SFT_KEY(double, "weight_decay", c.train.weight_decay),
      SFT_KEY(int, "batch_size", c.train.batch_size),
      SFT_KEY(int, "samples_per_sequence", c.train.samples_per_sequence),
      SFT_KEY(int, "max_delta", c.train.max_delta),
      SFT_KEY(double, "center_jitter", c.train.center_jitter),
      SFT_KEY(double, "scale_jitter", c.train.scale_jitter),
      SFT_KEY(int, "probe_size", c.train.probe_size),
      SFT_KEY(double, "lambda_focal", c.train.lambda.focal),
      SFT_KEY(double, "lambda_l1", c.train.lambda.l1),
      SFT_KEY(double, "lambda_giou", c.train.lambda.giou),
      SFT_KEY(double, "lambda_kd", c.train.lambda.kd),
      SFT_KEY(int, "sensor_h", c.data.sensor.height),
      SFT_KEY(int, "sensor_w", c.data.sensor.width),
      SFT_KEY(std::int64_t, "T", c.data.T),
      SFT_KEY(std::int64_t, "delta_t", c.data.delta_t),
      SFT_KEY(int, "num_sequences", c.data.num_sequences),
      SFT_KEY(double, "box_min", c.data.box_min),
      SFT_KEY(double, "box_max", c.data.box_max),
      SFT_KEY(double, "speed_max", c.data.speed_max),
      SFT_KEY(double, "amplitude_max", c.data.amplitude_max),
      SFT_KEY(double, "edge_rate", c.data.edge_rate),
      SFT_KEY(double, "bg_rate", c.data.bg_rate),
      SFT_KEY(int, "k", c.k),
      SFT_KEY(int, "warmup", c.warmup),
  };
  return table;
}

#undef SFT_KEY

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_detail::keys()) out.push_back(k.name);
  return out;
}

inline bool is_config_key(const std::string& name) {
  for (const auto& k : config_detail::keys())
    if (k.name == name) return true;
  return false;
}

/// Applies key=value overrides; "scale" resets to its preset first so it may appear anywhere.
inline void apply_overrides(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [key, value] : kv)
    if (key == "scale") cfg = RunConfig::preset(value);
  for (const auto& [key, value] : kv) {
    if (key == "scale") continue;
    const config_detail::Key* found = nullptr;
    for (const auto& k : config_detail::keys())
      if (k.name == key) found = &k;
    if (!found) {
      std::string valid;
      for (const auto& k : config_detail::keys()) valid += (valid.empty() ? "" : ", ") + k.name;
      throw ArgumentError(detail::cat("unknown config key '", key, "'; valid keys: ", valid));
    }
    found->set(cfg, value);
  }
}

inline RunConfig parse_config(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto v = detail::trim(line);
    if (v.empty() || v.front() == '#' || v.front() == '[') continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos) throw ArgumentError(detail::cat("config line ", line_no, ": expected key=value"));
    kv.emplace_back(std::string(detail::trim(v.substr(0, eq))), std::string(detail::trim(v.substr(eq + 1))));
  }
  RunConfig cfg;
  apply_overrides(cfg, kv);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError(detail::cat("cannot open config ", path.string()));
  return parse_config(in);
}

inline std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_detail::keys()) os << k.name << '=' << k.get(cfg) << '\n';
  return os.str();
}

inline std::map<std::string, std::string> config_to_map(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& k : config_detail::keys()) out[k.name] = k.get(cfg);
  return out;
}

}  // namespace sft
