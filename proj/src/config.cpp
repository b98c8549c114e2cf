#include "nmsw/config.hpp"

#include <fstream>

namespace nmsw {

using nlohmann::json;

json default_config() {
  return json::parse(R"({
    "data": {
      "dir": "data", "n_train": 8, "n_val": 2, "seed": 0,
      "shape": [48, 48, 48], "num_classes": 4,
      "small_count": [4, 6], "small_radius": [3.0, 4.5], "large_radius": [6.0, 9.0],
      "intensities": [0.0, 1.0, -0.6, -0.3], "noise_sigma": 0.1, "twin_classes": true
    },
    "model": {
      "patch_shape": [16, 16, 16], "overlap": 0.5, "downsample": 3.0,
      "global_channels": [8, 16], "local_channels": [8, 16], "coord_channels": true, "cw_init": -1.0
    },
    "train": {
      "dir": "run", "epochs": 40, "iters_per_epoch": 50, "k_topk": 3, "extra_random": 1, "seed": 0,
      "st_mode": "scaled", "noise": "shared", "aggregation": "normalized",
      "sw_baseline": true, "sw_patches": 4, "sw_fg_fraction": 0.6666666666666666
    },
    "loss": {"dice_weight": 0.8, "ce_weight": 0.2, "lambda": 1e-4, "entropy_sign": "bonus", "dice_epsilon": 1e-5},
    "optim": {"lr": 2e-3, "weight_decay": 1e-5, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "warmup_fraction": 0.2},
    "infer": {
      "mode": "nmsw", "k": 4, "aggregation": "normalized", "class_weight": "learned", "seed": 0,
      "split": "val", "out": "infer", "pgm": true
    },
    "bench": {
      "split": "val", "out": "bench.csv", "modes": ["sw", "nmsw", "rf"], "k": [2, 4, 8, "full"],
      "seeds": [0, 1, 2], "aggregation": "normalized", "timing_runs": 3
    },
    "report": {"bench": "bench.csv", "out": "report"}
  })");
}

void merge_config(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError(prefix, "expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError(path, "unknown config key");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      const bool numeric_ok = slot.is_number() && value.is_number();
      if (slot.type() != value.type() && !numeric_ok && !slot.is_array() && !(slot.is_string() || value.is_string()))
        throw ConfigError(path, "wrong value type for config key");
      slot = value;
    }
  }
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  // Build the nested object and reuse the strict merge.
  json patch = value;
  std::string rest = path;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_config(cfg, patch);
}

json resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("", "cannot open config file " + file.string());
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("", "config file is not valid JSON: " + file.string());
    merge_config(cfg, user);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

namespace {

template <class T>
T get(const json& cfg, const std::string& section, const std::string& key) {
  try {
    return cfg.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key, "invalid value for config key");
  }
}

template <class T>
T parsed(const std::string& key, T (*fn)(const std::string&), const std::string& text) {
  try {
    return fn(text);
  } catch (const std::invalid_argument&) {
    throw ConfigError(key, "invalid value '" + text + "' for config key");
  }
}

AggMode agg_of(const json& cfg, const std::string& section) {
  return parsed<AggMode>(section + ".aggregation", parse_agg_mode, get<std::string>(cfg, section, "aggregation"));
}

}  // namespace

int parse_k(const json& v, const std::string& key) {
  if (v.is_string() && v.get<std::string>() == "full") return -1;
  if (v.is_number_integer() && v.get<int>() >= 0) return v.get<int>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos) return std::stoi(s);
  }
  throw ConfigError(key, "k must be a non-negative integer or \"full\"");
}

DataSettings data_settings(const json& cfg) {
  DataSettings d;
  d.dir = get<std::string>(cfg, "data", "dir");
  d.n_train = get<int>(cfg, "data", "n_train");
  d.n_val = get<int>(cfg, "data", "n_val");
  d.seed = get<std::uint64_t>(cfg, "data", "seed");
  auto& s = d.synth;
  s.shape = get<Dims3>(cfg, "data", "shape");
  s.num_classes = get<int>(cfg, "data", "num_classes");
  const auto sc = get<std::array<int, 2>>(cfg, "data", "small_count");
  s.small_count_min = sc[0];
  s.small_count_max = sc[1];
  const auto sr = get<std::array<double, 2>>(cfg, "data", "small_radius");
  s.small_radius_min = sr[0];
  s.small_radius_max = sr[1];
  const auto lr = get<std::array<double, 2>>(cfg, "data", "large_radius");
  s.large_radius_min = lr[0];
  s.large_radius_max = lr[1];
  s.intensities = get<std::vector<double>>(cfg, "data", "intensities");
  s.noise_sigma = get<double>(cfg, "data", "noise_sigma");
  s.twin_classes = get<bool>(cfg, "data", "twin_classes");
  s.seed = d.seed;
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("data", e.what());
  }
  return d;
}

ModelConfig model_settings(const json& cfg) {
  ModelConfig m;
  m.volume_shape = get<Dims3>(cfg, "data", "shape");
  m.num_classes = get<int>(cfg, "data", "num_classes");
  m.patch_shape = get<Dims3>(cfg, "model", "patch_shape");
  m.overlap = get<double>(cfg, "model", "overlap");
  m.downsample = get<double>(cfg, "model", "downsample");
  m.global_channels = get<std::vector<int>>(cfg, "model", "global_channels");
  m.local_channels = get<std::vector<int>>(cfg, "model", "local_channels");
  m.coord_channels = get<bool>(cfg, "model", "coord_channels");
  m.cw_init = get<double>(cfg, "model", "cw_init");
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", e.what());
  }
  return m;
}

TrainConfig train_settings(const json& cfg) {
  TrainConfig t;
  t.epochs = get<int>(cfg, "train", "epochs");
  t.iters_per_epoch = get<int>(cfg, "train", "iters_per_epoch");
  t.k_topk = get<int>(cfg, "train", "k_topk");
  t.extra_random = get<int>(cfg, "train", "extra_random");
  t.seed = get<std::uint64_t>(cfg, "train", "seed");
  t.st = parsed<StMode>("train.st_mode", parse_st_mode, get<std::string>(cfg, "train", "st_mode"));
  t.noise = parsed<NoiseMode>("train.noise", parse_noise_mode, get<std::string>(cfg, "train", "noise"));
  t.agg = agg_of(cfg, "train");
  t.sw_patches = get<int>(cfg, "train", "sw_patches");
  t.sw_fg_fraction = get<double>(cfg, "train", "sw_fg_fraction");
  auto& l = t.loss;
  l.dice_weight = get<double>(cfg, "loss", "dice_weight");
  l.ce_weight = get<double>(cfg, "loss", "ce_weight");
  l.lambda = get<double>(cfg, "loss", "lambda");
  l.entropy_sign =
      parsed<EntropySign>("loss.entropy_sign", parse_entropy_sign, get<std::string>(cfg, "loss", "entropy_sign"));
  l.dice_epsilon = get<double>(cfg, "loss", "dice_epsilon");
  auto& o = t.optim;
  o.lr = get<double>(cfg, "optim", "lr");
  o.weight_decay = get<double>(cfg, "optim", "weight_decay");
  o.beta1 = get<double>(cfg, "optim", "beta1");
  o.beta2 = get<double>(cfg, "optim", "beta2");
  o.eps = get<double>(cfg, "optim", "eps");
  o.warmup_fraction = get<double>(cfg, "optim", "warmup_fraction");
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
  return t;
}

InferSettings infer_settings(const json& cfg) {
  InferSettings s;
  auto& ic = s.infer;
  ic.mode = parsed<InferMode>("infer.mode", parse_infer_mode, get<std::string>(cfg, "infer", "mode"));
  ic.k = parse_k(cfg.at("infer").at("k"), "infer.k");
  ic.agg = agg_of(cfg, "infer");
  ic.seed = get<std::uint64_t>(cfg, "infer", "seed");
  const auto& cw = cfg.at("infer").at("class_weight");
  if (cw.is_number()) {
    ic.cw_frozen = cw.get<double>();
  } else if (!(cw.is_string() && cw.get<std::string>() == "learned")) {
    throw ConfigError("infer.class_weight", "class_weight must be \"learned\" or a number");
  }
  s.split = get<std::string>(cfg, "infer", "split");
  s.out = get<std::string>(cfg, "infer", "out");
  s.pgm = get<bool>(cfg, "infer", "pgm");
  return s;
}

BenchSettings bench_settings(const json& cfg) {
  BenchSettings b;
  b.split = get<std::string>(cfg, "bench", "split");
  b.out = get<std::string>(cfg, "bench", "out");
  b.timing_runs = get<int>(cfg, "bench", "timing_runs");
  const auto agg = agg_of(cfg, "bench");
  const auto modes = get<std::vector<std::string>>(cfg, "bench", "modes");
  const auto seeds = get<std::vector<std::uint64_t>>(cfg, "bench", "seeds");
  const auto& ks = cfg.at("bench").at("k");
  if (!ks.is_array() || ks.empty()) throw ConfigError("bench.k", "k must be a non-empty list");
  if (seeds.empty()) throw ConfigError("bench.seeds", "seeds must be a non-empty list");
  // One row per requested (mode, k, seed); SW has no k and always runs every patch.
  for (const auto& mode_name : modes) {
    const auto mode = parsed<InferMode>("bench.modes", parse_infer_mode, mode_name);
    if (mode == InferMode::sw) {
      for (auto seed : seeds) b.configs.push_back({mode, -1, agg, std::nullopt, seed});
      continue;
    }
    for (const auto& kv : ks)
      for (auto seed : seeds) b.configs.push_back({mode, parse_k(kv, "bench.k"), agg, std::nullopt, seed});
  }
  return b;
}

}  // namespace nmsw
