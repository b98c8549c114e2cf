#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nmsw/engine.hpp"
#include "nmsw/synth.hpp"

namespace nmsw {

/// Raised for unknown keys and ill-typed values; `key()` is the dotted path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key.empty() ? what : what + ": " + key), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Every recognised key with its default value.
nlohmann::json default_config();

/// Overlays `user` onto `base`; any key absent from `base` is an error.
void merge_config(nlohmann::json& base, const nlohmann::json& user, const std::string& prefix = "");

/// Applies one `section.key=value` override; the value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

/// Defaults, then the optional file, then overrides.
nlohmann::json resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

struct DataSettings {
  std::string dir;
  int n_train = 8, n_val = 2;
  std::uint64_t seed = 0;
  SynthConfig synth;
};

struct InferSettings {
  InferConfig infer;
  std::string split, out;
  bool pgm = true;
};

struct BenchSettings {
  std::string split, out;
  std::vector<InferConfig> configs;
  int timing_runs = 3;
};

DataSettings data_settings(const nlohmann::json& cfg);
ModelConfig model_settings(const nlohmann::json& cfg);
TrainConfig train_settings(const nlohmann::json& cfg);
InferSettings infer_settings(const nlohmann::json& cfg);
BenchSettings bench_settings(const nlohmann::json& cfg);

/// "full" or a non-negative integer; -1 stands for full.
int parse_k(const nlohmann::json& v, const std::string& key);

}  // namespace nmsw
