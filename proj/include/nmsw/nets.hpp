#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "nmsw/autodiff.hpp"
#include "nmsw/volgrid.hpp"

namespace nmsw {

/// Small encoder-decoder: per level two 3x3x3 convs (the first one strided by
/// 2 below level 0), a trilinear-upsampling decoder with skip concatenation,
/// and a 1x1x1 softmax head. A non-empty `score_grid` adds the patch-score head.
struct NetConfig {
  std::vector<int> channels{8, 16};
  int kernel = 3;
  int num_classes = 4;
  int in_channels = 1;
  /// Append normalised (h, w, d) coordinate ramps as extra input channels.
  bool coord_channels = false;
  Dims3 input_shape{16, 16, 16};
  Dims3 score_grid{0, 0, 0};

  int levels() const { return static_cast<int>(channels.size()); }
  bool has_score_head() const { return score_grid[0] > 0; }
  int score_count() const { return has_score_head() ? static_cast<int>(voxel_count(score_grid)) : 0; }
  int total_in_channels() const { return in_channels + (coord_channels ? 3 : 0); }
  void validate() const;
};

struct Params {
  std::map<std::string, ad::Tensor> tensors;
  std::uint64_t seed = 0;

  const ad::Tensor& at(const std::string& name) const;
  std::vector<ad::Tensor> list() const;
  std::int64_t count() const;
};

Params init_params(const NetConfig& cfg, std::uint64_t seed);

struct GlobalOutput {
  ad::Tensor probs;         // [C, H, W, D]
  ad::Tensor score_logits;  // [N]
};

/// `x` is [in_channels, H, W, D] at cfg.input_shape.
GlobalOutput forward_global(const NetConfig& cfg, const Params& p, const ad::Tensor& x);
ad::Tensor forward_local(const NetConfig& cfg, const Params& p, const ad::Tensor& patch);

/// Conv multiply-accumulates of one forward pass at `input_shape`.
std::int64_t count_macs(const NetConfig& cfg, const Dims3& input_shape);

ad::Tensor to_tensor(const Volume& v, bool requires_grad = false);
ProbMap to_probmap(const ad::Tensor& t);
ad::Tensor to_tensor(const ProbMap& p);

nlohmann::json to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const nlohmann::json& j);

/// Named tensors plus free-form metadata. On disk: `<stem>.json` manifest with
/// names, shapes and byte offsets, and `<stem>.raw` little-endian f32 payload.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ad::Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

void put_params(Checkpoint& ck, const std::string& prefix, const Params& p);
/// Rebuilds the parameter set of `cfg` from `prefix`-named tensors; throws on
/// missing names or shape mismatches.
Params take_params(const Checkpoint& ck, const std::string& prefix, const NetConfig& cfg);

}  // namespace nmsw
