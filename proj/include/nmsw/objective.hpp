#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nmsw/autodiff.hpp"
#include "nmsw/volgrid.hpp"

namespace nmsw {

enum class EntropySign { bonus, penalty };
EntropySign parse_entropy_sign(const std::string& s);
std::string to_string(EntropySign s);

struct LossConfig {
  double dice_weight = 0.8;
  double ce_weight = 0.2;
  double lambda = 1e-4;
  EntropySign entropy_sign = EntropySign::bonus;
  double dice_epsilon = 1e-5;

  void validate() const;
};

/// 1 - mean_c (2 sum p*g + eps) / (sum p + sum g + eps) over [C, ...] maps.
ad::Tensor soft_dice(const ad::Tensor& pred, const ad::Tensor& target, double eps = 1e-5);
/// Mean over voxels of -log(max(pred[label], 1e-12)).
ad::Tensor cross_entropy(const ad::Tensor& pred, const std::vector<std::uint8_t>& labels);
ad::Tensor seg_loss(const ad::Tensor& pred, const LabelMap& target, const LossConfig& cfg = {});
/// -sum pi log pi with 0 log 0 = 0.
ad::Tensor entropy(const ad::Tensor& pi);

struct LossTerms {
  ad::Tensor total;
  double low = 0, high = 0, patch = 0, entropy = 0;
};

/// seg(low) + seg(high) + mean_k seg(patch_k) + s*lambda*H(pi), with s = -1
/// for the exploration bonus and +1 for the penalty.
LossTerms total_loss(const ad::Tensor& y_low, const LabelMap& t_low, const ad::Tensor& y_high, const LabelMap& t_high,
                     const std::vector<ad::Tensor>& y_patches, const std::vector<LabelMap>& t_patches,
                     const ad::Tensor& pi, const LossConfig& cfg);

struct OptimConfig {
  double lr = 2e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.2;

  void validate() const;
};

/// Linear warmup to cfg.lr at warmup_fraction * total, then cosine decay to 0.
double lr_at(std::int64_t iteration, std::int64_t total, const OptimConfig& cfg);

/// Bias-corrected adaptive moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<ad::Tensor> params, OptimConfig cfg);
  /// Applies the gradients currently stored on the parameters, then clears them.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<ad::Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  OptimConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace nmsw
