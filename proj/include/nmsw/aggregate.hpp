#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nmsw/autodiff.hpp"
#include "nmsw/volgrid.hpp"

namespace nmsw {

/// Per-class blending logits; the effective local weight is sigmoid(logits).
struct ClassWeights {
  ad::Tensor logits;  // [C]
  bool frozen = false;

  int size() const { return static_cast<int>(logits.numel()); }
  std::vector<double> sigma() const;
};

ClassWeights learnable_class_weights(int num_classes, double init = 0.0);
/// Constant weights that take no part in training; +6 trusts the patches.
ClassWeights freeze_class_weights(int num_classes, double value);

struct PatchPrediction {
  ad::Tensor probs;  // [C, Hp, Wp, Dp]
  Dims3 origin{};
  double soft_value = 1.0;
};

enum class AggMode { normalized, eq6_literal };
AggMode parse_agg_mode(const std::string& s);
std::string to_string(AggMode m);

/// Blends patch predictions into the upsampled global prediction `up`
/// ([C, H, W, D]).
///   normalized:  covered voxels get s*sum(pw*y)/sum(pw) + (1-s)*up, patches
///                accumulated in origin order
///   eq6_literal: each patch in list order assigns s*pw*y + (1-s)*up over its
///                region, later patches overwriting earlier ones
/// Uncovered voxels keep `up` in both modes.
ad::Tensor aggregate(const ad::Tensor& up, const std::vector<PatchPrediction>& patches, const GaussianWeightMap& pw,
                     const ClassWeights& cw, AggMode mode = AggMode::normalized);

/// 1 where at least one selected patch covers the voxel.
std::vector<std::uint8_t> coverage_map(const GridSpec& grid, const std::vector<int>& indices);

}  // namespace nmsw
