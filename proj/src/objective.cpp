#include "nmsw/objective.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nmsw {

using ad::Tensor;

EntropySign parse_entropy_sign(const std::string& s) {
  if (s == "bonus") return EntropySign::bonus;
  if (s == "penalty") return EntropySign::penalty;
  throw std::invalid_argument("unknown entropy sign: " + s);
}

std::string to_string(EntropySign s) { return s == EntropySign::bonus ? "bonus" : "penalty"; }

void LossConfig::validate() const {
  if (dice_weight < 0 || ce_weight < 0) throw std::invalid_argument("loss weights must be non-negative");
  if (lambda < 0) throw std::invalid_argument("lambda must be non-negative");
  if (!(dice_epsilon >= 0)) throw std::invalid_argument("dice_epsilon must be non-negative");
}

Tensor soft_dice(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("soft_dice: shape mismatch " + ad::shape_str(pred.shape()) + " vs " +
                                ad::shape_str(target.shape()));
  if (pred.rank() < 2) throw std::invalid_argument("soft_dice: expected [C, ...]");
  const int c = pred.dim(0);
  const auto m = static_cast<std::size_t>(pred.numel() / c);
  const auto pv = pred.values();
  const auto tv = target.values();
  std::vector<double> inter(static_cast<std::size_t>(c), 0.0), denom(static_cast<std::size_t>(c), 0.0);
  double score = 0;
  for (int ch = 0; ch < c; ++ch) {
    double i = 0, s = 0;
    for (std::size_t x = 0; x < m; ++x) {
      i += pv[ch * m + x] * tv[ch * m + x];
      s += pv[ch * m + x] + tv[ch * m + x];
    }
    inter[static_cast<std::size_t>(ch)] = 2 * i + eps;
    denom[static_cast<std::size_t>(ch)] = s + eps;
    score += (2 * i + eps) / (s + eps);
  }
  auto fn = [c, m, inter, denom, target](std::span<const double> g, const ad::GradSink& grads) {
    const auto tv = target.values();
    if (auto gp = grads[0]; !gp.empty())
      for (int ch = 0; ch < c; ++ch) {
        const double d = denom[static_cast<std::size_t>(ch)];
        const double q = inter[static_cast<std::size_t>(ch)] / (d * d);
        for (std::size_t x = 0; x < m; ++x) gp[ch * m + x] -= g[0] * (2 * tv[ch * m + x] / d - q) / c;
      }
    if (auto gt = grads[1]; !gt.empty())
      throw std::logic_error("soft_dice: gradient w.r.t. the target is not supported");
  };
  return ad::make_result({1}, {1.0 - score / c}, {pred, target}, fn, "soft_dice");
}

Tensor cross_entropy(const Tensor& pred, const std::vector<std::uint8_t>& labels) {
  if (pred.rank() < 2) throw std::invalid_argument("cross_entropy: expected [C, ...]");
  const int c = pred.dim(0);
  const auto m = static_cast<std::size_t>(pred.numel() / c);
  if (labels.size() != m) throw std::invalid_argument("cross_entropy: label count mismatch");
  constexpr double kFloor = 1e-12;
  const auto pv = pred.values();
  double loss = 0;
  for (std::size_t x = 0; x < m; ++x) {
    if (labels[x] >= c) throw std::invalid_argument("cross_entropy: label exceeds class count");
    loss -= std::log(std::max(pv[labels[x] * m + x], kFloor));
  }
  auto fn = [m, labels, pred](std::span<const double> g, const ad::GradSink& grads) {
    auto gp = grads[0];
    const auto pv = pred.values();
    for (std::size_t x = 0; x < m; ++x) {
      const std::size_t i = labels[x] * m + x;
      if (pv[i] > kFloor) gp[i] -= g[0] / (pv[i] * static_cast<double>(m));
    }
  };
  return ad::make_result({1}, {loss / static_cast<double>(m)}, {pred}, fn, "cross_entropy");
}

Tensor seg_loss(const Tensor& pred, const LabelMap& target, const LossConfig& cfg) {
  const int c = pred.dim(0);
  const auto m = target.data.size();
  std::vector<double> oh(static_cast<std::size_t>(c) * m, 0.0);
  for (std::size_t x = 0; x < m; ++x) {
    if (target.data[x] >= c) throw std::invalid_argument("seg_loss: label exceeds class count");
    oh[target.data[x] * m + x] = 1.0;
  }
  auto dice = soft_dice(pred, Tensor::from(pred.shape(), std::move(oh)), cfg.dice_epsilon);
  return ad::add(ad::mul(dice, cfg.dice_weight), ad::mul(cross_entropy(pred, target.data), cfg.ce_weight));
}

Tensor entropy(const Tensor& pi) {
  const auto pv = pi.values();
  double h = 0;
  for (double p : pv)
    if (p > 0) h -= p * std::log(p);
  auto fn = [pi](std::span<const double> g, const ad::GradSink& grads) {
    auto gp = grads[0];
    const auto pv = pi.values();
    // At p = 0 the derivative diverges; the zero-mass entry is left untouched.
    for (std::size_t i = 0; i < pv.size(); ++i)
      if (pv[i] > 0) gp[i] -= g[0] * (std::log(pv[i]) + 1.0);
  };
  return ad::make_result({1}, {h}, {pi}, fn, "entropy");
}

LossTerms total_loss(const Tensor& y_low, const LabelMap& t_low, const Tensor& y_high, const LabelMap& t_high,
                     const std::vector<Tensor>& y_patches, const std::vector<LabelMap>& t_patches, const Tensor& pi,
                     const LossConfig& cfg) {
  if (y_patches.empty()) throw std::invalid_argument("total_loss: need at least one patch prediction");
  if (y_patches.size() != t_patches.size()) throw std::invalid_argument("total_loss: patch/target count mismatch");
  LossTerms t;
  auto low = seg_loss(y_low, t_low, cfg);
  auto high = seg_loss(y_high, t_high, cfg);
  Tensor patch = seg_loss(y_patches[0], t_patches[0], cfg);
  for (std::size_t k = 1; k < y_patches.size(); ++k) patch = ad::add(patch, seg_loss(y_patches[k], t_patches[k], cfg));
  patch = ad::mul(patch, 1.0 / static_cast<double>(y_patches.size()));
  auto h = entropy(pi);
  const double s = cfg.entropy_sign == EntropySign::bonus ? -1.0 : 1.0;
  t.low = low.item();
  t.high = high.item();
  t.patch = patch.item();
  t.entropy = h.item();
  t.total = ad::add(ad::add(ad::add(low, high), patch), ad::mul(h, s * cfg.lambda));
  return t;
}

void OptimConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in [0, 1)");
  if (!(warmup_fraction >= 0 && warmup_fraction <= 1)) throw std::invalid_argument("warmup_fraction must lie in [0, 1]");
}

double lr_at(std::int64_t iteration, std::int64_t total, const OptimConfig& cfg) {
  if (total <= 0 || iteration < 0 || iteration > total) throw std::invalid_argument("lr_at: iteration out of range");
  const double peak_at = cfg.warmup_fraction * static_cast<double>(total);
  const double it = static_cast<double>(iteration);
  if (it < peak_at) return cfg.lr * it / peak_at;
  if (peak_at >= static_cast<double>(total)) return cfg.lr;
  const double p = (it - peak_at) / (static_cast<double>(total) - peak_at);
  return 0.5 * cfg.lr * (1 + std::cos(std::numbers::pi * p));
}

AdamW::AdamW(std::vector<Tensor> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) throw std::invalid_argument("AdamW: parameters must be trainable leaves");
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    const auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
      w[i] -= lr * (cfg_.weight_decay * w[i] + (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps));
    }
    p.zero_grad();
  }
}

}  // namespace nmsw
