#include "nmsw/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace nmsw {

using ad::Tensor;

StMode parse_st_mode(const std::string& s) {
  if (s == "scaled") return StMode::scaled;
  if (s == "plain") return StMode::plain;
  if (s == "soft") return StMode::soft;
  throw std::invalid_argument("unknown straight-through mode: " + s);
}

NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "shared") return NoiseMode::shared;
  if (s == "redraw") return NoiseMode::redraw;
  throw std::invalid_argument("unknown noise mode: " + s);
}

std::string to_string(StMode m) {
  switch (m) {
    case StMode::scaled: return "scaled";
    case StMode::plain: return "plain";
    case StMode::soft: return "soft";
  }
  return "?";
}

std::string to_string(NoiseMode m) { return m == NoiseMode::shared ? "shared" : "redraw"; }

double gumbel(double u) {
  if (!(u > 0.0 && u < 1.0)) throw std::domain_error("gumbel: u must lie in (0, 1)");
  return -std::log(-std::log(u));
}

std::vector<double> gumbel_noise(std::size_t n, CounterRng& rng) {
  std::vector<double> g(n);
  for (auto& v : g) v = gumbel(rng.uniform_open());
  return g;
}

Tensor gumbel_softmax(const Tensor& log_probs, std::span<const double> g, double tau) {
  if (static_cast<std::int64_t>(g.size()) != log_probs.numel())
    throw std::invalid_argument("gumbel_softmax: noise length mismatch");
  return ad::softmax_tau(ad::add(log_probs, Tensor::from(log_probs.shape(), {g.begin(), g.end()})), tau);
}

std::vector<int> TopKDraw::indices() const {
  std::vector<int> out;
  for (const auto& e : entries) out.push_back(e.index);
  return out;
}

Tensor straight_through(const Tensor& z_softhot, int index, StMode st) {
  if (st == StMode::soft) return z_softhot;
  const auto n = static_cast<std::size_t>(z_softhot.numel());
  const auto i = static_cast<std::size_t>(index);
  std::vector<double> z(n, 0.0);
  const double sv = z_softhot[index];
  z[i] = st == StMode::scaled ? sv : 1.0;
  auto fn = [z_softhot, i, st](std::span<const double> g, const ad::GradSink& grads) {
    auto gs = grads[0];
    if (st == StMode::plain) {
      for (std::size_t j = 0; j < gs.size(); ++j) gs[j] += g[j];
      return;
    }
    // z = onehot_st(s) * s with onehot_st's backward the identity: dz_j/ds_j = s_j + onehot_j.
    const auto s = z_softhot.values();
    for (std::size_t j = 0; j < gs.size(); ++j) gs[j] += g[j] * (s[j] + (j == i ? 1.0 : 0.0));
  };
  return ad::make_result(z_softhot.shape(), std::move(z), {z_softhot}, fn, "straight_through");
}

namespace {

TopKDraw run_rounds(const Tensor& probs, int k, double tau, StMode st,
                    const std::function<const std::vector<double>&(int)>& noise_for_round) {
  if (probs.rank() != 1) throw std::invalid_argument("topk_sample: probabilities must be 1-D");
  const auto n = static_cast<std::size_t>(probs.numel());
  const auto pv = probs.values();
  const auto support = std::count_if(pv.begin(), pv.end(), [](double v) { return v > 0; });
  if (k < 1 || k > support) throw std::invalid_argument("cannot sample without replacement: K exceeds support");

  Tensor log_pi = ad::log(probs);
  std::vector<bool> mask(n, false);
  TopKDraw draw;
  for (int r = 0; r < k; ++r) {
    const Tensor masked = r == 0 ? log_pi : ad::masked_fill(log_pi, mask, -std::numeric_limits<double>::infinity());
    TopKEntry e;
    e.z_softhot = gumbel_softmax(masked, noise_for_round(r), tau);
    // Argmax of the perturbed logits rather than of the softmax, so exp underflow at tiny tau cannot tie.
    const auto mv = masked.values();
    const auto& g = noise_for_round(r);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i] || mv[i] == -std::numeric_limits<double>::infinity()) continue;
      const double v = mv[i] + g[i];
      if (e.index < 0 || v > best) {
        best = v;
        e.index = static_cast<int>(i);
      }
    }
    e.soft_value = e.z_softhot[e.index];
    e.z = straight_through(e.z_softhot, e.index, st);
    mask[static_cast<std::size_t>(e.index)] = true;
    draw.entries.push_back(std::move(e));
  }
  return draw;
}

}  // namespace

TopKDraw topk_sample(const Tensor& probs, int k, double tau, CounterRng& rng, StMode st, NoiseMode noise) {
  std::vector<std::vector<double>> g;
  const auto n = static_cast<std::size_t>(probs.numel());
  const int rounds = noise == NoiseMode::shared ? 1 : std::max(k, 1);
  for (int r = 0; r < rounds; ++r) g.push_back(gumbel_noise(n, rng));
  return topk_sample(probs, k, tau, g, st);
}

TopKDraw topk_sample(const Tensor& probs, int k, double tau, const std::vector<std::vector<double>>& gumbels,
                     StMode st) {
  if (gumbels.empty() || (gumbels.size() != 1 && static_cast<int>(gumbels.size()) != k))
    throw std::invalid_argument("topk_sample: need one shared noise vector or one per round");
  auto draw = run_rounds(probs, k, tau, st,
                         [&](int r) -> const std::vector<double>& { return gumbels[gumbels.size() == 1 ? 0 : r]; });
  draw.gumbels = gumbels;
  return draw;
}

Tensor select_patch(const Tensor& z, const Tensor& patch_stack) {
  if (z.rank() != 1 || patch_stack.rank() < 2 || patch_stack.dim(0) != z.dim(0))
    throw std::invalid_argument("select_patch: N mismatch between " + ad::shape_str(z.shape()) + " and " +
                                ad::shape_str(patch_stack.shape()));
  return ad::matvec(z, patch_stack);
}

double anneal_tau(double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw std::invalid_argument("anneal_tau: progress must lie in [0, 1]");
  return 2.0 * std::pow(0.33 / 2.0, progress);
}

std::vector<int> greedy_topk(std::span<const double> probs, int k) {
  if (k < 0 || k > static_cast<int>(probs.size())) throw std::invalid_argument("greedy_topk: k exceeds N");
  std::vector<int> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace nmsw
