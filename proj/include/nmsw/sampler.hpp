#pragma once

#include <span>
#include <string>
#include <vector>

#include "nmsw/autodiff.hpp"
#include "nmsw/rng.hpp"

namespace nmsw {

/// How each round's one-hot sample is exposed to the graph.
///   scaled: forward onehot * max(softhot); backward as d(onehot_st * softhot)
///   plain:  forward onehot; backward identity onto softhot
///   soft:   the softhot vector itself (gradient checking only)
enum class StMode { scaled, plain, soft };
/// Whether one Gumbel vector serves all K rounds or each round draws anew.
enum class NoiseMode { shared, redraw };

StMode parse_st_mode(const std::string& s);
NoiseMode parse_noise_mode(const std::string& s);
std::string to_string(StMode m);
std::string to_string(NoiseMode m);

/// Standard Gumbel transform of a uniform variate; throws outside (0, 1).
double gumbel(double u);
std::vector<double> gumbel_noise(std::size_t n, CounterRng& rng);

/// softmax_tau(log_probs + g); g is a constant.
ad::Tensor gumbel_softmax(const ad::Tensor& log_probs, std::span<const double> g, double tau);

struct TopKEntry {
  int index = -1;
  ad::Tensor z_softhot;  // [N]
  ad::Tensor z;          // [N]
  double soft_value = 0;  // z_softhot[index]
};

struct TopKDraw {
  std::vector<TopKEntry> entries;
  std::vector<std::vector<double>> gumbels;  // one vector, or one per round
  std::vector<int> indices() const;
};

/// K rounds of Gumbel-Softmax over `probs` ([N], on the simplex), masking each
/// round's argmax out of later rounds.
TopKDraw topk_sample(const ad::Tensor& probs, int k, double tau, CounterRng& rng, StMode st = StMode::scaled,
                     NoiseMode noise = NoiseMode::shared);
/// Same with caller-supplied noise: one vector (shared) or k vectors.
TopKDraw topk_sample(const ad::Tensor& probs, int k, double tau, const std::vector<std::vector<double>>& gumbels,
                     StMode st = StMode::scaled);

/// Straight-through round output for a softhot vector and its argmax.
ad::Tensor straight_through(const ad::Tensor& z_softhot, int index, StMode st);

/// Contracts z [N] with a patch stack [N, ...].
ad::Tensor select_patch(const ad::Tensor& z, const ad::Tensor& patch_stack);

/// Geometric temperature schedule from 2 down to 0.33.
double anneal_tau(double progress);

/// Indices of the k largest probabilities, descending; ties go to the lower index.
std::vector<int> greedy_topk(std::span<const double> probs, int k);

}  // namespace nmsw
