#include "nmsw/gradcheck.hpp"

#include <algorithm>
#include <functional>

#include "nmsw/engine.hpp"

namespace nmsw {

using ad::Tensor;

namespace {

std::vector<double> uniform_vec(CounterRng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform_open();
  return v;
}

std::vector<std::uint8_t> random_labels(CounterRng& rng, std::size_t n, int c) {
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(c)));
  return v;
}

Tensor one_hot(const std::vector<std::uint8_t>& labels, int c, const Dims3& s) {
  std::vector<double> v(labels.size() * static_cast<std::size_t>(c), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) v[labels[i] * labels.size() + i] = 1.0;
  return Tensor::from({c, s[0], s[1], s[2]}, std::move(v));
}

// Random linear read-out so that vector-valued ops reduce to a scalar.
Tensor readout(const Tensor& y, CounterRng& rng) {
  const auto w = Tensor::from(y.shape(), uniform_vec(rng, static_cast<std::size_t>(y.numel()), -1, 1));
  return ad::sum(y * w);
}

using Check = std::function<double(std::uint64_t seed, double eps)>;

double check_softmax(std::uint64_t seed, double eps) {
  CounterRng rng(seed, 1);
  const auto x0 = uniform_vec(rng, 7, -2, 2);
  const double tau = 0.4 + rng.uniform_open();
  CounterRng w(seed, 2);
  return ad::finite_diff_check(
      [&](const Tensor& x) {
        CounterRng r = w;
        return readout(ad::softmax_tau(x, tau), r);
      },
      x0, {7}, eps);
}

double check_dice(std::uint64_t seed, double eps) {
  CounterRng rng(seed, 3);
  const Dims3 s{3, 3, 3};
  const auto x0 = uniform_vec(rng, 3 * 27, -2, 2);
  const auto target = one_hot(random_labels(rng, 27, 3), 3, s);
  return ad::finite_diff_check([&](const Tensor& x) { return soft_dice(ad::softmax_channels(x), target); }, x0,
                               {3, 3, 3, 3}, eps);
}

double check_ce(std::uint64_t seed, double eps) {
  CounterRng rng(seed, 4);
  const auto x0 = uniform_vec(rng, 3 * 27, -2, 2);
  const auto labels = random_labels(rng, 27, 3);
  return ad::finite_diff_check([&](const Tensor& x) { return cross_entropy(ad::softmax_channels(x), labels); }, x0,
                               {3, 3, 3, 3}, eps);
}

// Two overlapping 3^3 patches on a 6^3 volume with C = 2; `which` selects the
// differentiated input: 0 = global logits, 1 = first patch logits, 2 = c_w.
double check_aggregate(std::uint64_t seed, double eps, AggMode mode, int which) {
  CounterRng rng(seed, 5 + static_cast<std::uint64_t>(which));
  const int c = 2;
  const Dims3 ps{3, 3, 3};
  const ad::Shape vshape{c, 6, 6, 6}, pshape{c, 3, 3, 3};
  const auto up0 = uniform_vec(rng, 2 * 216, -2, 2);
  const auto pa0 = uniform_vec(rng, 2 * 27, -2, 2);
  const auto pb0 = uniform_vec(rng, 2 * 27, -2, 2);
  const auto cw0 = uniform_vec(rng, 2, -1.5, 1.5);
  const Dims3 oa{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
  const Dims3 ob{oa[0] + 1, oa[1] + 1, oa[2]};
  const auto pw = gaussian_weight_map(ps);
  CounterRng w(seed, 9);
  const std::vector<double>* x0[] = {&up0, &pa0, &cw0};
  const ad::Shape shapes[] = {vshape, pshape, {c}};
  return ad::finite_diff_check(
      [&](const Tensor& x) {
        const auto up = ad::softmax_channels(which == 0 ? x : Tensor::from(vshape, up0));
        const auto pa = ad::softmax_channels(which == 1 ? x : Tensor::from(pshape, pa0));
        const auto pb = ad::softmax_channels(Tensor::from(pshape, pb0));
        ClassWeights cw;
        cw.logits = which == 2 ? x : Tensor::from({c}, cw0);
        CounterRng r = w;
        return readout(aggregate(up, {{pa, oa, 1.0}, {pb, ob, 1.0}}, pw, cw, mode), r);
      },
      *x0[which], shapes[which], eps);
}

double check_select(std::uint64_t seed, double eps, bool wrt_z) {
  CounterRng rng(seed, 10);
  const auto z0 = uniform_vec(rng, 5, 0, 1);
  const auto s0 = uniform_vec(rng, 5 * 8, -1, 1);
  CounterRng w(seed, 11);
  return ad::finite_diff_check(
      [&](const Tensor& x) {
        const auto z = wrt_z ? x : Tensor::from({5}, z0);
        const auto stack = wrt_z ? Tensor::from({5, 2, 2, 2}, s0) : x;
        CounterRng r = w;
        return readout(select_patch(z, stack), r);
      },
      wrt_z ? z0 : s0, wrt_z ? ad::Shape{5} : ad::Shape{5, 2, 2, 2}, eps);
}

// Miniature NMSW: 12^3 volume, 4^3 patches (125 candidates), one-level nets.
struct Mini {
  Model model;
  Sample sample;
  Prepared prep;
  std::vector<std::vector<double>> gumbels;
};

// Filled in place: `prep` points into `sample`.
void make_mini(Mini& m, std::uint64_t seed) {
  ModelConfig mc;
  mc.volume_shape = {12, 12, 12};
  mc.patch_shape = {4, 4, 4};
  mc.downsample = 2.0;
  mc.num_classes = 3;
  mc.global_channels = {3};
  mc.local_channels = {3};
  mc.cw_init = 0.3;
  m.model = make_model(mc, seed);
  CounterRng rng(seed, 12);
  // Give the zero-initialised score head something to differentiate.
  for (auto* name : {"score.w", "score.b"}) {
    auto& t = m.model.fg.tensors.at(name);
    const auto v = uniform_vec(rng, static_cast<std::size_t>(t.numel()), -1, 1);
    std::copy(v.begin(), v.end(), t.mutable_values().begin());
  }
  m.sample.volume = Volume(mc.volume_shape);
  m.sample.labels = LabelMap(mc.volume_shape, mc.num_classes);
  for (std::size_t i = 0; i < m.sample.volume.data.size(); ++i) {
    m.sample.labels.data[i] = static_cast<std::uint8_t>(rng.below(3));
    m.sample.volume.data[i] = static_cast<float>(0.5 * m.sample.labels.data[i] + 0.2 * rng.uniform_open());
  }
  m.prep = prepare(m.model, m.sample);
  m.gumbels = {gumbel_noise(static_cast<std::size_t>(m.model.grid().size()), rng)};
}

Tensor mini_loss(const Mini& mini, const Params& fg, const Params& fl, const ClassWeights& cw) {
  const auto& m = mini.model;
  const auto& p = mini.prep;
  const auto& ps = m.cfg.patch_shape;
  const auto grid = m.grid();
  const auto g = forward_global(m.global_net, fg, p.x_low);
  const auto pi = ad::softmax_tau(g.score_logits, 1.0);
  const auto draw = topk_sample(pi, 2, 0.7, mini.gumbels, StMode::soft);
  std::vector<PatchPrediction> preds;
  std::vector<Tensor> y_patches;
  std::vector<LabelMap> t_patches;
  for (const auto& e : draw.entries) {
    auto x = ad::reshape(select_patch(e.z, p.patch_stack), {1, ps[0], ps[1], ps[2]});
    preds.push_back({forward_local(m.local_net, fl, x), grid.origins[static_cast<std::size_t>(e.index)], e.soft_value});
    y_patches.push_back(preds.back().probs);
    t_patches.push_back(p.patch_labels[static_cast<std::size_t>(e.index)]);
  }
  const auto up = ad::resize_trilinear(g.probs, m.cfg.volume_shape);
  const auto high = aggregate(up, preds, m.patch_weights(), cw);
  LossConfig lc;
  lc.lambda = 0.05;  // large enough that the entropy gradient is visible
  return total_loss(g.probs, p.y_low, high, p.sample->labels, y_patches, t_patches, pi, lc).total;
}

// ReLU kinks inside the difference stencil spoil the estimate; a narrower
// stencil makes crossing one unlikely and costs nothing in double precision.
constexpr double kNetEps = 1e-6;

// `target`: "global:<param>", "local:<param>" or "cw".
double check_nmsw(std::uint64_t seed, double eps, const std::string& target) {
  Mini mini;
  make_mini(mini, seed);
  const auto& m = mini.model;
  const auto colon = target.find(':');
  const std::string net = target.substr(0, colon);
  const std::string name = colon == std::string::npos ? "" : target.substr(colon + 1);
  const Tensor& t0 = net == "global" ? m.fg.at(name) : net == "local" ? m.fl.at(name) : m.cw.logits;
  const auto x0 = t0.values();
  return ad::finite_diff_check(
      [&](const Tensor& x) {
        Params fg = m.fg, fl = m.fl;
        ClassWeights cw = m.cw;
        if (net == "global") fg.tensors[name] = x;
        if (net == "local") fl.tensors[name] = x;
        if (net == "cw") cw.logits = x;
        return mini_loss(mini, fg, fl, cw);
      },
      std::vector<double>(x0.begin(), x0.end()), t0.shape(), std::min(eps, kNetEps));
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(int seeds, double eps) {
  const std::vector<std::pair<std::string, Check>> checks = {
      {"softmax_tau", check_softmax},
      {"soft_dice", check_dice},
      {"cross_entropy", check_ce},
      {"aggregate.normalized/up", [](auto s, auto e) { return check_aggregate(s, e, AggMode::normalized, 0); }},
      {"aggregate.normalized/patch", [](auto s, auto e) { return check_aggregate(s, e, AggMode::normalized, 1); }},
      {"aggregate.normalized/cw", [](auto s, auto e) { return check_aggregate(s, e, AggMode::normalized, 2); }},
      {"aggregate.eq6_literal/up", [](auto s, auto e) { return check_aggregate(s, e, AggMode::eq6_literal, 0); }},
      {"aggregate.eq6_literal/patch", [](auto s, auto e) { return check_aggregate(s, e, AggMode::eq6_literal, 1); }},
      {"aggregate.eq6_literal/cw", [](auto s, auto e) { return check_aggregate(s, e, AggMode::eq6_literal, 2); }},
      {"select_patch/z", [](auto s, auto e) { return check_select(s, e, true); }},
      {"select_patch/stack", [](auto s, auto e) { return check_select(s, e, false); }},
      {"nmsw_relaxed/score.w", [](auto s, auto e) { return check_nmsw(s, e, "global:score.w"); }},
      {"nmsw_relaxed/global.enc0.a.w", [](auto s, auto e) { return check_nmsw(s, e, "global:enc0.a.w"); }},
      {"nmsw_relaxed/local.head.w", [](auto s, auto e) { return check_nmsw(s, e, "local:head.w"); }},
      {"nmsw_relaxed/cw", [](auto s, auto e) { return check_nmsw(s, e, "cw"); }},
  };
  std::vector<GradCheckResult> out;
  for (const auto& [name, fn] : checks)
    for (int s = 0; s < seeds; ++s) {
      const auto seed = static_cast<std::uint64_t>(s);
      out.push_back({name, seed, fn(seed, eps)});
    }
  return out;
}

}  // namespace nmsw
