#include <cmath>
#include <numeric>

#include "doctest.h"
#include "nmsw/objective.hpp"
#include "nmsw/rng.hpp"

using namespace nmsw;
using ad::Tensor;

namespace {

const Dims3 kShape{2, 2, 2};

LabelMap labels_of(std::vector<std::uint8_t> v, int c, Dims3 s = kShape) {
  LabelMap l(s, c);
  l.data = std::move(v);
  return l;
}

Tensor hot(const LabelMap& l) {
  const auto n = static_cast<std::size_t>(voxel_count(l.shape));
  std::vector<double> v(n * static_cast<std::size_t>(l.num_classes), 0.0);
  for (std::size_t i = 0; i < n; ++i) v[l.data[i] * n + i] = 1.0;
  return Tensor::from({l.num_classes, l.shape[0], l.shape[1], l.shape[2]}, std::move(v));
}

Tensor uniform_pred(int c, Dims3 s = kShape) {
  return Tensor::full({c, s[0], s[1], s[2]}, 1.0 / c);
}

LabelMap random_labels(CounterRng& rng, int c, Dims3 s) {
  LabelMap l(s, c);
  for (auto& x : l.data) x = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(c)));
  return l;
}

Tensor random_probs(CounterRng& rng, int c, Dims3 s, bool grad = false) {
  const auto n = static_cast<std::size_t>(c * voxel_count(s));
  std::vector<double> v(n);
  for (auto& x : v) x = 4 * rng.uniform_open() - 2;
  return ad::softmax_channels(Tensor::from({c, s[0], s[1], s[2]}, std::move(v), grad));
}

}  // namespace

TEST_CASE("soft dice closed forms") {
  const auto l = labels_of({0, 1, 0, 1, 0, 1, 0, 1}, 2);
  CHECK(soft_dice(hot(l), hot(l)).item() <= 1e-5);
  // Everything predicted as class 0, target entirely class 1.
  const auto all1 = labels_of(std::vector<std::uint8_t>(8, 1), 2), all0 = labels_of(std::vector<std::uint8_t>(8, 0), 2);
  CHECK(soft_dice(hot(all0), hot(all1)).item() == doctest::Approx(1.0).epsilon(1e-5));
  // Uniform 0.5 on a balanced two-class set: each class dice = 0.5.
  CHECK(soft_dice(uniform_pred(2), hot(l)).item() == doctest::Approx(0.5).epsilon(1e-5));
  CHECK_THROWS(soft_dice(uniform_pred(3), hot(l)));
}

TEST_CASE("cross entropy closed forms") {
  const auto l = labels_of({0, 1, 2, 3, 0, 1, 2, 3}, 4);
  CHECK(cross_entropy(hot(l), l.data).item() <= 1e-6);
  CHECK(cross_entropy(uniform_pred(4), l.data).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  // Zero probability on the target is clamped, not infinite.
  const auto wrong = labels_of({1, 2, 3, 0, 1, 2, 3, 0}, 4);
  CHECK(cross_entropy(hot(wrong), l.data).item() == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("seg loss is the 0.8/0.2 composite") {
  CHECK(0.8 * 0.5 + 0.2 * 1.3863 == doctest::Approx(0.6773).epsilon(1e-4));
  CounterRng rng(1, 0);
  for (int t = 0; t < 20; ++t) {
    const auto l = random_labels(rng, 3, {3, 3, 2});
    const auto p = random_probs(rng, 3, {3, 3, 2});
    const double want = 0.8 * soft_dice(p, hot(l)).item() + 0.2 * cross_entropy(p, l.data).item();
    CHECK(seg_loss(p, l).item() == doctest::Approx(want).epsilon(1e-12));
  }
  const auto l = labels_of({0, 1, 0, 1, 0, 1, 0, 1}, 2);
  CHECK(seg_loss(hot(l), l).item() <= 1e-5);
}

TEST_CASE("seg loss is monotone in one voxel's correct-class probability") {
  CounterRng rng(2, 0);
  for (int t = 0; t < 200; ++t) {
    const auto l = random_labels(rng, 3, kShape);
    auto p = random_probs(rng, 3, kShape).detach();
    const double before = seg_loss(p, l).item();
    // Move mass from the correct class to another one at a random voxel.
    const auto v = static_cast<std::int64_t>(rng.below(8));
    const int y = l.data[static_cast<std::size_t>(v)], o = (y + 1) % 3;
    auto pv = p.mutable_values();
    const double delta = pv[static_cast<std::size_t>(y * 8 + v)] * rng.uniform_open();
    pv[static_cast<std::size_t>(y * 8 + v)] -= delta;
    pv[static_cast<std::size_t>(o * 8 + v)] += delta;
    CHECK(seg_loss(p, l).item() >= before - 1e-12);
  }
}

TEST_CASE("dice and cross entropy gradients") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    CounterRng rng(s, 3);
    const Dims3 sh{3, 2, 2};
    const auto l = random_labels(rng, 3, sh);
    std::vector<double> x0(36);
    for (auto& x : x0) x = 4 * rng.uniform_open() - 2;
    const ad::Shape shape{3, 3, 2, 2};
    CHECK(ad::finite_diff_check([&](const Tensor& x) { return soft_dice(ad::softmax_channels(x), hot(l)); }, x0,
                                shape) < 1e-3);
    CHECK(ad::finite_diff_check([&](const Tensor& x) { return cross_entropy(ad::softmax_channels(x), l.data); }, x0,
                                shape) < 1e-3);
  }
}

TEST_CASE("entropy closed forms and range") {
  CHECK(entropy(Tensor::from({3}, {0, 1, 0})).item() == 0.0);
  CHECK(entropy(Tensor::full({216}, 1.0 / 216)).item() == doctest::Approx(5.3753).epsilon(1e-4));
  CHECK(entropy(Tensor::full({2}, 0.5)).item() == doctest::Approx(0.6931).epsilon(1e-4));
  CounterRng rng(4, 0);
  for (int t = 0; t < 500; ++t) {
    const int n = 1 + static_cast<int>(rng.below(20));
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.below(4) == 0 ? 0.0 : rng.uniform_open();
    v[0] += 1e-3;
    const double z = std::accumulate(v.begin(), v.end(), 0.0);
    for (auto& x : v) x /= z;
    const double h = entropy(Tensor::from({n}, v)).item();
    CHECK(h >= 0);
    CHECK(h <= std::log(n) + 1e-12);
  }
}

TEST_CASE("total loss: perfect predictions") {
  const auto l = labels_of({0, 1, 0, 1, 0, 1, 0, 1}, 2);
  const auto y = hot(l);
  LossConfig cfg;
  for (auto sign : {EntropySign::bonus, EntropySign::penalty}) {
    cfg.entropy_sign = sign;
    const auto t = total_loss(y, l, y, l, {y, y}, {l, l}, Tensor::from({3}, {0, 1, 0}), cfg);
    CHECK(std::abs(t.total.item()) <= 1e-5);
  }
  cfg.entropy_sign = EntropySign::bonus;
  const auto pi = Tensor::full({216}, 1.0 / 216);
  CHECK(total_loss(y, l, y, l, {y}, {l}, pi, cfg).total.item() == doctest::Approx(-5.3753e-4).epsilon(1e-3));
  cfg.entropy_sign = EntropySign::penalty;
  CHECK(total_loss(y, l, y, l, {y}, {l}, pi, cfg).total.item() == doctest::Approx(5.3753e-4).epsilon(1e-3));
  CHECK_THROWS(total_loss(y, l, y, l, {}, {}, pi, cfg));
}

TEST_CASE("total loss sums its terms and is bounded below") {
  CounterRng rng(5, 0);
  LossConfig cfg;
  cfg.lambda = 0.3;
  for (int t = 0; t < 20; ++t) {
    const Dims3 lo{2, 2, 2}, hi{4, 4, 4}, ps{2, 2, 2};
    const auto tl = random_labels(rng, 3, lo), th = random_labels(rng, 3, hi);
    const auto yl = random_probs(rng, 3, lo), yh = random_probs(rng, 3, hi);
    std::vector<Tensor> yp;
    std::vector<LabelMap> tp;
    const int k = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < k; ++i) {
      yp.push_back(random_probs(rng, 3, ps));
      tp.push_back(random_labels(rng, 3, ps));
    }
    const auto pi = ad::softmax_tau(Tensor::from({5}, {rng.uniform_open(), 0.0, 1.0, 2.0, rng.uniform_open()}), 1.0);
    double patch = 0;
    for (int i = 0; i < k; ++i) patch += seg_loss(yp[static_cast<std::size_t>(i)], tp[static_cast<std::size_t>(i)]).item();
    const double want = seg_loss(yl, tl).item() + seg_loss(yh, th).item() + patch / k - cfg.lambda * entropy(pi).item();
    const auto got = total_loss(yl, tl, yh, th, yp, tp, pi, cfg);
    CHECK(got.total.item() == doctest::Approx(want).epsilon(1e-12));
    CHECK(got.total.item() >= -cfg.lambda * std::log(5.0));
  }
}

TEST_CASE("total loss gradient w.r.t. every leaf") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    CounterRng rng(s, 6);
    const Dims3 sh{2, 2, 2};
    const auto tl = random_labels(rng, 2, sh), th = random_labels(rng, 2, sh), tp = random_labels(rng, 2, sh);
    std::vector<double> x0(2 * 8 * 3 + 4);
    for (auto& x : x0) x = 2 * rng.uniform_open() - 1;
    LossConfig cfg;
    cfg.lambda = 0.1;
    auto f = [&](const Tensor& x) {
      // Rebuild each block from the full leaf through differentiable slicing.
      auto block = [&](std::int64_t off, std::int64_t n) {
        std::vector<Tensor> parts;
        for (std::int64_t i = 0; i < n; ++i) parts.push_back(ad::pick(x, off + i));
        return ad::concat0(parts);
      };
      const auto yl = ad::softmax_channels(ad::reshape(block(0, 16), {2, 2, 2, 2}));
      const auto yh = ad::softmax_channels(ad::reshape(block(16, 16), {2, 2, 2, 2}));
      const auto yp = ad::softmax_channels(ad::reshape(block(32, 16), {2, 2, 2, 2}));
      const auto pi = ad::softmax_tau(block(48, 4), 1.0);
      return total_loss(yl, tl, yh, th, {yp}, {tp}, pi, cfg).total;
    };
    CHECK(ad::finite_diff_check(f, x0, {52}) < 1e-3);
  }
}

TEST_CASE("entropy bonus alone drives pi toward uniform") {
  CounterRng rng(7, 0);
  std::vector<double> z0(16);
  for (auto& x : z0) x = 3 * rng.uniform_open();
  auto logits = Tensor::from({16}, z0, true);
  OptimConfig oc;
  oc.lr = 0.02;
  oc.weight_decay = 0;
  AdamW opt({logits}, oc);
  double prev = -1;
  for (int it = 0; it < 100; ++it) {
    const auto h = entropy(ad::softmax_tau(logits, 1.0));
    CHECK(h.item() > prev);
    prev = h.item();
    ad::backward(h * -1e-4);
    opt.step(oc.lr);
  }
  CHECK(prev <= std::log(16.0));
}

TEST_CASE("lr schedule endpoints") {
  OptimConfig cfg;
  cfg.lr = 3e-4;
  CHECK(lr_at(0, 1000, cfg) == 0.0);
  CHECK(lr_at(200, 1000, cfg) == doctest::Approx(3e-4).epsilon(1e-12));
  CHECK(lr_at(1000, 1000, cfg) <= 1e-9);
  CHECK(lr_at(100, 1000, cfg) == doctest::Approx(1.5e-4));
  CHECK(lr_at(600, 1000, cfg) == doctest::Approx(1.5e-4));
  double prev = 1;
  for (int i = 200; i <= 1000; i += 10) {
    CHECK(lr_at(i, 1000, cfg) <= prev);
    prev = lr_at(i, 1000, cfg);
  }
  CHECK_THROWS(lr_at(1001, 1000, cfg));
}

TEST_CASE("AdamW matches a hand-rolled update") {
  OptimConfig cfg;
  cfg.weight_decay = 0.1;
  auto p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  AdamW opt({p}, cfg);
  std::vector<double> w{1.0, -2.0, 0.5}, m(3, 0), v(3, 0);
  const double lr = 0.01;
  for (int t = 1; t <= 5; ++t) {
    // loss = sum(c * p^2) with c = (1, 2, 3)
    ad::backward(ad::sum(Tensor::from({3}, {1, 2, 3}) * p * p));
    opt.step(lr);
    for (int i = 0; i < 3; ++i) {
      const double g = 2.0 * (i + 1) * w[static_cast<std::size_t>(i)];
      auto& mi = m[static_cast<std::size_t>(i)];
      auto& vi = v[static_cast<std::size_t>(i)];
      mi = 0.9 * mi + 0.1 * g;
      vi = 0.999 * vi + 0.001 * g * g;
      const double mh = mi / (1 - std::pow(0.9, t)), vh = vi / (1 - std::pow(0.999, t));
      auto& wi = w[static_cast<std::size_t>(i)];
      wi = wi - lr * 0.1 * wi - lr * mh / (std::sqrt(vh) + 1e-8);
    }
    for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(w[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
  CHECK(opt.steps() == 5);
  CHECK(p.grad().empty());
}

TEST_CASE("config validation") {
  LossConfig lc;
  lc.lambda = -1;
  CHECK_THROWS(lc.validate());
  OptimConfig oc;
  oc.lr = 0;
  CHECK_THROWS(oc.validate());
  CHECK(parse_entropy_sign("penalty") == EntropySign::penalty);
  CHECK(to_string(EntropySign::bonus) == "bonus");
  CHECK_THROWS(parse_entropy_sign("plus"));
}
