#include <algorithm>
#include <cmath>
#include <numeric>

#include "aggregate_oracle.hpp"
#include "doctest.h"

using namespace agg_oracle;

TEST_CASE("aggregate examples") {
  const Dims3 p{3, 3, 3};
  const auto pw = gaussian_weight_map(p);
  ClassWeights half = freeze_class_weights(1, 0.0);
  auto up = Tensor::full({1, 5, 5, 5}, 0.0);
  const auto out = aggregate(up, {{Tensor::full({1, 3, 3, 3}, 1.0), {1, 1, 1}, 1.0}}, pw, half);
  CHECK(out[flat_index({5, 5, 5}, 2, 2, 2)] == 0.5);
  CHECK(out[0] == 0.0);

  const auto none = aggregate(Tensor::full({2, 4, 4, 4}, 0.25), {}, pw, freeze_class_weights(2, 1.0));
  for (int i = 0; i < none.numel(); ++i) CHECK(none[i] == 0.25);

  CHECK_THROWS(aggregate(up, {{Tensor::full({1, 3, 3, 3}, 1.0), {3, 0, 0}, 1.0}}, pw, half));
  CHECK_THROWS(aggregate(up, {{Tensor::full({2, 3, 3, 3}, 1.0), {0, 0, 0}, 1.0}}, pw, half));
}

TEST_CASE("two overlapping constant patches") {
  const Dims3 vol{6, 4, 4}, p{4, 4, 4};
  const auto pw = gaussian_weight_map(p);
  const double a = 0.9, b = 0.2, g = 0.4;
  ClassWeights cw = freeze_class_weights(1, 0.7);
  const double s = 1.0 / (1.0 + std::exp(-0.7));
  const auto out = aggregate(Tensor::full({1, 6, 4, 4}, g),
                             {{Tensor::full({1, 4, 4, 4}, a), {0, 0, 0}, 1.0}, {Tensor::full({1, 4, 4, 4}, b), {2, 0, 0}, 1.0}},
                             pw, cw);
  for (int h = 2; h < 4; ++h)
    for (int w = 0; w < 4; ++w)
      for (int d = 0; d < 4; ++d) {
        const double w1 = pw.at(h, w, d), w2 = pw.at(h - 2, w, d);
        CHECK(out[flat_index(vol, h, w, d)] == doctest::Approx(s * (w1 * a + w2 * b) / (w1 + w2) + (1 - s) * g));
      }
}

TEST_CASE("both modes match the per-voxel loop") {
  CounterRng rng(31, 0);
  ad::NoGradGuard ng;
  for (int t = 0; t < 300; ++t) {
    const auto in = random_instance(rng);
    for (auto mode : {AggMode::normalized, AggMode::eq6_literal}) {
      const auto got = run(in, mode);
      const auto ref = oracle(in, mode);
      double worst = 0;
      for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(got[static_cast<std::int64_t>(i)] - ref[i]));
      CHECK(worst < 1e-5);
    }
  }
}

TEST_CASE("aggregation invariants on random instances") {
  CounterRng rng(7, 0);
  ad::NoGradGuard ng;
  for (int t = 0; t < 1000; ++t) {
    auto in = random_instance(rng);
    const auto grid_cov = [&] {
      std::vector<std::uint8_t> cov(static_cast<std::size_t>(voxel_count(in.vol)), 0);
      for (const auto& o : in.origins)
        for (int h = o[0]; h < o[0] + in.patch[0]; ++h)
          for (int w = o[1]; w < o[1] + in.patch[1]; ++w)
            for (int d = o[2]; d < o[2] + in.patch[2]; ++d) cov[static_cast<std::size_t>(flat_index(in.vol, h, w, d))] = 1;
      return cov;
    }();
    const auto nv = voxel_count(in.vol);
    for (auto mode : {AggMode::normalized, AggMode::eq6_literal}) {
      const auto out = run(in, mode);
      for (int ch = 0; ch < in.c; ++ch)
        for (std::int64_t v = 0; v < nv; ++v) {
          const auto i = ch * nv + v;
          if (!grid_cov[static_cast<std::size_t>(v)]) CHECK(out[i] == in.up[static_cast<std::size_t>(i)]);
          CHECK(out[i] >= 0.0);
          CHECK(out[i] <= 1.0);
        }
    }
    // agreement: patches equal to the global prediction leave it unchanged
    auto same = in;
    for (std::size_t k = 0; k < same.patches.size(); ++k) {
      const auto np = voxel_count(in.patch);
      for (int ch = 0; ch < in.c; ++ch)
        for (int h = 0; h < in.patch[0]; ++h)
          for (int w = 0; w < in.patch[1]; ++w)
            for (int d = 0; d < in.patch[2]; ++d) {
              const auto& o = in.origins[k];
              same.patches[k][static_cast<std::size_t>(ch * np + flat_index(in.patch, h, w, d))] =
                  in.up[static_cast<std::size_t>(ch * nv + flat_index(in.vol, o[0] + h, o[1] + w, o[2] + d))];
            }
    }
    const auto agree = run(same, AggMode::normalized);
    for (std::int64_t i = 0; i < agree.numel(); ++i)
      CHECK(agree[i] == doctest::Approx(in.up[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("order invariance in normalized mode") {
  CounterRng rng(8, 0);
  ad::NoGradGuard ng;
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    // grid candidates never share an origin
    for (std::size_t k = in.origins.size(); k-- > 0;)
      if (std::count(in.origins.begin(), in.origins.end(), in.origins[k]) > 1) {
        in.origins.erase(in.origins.begin() + static_cast<std::ptrdiff_t>(k));
        in.patches.erase(in.patches.begin() + static_cast<std::ptrdiff_t>(k));
      }
    std::vector<std::size_t> rev(in.patches.size());
    std::iota(rev.rbegin(), rev.rend(), 0);
    const auto a = run(in, AggMode::normalized), b = run(in, AggMode::normalized, rev);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("class-weight limits") {
  CounterRng rng(9, 0);
  ad::NoGradGuard ng;
  for (int t = 0; t < 50; ++t) {
    auto in = random_instance(rng);
    if (in.patches.empty()) continue;
    std::fill(in.cw.begin(), in.cw.end(), -40.0);
    const auto low = run(in, AggMode::normalized);
    for (std::int64_t i = 0; i < low.numel(); ++i) CHECK(low[i] == doctest::Approx(in.up[static_cast<std::size_t>(i)]).epsilon(1e-12));
    std::fill(in.cw.begin(), in.cw.end(), 40.0);
    const auto hi = run(in, AggMode::normalized);
    auto shifted = in;
    for (auto& u : shifted.up) u = 1.0 - u;
    const auto hi2 = run(shifted, AggMode::normalized);
    // covered voxels no longer depend on the global prediction
    const auto cov = coverage_map(
        [&] {
          GridSpec g;
          g.volume_shape = in.vol;
          g.patch_shape = in.patch;
          g.origins = in.origins;
          return g;
        }(),
        [&] {
          std::vector<int> v(in.origins.size());
          std::iota(v.begin(), v.end(), 0);
          return v;
        }());
    const auto nv = voxel_count(in.vol);
    for (int ch = 0; ch < in.c; ++ch)
      for (std::int64_t v = 0; v < nv; ++v)
        if (cov[static_cast<std::size_t>(v)]) CHECK(hi[ch * nv + v] == doctest::Approx(hi2[ch * nv + v]).epsilon(1e-12));
  }
}

TEST_CASE("simplex preserved when class weights are equal") {
  CounterRng rng(10, 0);
  ad::NoGradGuard ng;
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    const auto nv = voxel_count(in.vol), np = voxel_count(in.patch);
    auto normalise = [&](std::vector<double>& v, std::int64_t n) {
      for (std::int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int ch = 0; ch < in.c; ++ch) s += v[static_cast<std::size_t>(ch * n + i)];
        for (int ch = 0; ch < in.c; ++ch) v[static_cast<std::size_t>(ch * n + i)] /= s;
      }
    };
    normalise(in.up, nv);
    for (auto& p : in.patches) normalise(p, np);
    std::fill(in.cw.begin(), in.cw.end(), in.cw[0]);
    const auto out = run(in, AggMode::normalized);
    for (std::int64_t v = 0; v < nv; ++v) {
      double s = 0;
      for (int ch = 0; ch < in.c; ++ch) s += out[ch * nv + v];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("gradients reach every input") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CounterRng rng(seed, 21);
    Instance in;
    do in = random_instance(rng);
    while (in.patches.empty());
    for (auto mode : {AggMode::normalized, AggMode::eq6_literal}) {
      CHECK(ad::finite_diff_check(
                [&](const Tensor& x) {
                  const auto y = run(in, mode, {}, &x);
                  return ad::sum(y * y);
                },
                in.cw, {in.c}) < 1e-3);
    }
    // c_w gradient nonzero where patch and global differ on a covered voxel
    ClassWeights cw = learnable_class_weights(in.c, 0.3);
    std::vector<PatchPrediction> preds;
    for (std::size_t i = 0; i < in.patches.size(); ++i)
      preds.push_back({Tensor::from(shape4(in.c, in.patch), in.patches[i]), in.origins[i], 1.0});
    const auto out = aggregate(Tensor::from(shape4(in.c, in.vol), in.up), preds, gaussian_weight_map(in.patch), cw);
    ad::backward(ad::sum(out));
    for (int ch = 0; ch < in.c; ++ch) CHECK(cw.logits.grad()[static_cast<std::size_t>(ch)] != 0.0);
  }
}

TEST_CASE("frozen weights take no gradient") {
  ClassWeights cw = freeze_class_weights(3, 6.0);
  CHECK(cw.frozen);
  CHECK(cw.sigma()[0] == doctest::Approx(0.9975273768).epsilon(1e-9));
  CHECK(freeze_class_weights(2, 0.0).sigma()[1] == 0.5);
  auto up = Tensor::full({3, 4, 4, 4}, 1.0 / 3, true);
  const auto out = aggregate(up, {{Tensor::full({3, 2, 2, 2}, 0.5), {1, 1, 1}, 1.0}}, gaussian_weight_map({2, 2, 2}), cw);
  ad::backward(ad::sum(out));
  CHECK_FALSE(cw.logits.requires_grad());
  CHECK(cw.logits.grad().empty());
  CHECK_FALSE(up.grad().empty());
}

TEST_CASE("coverage_map") {
  const auto g = build_grid({32, 32, 32}, {16, 16, 16}, 0.5, GridMode::cover);
  std::vector<int> all(static_cast<std::size_t>(g.size()));
  std::iota(all.begin(), all.end(), 0);
  const auto full = coverage_map(g, all);
  CHECK(std::all_of(full.begin(), full.end(), [](auto v) { return v == 1; }));
  const auto none = coverage_map(g, {});
  CHECK(std::all_of(none.begin(), none.end(), [](auto v) { return v == 0; }));
  const auto one = coverage_map(g, {0});
  CHECK(std::count(one.begin(), one.end(), 1) == 4096);
}

TEST_CASE("aggregation mode names") {
  for (auto m : {AggMode::normalized, AggMode::eq6_literal}) CHECK(parse_agg_mode(to_string(m)) == m);
  CHECK_THROWS(parse_agg_mode("paste"));
}
