#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "doctest.h"
#include "nmsw/engine.hpp"

using namespace nmsw;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

// 24^3 volumes, 12^3 patches: a 3^3 grid that is the same in floor and cover mode.
ModelConfig tiny_config() {
  ModelConfig c;
  c.volume_shape = {24, 24, 24};
  c.patch_shape = {12, 12, 12};
  c.global_channels = {4, 6};
  c.local_channels = {4};
  return c;
}

SynthConfig tiny_synth() {
  SynthConfig s;
  s.shape = {24, 24, 24};
  s.large_radius_min = 3;
  s.large_radius_max = 4.5;
  s.small_radius_min = 1.5;
  s.small_radius_max = 2.5;
  s.small_count_min = s.small_count_max = 2;
  return s;
}

Volume random_volume(const Dims3& s, std::uint64_t seed) {
  CounterRng rng(seed, 0);
  Volume v(s);
  for (auto& x : v.data) x = static_cast<float>(2 * rng.uniform_open() - 1);
  return v;
}

// Sets the head bias so that one class dominates everywhere.
void bias_head(Params& p, int cls, double value) {
  auto w = p.tensors.at("head.w").mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = p.tensors.at("head.b").mutable_values();
  std::fill(b.begin(), b.end(), 0.0);
  b[static_cast<std::size_t>(cls)] = value;
}

LabelMap mask(const Dims3& s, int cls, std::int64_t begin, std::int64_t end) {
  LabelMap l(s, 2);
  for (auto i = begin; i < end; ++i) l.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(cls);
  return l;
}

double mean_abs_diff(const ProbMap& a, const ProbMap& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.data.size());
}

}  // namespace

TEST_CASE("dsc examples") {
  const Dims3 s{4, 4, 4};
  const auto a = mask(s, 1, 0, 32);
  auto d = dsc(a, a, 2);
  CHECK(d.per_class == std::vector<double>{1.0, 1.0});
  CHECK(d.mean == 1.0);
  // Disjoint equal-size foreground masks.
  CHECK(dsc(mask(s, 1, 32, 64), a, 2).per_class[1] == 0.0);
  // Half overlap.
  CHECK(dsc(mask(s, 1, 16, 48), a, 2).per_class[1] == doctest::Approx(0.5));
  // Class absent from both counts as 1 but is left out of the mean.
  LabelMap three(s, 3);
  d = dsc(three, three, 3);
  CHECK(d.per_class[2] == 1.0);
  auto pred = mask(s, 1, 0, 16);
  pred.num_classes = 3;
  auto gt = mask(s, 1, 0, 32);
  gt.num_classes = 3;
  d = dsc(pred, gt, 3);
  CHECK(d.mean == doctest::Approx((d.per_class[0] + d.per_class[1]) / 2));
  CHECK_THROWS(dsc(LabelMap({2, 2, 2}, 2), a, 2));
}

TEST_CASE("cost model reproduces the paper arithmetic") {
  const double T = 1e12;
  const PhaseMacs paper{0.18 * T, 5.6 / 30 * T, 0.07 * T};
  const auto r30 = cost_model(paper, InferMode::nmsw, 30);
  CHECK(r30.macs_total / T == doctest::Approx(5.85).epsilon(1e-12));
  const auto sw = cost_model(paper, InferMode::sw, 343);
  CHECK(sw.macs_total / T == doctest::Approx(64.0).epsilon(1e-3));
  CHECK(std::abs(sw.macs_total / T - 63.2) / 63.2 <= 0.02);
  CHECK(sw.macs_global == 0);
  CHECK(sw.macs_aggregation == 0);
  const auto k0 = cost_model(paper, InferMode::nmsw, 0);
  CHECK(k0.macs_total == paper.global);
}

TEST_CASE("cost model of a built model") {
  const auto m = make_model(tiny_config(), 0);
  const auto phase = model_phase_macs(m, 4);
  CHECK(phase.global == static_cast<double>(count_macs(m.global_net, m.low_shape())));
  CHECK(phase.per_patch == static_cast<double>(count_macs(m.local_net, m.cfg.patch_shape)));
  CHECK(phase.aggregation == (4.0 * 1728 + 13824) * 4 * kAggOpsPerVoxel);
  const auto r = cost_model(m, InferMode::rf, 4);
  CHECK(r.macs_total == phase.global + 4 * phase.per_patch + phase.aggregation);
  // NMSW is cheaper than SW exactly when the inequality on phase costs holds.
  const int n_cover = build_grid(m.cfg.volume_shape, m.cfg.patch_shape, 0.5, GridMode::cover).size();
  for (int k = 0; k <= n_cover; ++k) {
    const auto a = cost_model(m, InferMode::nmsw, k), b = cost_model(m, InferMode::sw, n_cover);
    const auto ph = model_phase_macs(m, k);
    const bool cheaper = k * ph.per_patch + ph.global + (k > 0 ? ph.aggregation : 0) < n_cover * ph.per_patch;
    CHECK((a.macs_total < b.macs_total) == cheaper);
  }
}

TEST_CASE("sliding window: single patch returns the net output") {
  NetConfig c;
  c.channels = {3};
  c.num_classes = 3;
  c.input_shape = {6, 6, 6};
  const auto p = init_params(c, 1);
  const auto v = random_volume({6, 6, 6}, 2);
  const auto r = infer_sw(v, c, p, {6, 6, 6}, 0.5);
  REQUIRE(r.selected.size() == 1);
  ad::NoGradGuard ng;
  const auto y = forward_local(c, p, to_tensor(v));
  for (std::size_t i = 0; i < r.probs.data.size(); ++i)
    CHECK(r.probs.data[i] == doctest::Approx(y[static_cast<std::int64_t>(i)]).epsilon(1e-6));
}

TEST_CASE("sliding window: constant net gives constant output") {
  NetConfig c;
  c.channels = {2};
  c.num_classes = 3;
  c.input_shape = {8, 8, 8};
  auto p = init_params(c, 0);
  bias_head(p, 2, 1.5);
  auto b = p.tensors.at("head.b").mutable_values();
  b[0] = 0.3;
  const auto r = infer_sw(random_volume({20, 16, 12}, 0), c, p, {8, 8, 8}, 0.5);
  const double z = std::exp(0.3) + 1 + std::exp(1.5);
  for (int ch = 0; ch < 3; ++ch) {
    const double want = (ch == 0 ? std::exp(0.3) : ch == 1 ? 1.0 : std::exp(1.5)) / z;
    for (int i = 0; i < 20 * 16 * 12; ++i) CHECK(r.probs.data[static_cast<std::size_t>(ch * 3840 + i)] == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("sliding window matches a per-voxel weighted average") {
  NetConfig c;
  c.channels = {2};
  c.num_classes = 2;
  c.input_shape = {16, 16, 16};
  const auto p = init_params(c, 3);
  const Dims3 vs{32, 32, 32}, ps{16, 16, 16};
  const auto v = random_volume(vs, 3);
  const auto r = infer_sw(v, c, p, ps, 0.5);
  const auto grid = build_grid(vs, ps, 0.5, GridMode::cover);
  const auto pw = gaussian_weight_map(ps);
  std::vector<std::vector<double>> outs;
  {
    ad::NoGradGuard ng;
    for (const auto& o : grid.origins) {
      const auto y = forward_local(c, p, to_tensor(extract_patch(v, o, ps)));
      outs.emplace_back(y.values().begin(), y.values().end());
    }
  }
  double worst = 0;
  const auto np = voxel_count(ps), nv = voxel_count(vs);
  for (int h = 0; h < 32; ++h)
    for (int w = 0; w < 32; ++w)
      for (int d = 0; d < 32; ++d)
        for (int ch = 0; ch < 2; ++ch) {
          double num = 0, den = 0;
          for (std::size_t k = 0; k < grid.origins.size(); ++k) {
            const auto& o = grid.origins[k];
            const int a = h - o[0], b = w - o[1], e = d - o[2];
            if (a < 0 || b < 0 || e < 0 || a >= 16 || b >= 16 || e >= 16) continue;
            num += pw.at(a, b, e) * outs[k][static_cast<std::size_t>(ch * np + flat_index(ps, a, b, e))];
            den += pw.at(a, b, e);
          }
          const double got = r.probs.data[static_cast<std::size_t>(ch * nv + flat_index(vs, h, w, d))];
          worst = std::max(worst, std::abs(got - num / den));
        }
  CHECK(worst < 1e-5);
}

TEST_CASE("nmsw inference: k = 0, uncovered voxels, bounds") {
  const auto m = make_model(tiny_config(), 4);
  const auto v = random_volume(m.cfg.volume_shape, 4);
  const auto r0 = infer_nmsw(v, m, 0);
  CHECK(r0.selected.empty());
  Tensor up;
  {
    ad::NoGradGuard ng;
    up = ad::resize_trilinear(forward_global(m.global_net, m.fg, to_tensor(resample_trilinear(v, {3, 3, 3}))).probs,
                              m.cfg.volume_shape);
  }
  for (std::size_t i = 0; i < r0.probs.data.size(); ++i)
    CHECK(r0.probs.data[i] == static_cast<float>(up[static_cast<std::int64_t>(i)]));

  const auto r2 = infer_nmsw(v, m, 2);
  CHECK(r2.selected.size() == 2);
  const auto cov = coverage_map(m.grid(), r2.selected);
  const auto a = argmax_labels(r2.probs), b = argmax_labels(r0.probs);
  for (std::size_t i = 0; i < cov.size(); ++i)
    if (!cov[i]) CHECK(a.data[i] == b.data[i]);
  CHECK_THROWS(infer_nmsw(v, m, 28));
  CHECK(infer_nmsw(v, m, -1).selected.size() == 27);
  CHECK_THROWS(infer_nmsw(random_volume({24, 24, 23}, 0), m, 1));
}

TEST_CASE("nmsw inference with every patch and frozen weights tracks sliding window") {
  const auto m = make_model(tiny_config(), 5);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto v = random_volume(m.cfg.volume_shape, 10 + s);
    const auto full = infer_nmsw(v, m, 27, AggMode::normalized, 6.0);
    const auto sw = infer_sw(v, m.local_net, m.fl, m.cfg.patch_shape, m.cfg.overlap);
    CHECK(mean_abs_diff(full.probs, sw.probs) < 0.01);
  }
}

TEST_CASE("greedy selection takes the highest-probability candidates") {
  auto m = make_model(tiny_config(), 6);
  auto w = m.fg.tensors.at("score.w").mutable_values();
  CounterRng rng(6, 1);
  for (auto& x : w) x = 2 * rng.uniform_open() - 1;
  const auto v = random_volume(m.cfg.volume_shape, 6);
  const auto pi = score_distribution(m, v);
  std::vector<int> order(pi.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return pi[static_cast<std::size_t>(a)] > pi[static_cast<std::size_t>(b)]; });
  const auto r = infer_nmsw(v, m, 5);
  CHECK(std::set<int>(r.selected.begin(), r.selected.end()) == std::set<int>(order.begin(), order.begin() + 5));
}

TEST_CASE("rf candidates need one percent of voxels above threshold") {
  const Dims3 vs{32, 32, 32}, ps{16, 16, 16};
  const auto grid = build_grid(vs, ps, 0.5, GridMode::cover);
  ProbMap up(2, vs);
  std::fill(up.data.begin(), up.data.begin() + voxel_count(vs), 1.0f);
  // Voxels inside [0, 8)^3 belong to patch 0 alone.
  auto paint = [&](int w, int d) {
    up.at(0, 0, w, d) = 0.2f;
    up.at(1, 0, w, d) = 0.8f;
  };
  // 40 of 4096 voxels fall short of 1%; the 41st clears it.
  for (int w = 0; w < 5; ++w)
    for (int d = 0; d < 8; ++d) paint(w, d);
  auto c = rf_candidates(up, grid);
  CHECK(std::count(c.begin(), c.end(), 1) == 0);
  paint(5, 0);
  c = rf_candidates(up, grid);
  CHECK(c[0] == 1);
  CHECK(std::count(c.begin(), c.end(), 1) == 1);
}

TEST_CASE("rf inference: blank prediction, full candidate set, uniform choice") {
  auto m = make_model(tiny_config(), 7);
  const auto v = random_volume(m.cfg.volume_shape, 7);
  SUBCASE("global net predicts background everywhere") {
    bias_head(m.fg, 0, 10);
    CounterRng rng(0, 0);
    const auto r = infer_rf(v, m, 4, rng);
    CHECK(r.selected.empty());
    CHECK(r.short_of_candidates);
    const auto g = infer_nmsw(v, m, 0);
    CHECK(r.probs.data == g.probs.data);
  }
  SUBCASE("global net predicts foreground everywhere") {
    bias_head(m.fg, 1, 10);
    CounterRng a(1, 0), b(2, 0);
    const auto ra = infer_rf(v, m, 27, a), rb = infer_rf(v, m, 27, b);
    CHECK(std::set<int>(ra.selected.begin(), ra.selected.end()) == std::set<int>(rb.selected.begin(), rb.selected.end()));
    CHECK(ra.selected.size() == 27);
    CHECK(!ra.short_of_candidates);
    // Over 20 seeds the k = 4 choices are uniform over the 27 candidates.
    std::vector<double> hist(27, 0);
    for (std::uint64_t s = 0; s < 20; ++s) {
      CounterRng rng(s, 0);
      const auto r = infer_rf(v, m, 4, rng);
      CHECK(std::set<int>(r.selected.begin(), r.selected.end()).size() == 4);
      for (int n : r.selected) hist[static_cast<std::size_t>(n)] += 1;
    }
    const double expect = 80.0 / 27;
    double chi2 = 0;
    for (double h : hist) chi2 += (h - expect) * (h - expect) / expect;
    // Upper 1% point of chi-square with 26 degrees of freedom.
    CHECK(chi2 < 45.64);
  }
}

TEST_CASE("training: determinism, initial entropy, log contents") {
  const auto data = std::vector<Sample>{gen_sample(tiny_synth(), 1), gen_sample(tiny_synth(), 2)};
  TrainConfig tc;
  tc.epochs = 2;
  tc.iters_per_epoch = 5;
  const auto a = train(data, tiny_config(), tc), b = train(data, tiny_config(), tc);
  for (const auto& [name, t] : a.model.fg.tensors) {
    const auto u = t.values(), w = b.model.fg.at(name).values();
    CHECK(std::equal(u.begin(), u.end(), w.begin()));
  }
  for (const auto& [name, t] : a.model.fl.tensors) {
    const auto u = t.values(), w = b.model.fl.at(name).values();
    CHECK(std::equal(u.begin(), u.end(), w.begin()));
  }
  REQUIRE(a.log.size() == 10);
  CHECK(a.log[0].entropy == doctest::Approx(std::log(27.0)).epsilon(1e-9));
  CHECK(a.pi_history.size() == 3);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].selected.size() == 4);
    CHECK(std::set<int>(a.log[i].selected.begin(), a.log[i].selected.end()).size() == 4);
    CHECK(a.log[i].tau <= 2.0);
  }
  CHECK(a.log.front().tau == doctest::Approx(2.0));
  CHECK(a.log.back().tau == doctest::Approx(0.33));
  tc.seed = 1;
  const auto c = train(data, tiny_config(), tc);
  CHECK(c.log.back().loss != a.log.back().loss);
}

TEST_CASE("training loss decreases on a fixed sample") {
  const auto data = std::vector<Sample>{gen_sample(tiny_synth(), 3)};
  TrainConfig tc;
  tc.epochs = 1;
  tc.iters_per_epoch = 200;
  tc.loss.lambda = 0;
  tc.optim.warmup_fraction = 0.0;
  const auto r = train(data, tiny_config(), tc);
  // Means over consecutive 10-iteration windows.
  std::vector<double> win;
  for (int w = 0; w < 20; ++w) {
    double s = 0;
    for (int i = 0; i < 10; ++i) s += r.log[static_cast<std::size_t>(w * 10 + i)].loss;
    win.push_back(s / 10);
  }
  int down = 0;
  for (std::size_t w = 1; w < win.size(); ++w) down += win[w] < win[w - 1];
  CHECK(down >= 17);
  CHECK(win.back() < 0.6 * win.front());
}

TEST_CASE("non-finite loss aborts with a diagnostics dump") {
  auto s = gen_sample(tiny_synth(), 4);
  s.volume.data[100] = std::numeric_limits<float>::quiet_NaN();
  const auto dir = fs::temp_directory_path() / "nmsw_test_numeric";
  fs::remove_all(dir);
  TrainConfig tc;
  tc.epochs = 1;
  tc.iters_per_epoch = 3;
  try {
    train({s}, tiny_config(), tc, dir);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.dump().parent_path() == dir);
    CHECK(fs::exists(e.dump()));
    const auto j = nlohmann::json::parse(std::ifstream(e.dump()));
    CHECK(j.at("nonfinite_voxels") == 1);
    CHECK(e.dump().filename() == "nonfinite_iter" + std::to_string(j.at("iteration").get<int>()) + ".json");
    CHECK(fs::exists(dir / "nonfinite_batch_labels.raw"));
  }
  fs::remove_all(dir);
}

TEST_CASE("baseline training and benchmark rows") {
  const auto data = std::vector<Sample>{gen_sample(tiny_synth(), 5)};
  TrainConfig tc;
  tc.epochs = 1;
  tc.iters_per_epoch = 4;
  const auto res = train(data, tiny_config(), tc);
  const auto sw1 = train_sw(data, tiny_config(), tc), sw2 = train_sw(data, tiny_config(), tc);
  for (const auto& [name, t] : sw1.tensors) {
    const auto u = t.values(), w = sw2.at(name).values();
    CHECK(std::equal(u.begin(), u.end(), w.begin()));
  }
  std::vector<InferConfig> cfgs;
  cfgs.push_back({InferMode::sw, -1, AggMode::normalized, std::nullopt, 0});
  for (int k : {2, -1}) cfgs.push_back({InferMode::nmsw, k, AggMode::normalized, std::nullopt, 0});
  for (std::uint64_t seed : {0, 1}) cfgs.push_back({InferMode::rf, 3, AggMode::normalized, std::nullopt, seed});
  const auto rows = benchmark(data, res.model, sw1, cfgs, 1);
  REQUIRE(rows.size() == cfgs.size());
  CHECK(rows[0].patch_count == 27);
  CHECK(rows[1].patch_count == 2);
  CHECK(rows[2].patch_count == 27);
  for (const auto& r : rows) {
    CHECK(r.macs_total == cost_model(res.model, r.cfg.mode, r.patch_count).macs_total);
    CHECK(r.mean_dsc >= 0);
    CHECK(r.mean_dsc <= 1);
  }
  CHECK(bench_csv_header(4) == "mode,k,seed,mean_dsc,dsc_class_0,dsc_class_1,dsc_class_2,dsc_class_3,macs_total,"
                               "patch_count,wall_ms");
  const auto line = bench_csv_row(rows[1]);
  CHECK(line.starts_with("nmsw,2,0,"));
  CHECK(std::count(line.begin(), line.end(), ',') == 10);
  CHECK_THROWS(benchmark({}, res.model, sw1, cfgs, 1));
}

TEST_CASE("model and baseline checkpoints round trip") {
  const auto m = make_model(tiny_config(), 8);
  const auto dir = fs::temp_directory_path() / "nmsw_test_engine_ck";
  fs::create_directories(dir);
  save_model(dir / "model", m);
  const auto back = load_model(dir / "model");
  CHECK(back.cfg.volume_shape == m.cfg.volume_shape);
  CHECK(back.cfg.cw_init == m.cfg.cw_init);
  CHECK(back.grid().size() == 27);
  const auto v = random_volume(m.cfg.volume_shape, 8);
  CHECK(mean_abs_diff(infer_nmsw(v, m, 3).probs, infer_nmsw(v, back, 3).probs) < 1e-6);
  save_local(dir / "sw", m.cfg, m.fl);
  ModelConfig mc;
  const auto fl = load_local(dir / "sw", &mc);
  CHECK(mc.patch_shape == m.cfg.patch_shape);
  CHECK(fl.count() == m.fl.count());
  CHECK_THROWS(load_model(dir / "missing"));
  fs::remove_all(dir);
}

TEST_CASE("mode names and config validation") {
  CHECK(parse_infer_mode("rf") == InferMode::rf);
  CHECK(to_string(InferMode::sw) == "sw");
  CHECK_THROWS(parse_infer_mode("zoom"));
  TrainConfig tc;
  tc.k_topk = 0;
  tc.extra_random = 0;
  CHECK_THROWS(tc.validate());
  auto mc = tiny_config();
  mc.patch_shape = {30, 12, 12};
  CHECK_THROWS(mc.validate());
}
