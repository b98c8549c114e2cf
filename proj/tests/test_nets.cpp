#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "nmsw/nets.hpp"
#include "nmsw/rng.hpp"

using namespace nmsw;
using ad::Tensor;

namespace {

NetConfig small_net(bool score = false) {
  NetConfig c;
  c.channels = {3, 4};
  c.num_classes = 3;
  c.input_shape = {8, 8, 8};
  if (score) c.score_grid = {2, 2, 2};
  return c;
}

Tensor random_input(const NetConfig& c, std::uint64_t seed) {
  CounterRng rng(seed, 1);
  std::vector<double> v(static_cast<std::size_t>(c.in_channels * voxel_count(c.input_shape)));
  for (auto& x : v) x = 2 * rng.uniform_open() - 1;
  return Tensor::from({c.in_channels, c.input_shape[0], c.input_shape[1], c.input_shape[2]}, std::move(v));
}

void check_simplex(const Tensor& p) {
  const auto c = p.dim(0);
  const auto n = p.numel() / c;
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int k = 0; k < c; ++k) s += p[k * n + i];
    CHECK(std::abs(s - 1) <= 1e-6);
  }
}

}  // namespace

TEST_CASE("init is deterministic per seed and differs across seeds") {
  const auto c = small_net(true);
  const auto a = init_params(c, 3), b = init_params(c, 3), d = init_params(c, 4);
  REQUIRE(a.tensors.size() == b.tensors.size());
  bool any_diff = false;
  for (const auto& [name, t] : a.tensors) {
    const auto u = t.values(), v = b.at(name).values(), w = d.at(name).values();
    for (std::size_t i = 0; i < u.size(); ++i) {
      CHECK(u[i] == v[i]);
      CHECK(std::isfinite(u[i]));
      any_diff = any_diff || u[i] != w[i];
    }
  }
  CHECK(any_diff);
}

TEST_CASE("init is fan-in bounded and the score head starts at zero") {
  const auto c = small_net(true);
  const auto p = init_params(c, 0);
  const auto& w = p.at("enc0.a.w");
  const double bound = std::sqrt(6.0 / (1 * 27));
  for (double x : w.values()) CHECK(std::abs(x) <= bound);
  for (double x : p.at("score.w").values()) CHECK(x == 0.0);
  for (double x : p.at("enc1.a.b").values()) CHECK(x == 0.0);
}

TEST_CASE("zero score head gives uniform pi and probs on the simplex") {
  const auto c = small_net(true);
  const auto p = init_params(c, 1);
  const auto out = forward_global(c, p, random_input(c, 1));
  REQUIRE(out.score_logits.numel() == 8);
  const auto pi = ad::softmax_tau(out.score_logits, 1.0);
  for (std::int64_t i = 0; i < 8; ++i) CHECK(pi[i] == doctest::Approx(1.0 / 8).epsilon(1e-12));
  CHECK(out.probs.shape() == ad::Shape{3, 8, 8, 8});
  check_simplex(out.probs);
}

TEST_CASE("score logits follow grid row-major order") {
  // A single positive score weight makes each logit the pooled activation of
  // one channel; a delta of input activity in one octant must light up the
  // logit of that octant.
  auto c = small_net(true);
  c.channels = {1};
  c.kernel = 1;
  auto p = init_params(c, 0);
  for (auto& [name, t] : p.tensors) {
    auto v = t.mutable_values();
    std::fill(v.begin(), v.end(), name.ends_with(".w") ? 1.0 : 0.0);
  }
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int d = 0; d < 2; ++d) {
        std::vector<double> x(512, 0.0);
        x[static_cast<std::size_t>(flat_index({8, 8, 8}, 4 * h + 1, 4 * w + 2, 4 * d + 3))] = 1.0;
        const auto out = forward_global(c, p, Tensor::from({1, 8, 8, 8}, x));
        const auto hot = ad::argmax(out.score_logits.values());
        CHECK(hot == (h * 2 + w) * 2 + d);
      }
}

TEST_CASE("local net: simplex, purity, shape errors") {
  const auto c = small_net();
  const auto p = init_params(c, 2);
  const auto x = random_input(c, 5);
  const auto a = forward_local(c, p, x), b = forward_local(c, p, x);
  check_simplex(a);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK_THROWS(forward_local(c, p, Tensor::zeros({1, 8, 8, 7})));
  CHECK_THROWS(forward_local(c, p, Tensor::zeros({2, 8, 8, 8})));
  CHECK_THROWS_WITH(forward_global(c, p, x), "forward_global needs a score grid");
}

TEST_CASE("local net gradient w.r.t. input intensity") {
  auto c = small_net();
  c.coord_channels = true;
  const auto p = init_params(c, 7);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto x0 = random_input(c, s);
    // Per-voxel outputs sum to one, so a plain mean has zero gradient.
    const auto w = random_input(NetConfig{.in_channels = 3, .input_shape = c.input_shape}, s + 10);
    const double err = ad::finite_diff_check(
        [&](const Tensor& x) { return ad::mean(forward_local(c, p, x) * w); },
        std::vector<double>(x0.values().begin(), x0.values().end()), x0.shape(), 1e-6);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("MAC counter: single conv by hand") {
  NetConfig c;
  c.channels = {1};
  c.num_classes = 2;
  // enc0.a and enc0.b are 1->1 3x3x3 on 8^3; head is 1->2 1x1x1.
  CHECK(count_macs(c, {8, 8, 8}) == 2 * 512 * 27 + 512 * 2);
}

TEST_CASE("MAC counter: two-level net by hand and against executed convs") {
  auto c = small_net(true);
  const Dims3 in{8, 8, 8};
  // enc0: 1->3, 3->3 at 8^3; enc1: 3->4 strided to 4^3, 4->4; dec0: 7->3 at 8^3;
  // head 3->3 1x1x1 at 8^3; score 4->1 1x1x1 at 4^3.
  const std::int64_t hand = 512 * 27 * (1 * 3 + 3 * 3) + 64 * 27 * (3 * 4 + 4 * 4) + 512 * 27 * 7 * 3 + 512 * 3 * 3 +
                            64 * 4 * 1;
  CHECK(count_macs(c, in) == hand);
  const auto p = init_params(c, 0);
  ad::NoGradGuard ng;
  ad::reset_conv_mac_counter();
  forward_global(c, p, random_input(c, 0));
  CHECK(ad::conv_mac_counter() == static_cast<std::uint64_t>(hand));
}

TEST_CASE("MAC counter: doubling widths roughly quadruples") {
  NetConfig a;
  a.channels = {8, 16};
  NetConfig b = a;
  b.channels = {16, 32};
  const double r = static_cast<double>(count_macs(b, {16, 16, 16})) / static_cast<double>(count_macs(a, {16, 16, 16}));
  CHECK(r > 3.5);
  CHECK(r <= 4.0);
}

TEST_CASE("global and local nets share no parameters") {
  const auto g = init_params(small_net(true), 0), l = init_params(small_net(), 1);
  for (const auto& [name, t] : l.tensors) {
    if (!g.tensors.contains(name)) continue;
    CHECK(t.node_ptr() != g.at(name).node_ptr());
  }
}

TEST_CASE("checkpoint round trip") {
  const auto c = small_net(true);
  const auto p = init_params(c, 9);
  const auto dir = std::filesystem::temp_directory_path() / "nmsw_test_nets";
  std::filesystem::create_directories(dir);
  Checkpoint ck;
  ck.meta["config"] = to_json(c);
  put_params(ck, "g.", p);
  save_checkpoint(dir / "ck", ck);
  const auto back = load_checkpoint(dir / "ck");
  const auto c2 = net_config_from_json(back.meta.at("config"));
  CHECK(c2.channels == c.channels);
  CHECK(c2.score_grid == c.score_grid);
  const auto q = take_params(back, "g.", c2);
  for (const auto& [name, t] : p.tensors) {
    const auto u = t.values(), v = q.at(name).values();
    REQUIRE(u.size() == v.size());
    // f32 payload
    for (std::size_t i = 0; i < u.size(); ++i) CHECK(v[i] == static_cast<double>(static_cast<float>(u[i])));
  }
  auto wrong = c;
  wrong.channels = {3, 5};
  CHECK_THROWS(take_params(back, "g.", wrong));
  CHECK_THROWS(take_params(back, "l.", c));
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation") {
  NetConfig c;
  c.channels = {};
  CHECK_THROWS(c.validate());
  c.channels = {0};
  CHECK_THROWS(c.validate());
  c.channels = {4};
  c.kernel = 2;
  CHECK_THROWS(c.validate());
}
