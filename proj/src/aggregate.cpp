#include "nmsw/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nmsw {

using ad::Tensor;

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Calls body(volume_index, patch_index) over a patch region, row-major.
template <class F>
void for_region(const Dims3& vol, const Dims3& origin, const Dims3& patch, F&& body) {
  std::int64_t pi = 0;
  for (int h = 0; h < patch[0]; ++h)
    for (int w = 0; w < patch[1]; ++w) {
      const std::int64_t row = flat_index(vol, origin[0] + h, origin[1] + w, origin[2]);
      for (int d = 0; d < patch[2]; ++d, ++pi) body(row + d, pi);
    }
}

}  // namespace

std::vector<double> ClassWeights::sigma() const {
  std::vector<double> s;
  for (double v : logits.values()) s.push_back(sigmoid(v));
  return s;
}

ClassWeights learnable_class_weights(int num_classes, double init) {
  return {Tensor::full({num_classes}, init, true), false};
}

ClassWeights freeze_class_weights(int num_classes, double value) {
  return {Tensor::full({num_classes}, value, false), true};
}

AggMode parse_agg_mode(const std::string& s) {
  if (s == "normalized") return AggMode::normalized;
  if (s == "eq6_literal") return AggMode::eq6_literal;
  throw std::invalid_argument("unknown aggregation mode: " + s);
}

std::string to_string(AggMode m) { return m == AggMode::normalized ? "normalized" : "eq6_literal"; }

Tensor aggregate(const Tensor& up, const std::vector<PatchPrediction>& patches, const GaussianWeightMap& pw,
                 const ClassWeights& cw, AggMode mode) {
  if (up.rank() != 4) throw std::invalid_argument("aggregate: up must be [C,H,W,D]");
  const int c = up.dim(0);
  const Dims3 vol{up.dim(1), up.dim(2), up.dim(3)};
  const Dims3 ps = pw.shape;
  if (cw.size() != c) throw std::invalid_argument("aggregate: class weight count differs from channel count");
  for (const auto& p : patches) {
    if (p.probs.shape() != ad::Shape{c, ps[0], ps[1], ps[2]})
      throw std::invalid_argument("aggregate: patch prediction shape " + ad::shape_str(p.probs.shape()) +
                                  " does not match the weight map");
    check_patch_bounds(vol, p.origin, ps);
  }

  const auto nv = static_cast<std::size_t>(voxel_count(vol));
  const auto np = static_cast<std::size_t>(voxel_count(ps));
  const std::vector<double> s = cw.sigma();
  const auto uv = up.values();
  std::vector<double> out(uv.begin(), uv.end());

  std::vector<Tensor> inputs{up, cw.logits};
  for (const auto& p : patches) inputs.push_back(p.probs);

  if (mode == AggMode::normalized) {
    std::vector<std::size_t> order(patches.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return patches[a].origin < patches[b].origin;
    });
    std::vector<double> wsum(nv, 0.0), acc(static_cast<std::size_t>(c) * nv, 0.0);
    for (std::size_t k : order) {
      const auto yv = patches[k].probs.values();
      for_region(vol, patches[k].origin, ps, [&](std::int64_t x, std::int64_t pi) {
        const double w = pw.data[static_cast<std::size_t>(pi)];
        wsum[static_cast<std::size_t>(x)] += w;
        for (int ch = 0; ch < c; ++ch)
          acc[ch * nv + static_cast<std::size_t>(x)] += w * yv[ch * np + static_cast<std::size_t>(pi)];
      });
    }
    // acc becomes the weighted patch mean on covered voxels.
    for (std::size_t x = 0; x < nv; ++x) {
      if (wsum[x] <= 0) continue;
      for (int ch = 0; ch < c; ++ch) {
        auto& a = acc[ch * nv + x];
        a /= wsum[x];
        out[ch * nv + x] = s[static_cast<std::size_t>(ch)] * a + (1 - s[static_cast<std::size_t>(ch)]) * uv[ch * nv + x];
      }
    }
    std::vector<Dims3> origins;
    for (const auto& p : patches) origins.push_back(p.origin);
    auto fn = [=, up_copy = std::vector<double>(uv.begin(), uv.end()), wsum = std::move(wsum),
               acc = std::move(acc), pwd = pw.data](std::span<const double> g, const ad::GradSink& grads) {
      if (auto gu = grads[0]; !gu.empty())
        for (int ch = 0; ch < c; ++ch)
          for (std::size_t x = 0; x < nv; ++x)
            gu[ch * nv + x] += wsum[x] > 0 ? g[ch * nv + x] * (1 - s[static_cast<std::size_t>(ch)]) : g[ch * nv + x];
      if (auto gc = grads[1]; !gc.empty())
        for (int ch = 0; ch < c; ++ch) {
          double t = 0;
          for (std::size_t x = 0; x < nv; ++x)
            if (wsum[x] > 0) t += g[ch * nv + x] * (acc[ch * nv + x] - up_copy[ch * nv + x]);
          const double sc = s[static_cast<std::size_t>(ch)];
          gc[static_cast<std::size_t>(ch)] += t * sc * (1 - sc);
        }
      for (std::size_t k = 0; k < origins.size(); ++k) {
        auto gp = grads[k + 2];
        if (gp.empty()) continue;
        for_region(vol, origins[k], ps, [&](std::int64_t x, std::int64_t pi) {
          const double f = pwd[static_cast<std::size_t>(pi)] / wsum[static_cast<std::size_t>(x)];
          for (int ch = 0; ch < c; ++ch)
            gp[ch * np + static_cast<std::size_t>(pi)] +=
                g[ch * nv + static_cast<std::size_t>(x)] * s[static_cast<std::size_t>(ch)] * f;
        });
      }
    };
    return ad::make_result(up.shape(), std::move(out), std::move(inputs), fn, "aggregate");
  }

  // Literal sequential assignment: the last patch covering a voxel owns it.
  std::vector<std::int32_t> owner(nv, -1);
  std::vector<std::int32_t> owner_pi(nv, -1);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const auto yv = patches[k].probs.values();
    for_region(vol, patches[k].origin, ps, [&](std::int64_t x, std::int64_t pi) {
      const auto xi = static_cast<std::size_t>(x);
      const double w = pw.data[static_cast<std::size_t>(pi)];
      owner[xi] = static_cast<std::int32_t>(k);
      owner_pi[xi] = static_cast<std::int32_t>(pi);
      for (int ch = 0; ch < c; ++ch) {
        const double sc = s[static_cast<std::size_t>(ch)];
        out[ch * nv + xi] = sc * w * yv[ch * np + static_cast<std::size_t>(pi)] + (1 - sc) * uv[ch * nv + xi];
      }
    });
  }
  std::vector<Tensor> patch_tensors;
  for (const auto& p : patches) patch_tensors.push_back(p.probs);
  auto fn = [=, up_copy = std::vector<double>(uv.begin(), uv.end()), owner = std::move(owner),
             owner_pi = std::move(owner_pi), pwd = pw.data](std::span<const double> g, const ad::GradSink& grads) {
    auto gu = grads[0];
    auto gc = grads[1];
    std::vector<std::span<double>> gp;
    for (std::size_t k = 0; k < patch_tensors.size(); ++k) gp.push_back(grads[k + 2]);
    for (std::size_t x = 0; x < nv; ++x) {
      if (owner[x] < 0) {
        if (!gu.empty())
          for (int ch = 0; ch < c; ++ch) gu[ch * nv + x] += g[ch * nv + x];
        continue;
      }
      const auto k = static_cast<std::size_t>(owner[x]);
      const auto pi = static_cast<std::size_t>(owner_pi[x]);
      const double w = pwd[pi];
      const auto yv = patch_tensors[k].values();
      for (int ch = 0; ch < c; ++ch) {
        const double sc = s[static_cast<std::size_t>(ch)];
        const double gx = g[ch * nv + x];
        if (!gu.empty()) gu[ch * nv + x] += gx * (1 - sc);
        if (!gp[k].empty()) gp[k][ch * np + pi] += gx * sc * w;
        if (!gc.empty()) gc[static_cast<std::size_t>(ch)] += gx * (w * yv[ch * np + pi] - up_copy[ch * nv + x]) * sc * (1 - sc);
      }
    }
  };
  return ad::make_result(up.shape(), std::move(out), std::move(inputs), fn, "aggregate_eq6");
}

std::vector<std::uint8_t> coverage_map(const GridSpec& grid, const std::vector<int>& indices) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(voxel_count(grid.volume_shape)), 0);
  for (int i : indices) {
    if (i < 0 || i >= grid.size()) throw std::out_of_range("coverage_map: patch index out of range");
    for_region(grid.volume_shape, grid.origins[static_cast<std::size_t>(i)], grid.patch_shape,
               [&](std::int64_t x, std::int64_t) { m[static_cast<std::size_t>(x)] = 1; });
  }
  return m;
}

}  // namespace nmsw
