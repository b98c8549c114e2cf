#include "nmsw/volgrid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include "json.hpp"

#include "nmsw/detail/interp.hpp"

static_assert(std::endian::native == std::endian::little, "raw payloads are little-endian");

namespace nmsw {

namespace {

void check_dims(const Dims3& s, const char* what) {
  for (int v : s)
    if (v < 1) throw std::invalid_argument(std::string(what) + ": all dimensions must be >= 1");
}

}  // namespace

void Volume::validate() const {
  check_dims(shape, "volume");
  for (double s : spacing)
    if (!(s > 0)) throw std::invalid_argument("volume: spacing must be positive");
  if (static_cast<std::int64_t>(data.size()) != voxel_count(shape))
    throw std::invalid_argument("volume: payload size does not match shape");
  for (float v : data)
    if (!std::isfinite(v)) throw std::invalid_argument("volume: non-finite intensity");
}

void LabelMap::validate() const {
  check_dims(shape, "labels");
  if (num_classes < 2) throw std::invalid_argument("labels: need at least 2 classes");
  if (static_cast<std::int64_t>(data.size()) != voxel_count(shape))
    throw std::invalid_argument("labels: payload size does not match shape");
  for (auto v : data)
    if (v >= num_classes) throw std::invalid_argument("labels: value >= num_classes");
}

GridMode parse_grid_mode(const std::string& s) {
  if (s == "floor") return GridMode::floor;
  if (s == "cover") return GridMode::cover;
  throw std::invalid_argument("unknown grid mode '" + s + "'");
}

std::string to_string(GridMode m) { return m == GridMode::floor ? "floor" : "cover"; }

GridSpec build_grid(const Dims3& volume_shape, const Dims3& patch_shape, const std::array<double, 3>& overlap,
                    GridMode mode) {
  check_dims(volume_shape, "build_grid volume");
  check_dims(patch_shape, "build_grid patch");
  for (int a = 0; a < 3; ++a)
    if (patch_shape[a] > volume_shape[a]) throw std::invalid_argument("patch exceeds volume");
  for (double o : overlap)
    if (!(o > 0 && o < 1)) throw std::invalid_argument("overlap must lie in (0, 1)");

  GridSpec g;
  g.volume_shape = volume_shape;
  g.patch_shape = patch_shape;
  g.overlap = overlap;
  g.mode = mode;

  std::array<std::vector<int>, 3> axis_origins;
  for (int a = 0; a < 3; ++a) {
    const int span = volume_shape[a] - patch_shape[a];
    const int stride = std::max(1, static_cast<int>(std::lround(patch_shape[a] * overlap[a])));
    g.stride[a] = stride;
    int n = 1;
    if (mode == GridMode::floor) {
      n = span / stride + 1;
    } else if (span > 0) {
      n = (span + stride - 1) / stride + 1;
    }
    g.counts[a] = n;
    auto& o = axis_origins[static_cast<std::size_t>(a)];
    o.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) o[static_cast<std::size_t>(i)] = std::min(i * stride, span);
  }

  g.origins.reserve(static_cast<std::size_t>(g.counts[0]) * g.counts[1] * g.counts[2]);
  for (int oh : axis_origins[0])
    for (int ow : axis_origins[1])
      for (int od : axis_origins[2]) g.origins.push_back({oh, ow, od});
  return g;
}

GridSpec build_grid(const Dims3& volume_shape, const Dims3& patch_shape, double overlap, GridMode mode) {
  return build_grid(volume_shape, patch_shape, {overlap, overlap, overlap}, mode);
}

GaussianWeightMap gaussian_weight_map(const Dims3& patch_shape, double sigma_frac) {
  if (!(sigma_frac > 0)) throw std::invalid_argument("sigma_frac must be positive");
  check_dims(patch_shape, "gaussian_weight_map");
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const int p = patch_shape[a];
    const double c = (p - 1) / 2.0;
    const double sigma = sigma_frac * p;
    auto& v = axis[static_cast<std::size_t>(a)];
    v.resize(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) v[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    // Per-axis peak normalisation keeps the product's maximum at exactly 1.
    const double peak = *std::max_element(v.begin(), v.end());
    for (auto& x : v) x /= peak;
  }
  GaussianWeightMap m;
  m.shape = patch_shape;
  m.sigma_frac = sigma_frac;
  m.data.resize(static_cast<std::size_t>(voxel_count(patch_shape)));
  std::size_t i = 0;
  for (int h = 0; h < patch_shape[0]; ++h)
    for (int w = 0; w < patch_shape[1]; ++w)
      for (int d = 0; d < patch_shape[2]; ++d)
        m.data[i++] = static_cast<float>(axis[0][static_cast<std::size_t>(h)] * axis[1][static_cast<std::size_t>(w)] *
                                         axis[2][static_cast<std::size_t>(d)]);
  return m;
}

void check_patch_bounds(const Dims3& volume_shape, const Dims3& origin, const Dims3& patch_shape) {
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || patch_shape[a] < 1 || origin[a] + patch_shape[a] > volume_shape[a])
      throw std::out_of_range("patch region out of bounds");
  }
}

namespace {

template <class T>
void copy_region(const std::vector<T>& src, const Dims3& src_shape, std::vector<T>& dst, const Dims3& origin,
                 const Dims3& patch, std::int64_t src_off, std::int64_t dst_off) {
  for (int h = 0; h < patch[0]; ++h)
    for (int w = 0; w < patch[1]; ++w) {
      const auto s = src_off + flat_index(src_shape, origin[0] + h, origin[1] + w, origin[2]);
      const auto d = dst_off + flat_index(patch, h, w, 0);
      std::copy_n(src.begin() + s, patch[2], dst.begin() + d);
    }
}

}  // namespace

Volume extract_patch(const Volume& v, const Dims3& origin, const Dims3& patch_shape) {
  check_patch_bounds(v.shape, origin, patch_shape);
  Volume out(patch_shape);
  out.spacing = v.spacing;
  out.id = v.id;
  copy_region(v.data, v.shape, out.data, origin, patch_shape, 0, 0);
  return out;
}

LabelMap extract_patch(const LabelMap& v, const Dims3& origin, const Dims3& patch_shape) {
  check_patch_bounds(v.shape, origin, patch_shape);
  LabelMap out(patch_shape, v.num_classes);
  copy_region(v.data, v.shape, out.data, origin, patch_shape, 0, 0);
  return out;
}

ProbMap extract_patch(const ProbMap& v, const Dims3& origin, const Dims3& patch_shape) {
  check_patch_bounds(v.shape, origin, patch_shape);
  ProbMap out(v.channels, patch_shape);
  for (int c = 0; c < v.channels; ++c)
    copy_region(v.data, v.shape, out.data, origin, patch_shape, c * voxel_count(v.shape),
                c * voxel_count(patch_shape));
  return out;
}

void scatter_patch(Volume& dst, const Volume& patch, const Dims3& origin) {
  check_patch_bounds(dst.shape, origin, patch.shape);
  for (int h = 0; h < patch.shape[0]; ++h)
    for (int w = 0; w < patch.shape[1]; ++w) {
      const auto s = flat_index(patch.shape, h, w, 0);
      const auto d = flat_index(dst.shape, origin[0] + h, origin[1] + w, origin[2]);
      std::copy_n(patch.data.begin() + s, patch.shape[2], dst.data.begin() + d);
    }
}

Dims3 downsampled_shape(const Dims3& shape, const std::array<double, 3>& factors) {
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    if (!(factors[a] > 0)) throw std::invalid_argument("resample factor must be positive");
    if (factors[a] < 1) throw std::invalid_argument("resample factor must be >= 1");
    out[a] = std::max(1, static_cast<int>(std::floor(shape[a] / factors[a])));
  }
  return out;
}

Volume resample_trilinear(const Volume& v, const std::array<double, 3>& factors) {
  const Dims3 out_shape = downsampled_shape(v.shape, factors);
  Volume out;
  out.shape = out_shape;
  out.id = v.id;
  for (int a = 0; a < 3; ++a) out.spacing[a] = v.spacing[a] * v.shape[a] / out_shape[a];
  out.data = detail::resize_trilinear(v.data, 1, v.shape, out_shape);
  return out;
}

ProbMap upsample_trilinear(const ProbMap& p, const Dims3& target_shape) {
  for (int a = 0; a < 3; ++a)
    if (target_shape[a] < p.shape[a]) throw std::invalid_argument("upsample target smaller than source");
  ProbMap out;
  out.channels = p.channels;
  out.shape = target_shape;
  out.data = detail::resize_trilinear(p.data, p.channels, p.shape, target_shape);
  const auto n = voxel_count(target_shape);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int c = 0; c < p.channels; ++c) s += out.data[static_cast<std::size_t>(c * n + i)];
    if (s > 0)
      for (int c = 0; c < p.channels; ++c)
        out.data[static_cast<std::size_t>(c * n + i)] =
            static_cast<float>(out.data[static_cast<std::size_t>(c * n + i)] / s);
  }
  return out;
}

ProbMap one_hot(const LabelMap& labels, int num_classes) {
  ProbMap out(num_classes, labels.shape);
  const auto n = voxel_count(labels.shape);
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = labels.data[static_cast<std::size_t>(i)];
    if (c >= num_classes) throw std::invalid_argument("label >= number of classes");
    out.data[static_cast<std::size_t>(c * n + i)] = 1.0f;
  }
  return out;
}

LabelMap downsample_label_nearest(const LabelMap& labels, const std::array<double, 3>& factors) {
  const Dims3 out_shape = downsampled_shape(labels.shape, factors);
  std::array<std::vector<int>, 3> src;
  for (int a = 0; a < 3; ++a) {
    const double scale = static_cast<double>(labels.shape[a]) / out_shape[a];
    auto& s = src[static_cast<std::size_t>(a)];
    s.resize(static_cast<std::size_t>(out_shape[a]));
    for (int i = 0; i < out_shape[a]; ++i)
      s[static_cast<std::size_t>(i)] = std::min(labels.shape[a] - 1, static_cast<int>(std::floor((i + 0.5) * scale)));
  }
  LabelMap out(out_shape, labels.num_classes);
  for (int h = 0; h < out_shape[0]; ++h)
    for (int w = 0; w < out_shape[1]; ++w)
      for (int d = 0; d < out_shape[2]; ++d)
        out.at(h, w, d) = labels.at(src[0][static_cast<std::size_t>(h)], src[1][static_cast<std::size_t>(w)],
                                    src[2][static_cast<std::size_t>(d)]);
  return out;
}

LabelMap argmax_labels(const ProbMap& p) {
  LabelMap out(p.shape, std::max(2, p.channels));
  const auto n = voxel_count(p.shape);
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    float best_v = p.data[static_cast<std::size_t>(i)];
    for (int c = 1; c < p.channels; ++c) {
      const float v = p.data[static_cast<std::size_t>(c * n + i)];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// File IO

namespace {

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

nlohmann::json read_sidecar(const std::filesystem::path& stem) {
  std::ifstream in(with_ext(stem, ".json"));
  if (!in) throw std::runtime_error("cannot open " + with_ext(stem, ".json").string());
  return nlohmann::json::parse(in);
}

template <class T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
}

template <class T>
std::vector<T> read_raw(const std::filesystem::path& path, std::int64_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<T> data(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(data.size() * sizeof(T)))
    throw std::runtime_error("truncated payload " + path.string());
  return data;
}

void write_sidecar(const std::filesystem::path& stem, const nlohmann::json& j) {
  std::ofstream out(with_ext(stem, ".json"));
  if (!out) throw std::runtime_error("cannot write " + with_ext(stem, ".json").string());
  out << j.dump(2) << "\n";
}

}  // namespace

void write_volume(const std::filesystem::path& stem, const Volume& v) {
  v.validate();
  nlohmann::json j;
  j["shape"] = v.shape;
  j["dtype"] = "f32";
  j["spacing"] = v.spacing;
  write_sidecar(stem, j);
  write_raw(with_ext(stem, ".raw"), v.data);
}

Volume read_volume(const std::filesystem::path& stem) {
  const auto j = read_sidecar(stem);
  if (j.at("dtype").get<std::string>() != "f32") throw std::runtime_error("volume sidecar dtype must be f32");
  Volume v;
  v.shape = j.at("shape").get<Dims3>();
  v.spacing = j.at("spacing").get<std::array<double, 3>>();
  v.id = stem.filename().string();
  v.data = read_raw<float>(with_ext(stem, ".raw"), voxel_count(v.shape));
  v.validate();
  return v;
}

void write_labels(const std::filesystem::path& stem, const LabelMap& l, const std::array<double, 3>& spacing) {
  l.validate();
  nlohmann::json j;
  j["shape"] = l.shape;
  j["dtype"] = "u8";
  j["spacing"] = spacing;
  j["classes"] = l.num_classes;
  write_sidecar(stem, j);
  write_raw(with_ext(stem, ".raw"), l.data);
}

LabelMap read_labels(const std::filesystem::path& stem) {
  const auto j = read_sidecar(stem);
  if (j.at("dtype").get<std::string>() != "u8") throw std::runtime_error("label sidecar dtype must be u8");
  LabelMap l;
  l.shape = j.at("shape").get<Dims3>();
  l.num_classes = j.at("classes").get<int>();
  l.data = read_raw<std::uint8_t>(with_ext(stem, ".raw"), voxel_count(l.shape));
  l.validate();
  return l;
}

}  // namespace nmsw
