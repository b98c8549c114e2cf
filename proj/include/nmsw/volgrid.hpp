#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmsw {

using Dims3 = std::array<int, 3>;

inline std::int64_t voxel_count(const Dims3& s) {
  return static_cast<std::int64_t>(s[0]) * s[1] * s[2];
}

/// Row-major (h, w, d) flat index; d varies fastest.
inline std::int64_t flat_index(const Dims3& s, int h, int w, int d) {
  return (static_cast<std::int64_t>(h) * s[1] + w) * s[2] + d;
}

struct Volume {
  Dims3 shape{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;
  std::vector<float> data;

  Volume() = default;
  Volume(Dims3 s, float fill = 0.0f) : shape(s), data(static_cast<std::size_t>(voxel_count(s)), fill) {}

  float& at(int h, int w, int d) { return data[static_cast<std::size_t>(flat_index(shape, h, w, d))]; }
  float at(int h, int w, int d) const { return data[static_cast<std::size_t>(flat_index(shape, h, w, d))]; }

  /// Throws if the shape, spacing or payload violate the container invariants.
  void validate() const;
};

struct LabelMap {
  Dims3 shape{1, 1, 1};
  int num_classes = 2;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(Dims3 s, int classes, std::uint8_t fill = 0)
      : shape(s), num_classes(classes), data(static_cast<std::size_t>(voxel_count(s)), fill) {}

  std::uint8_t& at(int h, int w, int d) { return data[static_cast<std::size_t>(flat_index(shape, h, w, d))]; }
  std::uint8_t at(int h, int w, int d) const { return data[static_cast<std::size_t>(flat_index(shape, h, w, d))]; }

  void validate() const;
};

/// Per-voxel class probabilities laid out [C, H, W, D].
struct ProbMap {
  int channels = 2;
  Dims3 shape{1, 1, 1};
  std::vector<float> data;

  ProbMap() = default;
  ProbMap(int c, Dims3 s, float fill = 0.0f)
      : channels(c), shape(s), data(static_cast<std::size_t>(c * voxel_count(s)), fill) {}

  float& at(int c, int h, int w, int d) {
    return data[static_cast<std::size_t>(c * voxel_count(shape) + flat_index(shape, h, w, d))];
  }
  float at(int c, int h, int w, int d) const {
    return data[static_cast<std::size_t>(c * voxel_count(shape) + flat_index(shape, h, w, d))];
  }
};

enum class GridMode { floor, cover };

GridMode parse_grid_mode(const std::string& s);
std::string to_string(GridMode m);

/// Regular patch grid over a volume. `origins` are in row-major (h, w, d)
/// order, so patch n sits at counts-index unravel(n).
struct GridSpec {
  Dims3 volume_shape{};
  Dims3 patch_shape{};
  std::array<double, 3> overlap{};
  GridMode mode = GridMode::floor;
  Dims3 stride{};
  Dims3 counts{};
  std::vector<Dims3> origins;

  int size() const { return static_cast<int>(origins.size()); }
};

/// Throws "patch exceeds volume" when any patch extent is larger than the
/// volume, and std::invalid_argument for overlap outside (0, 1).
GridSpec build_grid(const Dims3& volume_shape, const Dims3& patch_shape, const std::array<double, 3>& overlap,
                    GridMode mode);
GridSpec build_grid(const Dims3& volume_shape, const Dims3& patch_shape, double overlap, GridMode mode);

struct GaussianWeightMap {
  Dims3 shape{};
  double sigma_frac = 0.125;
  std::vector<float> data;

  float at(int h, int w, int d) const { return data[static_cast<std::size_t>(flat_index(shape, h, w, d))]; }
};

/// Separable Gaussian with sigma = sigma_frac * extent per axis, centred at
/// (P-1)/2 and rescaled so the largest voxel weight is exactly 1.
GaussianWeightMap gaussian_weight_map(const Dims3& patch_shape, double sigma_frac = 0.125);

void check_patch_bounds(const Dims3& volume_shape, const Dims3& origin, const Dims3& patch_shape);

Volume extract_patch(const Volume& v, const Dims3& origin, const Dims3& patch_shape);
LabelMap extract_patch(const LabelMap& v, const Dims3& origin, const Dims3& patch_shape);
ProbMap extract_patch(const ProbMap& v, const Dims3& origin, const Dims3& patch_shape);

/// Inverse of extract_patch on the patch region: writes `patch` into `dst`.
void scatter_patch(Volume& dst, const Volume& patch, const Dims3& origin);

/// Output extent of an integer-style downsample: max(1, floor(n / r)).
Dims3 downsampled_shape(const Dims3& shape, const std::array<double, 3>& factors);

/// Trilinear downsample (align-corners-false) by the given per-axis factors.
Volume resample_trilinear(const Volume& v, const std::array<double, 3>& factors);

/// Trilinear resize of a probability map to `target_shape`, renormalised so
/// every voxel sums to one.
ProbMap upsample_trilinear(const ProbMap& p, const Dims3& target_shape);

ProbMap one_hot(const LabelMap& labels, int num_classes);

/// Nearest-centre label downsampling: output voxel i takes the source voxel
/// floor((i + 0.5) * r), clamped to the volume.
LabelMap downsample_label_nearest(const LabelMap& labels, const std::array<double, 3>& factors);

/// Per-voxel argmax over channels (lowest class index wins ties).
LabelMap argmax_labels(const ProbMap& p);

// File format: `<stem>.json` sidecar + `<stem>.raw` little-endian row-major payload.
void write_volume(const std::filesystem::path& stem, const Volume& v);
Volume read_volume(const std::filesystem::path& stem);
void write_labels(const std::filesystem::path& stem, const LabelMap& l, const std::array<double, 3>& spacing = {1, 1, 1});
LabelMap read_labels(const std::filesystem::path& stem);

}  // namespace nmsw
