#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nmsw/volgrid.hpp"

namespace nmsw {

/// Class 1 is a handful of small blobs; classes 2..C-1 are one large blob
/// each. With `twin_classes`, classes 2 and 3 share an intensity and sit in
/// opposite halves along h, so only position tells them apart.
struct SynthConfig {
  Dims3 shape{48, 48, 48};
  int num_classes = 4;
  int small_count_min = 4, small_count_max = 6;
  double small_radius_min = 3.0, small_radius_max = 4.5;
  double large_radius_min = 6.0, large_radius_max = 9.0;
  /// Mean intensity per class; index 0 is background.
  std::vector<double> intensities{0.0, 1.0, -0.6, -0.3};
  double noise_sigma = 0.1;
  bool twin_classes = true;
  std::uint64_t seed = 0;

  void validate() const;
  /// Class intensities after applying the twin rule.
  std::vector<double> effective_intensities() const;
};

struct Sample {
  Volume volume;
  LabelMap labels;
};

Sample gen_sample(const SynthConfig& cfg, std::uint64_t seed);

struct ManifestEntry {
  std::string id;
  std::string split;
  std::string volume_path;  // relative to the dataset root, without extension
  std::string label_path;
};

/// Writes volumes/, labels/ and manifest.json under `root`. A non-empty
/// `root` is an error unless `force`.
std::vector<ManifestEntry> gen_dataset(const SynthConfig& cfg, int n_train, int n_val, std::uint64_t seed,
                                       const std::filesystem::path& root, bool force = false);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);
Sample load_sample(const std::filesystem::path& root, const ManifestEntry& e);
std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace nmsw
