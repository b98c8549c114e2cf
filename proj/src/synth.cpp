#include "nmsw/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "nmsw/rng.hpp"

namespace nmsw {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synth: num_classes must be >= 2");
  if (static_cast<int>(intensities.size()) != num_classes)
    throw std::invalid_argument("synth: need one intensity per class");
  for (int a = 0; a < 3; ++a)
    if (shape[a] < 1) throw std::invalid_argument("synth: shape must be positive");
  if (small_count_min < 0 || small_count_max < small_count_min) throw std::invalid_argument("synth: bad small count range");
  if (!(small_radius_min > 0 && small_radius_max >= small_radius_min)) throw std::invalid_argument("synth: bad small radius range");
  if (!(large_radius_min > 0 && large_radius_max >= large_radius_min)) throw std::invalid_argument("synth: bad large radius range");
  if (noise_sigma < 0) throw std::invalid_argument("synth: noise_sigma must be non-negative");
  if (twin_classes && num_classes < 4) throw std::invalid_argument("synth: twin classes need num_classes >= 4");
  const int need = twin_classes ? 2 : 1;
  for (int a = 0; a < 3; ++a)
    if (2 * large_radius_max + 2 > shape[a] / (a == 0 ? need : 1))
      throw std::invalid_argument("synth: blobs do not fit inside the volume");
}

std::vector<double> SynthConfig::effective_intensities() const {
  auto v = intensities;
  if (twin_classes) v[3] = v[2];
  return v;
}

namespace {

struct Blob {
  std::array<double, 3> centre, radius;
  int label;
};

double uniform(CounterRng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform_open(); }

bool inside(const Blob& b, double h, double w, double d) {
  const double x = (h - b.centre[0]) / b.radius[0], y = (w - b.centre[1]) / b.radius[1],
               z = (d - b.centre[2]) / b.radius[2];
  return x * x + y * y + z * z <= 1.0;
}

// Conservative separation test on bounding spheres.
bool overlaps(const Blob& a, const Blob& b, double margin) {
  double dist2 = 0;
  for (int i = 0; i < 3; ++i) dist2 += (a.centre[i] - b.centre[i]) * (a.centre[i] - b.centre[i]);
  const auto ra = std::max({a.radius[0], a.radius[1], a.radius[2]});
  const auto rb = std::max({b.radius[0], b.radius[1], b.radius[2]});
  return std::sqrt(dist2) < ra + rb + margin;
}

Blob place(CounterRng& rng, const Dims3& shape, double rmin, double rmax, int label, std::array<double, 2> h_range,
           const std::vector<Blob>& placed) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Blob b;
    b.label = label;
    for (int a = 0; a < 3; ++a) b.radius[a] = uniform(rng, rmin, rmax);
    bool fits = true;
    for (int a = 0; a < 3; ++a) {
      double lo = b.radius[a] + 0.5, hi = shape[a] - 1.5 - b.radius[a];
      if (a == 0) {
        lo = std::max(lo, h_range[0] + b.radius[a]);
        hi = std::min(hi, h_range[1] - b.radius[a]);
      }
      if (hi < lo) {
        fits = false;
        break;
      }
      b.centre[a] = uniform(rng, lo, hi);
    }
    if (!fits) continue;
    bool clear = true;
    for (const auto& o : placed) clear = clear && !overlaps(b, o, 1.0);
    if (clear) return b;
  }
  throw std::runtime_error("synth: blob placement infeasible after 100 attempts");
}

}  // namespace

Sample gen_sample(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng rng(seed, 0x73796e74);
  const auto& s = cfg.shape;
  const double full[2] = {0.0, static_cast<double>(s[0])};
  std::vector<Blob> blobs;
  // Large blobs first; the twins are confined to opposite halves along h.
  for (int c = 2; c < cfg.num_classes; ++c) {
    std::array<double, 2> hr{full[0], full[1]};
    if (cfg.twin_classes && c == 2) hr = {0.0, s[0] / 2.0};
    if (cfg.twin_classes && c == 3) hr = {s[0] / 2.0, static_cast<double>(s[0])};
    blobs.push_back(place(rng, s, cfg.large_radius_min, cfg.large_radius_max, c, hr, blobs));
  }
  const int n_small = cfg.small_count_min + static_cast<int>(rng.below(
                                                static_cast<std::uint64_t>(cfg.small_count_max - cfg.small_count_min + 1)));
  for (int i = 0; i < n_small; ++i)
    blobs.push_back(place(rng, s, cfg.small_radius_min, cfg.small_radius_max, 1, {full[0], full[1]}, blobs));

  Sample out;
  out.volume = Volume(s);
  out.volume.id = "synth";
  out.labels = LabelMap(s, cfg.num_classes);
  const auto mu = cfg.effective_intensities();
  for (int h = 0; h < s[0]; ++h)
    for (int w = 0; w < s[1]; ++w)
      for (int d = 0; d < s[2]; ++d) {
        int label = 0;
        for (const auto& b : blobs)
          if (inside(b, h, w, d)) label = b.label;
        out.labels.at(h, w, d) = static_cast<std::uint8_t>(label);
        double v = mu[static_cast<std::size_t>(label)];
        if (cfg.noise_sigma > 0) {
          // Box-Muller on the counter stream keeps the noise platform-independent.
          const double u1 = rng.uniform_open(), u2 = rng.uniform_open();
          v += cfg.noise_sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        }
        out.volume.at(h, w, d) = static_cast<float>(v);
      }
  return out;
}

std::vector<ManifestEntry> gen_dataset(const SynthConfig& cfg, int n_train, int n_val, std::uint64_t seed,
                                       const fs::path& root, bool force) {
  if (n_train < 1 || n_val < 0) throw std::invalid_argument("gen_dataset: need n_train >= 1 and n_val >= 0");
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw std::runtime_error("target directory " + root.string() + " is not empty (use --force)");
    fs::remove_all(root / "volumes");
    fs::remove_all(root / "labels");
    fs::remove(root / "manifest.json");
  }
  fs::create_directories(root / "volumes");
  fs::create_directories(root / "labels");
  std::vector<ManifestEntry> entries;
  const CounterRng base(seed, 0x64617461);
  for (int i = 0; i < n_train + n_val; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    auto sample = gen_sample(cfg, base.split(static_cast<std::uint64_t>(i))());
    sample.volume.id = id;
    ManifestEntry e{id, i < n_train ? "train" : "val", std::string("volumes/") + id, std::string("labels/") + id};
    write_volume(root / e.volume_path, sample.volume);
    write_labels(root / e.label_path, sample.labels, sample.volume.spacing);
    entries.push_back(e);
  }
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries)
    j.push_back({{"id", e.id}, {"split", e.split}, {"volume_path", e.volume_path}, {"label_path", e.label_path}});
  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
  out << j.dump(2) << '\n';
  return entries;
}

std::vector<ManifestEntry> read_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + root.string());
  std::vector<ManifestEntry> out;
  for (const auto& e : nlohmann::json::parse(in))
    out.push_back({e.at("id"), e.at("split"), e.at("volume_path"), e.at("label_path")});
  return out;
}

Sample load_sample(const fs::path& root, const ManifestEntry& e) {
  Sample s{read_volume(root / e.volume_path), read_labels(root / e.label_path)};
  s.volume.id = e.id;
  if (s.volume.shape != s.labels.shape) throw std::runtime_error("volume/label shape mismatch for " + e.id);
  return s;
}

std::vector<Sample> load_split(const fs::path& root, const std::string& split) {
  std::vector<Sample> out;
  for (const auto& e : read_manifest(root))
    if (e.split == split) out.push_back(load_sample(root, e));
  if (out.empty()) throw std::runtime_error("no '" + split + "' samples in " + root.string());
  return out;
}

}  // namespace nmsw
