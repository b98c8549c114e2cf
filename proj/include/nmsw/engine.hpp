#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nmsw/aggregate.hpp"
#include "nmsw/nets.hpp"
#include "nmsw/objective.hpp"
#include "nmsw/rng.hpp"
#include "nmsw/sampler.hpp"
#include "nmsw/synth.hpp"
#include "nmsw/volgrid.hpp"

namespace nmsw {

struct ModelConfig {
  Dims3 volume_shape{48, 48, 48};
  Dims3 patch_shape{16, 16, 16};
  double overlap = 0.5;
  double downsample = 3.0;
  int num_classes = 4;
  std::vector<int> global_channels{8, 16};
  std::vector<int> local_channels{8, 16};
  bool coord_channels = true;
  double cw_init = -1.0;

  void validate() const;
};

/// Global net, local net and class weights bound to one candidate grid.
struct Model {
  ModelConfig cfg;
  NetConfig global_net, local_net;
  Params fg, fl;
  ClassWeights cw;

  GridSpec grid() const;
  Dims3 low_shape() const;
  GaussianWeightMap patch_weights() const;
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed);

void save_model(const std::filesystem::path& stem, const Model& m);
Model load_model(const std::filesystem::path& stem);
/// Stand-alone local net (the sliding-window baseline).
void save_local(const std::filesystem::path& stem, const ModelConfig& cfg, const Params& fl);
Params load_local(const std::filesystem::path& stem, ModelConfig* cfg_out = nullptr);

struct TrainConfig {
  int epochs = 40;
  int iters_per_epoch = 50;
  int k_topk = 3;
  int extra_random = 1;
  std::uint64_t seed = 0;
  StMode st = StMode::scaled;
  NoiseMode noise = NoiseMode::shared;
  AggMode agg = AggMode::normalized;
  LossConfig loss;
  OptimConfig optim;
  /// Sliding-window baseline: patches per iteration and foreground share.
  int sw_patches = 4;
  double sw_fg_fraction = 2.0 / 3.0;

  int total_iters() const { return epochs * iters_per_epoch; }
  void validate() const;
};

struct TrainLogRow {
  int iter = 0, epoch = 0;
  double loss = 0, low = 0, high = 0, patch = 0, entropy = 0, tau = 0, lr = 0, fg_mass = 0;
  std::vector<double> cw_sigma;
  std::vector<int> selected;
};

struct PiSnapshot {
  int epoch = 0;  // 0 = before training
  double fg_mass = 0;
  std::vector<double> pi;
};

struct TrainResult {
  Model model;
  std::vector<TrainLogRow> log;
  std::vector<PiSnapshot> pi_history;
};

/// Raised when the loss stops being finite; `dump` names the diagnostics file.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::filesystem::path dump) : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::filesystem::path& dump() const { return dump_; }

 private:
  std::filesystem::path dump_;
};

/// Per-sample tensors reused across iterations.
struct Prepared {
  const Sample* sample = nullptr;
  ad::Tensor x_low;        // [1, h, w, d]
  LabelMap y_low;
  ad::Tensor patch_stack;  // [N, Hp, Wp, Dp]
  std::vector<LabelMap> patch_labels;
  std::vector<std::uint8_t> fg_candidate;  // candidate touches a foreground voxel
};

Prepared prepare(const Model& m, const Sample& s);

/// Sum of pi over candidates that touch foreground.
double foreground_mass(std::span<const double> pi, const std::vector<std::uint8_t>& fg_candidate);

/// Joint training of global net, local net and class weights. If `diag_dir`
/// is set, a non-finite loss writes its diagnostics there before throwing.
TrainResult train(const std::vector<Sample>& data, const ModelConfig& mcfg, const TrainConfig& cfg,
                  const std::filesystem::path& diag_dir = {});

/// Sliding-window baseline: the local net alone on random patches.
Params train_sw(const std::vector<Sample>& data, const ModelConfig& mcfg, const TrainConfig& cfg);

/// pi = softmax(score_logits) of the global net for one volume.
std::vector<double> score_distribution(const Model& m, const Volume& v);

struct Inference {
  ProbMap probs;
  std::vector<int> selected;
  bool short_of_candidates = false;
};

Inference infer_sw(const Volume& v, const NetConfig& local_net, const Params& fl, const Dims3& patch_shape,
                   double overlap);
/// Greedy top-k of pi (k = -1 for every candidate). `cw_override` freezes
/// the class weights at that value.
Inference infer_nmsw(const Volume& v, const Model& m, int k, AggMode agg = AggMode::normalized,
                     std::optional<double> cw_override = std::nullopt);
/// Uniform choice among candidates with >= 1% of voxels above 0.5 global
/// foreground probability; class weights frozen at `cw_value`.
Inference infer_rf(const Volume& v, const Model& m, int k, CounterRng& rng, AggMode agg = AggMode::normalized,
                   double cw_value = 6.0);
std::vector<std::uint8_t> rf_candidates(const ProbMap& up, const GridSpec& grid, double prob_threshold = 0.5,
                                        double voxel_fraction = 0.01);

struct DiceScores {
  std::vector<double> per_class;
  double mean = 0;
};

/// Per-class Dice (empty in both = 1) and mean over classes present in gt.
DiceScores dsc(const LabelMap& pred, const LabelMap& gt, int num_classes);

enum class InferMode { sw, nmsw, rf };
InferMode parse_infer_mode(const std::string& s);
std::string to_string(InferMode m);

struct PhaseMacs {
  double global = 0, per_patch = 0, aggregation = 0;
};

struct CostReport {
  double macs_global = 0, macs_per_patch = 0, macs_aggregation = 0, macs_total = 0;
  double patch_count = 0;
  double wall_clock_seconds = 0;
};

/// Per-phase MACs of the model's own nets; aggregation counts
/// (patch voxels + volume voxels) x C x kAggOpsPerVoxel.
PhaseMacs model_phase_macs(const Model& m, double patch_count);
inline constexpr int kAggOpsPerVoxel = 3;

/// macs_total = global*[nmsw|rf] + patch_count*per_patch + aggregation*[nmsw|rf with patches].
CostReport cost_model(const PhaseMacs& phase, InferMode mode, double patch_count);
CostReport cost_model(const Model& m, InferMode mode, double patch_count);

struct InferConfig {
  InferMode mode = InferMode::nmsw;
  int k = -1;  // -1 = full
  AggMode agg = AggMode::normalized;
  std::optional<double> cw_frozen;
  std::uint64_t seed = 0;

  std::string k_label() const { return k < 0 ? "full" : std::to_string(k); }
};

struct BenchRow {
  InferConfig cfg;
  double mean_dsc = 0;
  std::vector<double> dsc_class;
  double macs_total = 0;
  double patch_count = 0;
  double wall_ms = 0;
};

/// Evaluates each configuration over `data`; wall_ms is the median of three
/// timed passes per volume.
std::vector<BenchRow> benchmark(const std::vector<Sample>& data, const Model& m, const Params& sw_local,
                                const std::vector<InferConfig>& configs, int timing_runs = 3);
std::string bench_csv_header(int num_classes);
std::string bench_csv_row(const BenchRow& r);

}  // namespace nmsw
