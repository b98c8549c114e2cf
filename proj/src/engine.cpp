#include "nmsw/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace nmsw {

namespace fs = std::filesystem;
using ad::Tensor;

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
  if (!(downsample >= 1)) throw std::invalid_argument("model: downsample must be >= 1");
  if (!(overlap > 0 && overlap < 1)) throw std::invalid_argument("model: overlap must lie in (0, 1)");
  for (int a = 0; a < 3; ++a)
    if (patch_shape[a] < 1 || patch_shape[a] > volume_shape[a])
      throw std::invalid_argument("model: patch exceeds volume");
  if (global_channels.empty() || local_channels.empty()) throw std::invalid_argument("model: empty channel list");
}

GridSpec Model::grid() const { return build_grid(cfg.volume_shape, cfg.patch_shape, cfg.overlap, GridMode::floor); }

Dims3 Model::low_shape() const {
  const double r = cfg.downsample;
  return downsampled_shape(cfg.volume_shape, {r, r, r});
}

GaussianWeightMap Model::patch_weights() const { return gaussian_weight_map(cfg.patch_shape); }

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.global_net.channels = cfg.global_channels;
  m.global_net.num_classes = cfg.num_classes;
  m.global_net.coord_channels = cfg.coord_channels;
  m.global_net.input_shape = m.low_shape();
  m.global_net.score_grid = m.grid().counts;
  m.local_net.channels = cfg.local_channels;
  m.local_net.num_classes = cfg.num_classes;
  m.local_net.input_shape = cfg.patch_shape;
  const CounterRng keys(seed, 0x6d6f64656c);
  m.fg = init_params(m.global_net, keys.split(0)());
  m.fl = init_params(m.local_net, keys.split(1)());
  m.cw = learnable_class_weights(cfg.num_classes, cfg.cw_init);
  return m;
}

namespace {

nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"volume_shape", c.volume_shape},       {"patch_shape", c.patch_shape},
          {"overlap", c.overlap},                 {"downsample", c.downsample},
          {"num_classes", c.num_classes},         {"global_channels", c.global_channels},
          {"local_channels", c.local_channels},   {"coord_channels", c.coord_channels},
          {"cw_init", c.cw_init}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.volume_shape = j.at("volume_shape").get<Dims3>();
  c.patch_shape = j.at("patch_shape").get<Dims3>();
  c.overlap = j.at("overlap").get<double>();
  c.downsample = j.at("downsample").get<double>();
  c.num_classes = j.at("num_classes").get<int>();
  c.global_channels = j.at("global_channels").get<std::vector<int>>();
  c.local_channels = j.at("local_channels").get<std::vector<int>>();
  c.coord_channels = j.at("coord_channels").get<bool>();
  c.cw_init = j.at("cw_init").get<double>();
  c.validate();
  return c;
}

Tensor stack_row(const Tensor& stack, int n) {
  const int p0 = stack.dim(1), p1 = stack.dim(2), p2 = stack.dim(3);
  const auto m = static_cast<std::size_t>(p0) * p1 * p2;
  const auto v = stack.values();
  return Tensor::from({1, p0, p1, p2}, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(n * m),
                                                           v.begin() + static_cast<std::ptrdiff_t>((n + 1) * m)));
}

Tensor low_input(const Model& m, const Volume& v) {
  const double r = m.cfg.downsample;
  return to_tensor(resample_trilinear(v, {r, r, r}));
}

void check_volume(const Model& m, const Volume& v) {
  if (v.shape != m.cfg.volume_shape)
    throw std::invalid_argument("volume shape differs from the model's configured volume shape");
}

}  // namespace

void save_model(const fs::path& stem, const Model& m) {
  Checkpoint ck;
  ck.meta["kind"] = "nmsw";
  ck.meta["model"] = model_config_json(m.cfg);
  put_params(ck, "global", m.fg);
  put_params(ck, "local", m.fl);
  ck.tensors["class_weights"] = m.cw.logits.detach();
  save_checkpoint(stem, ck);
}

Model load_model(const fs::path& stem) {
  const auto ck = load_checkpoint(stem);
  if (ck.meta.value("kind", "") != "nmsw") throw std::runtime_error(stem.string() + " is not an NMSW checkpoint");
  Model m = make_model(model_config_from_json(ck.meta.at("model")), 0);
  m.fg = take_params(ck, "global", m.global_net);
  m.fl = take_params(ck, "local", m.local_net);
  const auto it = ck.tensors.find("class_weights");
  if (it == ck.tensors.end() || it->second.numel() != m.cfg.num_classes)
    throw std::runtime_error("checkpoint lacks class weights");
  m.cw = learnable_class_weights(m.cfg.num_classes);
  const auto src = it->second.values();
  std::copy(src.begin(), src.end(), m.cw.logits.mutable_values().begin());
  return m;
}

void save_local(const fs::path& stem, const ModelConfig& cfg, const Params& fl) {
  Checkpoint ck;
  ck.meta["kind"] = "sw";
  ck.meta["model"] = model_config_json(cfg);
  put_params(ck, "local", fl);
  save_checkpoint(stem, ck);
}

Params load_local(const fs::path& stem, ModelConfig* cfg_out) {
  const auto ck = load_checkpoint(stem);
  if (ck.meta.value("kind", "") != "sw") throw std::runtime_error(stem.string() + " is not a sliding-window checkpoint");
  const auto cfg = model_config_from_json(ck.meta.at("model"));
  if (cfg_out) *cfg_out = cfg;
  return take_params(ck, "local", make_model(cfg, 0).local_net);
}

void TrainConfig::validate() const {
  if (epochs < 1 || iters_per_epoch < 1) throw std::invalid_argument("train: epochs and iters_per_epoch must be >= 1");
  if (k_topk < 0 || extra_random < 0 || k_topk + extra_random < 1)
    throw std::invalid_argument("train: need k_topk + extra_random >= 1");
  if (sw_patches < 1) throw std::invalid_argument("train: sw_patches must be >= 1");
  if (!(sw_fg_fraction >= 0 && sw_fg_fraction <= 1)) throw std::invalid_argument("train: sw_fg_fraction must lie in [0, 1]");
  loss.validate();
  optim.validate();
}

Prepared prepare(const Model& m, const Sample& s) {
  check_volume(m, s.volume);
  Prepared p;
  p.sample = &s;
  p.x_low = low_input(m, s.volume);
  const double r = m.cfg.downsample;
  p.y_low = downsample_label_nearest(s.labels, {r, r, r});
  const auto g = m.grid();
  const auto& ps = m.cfg.patch_shape;
  const auto np = static_cast<std::size_t>(voxel_count(ps));
  std::vector<double> stack;
  stack.reserve(np * g.origins.size());
  for (const auto& o : g.origins) {
    const auto patch = extract_patch(s.volume, o, ps);
    stack.insert(stack.end(), patch.data.begin(), patch.data.end());
    auto lab = extract_patch(s.labels, o, ps);
    p.fg_candidate.push_back(std::any_of(lab.data.begin(), lab.data.end(), [](std::uint8_t v) { return v > 0; }));
    p.patch_labels.push_back(std::move(lab));
  }
  p.patch_stack = Tensor::from({g.size(), ps[0], ps[1], ps[2]}, std::move(stack));
  return p;
}

double foreground_mass(std::span<const double> pi, const std::vector<std::uint8_t>& fg_candidate) {
  if (pi.size() != fg_candidate.size()) throw std::invalid_argument("foreground_mass: length mismatch");
  double s = 0;
  for (std::size_t i = 0; i < pi.size(); ++i)
    if (fg_candidate[i]) s += pi[i];
  return s;
}

namespace {

PiSnapshot snapshot(const Model& m, const std::vector<Prepared>& preps, int epoch) {
  ad::NoGradGuard ng;
  PiSnapshot s;
  s.epoch = epoch;
  for (std::size_t i = 0; i < preps.size(); ++i) {
    const auto out = forward_global(m.global_net, m.fg, preps[i].x_low);
    const auto pi = ad::softmax_tau(out.score_logits, 1.0);
    s.fg_mass += foreground_mass(pi.values(), preps[i].fg_candidate) / static_cast<double>(preps.size());
    if (i == 0) s.pi.assign(pi.values().begin(), pi.values().end());
  }
  return s;
}

[[noreturn]] void numeric_failure(const std::string& what, const fs::path& dir, int it, const Prepared& p,
                                  const LossTerms& t, double tau, double lr, const std::vector<int>& selected) {
  fs::path dump;
  if (!dir.empty()) {
    fs::create_directories(dir);
    dump = dir / ("nonfinite_iter" + std::to_string(it) + ".json");
    const auto& vol = p.sample->volume.data;
    nlohmann::json j{{"what", what},          {"iteration", it},
                     {"sample_id", p.sample->volume.id},
                     {"loss_low", t.low},     {"loss_high", t.high},
                     {"loss_patch", t.patch}, {"entropy", t.entropy},
                     {"tau", tau},            {"lr", lr},
                     {"selected", selected},
                     {"nonfinite_voxels", std::ranges::count_if(vol, [](float x) { return !std::isfinite(x); })}};
    // The volume writer refuses non-finite payloads; such a batch is identified by id alone.
    try {
      write_volume(dir / "nonfinite_batch_volume", p.sample->volume);
      j["batch_volume"] = "nonfinite_batch_volume";
    } catch (const std::invalid_argument& e) {
      j["batch_volume_error"] = e.what();
    }
    write_labels(dir / "nonfinite_batch_labels", p.sample->labels, p.sample->volume.spacing);
    std::ofstream(dump) << j.dump(2) << '\n';
  }
  throw NumericError(what + " at iteration " + std::to_string(it), dump);
}

}  // namespace

TrainResult train(const std::vector<Sample>& data, const ModelConfig& mcfg, const TrainConfig& cfg,
                  const fs::path& diag_dir) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult res;
  res.model = make_model(mcfg, cfg.seed);
  Model& m = res.model;
  std::vector<Prepared> preps;
  for (const auto& s : data) preps.push_back(prepare(m, s));

  std::vector<Tensor> trainable = m.fg.list();
  for (const auto& t : m.fl.list()) trainable.push_back(t);
  if (!m.cw.frozen) trainable.push_back(m.cw.logits);
  AdamW opt(trainable, cfg.optim);

  const CounterRng root(cfg.seed, 0x747261696e);
  CounterRng pick = root.split(1), noise = root.split(2), extra = root.split(3);
  const auto pw = m.patch_weights();
  const auto grid = m.grid();
  const auto& ps = m.cfg.patch_shape;
  const int total = cfg.total_iters();

  res.pi_history.push_back(snapshot(m, preps, 0));
  for (int it = 0; it < total; ++it) {
    const auto& p = preps[pick.below(preps.size())];
    const double tau = anneal_tau(total > 1 ? static_cast<double>(it) / (total - 1) : 1.0);
    const double lr = lr_at(it, total, cfg.optim);

    const auto g = forward_global(m.global_net, m.fg, p.x_low);
    if (!std::ranges::all_of(g.score_logits.values(), [](double x) { return std::isfinite(x); }))
      numeric_failure("non-finite patch scores", diag_dir, it, p, {}, tau, lr, {});
    const auto pi = ad::softmax_tau(g.score_logits, 1.0);
    std::vector<PatchPrediction> preds;
    std::vector<Tensor> y_patches;
    std::vector<LabelMap> t_patches;
    std::vector<int> selected;
    if (cfg.k_topk > 0) {
      const auto draw = topk_sample(pi, cfg.k_topk, tau, noise, cfg.st, cfg.noise);
      for (const auto& e : draw.entries) {
        auto x = ad::reshape(select_patch(e.z, p.patch_stack), {1, ps[0], ps[1], ps[2]});
        selected.push_back(e.index);
        preds.push_back({forward_local(m.local_net, m.fl, x), grid.origins[static_cast<std::size_t>(e.index)],
                         e.soft_value});
      }
    }
    for (int r = 0; r < cfg.extra_random; ++r) {
      std::vector<int> rest;
      for (int n = 0; n < grid.size(); ++n)
        if (std::find(selected.begin(), selected.end(), n) == selected.end()) rest.push_back(n);
      if (rest.empty()) break;
      const int n = rest[extra.below(rest.size())];
      selected.push_back(n);
      preds.push_back({forward_local(m.local_net, m.fl, stack_row(p.patch_stack, n)),
                       grid.origins[static_cast<std::size_t>(n)], 1.0});
    }
    for (std::size_t k = 0; k < preds.size(); ++k) {
      y_patches.push_back(preds[k].probs);
      t_patches.push_back(p.patch_labels[static_cast<std::size_t>(selected[k])]);
    }
    const auto up = ad::resize_trilinear(g.probs, m.cfg.volume_shape);
    const auto high = aggregate(up, preds, pw, m.cw, cfg.agg);
    const auto terms = total_loss(g.probs, p.y_low, high, p.sample->labels, y_patches, t_patches, pi, cfg.loss);
    const double loss = terms.total.item();
    if (!std::isfinite(loss)) numeric_failure("non-finite loss", diag_dir, it, p, terms, tau, lr, selected);
    ad::backward(terms.total);
    opt.step(lr);

    TrainLogRow row;
    row.iter = it;
    row.epoch = it / cfg.iters_per_epoch;
    row.loss = loss;
    row.low = terms.low;
    row.high = terms.high;
    row.patch = terms.patch;
    row.entropy = terms.entropy;
    row.tau = tau;
    row.lr = lr;
    row.fg_mass = foreground_mass(pi.values(), p.fg_candidate);
    row.cw_sigma = m.cw.sigma();
    row.selected = selected;
    res.log.push_back(std::move(row));
    if ((it + 1) % cfg.iters_per_epoch == 0) res.pi_history.push_back(snapshot(m, preps, (it + 1) / cfg.iters_per_epoch));
  }
  return res;
}

Params train_sw(const std::vector<Sample>& data, const ModelConfig& mcfg, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_sw: empty dataset");
  Model m = make_model(mcfg, cfg.seed);
  Params fl = m.fl;
  AdamW opt(fl.list(), cfg.optim);
  const auto& ps = mcfg.patch_shape;
  const auto& vs = mcfg.volume_shape;
  // Foreground voxels per sample, grouped by class (empty classes dropped).
  std::vector<std::vector<std::vector<std::int64_t>>> fg_voxels;
  for (const auto& s : data) {
    check_volume(m, s.volume);
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(mcfg.num_classes));
    for (std::size_t i = 0; i < s.labels.data.size(); ++i)
      if (s.labels.data[i] > 0) by_class[s.labels.data[i]].push_back(static_cast<std::int64_t>(i));
    std::erase_if(by_class, [](const auto& v) { return v.empty(); });
    fg_voxels.push_back(std::move(by_class));
  }
  CounterRng rng = CounterRng(cfg.seed, 0x7377).split(0);
  const int total = cfg.total_iters();
  for (int it = 0; it < total; ++it) {
    const auto si = rng.below(data.size());
    const auto& s = data[si];
    Tensor loss;
    for (int j = 0; j < cfg.sw_patches; ++j) {
      Dims3 o{};
      const bool fg = rng.uniform_open() < cfg.sw_fg_fraction && !fg_voxels[si].empty();
      if (fg) {
        // A random class, then one of its voxels, placed uniformly inside the patch.
        const auto& cls = fg_voxels[si][rng.below(fg_voxels[si].size())];
        const std::int64_t vox = cls[rng.below(cls.size())];
        const int c[3] = {static_cast<int>(vox / (static_cast<std::int64_t>(vs[1]) * vs[2])),
                          static_cast<int>((vox / vs[2]) % vs[1]), static_cast<int>(vox % vs[2])};
        for (int a = 0; a < 3; ++a)
          o[a] = std::clamp(c[a] - static_cast<int>(rng.below(static_cast<std::uint64_t>(ps[a]))), 0, vs[a] - ps[a]);
      } else {
        for (int a = 0; a < 3; ++a) o[a] = static_cast<int>(rng.below(static_cast<std::uint64_t>(vs[a] - ps[a] + 1)));
      }
      const auto y = forward_local(m.local_net, fl, to_tensor(extract_patch(s.volume, o, ps)));
      const auto l = seg_loss(y, extract_patch(s.labels, o, ps), cfg.loss);
      loss = loss.defined() ? ad::add(loss, l) : l;
    }
    loss = ad::mul(loss, 1.0 / cfg.sw_patches);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite sliding-window loss at iteration " + std::to_string(it), {});
    ad::backward(loss);
    opt.step(lr_at(it, total, cfg.optim));
  }
  return fl;
}

std::vector<double> score_distribution(const Model& m, const Volume& v) {
  check_volume(m, v);
  ad::NoGradGuard ng;
  const auto out = forward_global(m.global_net, m.fg, low_input(m, v));
  const auto pi = ad::softmax_tau(out.score_logits, 1.0);
  return {pi.values().begin(), pi.values().end()};
}

Inference infer_sw(const Volume& v, const NetConfig& local_net, const Params& fl, const Dims3& patch_shape,
                   double overlap) {
  ad::NoGradGuard ng;
  const auto grid = build_grid(v.shape, patch_shape, overlap, GridMode::cover);
  const auto pw = gaussian_weight_map(patch_shape);
  const int c = local_net.num_classes;
  const auto nv = static_cast<std::size_t>(voxel_count(v.shape));
  std::vector<double> acc(static_cast<std::size_t>(c) * nv, 0.0), wsum(nv, 0.0);
  Inference res;
  for (int n = 0; n < grid.size(); ++n) {
    const auto& o = grid.origins[static_cast<std::size_t>(n)];
    const auto y = forward_local(local_net, fl, to_tensor(extract_patch(v, o, patch_shape)));
    const auto yv = y.values();
    const auto np = static_cast<std::size_t>(voxel_count(patch_shape));
    std::size_t pi = 0;
    for (int h = 0; h < patch_shape[0]; ++h)
      for (int w = 0; w < patch_shape[1]; ++w)
        for (int d = 0; d < patch_shape[2]; ++d, ++pi) {
          const auto x = static_cast<std::size_t>(flat_index(v.shape, o[0] + h, o[1] + w, o[2] + d));
          const double wt = pw.data[pi];
          wsum[x] += wt;
          for (int ch = 0; ch < c; ++ch) acc[ch * nv + x] += wt * yv[ch * np + pi];
        }
    res.selected.push_back(n);
  }
  res.probs = ProbMap(c, v.shape);
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < nv; ++x) res.probs.data[ch * nv + x] = static_cast<float>(acc[ch * nv + x] / wsum[x]);
  return res;
}

namespace {

Inference finish(const Model& m, const Volume& v, const GlobalOutput& g, const std::vector<int>& chosen,
                 const ClassWeights& cw, AggMode agg) {
  const auto grid = m.grid();
  std::vector<PatchPrediction> preds;
  for (int n : chosen) {
    const auto& o = grid.origins[static_cast<std::size_t>(n)];
    preds.push_back({forward_local(m.local_net, m.fl, to_tensor(extract_patch(v, o, m.cfg.patch_shape))), o, 1.0});
  }
  const auto up = ad::resize_trilinear(g.probs, v.shape);
  Inference res;
  res.probs = to_probmap(aggregate(up, preds, m.patch_weights(), cw, agg));
  res.selected = chosen;
  return res;
}

}  // namespace

Inference infer_nmsw(const Volume& v, const Model& m, int k, AggMode agg, std::optional<double> cw_override) {
  check_volume(m, v);
  ad::NoGradGuard ng;
  const auto g = forward_global(m.global_net, m.fg, low_input(m, v));
  const auto pi = ad::softmax_tau(g.score_logits, 1.0);
  const int n = static_cast<int>(pi.numel());
  if (k > n) throw std::invalid_argument("infer_nmsw: k exceeds the number of candidates");
  const auto chosen = greedy_topk(pi.values(), k < 0 ? n : k);
  const auto cw = cw_override ? freeze_class_weights(m.cfg.num_classes, *cw_override) : m.cw;
  return finish(m, v, g, chosen, cw, agg);
}

std::vector<std::uint8_t> rf_candidates(const ProbMap& up, const GridSpec& grid, double prob_threshold,
                                        double voxel_fraction) {
  const auto nv = static_cast<std::size_t>(voxel_count(up.shape));
  std::vector<std::uint8_t> fg(nv);
  for (std::size_t x = 0; x < nv; ++x) fg[x] = 1.0 - up.data[x] > prob_threshold;
  const auto& ps = grid.patch_shape;
  const double need = voxel_fraction * static_cast<double>(voxel_count(ps));
  std::vector<std::uint8_t> out;
  for (const auto& o : grid.origins) {
    std::int64_t count = 0;
    for (int h = 0; h < ps[0]; ++h)
      for (int w = 0; w < ps[1]; ++w)
        for (int d = 0; d < ps[2]; ++d) count += fg[static_cast<std::size_t>(flat_index(up.shape, o[0] + h, o[1] + w, o[2] + d))];
    out.push_back(count > 0 && static_cast<double>(count) >= need);
  }
  return out;
}

Inference infer_rf(const Volume& v, const Model& m, int k, CounterRng& rng, AggMode agg, double cw_value) {
  check_volume(m, v);
  ad::NoGradGuard ng;
  const auto g = forward_global(m.global_net, m.fg, low_input(m, v));
  const auto up = to_probmap(ad::resize_trilinear(g.probs, v.shape));
  const auto flags = rf_candidates(up, m.grid());
  std::vector<int> cand;
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) cand.push_back(static_cast<int>(i));
  const bool short_of = k >= 0 && static_cast<std::size_t>(k) > cand.size();
  const std::size_t take = k < 0 || short_of ? cand.size() : static_cast<std::size_t>(k);
  // Partial Fisher-Yates: the first `take` entries are a uniform draw without replacement.
  for (std::size_t i = 0; i < take; ++i) std::swap(cand[i], cand[i + rng.below(cand.size() - i)]);
  cand.resize(take);
  auto res = finish(m, v, g, cand, freeze_class_weights(m.cfg.num_classes, cw_value), agg);
  res.short_of_candidates = short_of;
  return res;
}

DiceScores dsc(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  if (pred.shape != gt.shape) throw std::invalid_argument("dsc: shape mismatch");
  std::vector<std::int64_t> p(static_cast<std::size_t>(num_classes), 0), g(p), both(p);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (pred.data[i] >= num_classes || gt.data[i] >= num_classes) throw std::invalid_argument("dsc: label exceeds C");
    ++p[pred.data[i]];
    ++g[gt.data[i]];
    if (pred.data[i] == gt.data[i]) ++both[gt.data[i]];
  }
  DiceScores s;
  int present = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double d = p[c] + g[c] == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / static_cast<double>(p[c] + g[c]);
    s.per_class.push_back(d);
    if (g[c] > 0) {
      s.mean += d;
      ++present;
    }
  }
  s.mean = present > 0 ? s.mean / present : 1.0;
  return s;
}

InferMode parse_infer_mode(const std::string& s) {
  if (s == "sw") return InferMode::sw;
  if (s == "nmsw") return InferMode::nmsw;
  if (s == "rf") return InferMode::rf;
  throw std::invalid_argument("unknown inference mode: " + s);
}

std::string to_string(InferMode m) {
  switch (m) {
    case InferMode::sw: return "sw";
    case InferMode::nmsw: return "nmsw";
    case InferMode::rf: return "rf";
  }
  return "?";
}

PhaseMacs model_phase_macs(const Model& m, double patch_count) {
  PhaseMacs p;
  p.global = static_cast<double>(count_macs(m.global_net, m.low_shape()));
  p.per_patch = static_cast<double>(count_macs(m.local_net, m.cfg.patch_shape));
  p.aggregation = (patch_count * static_cast<double>(voxel_count(m.cfg.patch_shape)) +
                   static_cast<double>(voxel_count(m.cfg.volume_shape))) *
                  m.cfg.num_classes * kAggOpsPerVoxel;
  return p;
}

CostReport cost_model(const PhaseMacs& phase, InferMode mode, double patch_count) {
  CostReport r;
  const bool uses_global = mode != InferMode::sw;
  const bool aggregates = uses_global && patch_count > 0;
  r.macs_global = uses_global ? phase.global : 0.0;
  r.macs_per_patch = phase.per_patch;
  r.macs_aggregation = aggregates ? phase.aggregation : 0.0;
  r.patch_count = patch_count;
  r.macs_total = r.macs_global + patch_count * phase.per_patch + r.macs_aggregation;
  return r;
}

CostReport cost_model(const Model& m, InferMode mode, double patch_count) {
  return cost_model(model_phase_macs(m, patch_count), mode, patch_count);
}

std::vector<BenchRow> benchmark(const std::vector<Sample>& data, const Model& m, const Params& sw_local,
                                const std::vector<InferConfig>& configs, int timing_runs) {
  if (data.empty()) throw std::invalid_argument("benchmark: empty dataset");
  if (timing_runs < 1) throw std::invalid_argument("benchmark: timing_runs must be >= 1");
  std::vector<BenchRow> rows;
  for (const auto& ic : configs) {
    BenchRow row;
    row.cfg = ic;
    row.dsc_class.assign(static_cast<std::size_t>(m.cfg.num_classes), 0.0);
    std::vector<double> times;
    for (int run = 0; run < timing_runs; ++run) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<Inference> outs;
      for (std::size_t i = 0; i < data.size(); ++i) {
        CounterRng rng(ic.seed, i);
        switch (ic.mode) {
          case InferMode::sw:
            outs.push_back(infer_sw(data[i].volume, m.local_net, sw_local, m.cfg.patch_shape, m.cfg.overlap));
            break;
          case InferMode::nmsw: outs.push_back(infer_nmsw(data[i].volume, m, ic.k, ic.agg, ic.cw_frozen)); break;
          case InferMode::rf:
            outs.push_back(infer_rf(data[i].volume, m, ic.k, rng, ic.agg, ic.cw_frozen.value_or(6.0)));
            break;
        }
      }
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(data.size()));
      if (run > 0) continue;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto s = dsc(argmax_labels(outs[i].probs), data[i].labels, m.cfg.num_classes);
        row.mean_dsc += s.mean / static_cast<double>(data.size());
        for (std::size_t c = 0; c < s.per_class.size(); ++c)
          row.dsc_class[c] += s.per_class[c] / static_cast<double>(data.size());
        row.patch_count += static_cast<double>(outs[i].selected.size()) / static_cast<double>(data.size());
      }
    }
    std::sort(times.begin(), times.end());
    row.wall_ms = times[times.size() / 2];
    row.macs_total = cost_model(m, ic.mode, row.patch_count).macs_total;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string bench_csv_header(int num_classes) {
  std::string h = "mode,k,seed,mean_dsc";
  for (int c = 0; c < num_classes; ++c) h += ",dsc_class_" + std::to_string(c);
  return h + ",macs_total,patch_count,wall_ms";
}

std::string bench_csv_row(const BenchRow& r) {
  char buf[64];
  std::string s = to_string(r.cfg.mode) + "," + r.cfg.k_label() + "," + std::to_string(r.cfg.seed);
  std::snprintf(buf, sizeof buf, ",%.6f", r.mean_dsc);
  s += buf;
  for (double d : r.dsc_class) {
    std::snprintf(buf, sizeof buf, ",%.6f", d);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, ",%.0f,%.6g,%.3f", r.macs_total, r.patch_count, r.wall_ms);
  return s + buf;
}

}  // namespace nmsw
