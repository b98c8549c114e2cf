// nmsw: command-line driver. Every path is resolved against --workdir and each
// command writes its resolved config next to what it produces.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "nmsw/config.hpp"
#include "nmsw/engine.hpp"
#include "nmsw/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nmsw;

namespace {

struct Context {
  fs::path workdir = ".";
  fs::path config_file;
  std::vector<std::string> overrides;
  json cfg;

  fs::path path(const std::string& rel) const { return workdir / rel; }
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void write_config(const fs::path& dir, const json& cfg) { write_text(dir / "config.json", cfg.dump(2) + "\n"); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --- slice images ------------------------------------------------------------

// Plain PGM of the h = H/2 slice; rows run along w, columns along d.
template <class F>
void write_pgm(const fs::path& p, const Dims3& s, F&& value_at) {
  std::ostringstream o;
  o << "P2\n" << s[2] << ' ' << s[1] << "\n255\n";
  for (int w = 0; w < s[1]; ++w) {
    for (int d = 0; d < s[2]; ++d) o << (d ? " " : "") << std::clamp(value_at(w, d), 0, 255);
    o << '\n';
  }
  write_text(p, o.str());
}

void write_slices(const fs::path& dir, const std::string& id, const Sample& s, const LabelMap& pred,
                  const std::vector<Dims3>& patch_origins, const Dims3& patch_shape) {
  const auto& sh = s.volume.shape;
  const int h = sh[0] / 2;
  const auto [lo, hi] = std::minmax_element(s.volume.data.begin(), s.volume.data.end());
  const double range = std::max(1e-12, static_cast<double>(*hi - *lo));
  auto grey = [&](int w, int d, double top) {
    return static_cast<int>(std::lround(top * (s.volume.at(h, w, d) - *lo) / range));
  };
  const int c_max = std::max(1, s.labels.num_classes - 1);
  write_pgm(dir / (id + "_input.pgm"), sh, [&](int w, int d) { return grey(w, d, 255); });
  write_pgm(dir / (id + "_gt.pgm"), sh, [&](int w, int d) { return s.labels.at(h, w, d) * 255 / c_max; });
  write_pgm(dir / (id + "_pred.pgm"), sh, [&](int w, int d) { return pred.at(h, w, d) * 255 / c_max; });
  std::vector<std::uint8_t> edge(static_cast<std::size_t>(sh[1]) * sh[2], 0);
  for (const auto& o : patch_origins) {
    if (h < o[0] || h >= o[0] + patch_shape[0]) continue;
    for (int w = o[1]; w < o[1] + patch_shape[1]; ++w)
      for (int d = o[2]; d < o[2] + patch_shape[2]; ++d)
        if (w == o[1] || w == o[1] + patch_shape[1] - 1 || d == o[2] || d == o[2] + patch_shape[2] - 1)
          edge[static_cast<std::size_t>(w) * sh[2] + d] = 1;
  }
  write_pgm(dir / (id + "_patches.pgm"), sh,
            [&](int w, int d) { return edge[static_cast<std::size_t>(w) * sh[2] + d] ? 255 : grey(w, d, 160); });
}

// --- commands ----------------------------------------------------------------

int cmd_synth(const Context& ctx, std::optional<std::uint64_t> seed, bool force) {
  json cfg = ctx.cfg;
  if (seed) cfg["data"]["seed"] = *seed;
  const auto d = data_settings(cfg);
  const auto root = ctx.path(d.dir);
  const auto entries = gen_dataset(d.synth, d.n_train, d.n_val, d.seed, root, force);
  write_config(root, cfg);
  std::cout << "wrote " << entries.size() << " samples to " << root.string() << "\n";
  return 0;
}

std::string log_csv(const std::vector<TrainLogRow>& log, int num_classes) {
  std::string s = "iter,epoch,loss,low,high,patch,entropy,tau,lr,fg_mass";
  for (int c = 0; c < num_classes; ++c) s += ",cw_sigma_" + std::to_string(c);
  s += ",selected\n";
  for (const auto& r : log) {
    s += std::to_string(r.iter) + "," + std::to_string(r.epoch);
    for (double v : {r.loss, r.low, r.high, r.patch, r.entropy, r.tau, r.lr, r.fg_mass}) s += fmt(",%.8g", v);
    for (double v : r.cw_sigma) s += fmt(",%.8g", v);
    s += ",";
    for (std::size_t i = 0; i < r.selected.size(); ++i) s += (i ? ";" : "") + std::to_string(r.selected[i]);
    s += "\n";
  }
  return s;
}

int cmd_train(const Context& ctx) {
  const auto d = data_settings(ctx.cfg);
  const auto mcfg = model_settings(ctx.cfg);
  const auto tcfg = train_settings(ctx.cfg);
  const bool sw_baseline = ctx.cfg.at("train").at("sw_baseline").get<bool>();
  const auto out = ctx.path(ctx.cfg.at("train").at("dir").get<std::string>());
  const auto data = load_split(ctx.path(d.dir), "train");
  if (data.empty()) throw std::runtime_error("no training samples in " + ctx.path(d.dir).string());
  fs::create_directories(out);
  write_config(out, ctx.cfg);

  std::cout << "training NMSW: " << data.size() << " volumes, " << tcfg.total_iters() << " iterations\n";
  const auto res = train(data, mcfg, tcfg, out / "diagnostics");
  save_model(out / "model", res.model);
  write_text(out / "train_log.csv", log_csv(res.log, mcfg.num_classes));
  json hist = json::array();
  for (const auto& h : res.pi_history) hist.push_back({{"epoch", h.epoch}, {"fg_mass", h.fg_mass}, {"pi", h.pi}});
  write_text(out / "pi_history.json", hist.dump() + "\n");
  const auto sigma = res.model.cw.sigma();
  json summary{{"iterations", tcfg.total_iters()},
               {"final_loss", res.log.back().loss},
               {"fg_mass", res.pi_history.back().fg_mass},
               {"cw_sigma", sigma}};
  if (sw_baseline) {
    std::cout << "training sliding-window baseline\n";
    save_local(out / "sw_local", mcfg, train_sw(data, mcfg, tcfg));
    summary["sw_local"] = "sw_local";
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << "fg mass of pi " << fmt("%.4f", res.pi_history.back().fg_mass) << ", sigma(c_w)";
  for (double s : sigma) std::cout << fmt(" %.4f", s);
  std::cout << "\nwrote " << out.string() << "\n";
  return 0;
}

fs::path train_dir(const Context& ctx) { return ctx.path(ctx.cfg.at("train").at("dir").get<std::string>()); }

int cmd_infer(const Context& ctx) {
  const auto d = data_settings(ctx.cfg);
  const auto is = infer_settings(ctx.cfg);
  const auto& ic = is.infer;
  const auto out = ctx.path(is.out);
  const auto data = load_split(ctx.path(d.dir), is.split);
  const Model m = load_model(train_dir(ctx) / "model");
  Params sw_local;
  if (ic.mode == InferMode::sw) sw_local = load_local(train_dir(ctx) / "sw_local");
  fs::create_directories(out);
  write_config(out, ctx.cfg);

  std::string csv = "id,mean_dsc";
  for (int c = 0; c < m.cfg.num_classes; ++c) csv += ",dsc_class_" + std::to_string(c);
  csv += ",patch_count\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    CounterRng rng(ic.seed, i);
    Inference r;
    std::vector<Dims3> origins;
    if (ic.mode == InferMode::sw) {
      r = infer_sw(s.volume, m.local_net, sw_local, m.cfg.patch_shape, m.cfg.overlap);
      origins = build_grid(m.cfg.volume_shape, m.cfg.patch_shape, m.cfg.overlap, GridMode::cover).origins;
    } else {
      r = ic.mode == InferMode::nmsw ? infer_nmsw(s.volume, m, ic.k, ic.agg, ic.cw_frozen)
                                     : infer_rf(s.volume, m, ic.k, rng, ic.agg, ic.cw_frozen.value_or(6.0));
      const auto grid = m.grid();
      for (int n : r.selected) origins.push_back(grid.origins[static_cast<std::size_t>(n)]);
    }
    const auto pred = argmax_labels(r.probs);
    const auto& id = s.volume.id;
    write_labels(out / (id + "_pred"), pred, s.volume.spacing);
    if (is.pgm) write_slices(out, id, s, pred, origins, m.cfg.patch_shape);
    const auto score = dsc(pred, s.labels, m.cfg.num_classes);
    csv += id + fmt(",%.6f", score.mean);
    for (double v : score.per_class) csv += fmt(",%.6f", v);
    csv += "," + std::to_string(r.selected.size()) + "\n";
    std::cout << id << " dsc " << fmt("%.4f", score.mean) << " patches " << r.selected.size()
              << (r.short_of_candidates ? " (fewer candidates than k)" : "") << "\n";
  }
  write_text(out / "dsc.csv", csv);
  return 0;
}

int cmd_bench(const Context& ctx) {
  const auto d = data_settings(ctx.cfg);
  const auto bs = bench_settings(ctx.cfg);
  const auto data = load_split(ctx.path(d.dir), bs.split);
  const Model m = load_model(train_dir(ctx) / "model");
  Params sw_local;
  if (std::any_of(bs.configs.begin(), bs.configs.end(), [](const auto& c) { return c.mode == InferMode::sw; }))
    sw_local = load_local(train_dir(ctx) / "sw_local");
  const auto rows = benchmark(data, m, sw_local, bs.configs, bs.timing_runs);
  std::string csv = bench_csv_header(m.cfg.num_classes) + "\n";
  for (const auto& r : rows) {
    csv += bench_csv_row(r) + "\n";
    std::cout << bench_csv_row(r) << "\n";
  }
  const auto out = ctx.path(bs.out);
  write_text(out, csv);
  write_config(out.parent_path(), ctx.cfg);
  return 0;
}

int cmd_gradcheck(int seeds) {
  constexpr double kTol = 1e-3;
  const auto results = run_gradcheck(seeds);
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (const auto& r : results) {
    if (!worst.count(r.name)) order.push_back(r.name);
    worst[r.name] = std::max(worst[r.name], r.max_rel_error);
  }
  bool ok = true;
  for (const auto& n : order) {
    const bool pass = worst[n] < kTol;
    ok = ok && pass;
    std::printf("%-32s max rel error %.3e over %d seeds  %s\n", n.c_str(), worst[n], seeds, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 1;
}

int cmd_sampledist(const Context& ctx) {
  const auto dir = train_dir(ctx);
  std::ifstream in(dir / "pi_history.json");
  if (!in) throw std::runtime_error("no pi history in " + dir.string() + " (run train first)");
  const json hist = json::parse(in);
  std::string csv = "epoch,fg_mass";
  const auto n = hist.at(0).at("pi").size();
  for (std::size_t i = 0; i < n; ++i) csv += ",pi_" + std::to_string(i);
  csv += "\n";
  for (const auto& h : hist) {
    csv += std::to_string(h.at("epoch").get<int>()) + fmt(",%.8g", h.at("fg_mass").get<double>());
    for (double p : h.at("pi").get<std::vector<double>>()) csv += fmt(",%.8g", p);
    csv += "\n";
    std::cout << "epoch " << h.at("epoch").get<int>() << " fg mass " << fmt("%.4f", h.at("fg_mass").get<double>())
              << "\n";
  }
  write_text(dir / "sampledist.csv", csv);
  write_config(dir / "sampledist", ctx.cfg);
  return 0;
}

// --- report ------------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("bench CSV lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
};

Table read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  Table t;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> f;
    std::stringstream ss(l);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    return f;
  };
  if (std::getline(in, line)) t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

struct Group {
  std::string mode, k;
  int n = 0;
  double dsc = 0, dsc_sq = 0, macs = 0, patches = 0;
  std::vector<double> wall;
};

std::string dsc_svg(const std::vector<Group>& groups) {
  std::vector<std::string> ks;
  for (const auto& g : groups)
    if (g.mode != "sw" && std::find(ks.begin(), ks.end(), g.k) == ks.end()) ks.push_back(g.k);
  const double W = 480, H = 320, L = 60, R = 100, T = 20, B = 40;
  auto x_of = [&](std::size_t i) { return L + (W - L - R) * (ks.size() > 1 ? double(i) / (ks.size() - 1) : 0.5); };
  auto y_of = [&](double v) { return T + (H - T - B) * (1.0 - v); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << y_of(0) << "\" x2=\"" << W - R << "\" y2=\"" << y_of(0)
    << "\" stroke=\"black\"/>\n<line x1=\"" << L << "\" y1=\"" << y_of(0) << "\" x2=\"" << L << "\" y2=\"" << y_of(1)
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t)
    o << "<text x=\"" << L - 8 << "\" y=\"" << fmt("%.1f", y_of(t / 4.0) + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
      << fmt("%.2f", t / 4.0) << "</text>\n";
  for (std::size_t i = 0; i < ks.size(); ++i)
    o << "<text x=\"" << fmt("%.1f", x_of(i)) << "\" y=\"" << H - B + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
      << ks[i] << "</text>\n";
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 6 << "\" font-size=\"12\" text-anchor=\"middle\">k</text>\n";
  const std::map<std::string, std::string> colour{{"nmsw", "#1f77b4"}, {"rf", "#d62728"}, {"sw", "#555555"}};
  double legend_y = T + 10;
  for (const std::string mode : {"nmsw", "rf", "sw"}) {
    std::string pts;
    for (const auto& g : groups) {
      if (g.mode != mode) continue;
      const double y = y_of(g.dsc);
      if (mode == "sw") {
        o << "<line x1=\"" << L << "\" y1=\"" << fmt("%.1f", y) << "\" x2=\"" << W - R << "\" y2=\"" << fmt("%.1f", y)
          << "\" stroke=\"" << colour.at(mode) << "\" stroke-dasharray=\"4 3\"/>\n";
        pts = "sw";
        continue;
      }
      const auto i = static_cast<std::size_t>(std::find(ks.begin(), ks.end(), g.k) - ks.begin());
      pts += fmt("%.1f", x_of(i)) + "," + fmt("%.1f", y) + " ";
      o << "<circle cx=\"" << fmt("%.1f", x_of(i)) << "\" cy=\"" << fmt("%.1f", y) << "\" r=\"3\" fill=\""
        << colour.at(mode) << "\"/>\n";
    }
    if (pts.empty()) continue;
    if (pts != "sw")
      o << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << colour.at(mode) << "\"/>\n";
    o << "<text x=\"" << W - R + 10 << "\" y=\"" << legend_y << "\" font-size=\"12\" fill=\"" << colour.at(mode)
      << "\">" << mode << "</text>\n";
    legend_y += 16;
  }
  o << "</svg>\n";
  return o.str();
}

int cmd_report(const Context& ctx) {
  const auto& rc = ctx.cfg.at("report");
  const auto t = read_csv(ctx.path(rc.at("bench").get<std::string>()));
  const auto out = ctx.path(rc.at("out").get<std::string>());
  const auto c_mode = t.col("mode"), c_k = t.col("k"), c_dsc = t.col("mean_dsc"), c_macs = t.col("macs_total"),
             c_pc = t.col("patch_count"), c_wall = t.col("wall_ms");
  std::vector<Group> groups;
  for (const auto& r : t.rows) {
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const Group& g) { return g.mode == r.at(c_mode) && g.k == r.at(c_k); });
    if (it == groups.end()) {
      groups.push_back({r.at(c_mode), r.at(c_k), 0, 0, 0, 0, 0, {}});
      it = groups.end() - 1;
    }
    const double v = std::stod(r.at(c_dsc));
    it->n += 1;
    it->dsc += v;
    it->dsc_sq += v * v;
    it->macs += std::stod(r.at(c_macs));
    it->patches += std::stod(r.at(c_pc));
    it->wall.push_back(std::stod(r.at(c_wall)));
  }
  std::string csv = "mode,k,runs,mean_dsc,sd_dsc,macs_total,patch_count\n";
  std::string timing = "mode,k,wall_ms\n";
  std::ostringstream txt;
  txt << "mode  k      runs  mean DSC       GMACs  patches\n";
  for (auto& g : groups) {
    g.dsc /= g.n;
    g.macs /= g.n;
    g.patches /= g.n;
    const double sd = g.n > 1 ? std::sqrt(std::max(0.0, (g.dsc_sq - g.n * g.dsc * g.dsc) / (g.n - 1))) : 0.0;
    csv += g.mode + "," + g.k + "," + std::to_string(g.n) + fmt(",%.6f", g.dsc) + fmt(",%.6f", sd) +
           fmt(",%.0f", g.macs) + fmt(",%.6g", g.patches) + "\n";
    std::sort(g.wall.begin(), g.wall.end());
    timing += g.mode + "," + g.k + fmt(",%.3f", g.wall[g.wall.size() / 2]) + "\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-5s %-6s %4d  %.4f+-%.4f %8.2f  %7.2f\n", g.mode.c_str(), g.k.c_str(), g.n,
                  g.dsc, sd, g.macs / 1e9, g.patches);
    txt << line;
  }
  fs::create_directories(out);
  write_text(out / "summary.csv", csv);
  write_text(out / "summary.txt", txt.str());
  write_text(out / "timing.csv", timing);
  write_text(out / "dsc_vs_k.svg", dsc_svg(groups));
  write_config(out, ctx.cfg);
  std::cout << txt.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NMSW: learned patch selection for 3D segmentation"};
  app.fallthrough();
  Context ctx;
  app.add_option("--workdir", ctx.workdir, "Base directory for every relative path")->capture_default_str();
  app.add_option("--config", ctx.config_file, "JSON config overlaid on the defaults");
  app.add_option("--set", ctx.overrides, "Override one key: section.key=value (repeatable)");
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
  std::optional<std::uint64_t> seed;
  bool force = false;
  synth->add_option("--seed", seed, "Dataset seed (overrides data.seed)");
  synth->add_flag("--force", force, "Replace an existing dataset");
  auto* train_cmd = app.add_subcommand("train", "Train NMSW and the sliding-window baseline");
  auto* infer_cmd = app.add_subcommand("infer", "Segment a split and write labels and slices");
  auto* bench_cmd = app.add_subcommand("bench", "Benchmark inference modes into a CSV");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  int seeds = 5;
  grad_cmd->add_option("--seeds", seeds, "Random instances per check")->check(CLI::PositiveNumber);
  auto* dist_cmd = app.add_subcommand("sampledist", "Dump pi per epoch as CSV");
  auto* report_cmd = app.add_subcommand("report", "Summarise a benchmark CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (grad_cmd->parsed()) return cmd_gradcheck(seeds);
    ctx.cfg = resolve_config(ctx.config_file.empty() ? fs::path{} : ctx.path(ctx.config_file.string()),
                             ctx.overrides);
    if (synth->parsed()) return cmd_synth(ctx, seed, force);
    if (train_cmd->parsed()) return cmd_train(ctx);
    if (infer_cmd->parsed()) return cmd_infer(ctx);
    if (bench_cmd->parsed()) return cmd_bench(ctx);
    if (dist_cmd->parsed()) return cmd_sampledist(ctx);
    if (report_cmd->parsed()) return cmd_report(ctx);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\ndiagnostics: " << e.dump().string() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
