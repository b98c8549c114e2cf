#include "nmsw/nets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "nmsw/rng.hpp"

namespace nmsw {

using ad::Tensor;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

void NetConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("NetConfig: at least one level required");
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("NetConfig: channels must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("NetConfig: kernel must be odd and positive");
  if (num_classes < 2) throw std::invalid_argument("NetConfig: num_classes must be >= 2");
  if (in_channels < 1) throw std::invalid_argument("NetConfig: in_channels must be positive");
  for (int a = 0; a < 3; ++a) {
    if (input_shape[a] < 1) throw std::invalid_argument("NetConfig: input_shape must be positive");
    if (score_grid[a] < 0) throw std::invalid_argument("NetConfig: score_grid must be non-negative");
  }
}

const Tensor& Params::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

std::vector<Tensor> Params::list() const {
  std::vector<Tensor> out;
  out.reserve(tensors.size());
  for (const auto& [name, t] : tensors) out.push_back(t);
  return out;
}

std::int64_t Params::count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

namespace {

struct ConvSpec {
  std::string name;
  int cin, cout, k, stride;
};

// Every conv of the network in forward order; heads come last.
std::vector<ConvSpec> conv_specs(const NetConfig& cfg) {
  std::vector<ConvSpec> s;
  const auto& ch = cfg.channels;
  const int k = cfg.kernel;
  for (int l = 0; l < cfg.levels(); ++l) {
    const int cin = l == 0 ? cfg.total_in_channels() : ch[static_cast<std::size_t>(l - 1)];
    const int c = ch[static_cast<std::size_t>(l)];
    s.push_back({"enc" + std::to_string(l) + ".a", cin, c, k, l == 0 ? 1 : 2});
    s.push_back({"enc" + std::to_string(l) + ".b", c, c, k, 1});
  }
  for (int l = cfg.levels() - 2; l >= 0; --l) {
    const int c = ch[static_cast<std::size_t>(l)];
    s.push_back({"dec" + std::to_string(l), c + ch[static_cast<std::size_t>(l + 1)], c, k, 1});
  }
  s.push_back({"head", ch[0], cfg.num_classes, 1, 1});
  if (cfg.has_score_head()) s.push_back({"score", ch.back(), 1, 1, 1});
  return s;
}

Dims3 conv_out(const Dims3& in, int k, int stride) {
  Dims3 o{};
  for (int a = 0; a < 3; ++a) o[a] = (in[a] + 2 * (k / 2) - k) / stride + 1;
  return o;
}

Tensor conv(const Params& p, const ConvSpec& c, const Tensor& x) {
  return ad::conv3(x, p.at(c.name + ".w"), p.at(c.name + ".b"), c.stride, c.k / 2);
}

Tensor coord_ramps(const Dims3& s) {
  std::vector<double> v(static_cast<std::size_t>(3 * voxel_count(s)));
  const auto n = voxel_count(s);
  std::size_t i = 0;
  for (int h = 0; h < s[0]; ++h)
    for (int w = 0; w < s[1]; ++w)
      for (int d = 0; d < s[2]; ++d, ++i) {
        const int idx[3] = {h, w, d};
        for (int a = 0; a < 3; ++a)
          v[static_cast<std::size_t>(a * n) + i] = s[a] > 1 ? 2.0 * idx[a] / (s[a] - 1) - 1.0 : 0.0;
      }
  return Tensor::from({3, s[0], s[1], s[2]}, std::move(v));
}

struct Trunk {
  Tensor deepest;
  Tensor top;  // level-0 decoder output
};

Trunk run_trunk(const NetConfig& cfg, const Params& p, const Tensor& x_in) {
  if (x_in.rank() != 4 || x_in.dim(0) != cfg.in_channels)
    throw std::invalid_argument("network input must be [" + std::to_string(cfg.in_channels) + ",H,W,D], got " +
                                ad::shape_str(x_in.shape()));
  for (int a = 0; a < 3; ++a)
    if (x_in.dim(a + 1) != cfg.input_shape[a])
      throw std::invalid_argument("network input shape " + ad::shape_str(x_in.shape()) + " does not match config");
  Tensor x = x_in;
  if (cfg.coord_channels) x = ad::concat0({x_in, coord_ramps(cfg.input_shape)});

  const auto specs = conv_specs(cfg);
  std::size_t si = 0;
  std::vector<Tensor> skips;
  for (int l = 0; l < cfg.levels(); ++l) {
    x = ad::relu(conv(p, specs[si++], x));
    x = ad::relu(conv(p, specs[si++], x));
    skips.push_back(x);
  }
  Trunk t;
  t.deepest = x;
  for (int l = cfg.levels() - 2; l >= 0; --l) {
    const auto& skip = skips[static_cast<std::size_t>(l)];
    auto up = ad::resize_trilinear(x, {skip.dim(1), skip.dim(2), skip.dim(3)});
    x = ad::relu(conv(p, specs[si++], ad::concat0({up, skip})));
  }
  t.top = x;
  return t;
}

}  // namespace

Params init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Params p;
  p.seed = seed;
  CounterRng rng(seed, 0x6e657473);
  for (const auto& c : conv_specs(cfg)) {
    const int fan_in = c.cin * c.k * c.k * c.k;
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<double> w(static_cast<std::size_t>(c.cout) * fan_in, 0.0);
    if (c.name != "score")
      for (auto& v : w) v = (2.0 * rng.uniform_open() - 1.0) * bound;
    p.tensors[c.name + ".w"] = Tensor::from({c.cout, c.cin, c.k, c.k, c.k}, std::move(w), true);
    p.tensors[c.name + ".b"] = Tensor::zeros({c.cout}, true);
  }
  return p;
}

GlobalOutput forward_global(const NetConfig& cfg, const Params& p, const Tensor& x) {
  if (!cfg.has_score_head()) throw std::invalid_argument("forward_global needs a score grid");
  const auto t = run_trunk(cfg, p, x);
  const auto specs = conv_specs(cfg);
  GlobalOutput out;
  out.probs = ad::softmax_channels(conv(p, specs[specs.size() - 2], t.top));
  const auto& g = cfg.score_grid;
  for (int a = 0; a < 3; ++a)
    if (g[a] > t.deepest.dim(a + 1))
      throw std::invalid_argument("score grid is finer than the deepest feature map");
  auto s = ad::adaptive_avg_pool3(conv(p, specs.back(), t.deepest), {g[0], g[1], g[2]});
  out.score_logits = ad::reshape(s, {cfg.score_count()});
  return out;
}

Tensor forward_local(const NetConfig& cfg, const Params& p, const Tensor& patch) {
  const auto t = run_trunk(cfg, p, patch);
  const auto specs = conv_specs(cfg);
  return ad::softmax_channels(conv(p, specs[specs.size() - (cfg.has_score_head() ? 2 : 1)], t.top));
}

std::int64_t count_macs(const NetConfig& cfg, const Dims3& input_shape) {
  cfg.validate();
  const auto specs = conv_specs(cfg);
  std::vector<Dims3> level_shape;
  std::int64_t macs = 0;
  Dims3 s = input_shape;
  std::size_t si = 0;
  auto add = [&](const ConvSpec& c, const Dims3& out) {
    macs += voxel_count(out) * c.cout * c.cin * c.k * c.k * c.k;
  };
  for (int l = 0; l < cfg.levels(); ++l) {
    const auto& a = specs[si++];
    s = conv_out(s, a.k, a.stride);
    add(a, s);
    add(specs[si++], s);
    level_shape.push_back(s);
  }
  const Dims3 deepest = s;
  for (int l = cfg.levels() - 2; l >= 0; --l) add(specs[si++], level_shape[static_cast<std::size_t>(l)]);
  add(specs[si++], level_shape[0]);
  if (cfg.has_score_head()) add(specs[si++], deepest);
  return macs;
}

Tensor to_tensor(const Volume& v, bool requires_grad) {
  return Tensor::from({1, v.shape[0], v.shape[1], v.shape[2]}, std::vector<double>(v.data.begin(), v.data.end()),
                      requires_grad);
}

Tensor to_tensor(const ProbMap& p) {
  return Tensor::from({p.channels, p.shape[0], p.shape[1], p.shape[2]},
                      std::vector<double>(p.data.begin(), p.data.end()));
}

ProbMap to_probmap(const Tensor& t) {
  if (t.rank() != 4) throw std::invalid_argument("to_probmap: expected [C,H,W,D], got " + ad::shape_str(t.shape()));
  ProbMap p(t.dim(0), {t.dim(1), t.dim(2), t.dim(3)});
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) p.data[i] = static_cast<float>(v[i]);
  return p;
}

nlohmann::json to_json(const NetConfig& cfg) {
  return {{"channels", cfg.channels},       {"kernel", cfg.kernel},           {"num_classes", cfg.num_classes},
          {"in_channels", cfg.in_channels}, {"coord_channels", cfg.coord_channels}, {"input_shape", cfg.input_shape},
          {"score_grid", cfg.score_grid}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.kernel = j.at("kernel").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.coord_channels = j.at("coord_channels").get<bool>();
  c.input_shape = j.at("input_shape").get<Dims3>();
  c.score_grid = j.at("score_grid").get<Dims3>();
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["meta"] = ck.meta;
  manifest["dtype"] = "f32";
  manifest["tensors"] = nlohmann::json::array();
  std::vector<float> payload;
  for (const auto& [name, t] : ck.tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (double v : t.values()) payload.push_back(static_cast<float>(v));
  }
  auto raw = stem;
  raw += ".raw";
  manifest["payload"] = raw.filename().string();
  auto js = stem;
  js += ".json";
  std::ofstream jout(js);
  if (!jout) throw std::runtime_error("cannot write " + js.string());
  jout << manifest.dump(2) << '\n';
  std::ofstream rout(raw, std::ios::binary);
  if (!rout) throw std::runtime_error("cannot write " + raw.string());
  rout.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!rout) throw std::runtime_error("short write to " + raw.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  auto js = stem;
  js += ".json";
  std::ifstream jin(js);
  if (!jin) throw std::runtime_error("checkpoint not found: " + js.string());
  const auto manifest = nlohmann::json::parse(jin);
  if (manifest.at("dtype") != "f32") throw std::runtime_error("unsupported checkpoint dtype");
  const auto raw = stem.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream rin(raw, std::ios::binary | std::ios::ate);
  if (!rin) throw std::runtime_error("checkpoint payload not found: " + raw.string());
  const auto bytes = static_cast<std::size_t>(rin.tellg());
  std::vector<float> payload(bytes / sizeof(float));
  rin.seekg(0);
  rin.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));

  Checkpoint ck;
  ck.meta = manifest.at("meta");
  for (const auto& e : manifest.at("tensors")) {
    const auto shape = e.at("shape").get<ad::Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto n = static_cast<std::size_t>(ad::numel(shape));
    if (offset + n > payload.size()) throw std::runtime_error("checkpoint payload truncated");
    ck.tensors[e.at("name").get<std::string>()] =
        Tensor::from(shape, std::vector<double>(payload.begin() + offset, payload.begin() + offset + n));
  }
  return ck;
}

void put_params(Checkpoint& ck, const std::string& prefix, const Params& p) {
  for (const auto& [name, t] : p.tensors) ck.tensors[prefix + "/" + name] = t.detach();
  ck.meta[prefix + "_seed"] = p.seed;
}

Params take_params(const Checkpoint& ck, const std::string& prefix, const NetConfig& cfg) {
  auto p = init_params(cfg, 0);
  for (auto& [name, t] : p.tensors) {
    auto it = ck.tensors.find(prefix + "/" + name);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + prefix + "/" + name);
    if (it->second.shape() != t.shape())
      throw std::runtime_error("checkpoint tensor " + it->first + " has shape " + ad::shape_str(it->second.shape()) +
                               ", expected " + ad::shape_str(t.shape()));
    const auto src = it->second.values();
    auto dst = t.mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (ck.meta.contains(prefix + "_seed")) p.seed = ck.meta.at(prefix + "_seed").get<std::uint64_t>();
  return p;
}

}  // namespace nmsw
