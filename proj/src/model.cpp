#include "graftkit/model.hpp"

#include <cmath>
#include <stdexcept>

#include "graftkit/ops.hpp"
#include "graftkit/rng.hpp"

namespace graftkit {

namespace {

constexpr double kEmbedStd = 0.02;

Tensor xavier(Rng& rng, std::int64_t fan_in, std::int64_t fan_out, DType dtype) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return rng.normal_tensor({fan_in, fan_out}, std, dtype);
}

const Tensor& find(const ParameterList& list, std::string_view name) {
  for (const auto& p : list) {
    if (p.name == name) return p.value;
  }
  throw std::logic_error("missing model parameter " + std::string(name));
}

std::int64_t mixer_count(const DiTConfig& cfg) { return 4 * cfg.width * cfg.width + 4 * cfg.width; }

std::int64_t mlp_count(const DiTConfig& cfg) {
  const std::int64_t h = static_cast<std::int64_t>(std::llround(cfg.mlp_ratio * static_cast<double>(cfg.width)));
  return 2 * cfg.width * h + h + cfg.width;
}

}  // namespace

std::string_view to_string(Slot slot) { return slot == Slot::kMixer ? "mha" : "mlp"; }

Slot parse_slot(std::string_view name) {
  if (name == "mha" || name == "mixer") return Slot::kMixer;
  if (name == "mlp") return Slot::kMlp;
  throw std::invalid_argument("unknown slot '" + std::string(name) + "' (expected mha or mlp)");
}

void DiTConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (depth < 1) fail("depth must be >= 1");
  if (width < 4 || width % 4 != 0) fail("width must be a positive multiple of 4");
  if (heads < 1 || width % heads != 0) {
    fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  }
  if (patch < 1 || image_size < 1 || image_size % patch != 0) {
    fail("image size " + std::to_string(image_size) + " not divisible by patch " + std::to_string(patch));
  }
  if (channels < 1) fail("channels must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (!(mlp_ratio > 0)) fail("mlp_ratio must be > 0");
  if (!(cfg_dropout >= 0 && cfg_dropout <= 1)) fail("cfg_dropout must be in [0, 1]");
  if (freq_dim < 2 || freq_dim % 2 != 0) fail("freq_dim must be even");
  if (timesteps < 1) fail("timesteps must be >= 1");
  OperatorConfig::mlp(width, mlp_ratio).validate();
}

DiTConfig DiTConfig::xs() { return DiTConfig{}; }

DiTConfig DiTConfig::xl2() {
  DiTConfig c;
  c.depth = 28;
  c.width = 1152;
  c.heads = 16;
  c.patch = 2;
  c.image_size = 32;
  c.channels = 4;
  c.num_classes = 1000;
  c.freq_dim = 256;
  c.learn_sigma = true;
  return c;
}

std::int64_t param_count(const DiTConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.width;
  const std::int64_t x_embed = cfg.patch_dim() * d + d;
  const std::int64_t t_embed = cfg.freq_dim * d + d + d * d + d;
  const std::int64_t y_embed = (cfg.num_classes + 1) * d;
  const std::int64_t block = mixer_count(cfg) + mlp_count(cfg) + 6 * d * d + 6 * d;
  const std::int64_t out = cfg.patch * cfg.patch * cfg.out_channels();
  const std::int64_t final_layer = 2 * d * d + 2 * d + d * out + out;
  return x_embed + t_embed + y_embed + cfg.depth * block + final_layer;
}

std::int64_t param_count_parallel(const DiTConfig& cfg) {
  if (cfg.depth % 2 != 0) throw std::invalid_argument("parallel pairs need an even depth");
  return param_count(cfg) + (cfg.depth / 2) * (2 * cfg.width * cfg.width + cfg.width);
}

Tensor sincos_pos_embed(std::int64_t dim, std::int64_t grid, DType dtype) {
  if (dim % 4 != 0) throw std::invalid_argument("pos embed dim must be divisible by 4");
  const std::int64_t quarter = dim / 4;
  std::vector<double> v(static_cast<std::size_t>(grid * grid * dim));
  for (std::int64_t i = 0; i < grid; ++i) {
    for (std::int64_t j = 0; j < grid; ++j) {
      double* row = v.data() + (i * grid + j) * dim;
      // First half encodes the column, second half the row.
      const double pos[2] = {static_cast<double>(j), static_cast<double>(i)};
      for (int half = 0; half < 2; ++half) {
        for (std::int64_t k = 0; k < quarter; ++k) {
          const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
          row[half * 2 * quarter + k] = std::sin(pos[half] * omega);
          row[half * 2 * quarter + quarter + k] = std::cos(pos[half] * omega);
        }
      }
    }
  }
  return Tensor::from_values(v, {grid * grid, dim}, dtype);
}

Tensor timestep_features(std::span<const std::int64_t> t, std::int64_t dim, DType dtype) {
  const std::int64_t half = dim / 2;
  const auto b = static_cast<std::int64_t>(t.size());
  std::vector<double> v(static_cast<std::size_t>(b * dim));
  for (std::int64_t r = 0; r < b; ++r) {
    for (std::int64_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(t[static_cast<std::size_t>(r)]) * freq;
      v[static_cast<std::size_t>(r * dim + k)] = std::cos(arg);
      v[static_cast<std::size_t>(r * dim + half + k)] = std::sin(arg);
    }
  }
  return Tensor::from_values(v, {b, dim}, dtype);
}

Block::Block(const DiTConfig& cfg, std::uint64_t seed, DType dtype)
    : mixer(OperatorConfig::mha(cfg.width, cfg.heads, mix_seed(seed, 0)), dtype),
      mlp(OperatorConfig::mlp(cfg.width, cfg.mlp_ratio, mix_seed(seed, 1)), dtype),
      ada_weight(Tensor::zeros({cfg.width, 6 * cfg.width}, dtype)),
      ada_bias(Tensor::zeros({6 * cfg.width}, dtype)) {
  ada_weight.set_requires_grad(true);
  ada_bias.set_requires_grad(true);
}

Tensor Block::forward(const Tensor& x, const Tensor& cond, int index, const ForwardHooks* hooks) const {
  const std::int64_t b = x.dim(0), d = x.dim(2);
  const Tensor mod = ops::linear(cond, ada_weight, ada_bias);
  auto chunk = [&](std::int64_t i) { return ops::slice_last(mod, i * d, d); };
  const Tensor gate_msa = ops::reshape(chunk(2), {b, 1, d});
  const Tensor gate_mlp = ops::reshape(chunk(5), {b, 1, d});

  const Tensor h1 = ops::modulate(ops::layernorm(x), chunk(0), chunk(1));
  const Tensor a = mixer.forward(h1);
  if (hooks && hooks->on_operator) hooks->on_operator({index, Slot::kMixer, mixer, h1, a, gate_msa});
  const Tensor x1 = ops::add(x, ops::mul(gate_msa, a));

  const Tensor h2 = ops::modulate(ops::layernorm(x1), chunk(3), chunk(4));
  const Tensor m = mlp.forward(h2);
  if (hooks && hooks->on_operator) hooks->on_operator({index, Slot::kMlp, mlp, h2, m, gate_mlp});
  return ops::add(x1, ops::mul(gate_mlp, m));
}

ModelGraph::ModelGraph(const DiTConfig& cfg, DType dtype) : cfg_(cfg), dtype_(dtype) {
  cfg_.validate();
  const std::int64_t d = cfg_.width;
  Rng rng(mix_seed(cfg_.seed, 0));
  auto add = [&](std::string name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(t)});
  };
  add("x_embed.weight", xavier(rng, cfg_.patch_dim(), d, dtype));
  add("x_embed.bias", Tensor::zeros({d}, dtype));
  add("t_embed.fc1.weight", rng.normal_tensor({cfg_.freq_dim, d}, kEmbedStd, dtype));
  add("t_embed.fc1.bias", Tensor::zeros({d}, dtype));
  add("t_embed.fc2.weight", rng.normal_tensor({d, d}, kEmbedStd, dtype));
  add("t_embed.fc2.bias", Tensor::zeros({d}, dtype));
  add("y_embed.table", rng.normal_tensor({cfg_.num_classes + 1, d}, kEmbedStd, dtype));
  const std::int64_t out = cfg_.patch * cfg_.patch * cfg_.out_channels();
  add("final.ada.weight", Tensor::zeros({d, 2 * d}, dtype));
  add("final.ada.bias", Tensor::zeros({2 * d}, dtype));
  add("final.linear.weight", Tensor::zeros({d, out}, dtype));
  add("final.linear.bias", Tensor::zeros({out}, dtype));
  pos_embed_ = sincos_pos_embed(d, cfg_.grid(), dtype);

  for (std::int64_t i = 0; i < cfg_.depth; ++i) {
    blocks_.emplace_back(cfg_, mix_seed(cfg_.seed, static_cast<std::uint64_t>(i + 1)), dtype);
    entries_.push_back(Entry{{static_cast<int>(i)}, {}, {}});
  }
}

ModelGraph build_model(const DiTConfig& cfg, DType dtype) { return ModelGraph(cfg, dtype); }

Tensor ModelGraph::embed_tokens(const Tensor& z_t) const {
  const std::int64_t b = z_t.dim(0), g = cfg_.grid(), p = cfg_.patch, ch = cfg_.channels;
  Tensor t = ops::reshape(z_t, {b, g, p, g, p, ch});
  t = ops::transpose(t, 2, 3);
  t = ops::reshape(t, {b, g * g, p * p * ch});
  return ops::add(ops::linear(t, find(params_, "x_embed.weight"), find(params_, "x_embed.bias")), pos_embed_);
}

Tensor ModelGraph::unpatchify(const Tensor& tokens) const {
  const std::int64_t b = tokens.dim(0), g = cfg_.grid(), p = cfg_.patch, co = cfg_.out_channels();
  Tensor t = ops::reshape(tokens, {b, g, g, p, p, co});
  t = ops::transpose(t, 2, 3);
  t = ops::reshape(t, {b, g * p, g * p, co});
  if (cfg_.learn_sigma) t = ops::slice_last(t, 0, cfg_.channels);
  return t;
}

Tensor ModelGraph::conditioning(std::span<const std::int64_t> t, std::span<const std::int64_t> c) const {
  if (t.size() != c.size()) throw std::invalid_argument("conditioning: t and c lengths differ");
  for (auto v : t) {
    if (v < 0 || v >= cfg_.timesteps) {
      throw std::out_of_range("timestep " + std::to_string(v) + " outside [0, " +
                              std::to_string(cfg_.timesteps) + ")");
    }
  }
  for (auto v : c) {
    if (v < 0 || v > cfg_.num_classes) {
      throw std::out_of_range("class " + std::to_string(v) + " outside [0, " +
                              std::to_string(cfg_.num_classes) + "]");
    }
  }
  const Tensor freq = timestep_features(t, cfg_.freq_dim, dtype_);
  Tensor te = ops::linear(freq, find(params_, "t_embed.fc1.weight"), find(params_, "t_embed.fc1.bias"));
  te = ops::linear(ops::silu(te), find(params_, "t_embed.fc2.weight"), find(params_, "t_embed.fc2.bias"));
  const Tensor ye = ops::embedding(find(params_, "y_embed.table"), c);
  return ops::silu(ops::add(te, ye));
}

Tensor ModelGraph::run_entry(int entry, const Tensor& x, const Tensor& cond, const ForwardHooks* hooks) const {
  const Entry& e = entries_.at(static_cast<std::size_t>(entry));
  Tensor y;
  if (!e.is_pair()) {
    y = blocks_[static_cast<std::size_t>(e.blocks[0])].forward(x, cond, e.blocks[0], hooks);
  } else {
    const Tensor da = ops::sub(blocks_[static_cast<std::size_t>(e.blocks[0])].forward(x, cond, e.blocks[0], hooks), x);
    const Tensor db = ops::sub(blocks_[static_cast<std::size_t>(e.blocks[1])].forward(x, cond, e.blocks[1], hooks), x);
    y = ops::add(x, ops::linear(ops::concat_last({da, db}), e.merge_weight, e.merge_bias));
  }
  if (hooks && hooks->on_entry) hooks->on_entry({entry, x, cond, y});
  return y;
}

Tensor ModelGraph::forward(const Tensor& z_t, std::span<const std::int64_t> t, std::span<const std::int64_t> c,
                           const ForwardHooks* hooks) const {
  const Shape want{z_t.rank() > 0 ? z_t.dim(0) : 0, cfg_.image_size, cfg_.image_size, cfg_.channels};
  if (z_t.rank() != 4 || z_t.shape() != want) {
    throw ShapeError("model forward: expected [B," + std::to_string(cfg_.image_size) + "," +
                     std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.channels) + "] input, got " +
                     to_string(z_t.shape()));
  }
  if (z_t.dtype() != dtype_) throw std::invalid_argument("model forward: input dtype differs from model dtype");
  if (static_cast<std::int64_t>(t.size()) != z_t.dim(0) || static_cast<std::int64_t>(c.size()) != z_t.dim(0)) {
    throw std::invalid_argument("model forward: need one timestep and one class per batch item");
  }
  const Tensor cond = conditioning(t, c);
  Tensor x = embed_tokens(z_t);
  for (std::size_t i = 0; i < entries_.size(); ++i) x = run_entry(static_cast<int>(i), x, cond, hooks);

  const std::int64_t d = cfg_.width;
  const Tensor mod = ops::linear(cond, find(params_, "final.ada.weight"), find(params_, "final.ada.bias"));
  const Tensor shift = ops::slice_last(mod, 0, d);
  const Tensor scale = ops::slice_last(mod, d, d);
  x = ops::modulate(ops::layernorm(x), shift, scale);
  x = ops::linear(x, find(params_, "final.linear.weight"), find(params_, "final.linear.bias"));
  return unpatchify(x);
}

ParameterList ModelGraph::named_parameters() const {
  ParameterList out = params_;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string prefix = "blocks." + std::to_string(i) + ".";
    for (const auto& p : blocks_[i].mixer.parameters()) out.push_back({prefix + "mixer." + p.name, p.value});
    for (const auto& p : blocks_[i].mlp.parameters()) out.push_back({prefix + "mlp." + p.name, p.value});
    out.push_back({prefix + "ada.weight", blocks_[i].ada_weight});
    out.push_back({prefix + "ada.bias", blocks_[i].ada_bias});
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].is_pair()) continue;
    const std::string prefix = "merge." + std::to_string(i) + ".";
    out.push_back({prefix + "weight", entries_[i].merge_weight});
    out.push_back({prefix + "bias", entries_[i].merge_bias});
  }
  return out;
}

std::int64_t ModelGraph::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.value.numel();
  return n;
}

ModelGraph ModelGraph::clone() const {
  ModelGraph g = *this;
  for (auto& p : g.params_) p.value = p.value.clone();
  for (auto& b : g.blocks_) {
    b.mixer = b.mixer.clone();
    b.mlp = b.mlp.clone();
    b.ada_weight = b.ada_weight.clone();
    b.ada_bias = b.ada_bias.clone();
  }
  for (auto& e : g.entries_) {
    if (!e.is_pair()) continue;
    e.merge_weight = e.merge_weight.clone();
    e.merge_bias = e.merge_bias.clone();
  }
  return g;
}

ModelGraph ModelGraph::to(DType dtype) const {
  auto conv = [dtype](const Tensor& t) {
    Tensor out = t.to(dtype);
    out.set_requires_grad(t.requires_grad());
    return out;
  };
  ModelGraph g = *this;
  g.dtype_ = dtype;
  for (auto& p : g.params_) p.value = conv(p.value);
  g.pos_embed_ = g.pos_embed_.to(dtype);
  for (auto& b : g.blocks_) {
    b.mixer = b.mixer.to(dtype);
    b.mlp = b.mlp.to(dtype);
    b.ada_weight = conv(b.ada_weight);
    b.ada_bias = conv(b.ada_bias);
  }
  for (auto& e : g.entries_) {
    if (!e.is_pair()) continue;
    e.merge_weight = conv(e.merge_weight);
    e.merge_bias = conv(e.merge_bias);
  }
  return g;
}

ModelGraph replace_operator(const ModelGraph& g, int layer, Slot slot, const TokenMixer& op) {
  if (layer < 0 || layer >= static_cast<int>(g.blocks().size())) {
    throw std::out_of_range("replace_operator: layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(g.blocks().size()) + ")");
  }
  if (op.config().width != g.config().width) {
    throw std::invalid_argument("replace_operator: operator width " + std::to_string(op.config().width) +
                                " != model width " + std::to_string(g.config().width));
  }
  const OperatorKind kind = op.config().kind;
  if (slot == Slot::kMixer ? !is_token_mixer(kind) : !is_channel_mixer(kind)) {
    throw std::invalid_argument("replace_operator: " + std::string(to_string(kind)) + " cannot fill the " +
                                std::string(to_string(slot)) + " slot");
  }
  if (op.dtype() != g.dtype()) throw std::invalid_argument("replace_operator: operator dtype differs from model");
  ModelGraph out = g;
  out.blocks()[static_cast<std::size_t>(layer)].op(slot) = op;
  return out;
}

ModelGraph parallelize_pairs(const ModelGraph& g) {
  if (g.effective_depth() % 2 != 0) {
    throw std::invalid_argument("parallelize_pairs: odd effective depth " + std::to_string(g.effective_depth()));
  }
  for (const auto& e : g.entries()) {
    if (e.is_pair()) throw std::invalid_argument("parallelize_pairs: graph already has parallel pairs");
  }
  ModelGraph out = g.clone();
  const std::int64_t d = g.config().width;
  std::vector<double> eye2(static_cast<std::size_t>(2 * d * d), 0.0);
  for (std::int64_t i = 0; i < d; ++i) {
    eye2[static_cast<std::size_t>(i * d + i)] = 1.0;
    eye2[static_cast<std::size_t>((d + i) * d + i)] = 1.0;
  }
  std::vector<Entry> entries;
  for (std::size_t i = 0; i + 1 < g.entries().size(); i += 2) {
    Entry e;
    e.blocks = {g.entries()[i].blocks[0], g.entries()[i + 1].blocks[0]};
    e.merge_weight = Tensor::from_values(eye2, {2 * d, d}, g.dtype());
    e.merge_bias = Tensor::zeros({d}, g.dtype());
    e.merge_weight.set_requires_grad(true);
    e.merge_bias.set_requires_grad(true);
    entries.push_back(std::move(e));
  }
  out.entries_ = std::move(entries);
  return out;
}

}  // namespace graftkit
