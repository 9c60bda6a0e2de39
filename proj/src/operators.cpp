#include "graftkit/operators.hpp"

#include <cmath>
#include <stdexcept>

#include "graftkit/ops.hpp"
#include "graftkit/rng.hpp"

namespace graftkit {

namespace {

constexpr double kProjectionStd = 0.02;
constexpr double kFilterNoiseStd = 0.02;

struct KindName {
  OperatorKind kind;
  std::string_view name;
};

constexpr KindName kKindNames[] = {
    {OperatorKind::kMha, "mha"},         {OperatorKind::kSwa, "swa"},
    {OperatorKind::kHyenaSe, "hyena_se"}, {OperatorKind::kHyenaX, "hyena_x"},
    {OperatorKind::kHyenaY, "hyena_y"},   {OperatorKind::kMlp, "mlp"},
    {OperatorKind::kHyenaXMlp, "hyena_x_mlp"},
};

bool uses_featurizers(OperatorKind kind) {
  return kind == OperatorKind::kHyenaSe || kind == OperatorKind::kHyenaX;
}
bool uses_inner_filter(OperatorKind kind) {
  return kind == OperatorKind::kHyenaSe || kind == OperatorKind::kHyenaY;
}

// Depthwise filter initialised as a delta (identity tap) plus noise.
Tensor delta_filter(Rng& rng, std::int64_t channels, std::int64_t taps, DType dtype) {
  Tensor f = rng.normal_tensor({channels, taps}, kFilterNoiseStd, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = f.mutable_data<T>();
    for (std::int64_t c = 0; c < channels; ++c) d[static_cast<std::size_t>(c * taps)] += T(1);
  });
  return f;
}

}  // namespace

std::string_view to_string(OperatorKind kind) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "unknown";
}

OperatorKind parse_operator_kind(std::string_view name) {
  for (const auto& kn : kKindNames) {
    if (kn.name == name) return kn.kind;
  }
  throw std::invalid_argument("unknown operator kind '" + std::string(name) + "'");
}

bool is_attention(OperatorKind kind) { return kind == OperatorKind::kMha || kind == OperatorKind::kSwa; }

bool is_hyena_mixer(OperatorKind kind) {
  return kind == OperatorKind::kHyenaSe || kind == OperatorKind::kHyenaX || kind == OperatorKind::kHyenaY;
}

bool is_token_mixer(OperatorKind kind) { return is_attention(kind) || is_hyena_mixer(kind); }

bool is_channel_mixer(OperatorKind kind) {
  return kind == OperatorKind::kMlp || kind == OperatorKind::kHyenaXMlp;
}

void OperatorConfig::validate() const {
  auto fail = [this](const std::string& what) {
    throw std::invalid_argument(std::string(to_string(kind)) + " config: " + what);
  };
  if (width < 1) fail("width must be positive");
  if (is_attention(kind)) {
    if (heads < 1 || width % heads != 0) {
      fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    }
  }
  if (kind == OperatorKind::kSwa && window < 0) fail("window must be >= 0");
  if (is_hyena_mixer(kind) || kind == OperatorKind::kHyenaXMlp) {
    if (kernel < 1) fail("kernel must be >= 1");
    if (!causal) fail("only causal short convolutions are supported");
  }
  if (is_channel_mixer(kind)) {
    if (!(ratio > 0)) fail("expansion ratio must be > 0");
    const double h = ratio * static_cast<double>(width);
    if (std::abs(h - std::round(h)) > 1e-9 || std::round(h) < 1) {
      fail("ratio * width must be a positive integer");
    }
  }
}

std::int64_t OperatorConfig::hidden() const {
  return static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(width)));
}

OperatorConfig OperatorConfig::mha(std::int64_t width, std::int64_t heads, std::uint64_t seed) {
  OperatorConfig c;
  c.kind = OperatorKind::kMha;
  c.width = width;
  c.heads = heads;
  c.seed = seed;
  return c;
}

OperatorConfig OperatorConfig::swa(std::int64_t width, std::int64_t heads, std::int64_t window,
                                   std::uint64_t seed) {
  OperatorConfig c = mha(width, heads, seed);
  c.kind = OperatorKind::kSwa;
  c.window = window;
  return c;
}

OperatorConfig OperatorConfig::hyena(OperatorKind kind, std::int64_t width, std::int64_t kernel,
                                     std::uint64_t seed) {
  OperatorConfig c;
  c.kind = kind;
  c.width = width;
  c.kernel = kernel;
  c.seed = seed;
  return c;
}

OperatorConfig OperatorConfig::mlp(std::int64_t width, double ratio, std::uint64_t seed) {
  OperatorConfig c;
  c.kind = OperatorKind::kMlp;
  c.width = width;
  c.ratio = ratio;
  c.seed = seed;
  return c;
}

OperatorConfig OperatorConfig::hyena_x_mlp(std::int64_t width, double ratio, std::int64_t kernel,
                                           std::uint64_t seed) {
  OperatorConfig c;
  c.kind = OperatorKind::kHyenaXMlp;
  c.width = width;
  c.ratio = ratio;
  c.kernel = kernel;
  c.seed = seed;
  return c;
}

TokenMixer::TokenMixer(const OperatorConfig& config, DType dtype) : config_(config), dtype_(dtype) {
  config_.validate();
  Rng rng(config_.seed);
  const std::int64_t d = config_.width;
  switch (config_.kind) {
    case OperatorKind::kMha:
    case OperatorKind::kSwa:
      add_param("qkv.weight", rng.normal_tensor({d, 3 * d}, kProjectionStd, dtype));
      add_param("qkv.bias", Tensor::zeros({3 * d}, dtype));
      add_param("proj.weight", rng.normal_tensor({d, d}, kProjectionStd, dtype));
      add_param("proj.bias", Tensor::zeros({d}, dtype));
      break;
    case OperatorKind::kHyenaSe:
    case OperatorKind::kHyenaX:
    case OperatorKind::kHyenaY: {
      // Gating is cubic in the projections, so these start at unit gain.
      const double std = 1.0 / std::sqrt(static_cast<double>(d));
      add_param("in_proj.weight", rng.normal_tensor({d, 3 * d}, std, dtype));
      add_param("in_proj.bias", Tensor::zeros({3 * d}, dtype));
      add_param("out_proj.weight", rng.normal_tensor({d, d}, std, dtype));
      add_param("out_proj.bias", Tensor::zeros({d}, dtype));
      if (uses_featurizers(config_.kind)) {
        for (const char* s : {"q", "k", "v"}) {
          add_param(std::string("filter_") + s, delta_filter(rng, d, config_.kernel, dtype));
          add_param(std::string("filter_") + s + ".bias", Tensor::zeros({d}, dtype));
        }
      }
      if (uses_inner_filter(config_.kind)) {
        add_param("filter_g", delta_filter(rng, d, config_.kernel, dtype));
        add_param("filter_g.bias", Tensor::zeros({d}, dtype));
      }
      break;
    }
    case OperatorKind::kMlp: {
      const std::int64_t h = config_.hidden();
      add_param("fc1.weight", rng.normal_tensor({d, h}, kProjectionStd, dtype));
      add_param("fc1.bias", Tensor::zeros({h}, dtype));
      add_param("fc2.weight", rng.normal_tensor({h, d}, kProjectionStd, dtype));
      add_param("fc2.bias", Tensor::zeros({d}, dtype));
      break;
    }
    case OperatorKind::kHyenaXMlp: {
      const std::int64_t h = config_.hidden();
      add_param("in_proj.weight", rng.normal_tensor({d, 3 * h}, 1.0 / std::sqrt(static_cast<double>(d)), dtype));
      add_param("in_proj.bias", Tensor::zeros({3 * h}, dtype));
      add_param("out_proj.weight", rng.normal_tensor({h, d}, 1.0 / std::sqrt(static_cast<double>(h)), dtype));
      add_param("out_proj.bias", Tensor::zeros({d}, dtype));
      for (const char* s : {"q", "k", "v"}) {
        add_param(std::string("filter_") + s, delta_filter(rng, 1, config_.kernel, dtype));
        add_param(std::string("filter_") + s + ".bias", Tensor::zeros({1}, dtype));
      }
      break;
    }
  }
  for (auto& p : params_) p.value.set_requires_grad(true);
}

void TokenMixer::add_param(std::string name, Tensor value) {
  params_.push_back({std::move(name), std::move(value)});
}

Tensor& TokenMixer::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw std::out_of_range(std::string(to_string(config_.kind)) + ": no parameter '" +
                          std::string(name) + "'");
}

const Tensor& TokenMixer::param(std::string_view name) const {
  return const_cast<TokenMixer*>(this)->param(name);
}

bool TokenMixer::has_param(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

std::int64_t TokenMixer::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

TokenMixer TokenMixer::clone() const {
  TokenMixer copy = *this;
  for (auto& p : copy.params_) p.value = p.value.clone();
  return copy;
}

TokenMixer TokenMixer::to(DType dtype) const {
  TokenMixer copy = *this;
  copy.dtype_ = dtype;
  for (auto& p : copy.params_) {
    const bool flag = p.value.requires_grad();
    p.value = p.value.to(dtype);
    p.value.set_requires_grad(flag);
  }
  return copy;
}

Tensor TokenMixer::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != config_.width) {
    throw ShapeError(std::string(to_string(config_.kind)) + ": expected [B,N," +
                     std::to_string(config_.width) + "] input, got " + to_string(x.shape()));
  }
  switch (config_.kind) {
    case OperatorKind::kMha:
    case OperatorKind::kSwa:
      return attention(x, false);
    case OperatorKind::kHyenaSe:
    case OperatorKind::kHyenaX:
    case OperatorKind::kHyenaY:
      return hyena(x);
    case OperatorKind::kMlp:
      return mlp(x);
    case OperatorKind::kHyenaXMlp:
      return hyena_channel_mlp(x);
  }
  throw std::logic_error("unreachable");
}

Tensor TokenMixer::attention_weights(const Tensor& x) const {
  if (!is_attention(config_.kind)) {
    throw std::invalid_argument(std::string("attention_weights: ") + std::string(to_string(config_.kind)) +
                                " has no attention matrix");
  }
  if (x.rank() != 3 || x.dim(2) != config_.width) {
    throw ShapeError("attention_weights: expected [B,N," + std::to_string(config_.width) +
                     "] input, got " + to_string(x.shape()));
  }
  return attention(x, true);
}

Tensor TokenMixer::attention(const Tensor& x, bool want_weights) const {
  const std::int64_t d = config_.width, h = config_.heads;
  const std::int64_t dh = d / h;
  const Tensor qkv = ops::linear(x, param("qkv.weight"), param("qkv.bias"));
  auto heads_of = [&](std::int64_t part) { return ops::split_heads(qkv, part * d, h, dh); };  // [B,H,N,dh]
  const Tensor q = heads_of(0);
  const Tensor k = heads_of(1);
  const Tensor v = heads_of(2);
  const Tensor scores = ops::scale(ops::batched_matmul(q, k, false, true),
                                   1.0 / std::sqrt(static_cast<double>(dh)));
  const std::int64_t band = config_.kind == OperatorKind::kSwa ? config_.window : -1;
  const Tensor weights = ops::row_softmax(scores, band);
  if (want_weights) return weights;
  const Tensor mixed = ops::batched_matmul(weights, v);  // [B,H,N,dh]
  const Tensor merged = ops::merge_heads(mixed);
  return ops::linear(merged, param("proj.weight"), param("proj.bias"));
}

Tensor TokenMixer::hyena(const Tensor& x) const {
  const std::int64_t d = config_.width;
  const Tensor z = ops::linear(x, param("in_proj.weight"), param("in_proj.bias"));
  Tensor q = ops::slice_last(z, 0, d);
  Tensor k = ops::slice_last(z, d, d);
  Tensor v = ops::slice_last(z, 2 * d, d);
  if (uses_featurizers(config_.kind)) {
    q = ops::depthwise_causal_conv1d(q, param("filter_q"), param("filter_q.bias"));
    k = ops::depthwise_causal_conv1d(k, param("filter_k"), param("filter_k.bias"));
    v = ops::depthwise_causal_conv1d(v, param("filter_v"), param("filter_v.bias"));
  }
  Tensor kv = ops::mul(k, v);
  if (uses_inner_filter(config_.kind)) {
    kv = ops::depthwise_causal_conv1d(kv, param("filter_g"), param("filter_g.bias"));
  }
  const Tensor y = ops::mul(q, kv);
  return ops::linear(y, param("out_proj.weight"), param("out_proj.bias"));
}

Tensor TokenMixer::mlp(const Tensor& x) const {
  const Tensor hidden = ops::gelu(ops::linear(x, param("fc1.weight"), param("fc1.bias")));
  return ops::linear(hidden, param("fc2.weight"), param("fc2.bias"));
}

Tensor TokenMixer::hyena_channel_mlp(const Tensor& x) const {
  const std::int64_t b = x.dim(0), n = x.dim(1), h = config_.hidden();
  const Tensor z = ops::linear(x, param("in_proj.weight"), param("in_proj.bias"));
  // Each token's hidden vector is treated as a length-rD sequence with one channel.
  auto stream = [&](std::int64_t part, const char* name) {
    const Tensor s = ops::reshape(ops::slice_last(z, part * h, h), {b * n, h, 1});
    const std::string filter = std::string("filter_") + name;
    return ops::depthwise_causal_conv1d(s, param(filter), param(filter + ".bias"));
  };
  const Tensor gated = ops::mul(ops::mul(stream(0, "q"), stream(1, "k")), stream(2, "v"));
  const Tensor y = ops::reshape(gated, {b, n, h});
  return ops::linear(y, param("out_proj.weight"), param("out_proj.bias"));
}

}  // namespace graftkit
