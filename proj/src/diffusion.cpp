#include "graftkit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "graftkit/ops.hpp"

namespace graftkit {

NoiseSchedule::NoiseSchedule(std::int64_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end)) {
    throw std::invalid_argument("noise schedule betas must satisfy 0 < start <= end < 1");
  }
  betas_.resize(static_cast<std::size_t>(steps));
  alpha_bar_.resize(static_cast<std::size_t>(steps));
  double prod = 1.0;
  for (std::int64_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - b;
    betas_[static_cast<std::size_t>(t)] = b;
    alpha_bar_[static_cast<std::size_t>(t)] = prod;
  }
}

double NoiseSchedule::alpha(std::int64_t t) const { return std::sqrt(alpha_bar(t)); }
double NoiseSchedule::sigma(std::int64_t t) const { return std::sqrt(1.0 - alpha_bar(t)); }

Pixel blob_center(std::int64_t k, std::int64_t num_classes, std::int64_t side) {
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_classes);
  const double mid = static_cast<double>(side) / 2.0;
  const double radius = 5.0 * static_cast<double>(side) / 16.0;
  return {static_cast<std::int64_t>(std::lround(mid + radius * std::cos(angle))),
          static_cast<std::int64_t>(std::lround(mid + radius * std::sin(angle)))};
}

std::vector<double> blob_image(std::int64_t k, std::int64_t num_classes, std::int64_t side) {
  const Pixel mu = blob_center(k, num_classes, side);
  std::vector<double> img(static_cast<std::size_t>(side * side));
  for (std::int64_t r = 0; r < side; ++r) {
    for (std::int64_t c = 0; c < side; ++c) {
      const double dr = static_cast<double>(r - mu.row), dc = static_cast<double>(c - mu.col);
      img[static_cast<std::size_t>(r * side + c)] = std::exp(-(dr * dr + dc * dc) / (2.0 * 1.5 * 1.5));
    }
  }
  return img;
}

BlobDataset BlobDataset::generate(std::int64_t size, std::uint64_t seed, std::int64_t num_classes,
                                  std::int64_t side, double noise_std) {
  if (size < 1) throw std::invalid_argument("dataset size must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("dataset needs at least one class");
  BlobDataset d;
  d.seed = seed;
  d.num_classes = num_classes;
  d.side = side;
  d.noise_std = noise_std;
  std::vector<std::vector<double>> clean;
  for (std::int64_t k = 0; k < num_classes; ++k) clean.push_back(blob_image(k, num_classes, side));
  Rng rng(seed);
  const std::int64_t px = side * side;
  std::vector<float> data(static_cast<std::size_t>(size * px));
  for (std::int64_t i = 0; i < size; ++i) {
    const auto k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(num_classes)));
    d.labels.push_back(k);
    for (std::int64_t p = 0; p < px; ++p) {
      data[static_cast<std::size_t>(i * px + p)] =
          static_cast<float>(clean[static_cast<std::size_t>(k)][static_cast<std::size_t>(p)] + noise_std * rng.normal());
    }
  }
  d.images = Tensor::from_storage(std::move(data), {size, side, side, 1});
  return d;
}

Tensor BlobDataset::gather(std::span<const std::int64_t> idx, DType dtype) const {
  const std::int64_t px = side * side;
  const auto src = images.data<float>();
  std::vector<double> out;
  out.reserve(idx.size() * static_cast<std::size_t>(px));
  for (auto i : idx) {
    if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
    for (std::int64_t p = 0; p < px; ++p) out.push_back(src[static_cast<std::size_t>(i * px + p)]);
  }
  return Tensor::from_values(out, {static_cast<std::int64_t>(idx.size()), side, side, 1}, dtype);
}

BlobDataset BlobDataset::subset(std::span<const std::int64_t> idx) const {
  BlobDataset d = *this;
  d.images = gather(idx, DType::kF32);
  d.labels.clear();
  for (auto i : idx) d.labels.push_back(labels[static_cast<std::size_t>(i)]);
  return d;
}

double blob_accuracy(const Tensor& images, std::span<const std::int64_t> labels, std::int64_t num_classes) {
  if (images.rank() != 4 || images.dim(1) != images.dim(2) || images.dim(3) != 1) {
    throw ShapeError("blob_accuracy: expected [n,S,S,1] images, got " + to_string(images.shape()));
  }
  const std::int64_t n = images.dim(0), side = images.dim(1), px = side * side;
  if (static_cast<std::int64_t>(labels.size()) != n) throw std::invalid_argument("blob_accuracy: label count");
  if (n == 0) return 0.0;
  const auto v = images.to_vector();
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto first = v.begin() + i * px;
    const std::int64_t arg = std::max_element(first, first + px) - first;
    const Pixel mu = blob_center(labels[static_cast<std::size_t>(i)], num_classes, side);
    if (std::max(std::abs(arg / side - mu.row), std::abs(arg % side - mu.col)) <= 2) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

// [B] per-item scalars shaped to broadcast against z [B, ...].
Tensor per_item(const std::vector<double>& v, const Tensor& like) {
  Shape s(static_cast<std::size_t>(like.rank()), 1);
  s[0] = static_cast<std::int64_t>(v.size());
  return Tensor::from_values(v, s, like.dtype());
}

}  // namespace

Tensor corrupt(const NoiseSchedule& s, const Tensor& z, std::span<const std::int64_t> t, const Tensor& eps) {
  if (z.shape() != eps.shape()) {
    throw ShapeError("corrupt: z " + to_string(z.shape()) + " and eps " + to_string(eps.shape()) + " differ");
  }
  if (z.rank() < 1 || static_cast<std::int64_t>(t.size()) != z.dim(0)) {
    throw std::invalid_argument("corrupt: need one timestep per batch item");
  }
  std::vector<double> a, sg;
  for (auto ti : t) {
    if (ti < 0 || ti >= s.steps()) throw std::out_of_range("corrupt: timestep " + std::to_string(ti));
    a.push_back(s.alpha(ti));
    sg.push_back(s.sigma(ti));
  }
  return ops::add(ops::mul(z, per_item(a, z)), ops::mul(eps, per_item(sg, z)));
}

Tensor corrupt(const NoiseSchedule& s, const Tensor& z, std::int64_t t, const Tensor& eps) {
  if (z.shape() != eps.shape()) {
    throw ShapeError("corrupt: z " + to_string(z.shape()) + " and eps " + to_string(eps.shape()) + " differ");
  }
  if (t < 0 || t >= s.steps()) throw std::out_of_range("corrupt: timestep " + std::to_string(t));
  return ops::add(ops::scale(z, s.alpha(t)), ops::scale(eps, s.sigma(t)));
}

EpsModel eps_model(const ModelGraph& g) {
  return [&g](const Tensor& z_t, std::span<const std::int64_t> t, std::span<const std::int64_t> c) {
    return g.forward(z_t, t, c);
  };
}

DiffusionDraw draw_diffusion(Rng& rng, const NoiseSchedule& s, const Shape& shape,
                             std::span<const std::int64_t> labels, double dropout, std::int64_t null_class,
                             DType dtype) {
  DiffusionDraw d;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    d.t.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.steps()))));
    d.c.push_back(rng.uniform() < dropout ? null_class : labels[i]);
  }
  d.eps = rng.normal_tensor(shape, 1.0, dtype);
  return d;
}

Tensor dm_loss(const EpsModel& model, const NoiseSchedule& s, const Tensor& z, const DiffusionDraw& draw) {
  if (z.rank() < 1 || z.dim(0) == 0) throw std::invalid_argument("dm_loss: empty batch");
  const Tensor z_t = corrupt(s, z, draw.t, draw.eps);
  const Tensor r = ops::sub(draw.eps, model(z_t, draw.t, draw.c));
  return ops::mean(ops::mul(r, r));
}

double validation_loss(const ModelGraph& g, const NoiseSchedule& s, const BlobDataset& data, std::uint64_t seed,
                       std::int64_t count, std::int64_t batch) {
  count = std::min(count, data.size());
  Rng rng(seed);
  double total = 0;
  const auto model = eps_model(g);
  for (std::int64_t start = 0; start < count; start += batch) {
    const std::int64_t n = std::min(batch, count - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    const Tensor z = data.gather(idx, g.dtype());
    std::vector<std::int64_t> labels(data.labels.begin() + start, data.labels.begin() + start + n);
    const auto draw = draw_diffusion(rng, s, z.shape(), labels, 0.0, g.config().null_class(), g.dtype());
    total += dm_loss(model, s, z, draw).item() * static_cast<double>(n);
  }
  return total / static_cast<double>(count);
}

AdamW::AdamW(ParameterList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.value.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.value.numel()), 0.0);
  }
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0;
  for (auto& p : params_) {
    if (!p.value.has_grad()) continue;
    dispatch(p.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T g : p.value.grad_data<T>()) sq += static_cast<double>(g) * static_cast<double>(g);
    });
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-6);
    for (auto& p : params_) {
      if (!p.value.has_grad()) continue;
      dispatch(p.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T& g : p.value.grad_data<T>()) g = static_cast<T>(g * f);
      });
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].value;
    if (!p.has_grad()) continue;
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p.mutable_data<T>();
      auto g = p.grad_data<T>();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk;
        double wk = static_cast<double>(w[k]) * (1.0 - lr * cfg_.weight_decay);
        wk -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
        w[k] = static_cast<T>(wk);
      }
    });
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

double warmup_lr(double lr, std::int64_t warmup, std::int64_t step) {
  if (warmup <= 0 || step >= warmup) return lr;
  return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

namespace {

ParameterList select_trainable(const ModelGraph& model, const std::vector<std::string>& prefixes) {
  ParameterList all = model.named_parameters();
  if (prefixes.empty()) return all;
  ParameterList out;
  for (auto& p : all) {
    for (const auto& pre : prefixes) {
      if (p.name.starts_with(pre)) {
        out.push_back(p);
        break;
      }
    }
  }
  if (out.empty()) throw std::invalid_argument("train: trainable filter matched no parameters");
  return out;
}

}  // namespace

TrainResult train(ModelGraph& model, const BlobDataset& data, const NoiseSchedule& s, const TrainConfig& cfg) {
  if (cfg.steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (cfg.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (data.size() < 1) throw std::invalid_argument("train: empty dataset");
  TrainResult result;
  if (cfg.steps == 0) return result;
  AdamW opt(select_trainable(model, cfg.trainable), AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  // Untrained parameters still receive gradients on the tape; clear them after each step.
  ParameterList everything = model.named_parameters();
  Rng rng(cfg.seed);
  const auto net = eps_model(model);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(cfg.batch)), labels;
    for (auto& i : idx) {
      i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(data.size())));
      labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    }
    const Tensor z = data.gather(idx, model.dtype());
    const auto draw = draw_diffusion(rng, s, z.shape(), labels, cfg.cfg_dropout, model.config().null_class(),
                                     model.dtype());
    double loss_value = 0;
    try {
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = dm_loss(net, s, z, draw);
      loss_value = loss.item();
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(step) + ": " + e.what(),
                            result.losses);
    }
    result.losses.push_back(loss_value);
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("training diverged at step " + std::to_string(step), result.losses);
    }
    opt.clip_grad_norm(cfg.clip_norm);
    opt.step(warmup_lr(cfg.lr, cfg.warmup, step));
    for (auto& p : everything) p.value.zero_grad();
  }
  return result;
}

SamplerKind parse_sampler(std::string_view name) {
  if (name == "ddpm") return SamplerKind::kDdpm;
  if (name == "ddim") return SamplerKind::kDdim;
  throw std::invalid_argument("unknown sampler '" + std::string(name) + "' (expected ddpm or ddim)");
}

std::string_view to_string(SamplerKind kind) { return kind == SamplerKind::kDdpm ? "ddpm" : "ddim"; }

std::vector<std::int64_t> sampling_timesteps(std::int64_t total, std::int64_t steps) {
  if (steps < 1 || steps > total) {
    throw std::invalid_argument("sampling steps must be in [1, " + std::to_string(total) + "]");
  }
  std::vector<std::int64_t> ts;
  for (std::int64_t i = steps - 1; i >= 0; --i) ts.push_back(i * total / steps);
  return ts;
}

Tensor guided_eps(const EpsModel& model, const Tensor& x, std::span<const std::int64_t> t,
                  std::span<const std::int64_t> c, double cfg_scale, std::int64_t null_class) {
  if (cfg_scale == 1.0) return model(x, t, c);
  std::vector<std::int64_t> nulls(c.size(), null_class);
  if (cfg_scale == 0.0) return model(x, t, nulls);
  const Tensor cond = model(x, t, c);
  const Tensor uncond = model(x, t, nulls);
  return ops::add(uncond, ops::scale(ops::sub(cond, uncond), cfg_scale));
}

Tensor sample(const EpsModel& model, const NoiseSchedule& s, const SampleConfig& cfg,
              std::span<const std::int64_t> labels, const Shape& image_shape, std::int64_t null_class) {
  if (!(cfg.cfg_scale >= 0)) throw std::invalid_argument("cfg_scale must be >= 0");
  if (cfg.batch < 1) throw std::invalid_argument("sample batch must be >= 1");
  const auto ts = sampling_timesteps(s.steps(), cfg.steps);
  const std::int64_t n = static_cast<std::int64_t>(labels.size());
  const std::int64_t px = numel(image_shape);
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), image_shape.begin(), image_shape.end());
  std::vector<double> out(static_cast<std::size_t>(n * px));

  for (std::int64_t start = 0; start < n; start += cfg.batch) {
    const std::int64_t b = std::min(cfg.batch, n - start);
    // One stream per sample so results do not depend on the chunking.
    std::vector<Rng> rngs;
    for (std::int64_t i = 0; i < b; ++i) rngs.emplace_back(mix_seed(cfg.seed, static_cast<std::uint64_t>(start + i)));
    std::vector<double> x(static_cast<std::size_t>(b * px));
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t p = 0; p < px; ++p) x[static_cast<std::size_t>(i * px + p)] = rngs[static_cast<std::size_t>(i)].normal();
    }
    const std::span<const std::int64_t> c = labels.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(b));
    Shape shape{b};
    shape.insert(shape.end(), image_shape.begin(), image_shape.end());
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const std::int64_t t = ts[k];
      const double ab = s.alpha_bar(t);
      const double ab_prev = k + 1 < ts.size() ? s.alpha_bar(ts[k + 1]) : 1.0;
      const std::vector<std::int64_t> tv(static_cast<std::size_t>(b), t);
      const Tensor xt = Tensor::from_values(x, shape, DType::kF32);
      const auto eps = guided_eps(model, xt, tv, c, cfg.cfg_scale, null_class).to_vector();
      double noise_sd = 0;
      if (cfg.method == SamplerKind::kDdpm) {
        noise_sd = std::sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev));
      }
      const double dir = std::sqrt(std::max(0.0, 1 - ab_prev - noise_sd * noise_sd));
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t p = 0; p < px; ++p) {
          const auto j = static_cast<std::size_t>(i * px + p);
          const double x0 = (x[j] - std::sqrt(1 - ab) * eps[j]) / std::sqrt(ab);
          double next = std::sqrt(ab_prev) * x0 + dir * eps[j];
          if (noise_sd > 0) next += noise_sd * rngs[static_cast<std::size_t>(i)].normal();
          x[j] = next;
        }
      }
    }
    for (std::int64_t j = 0; j < b * px; ++j) {
      out[static_cast<std::size_t>(start * px + j)] = std::clamp(x[static_cast<std::size_t>(j)], -3.0, 3.0);
    }
  }
  return Tensor::from_values(out, out_shape, DType::kF32);
}

Tensor sample(const ModelGraph& g, const NoiseSchedule& s, const SampleConfig& cfg,
              std::span<const std::int64_t> labels) {
  const auto& c = g.config();
  const EpsModel net = [&g](const Tensor& x, std::span<const std::int64_t> t, std::span<const std::int64_t> y) {
    return g.forward(x.dtype() == g.dtype() ? x : x.to(g.dtype()), t, y);
  };
  return sample(net, s, cfg, labels, {c.image_size, c.image_size, c.channels}, c.null_class());
}

}  // namespace graftkit
