#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "graftkit/model.hpp"
#include "graftkit/rng.hpp"
#include "graftkit/tensor.hpp"

namespace graftkit {

class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::int64_t steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  std::int64_t steps() const { return static_cast<std::int64_t>(alpha_bar_.size()); }
  double beta(std::int64_t t) const { return betas_.at(static_cast<std::size_t>(t)); }
  double alpha_bar(std::int64_t t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }
  double alpha(std::int64_t t) const;  // sqrt(alpha_bar)
  double sigma(std::int64_t t) const;  // sqrt(1 - alpha_bar)

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

struct BlobDataset {
  Tensor images;  // [n, side, side, 1], f32
  std::vector<std::int64_t> labels;
  std::uint64_t seed = 0;
  std::int64_t num_classes = 8;
  std::int64_t side = 16;
  double noise_std = 0.05;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  // Rows `idx` as a fresh [k, side, side, 1] tensor.
  Tensor gather(std::span<const std::int64_t> idx, DType dtype = DType::kF32) const;
  BlobDataset subset(std::span<const std::int64_t> idx) const;

  static BlobDataset generate(std::int64_t size, std::uint64_t seed, std::int64_t num_classes = 8,
                              std::int64_t side = 16, double noise_std = 0.05);
};

struct Pixel {
  std::int64_t row;
  std::int64_t col;
};
// Rounded blob centre of class k.
Pixel blob_center(std::int64_t k, std::int64_t num_classes = 8, std::int64_t side = 16);
// Noiseless image of class k, [side*side].
std::vector<double> blob_image(std::int64_t k, std::int64_t num_classes = 8, std::int64_t side = 16);

// Fraction of images whose argmax pixel lies within Chebyshev distance 2 of the label's centre.
double blob_accuracy(const Tensor& images, std::span<const std::int64_t> labels, std::int64_t num_classes = 8);

// z_t = alpha_t z + sigma_t eps, one t per batch item (z is [B, ...]).
Tensor corrupt(const NoiseSchedule& s, const Tensor& z, std::span<const std::int64_t> t, const Tensor& eps);
Tensor corrupt(const NoiseSchedule& s, const Tensor& z, std::int64_t t, const Tensor& eps);

using EpsModel = std::function<Tensor(const Tensor& z_t, std::span<const std::int64_t> t,
                                      std::span<const std::int64_t> c)>;
EpsModel eps_model(const ModelGraph& g);

struct DiffusionDraw {
  std::vector<std::int64_t> t;
  std::vector<std::int64_t> c;  // after label dropout
  Tensor eps;
};

// t ~ U{0..T-1}, eps ~ N(0, I), labels replaced by `null_class` with probability `dropout`.
DiffusionDraw draw_diffusion(Rng& rng, const NoiseSchedule& s, const Shape& shape,
                             std::span<const std::int64_t> labels, double dropout, std::int64_t null_class,
                             DType dtype);

// mean ||eps - model(z_t, t, c)||^2 over batch and pixels.
Tensor dm_loss(const EpsModel& model, const NoiseSchedule& s, const Tensor& z, const DiffusionDraw& draw);

// Fixed-draw loss estimate (no dropout) over `count` items of `data`.
double validation_loss(const ModelGraph& g, const NoiseSchedule& s, const BlobDataset& data,
                       std::uint64_t seed, std::int64_t count = 512, std::int64_t batch = 128);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(ParameterList params, AdamWConfig cfg);
  // Rescales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
  double clip_grad_norm(double max_norm);
  void step(double lr);
  void zero_grad();
  std::int64_t steps_taken() const { return t_; }
  const ParameterList& params() const { return params_; }

 private:
  ParameterList params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

struct TrainConfig {
  std::int64_t steps = 4000;
  std::int64_t batch = 128;
  double lr = 1e-4;
  std::int64_t warmup = 200;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  double cfg_dropout = 0.1;
  std::uint64_t seed = 0;
  // Optional whitelist; empty trains every parameter.
  std::vector<std::string> trainable;
};

struct TrainResult {
  std::vector<double> losses;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : NumericError(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

// Trains `model` in place on `data` with the diffusion objective.
TrainResult train(ModelGraph& model, const BlobDataset& data, const NoiseSchedule& s, const TrainConfig& cfg);

double warmup_lr(double lr, std::int64_t warmup, std::int64_t step);

enum class SamplerKind { kDdpm, kDdim };
SamplerKind parse_sampler(std::string_view name);
std::string_view to_string(SamplerKind kind);

struct SampleConfig {
  SamplerKind method = SamplerKind::kDdim;
  std::int64_t steps = 50;
  double cfg_scale = 1.5;
  std::uint64_t seed = 0;
  std::int64_t batch = 64;
};

// Timesteps visited, highest first.
std::vector<std::int64_t> sampling_timesteps(std::int64_t total, std::int64_t steps);

// eps_null + scale * (eps_cond - eps_null); scale 1 returns eps_cond exactly.
Tensor guided_eps(const EpsModel& model, const Tensor& x, std::span<const std::int64_t> t,
                  std::span<const std::int64_t> c, double cfg_scale, std::int64_t null_class);

// Images [n, side, side, C] for classes `labels`, clipped to [-3, 3].
Tensor sample(const EpsModel& model, const NoiseSchedule& s, const SampleConfig& cfg,
              std::span<const std::int64_t> labels, const Shape& image_shape, std::int64_t null_class);
Tensor sample(const ModelGraph& g, const NoiseSchedule& s, const SampleConfig& cfg,
              std::span<const std::int64_t> labels);

}  // namespace graftkit
