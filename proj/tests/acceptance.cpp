// End-to-end acceptance run: one PASS/FAIL line per criterion, every tolerance
// pinned below. Criteria 5-8 share one trained XS teacher.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "graftkit/analysis.hpp"
#include "graftkit/diffusion.hpp"
#include "graftkit/grad_check.hpp"
#include "graftkit/graft.hpp"
#include "graftkit/model.hpp"
#include "graftkit/operators.hpp"
#include "graftkit/ops.hpp"
#include "graftkit/persistence.hpp"
#include "graftkit/rng.hpp"
#include "graftkit/runtime.hpp"

using namespace graftkit;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr DType f64 = DType::kF64;

// ---------------------------------------------------------------- tolerances

constexpr double kTablePoints = 0.01;      // criterion 1, percentage points
constexpr double kBandTol = 1e-9;          // criterion 2
constexpr double kGradRelTol = 1e-4;       // criterion 3
constexpr double kGradStep = 1e-5;         // criterion 3, central differences
constexpr double kKeyBiasAbsTol = 1e-9;    // criterion 3, key bias has an exactly zero gradient
constexpr double kReductionTol = 1e-6;     // criterion 4
constexpr double kTeacherLoss = 0.25;      // 5a
constexpr double kTeacherAccuracy = 0.9;   // 5a
constexpr double kRandomAccuracy = 0.5;    // 5b
constexpr double kRecoveredLoss = 1.10;    // 5c, x teacher
constexpr double kRecoveredAccuracy = 0.85;  // 5c, x teacher
constexpr double kFirstOrderRatio = 3.5;   // 7
constexpr double kParallelLoss = 1.15;     // 7, x teacher

// Runtime budgets in seconds.
constexpr double kBudget[10] = {0, 1, 1, 120, 10, 1800, 600, 1800, 3600, 300};

// ---------------------------------------------------------------- protocol

// Desk-scale reference protocol shared by criteria 5-8.
struct Protocol {
  std::int64_t train_size = 8192;
  std::uint64_t train_seed = 1;
  std::int64_t val_size = 512;
  std::uint64_t val_seed = 2;
  std::uint64_t val_loss_seed = 5;
  TrainConfig teacher;
  std::int64_t eval_samples = 128;
  SampleConfig sampler;
  CaptureConfig capture;
  DistillConfig distill;
  FinetuneConfig finetune;
  FinetuneConfig pair_finetune;
  DistillConfig pair_distill;
  std::int64_t final_window = 100;

  Protocol() {
    teacher.steps = 1500;
    teacher.batch = 64;
    teacher.lr = 2e-3;
    teacher.warmup = 100;
    teacher.seed = 3;
    sampler.steps = 50;
    sampler.cfg_scale = 1.5;
    sampler.seed = 7;
    sampler.batch = 64;
    capture.count = 2048;
    capture.seed = 11;
    distill.objective = {ObjectiveKind::kL1};
    distill.epochs = 20;
    distill.batch = 64;
    distill.lr = 1e-3;
    distill.seed = 12;
    finetune.data_fraction = 0.1;
    finetune.train.steps = 2000;
    finetune.train.batch = 32;
    finetune.train.lr = 3e-4;
    finetune.train.warmup = 50;
    finetune.train.seed = 13;
    pair_distill = distill;
    pair_distill.objective = {ObjectiveKind::kL2};
    pair_finetune = finetune;
    pair_finetune.data_fraction = 0.25;
    pair_finetune.train.steps = 1000;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
  json values = json::object();
  bool soft = false;  // reported, never fails the run
  double seconds = 0;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

// ---------------------------------------------------------------- shared state

struct Teacher {
  ModelGraph model;
  std::vector<double> losses;
  double train_seconds = 0;
  double final_loss = 0;
  double val_loss = 0;
  double accuracy = 0;
  double sample_seconds = 0;
  bool cached = false;
};

struct Shared {
  Protocol p;
  NoiseSchedule schedule;
  BlobDataset train;
  BlobDataset val;
  std::optional<Teacher> teacher;
  std::optional<fs::path> cache;

  Shared()
      : train(BlobDataset::generate(p.train_size, p.train_seed)),
        val(BlobDataset::generate(p.val_size, p.val_seed)) {}

  std::vector<std::int64_t> eval_labels() const {
    std::vector<std::int64_t> labels(static_cast<std::size_t>(p.eval_samples));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int64_t>(i % 8);
    return labels;
  }
  double accuracy(const ModelGraph& g) const {
    const auto labels = eval_labels();
    return blob_accuracy(sample(g, schedule, p.sampler, labels), labels);
  }
  double val_loss(const ModelGraph& g) const {
    return validation_loss(g, schedule, val, p.val_loss_seed, p.val_size);
  }

  json teacher_key() const {
    return json{{"steps", p.teacher.steps}, {"batch", p.teacher.batch}, {"lr", p.teacher.lr},
                {"warmup", p.teacher.warmup}, {"seed", p.teacher.seed}, {"data_seed", p.train_seed},
                {"data_size", p.train_size}};
  }

  Teacher& get_teacher() {
    if (teacher) return *teacher;
    const fs::path ckpt = cache ? *cache / "teacher.ckpt" : fs::path();
    if (cache && fs::exists(ckpt)) {
      const json m = json::parse(read_text_file(manifest_path(ckpt)));
      if (m.value("protocol", json()) == teacher_key()) {
        std::cerr << "  using cached teacher " << ckpt.string() << "\n";
        Teacher t{load_checkpoint(ckpt), m.at("losses").get<std::vector<double>>(), m.at("train_seconds").get<double>()};
        t.cached = true;
        teacher = std::move(t);
      }
    }
    if (!teacher) {
      std::cerr << "  training the XS teacher (" << p.teacher.steps << " steps)\n";
      ModelGraph g = build_model(DiTConfig::xs());
      const auto t0 = std::chrono::steady_clock::now();
      TrainResult r = graftkit::train(g, train, schedule, p.teacher);
      Teacher t{g, r.losses, seconds_since(t0)};
      teacher = std::move(t);
      if (cache) {
        fs::create_directories(*cache);
        save_checkpoint(teacher->model, ckpt,
                        json{{"protocol", teacher_key()}, {"losses", teacher->losses},
                             {"train_seconds", teacher->train_seconds}});
      }
    }
    Teacher& t = *teacher;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(p.final_window), t.losses.size());
    double s = 0;
    for (std::size_t i = t.losses.size() - n; i < t.losses.size(); ++i) s += t.losses[i];
    t.final_loss = s / static_cast<double>(n);
    t.val_loss = val_loss(t.model);
    const auto t0 = std::chrono::steady_clock::now();
    t.accuracy = accuracy(t.model);
    t.sample_seconds = seconds_since(t0);
    std::cerr << "  teacher: final loss " << t.final_loss << ", val " << t.val_loss << ", accuracy " << t.accuracy
              << "\n";
    return t;
  }
};

// ---------------------------------------------------------------- criterion 1

Outcome table_costs() {
  Outcome o;
  const BaselineConfig base;
  const std::int64_t d = base.width;
  auto row = [&](const OperatorConfig& rep, double ratio, Slot slot) {
    return delta_report(base, make_plan(Strategy::kInterleaved, ratio, base.depth, slot, rep));
  };
  int checked = 0;
  double worst = 0;
  auto expect = [&](const std::string& name, double got, double want) {
    ++checked;
    worst = std::max(worst, std::abs(got - want));
    o.values[name] = got;
    o.require(std::abs(got - want) <= kTablePoints, name + " = " + fmt("%.4f", got) + " (want " + fmt("%.2f", want) + ")");
  };
  const double ratios[3] = {0.5, 0.75, 1.0};
  const char* pct[3] = {"50", "75", "100"};
  struct Mixer {
    const char* name;
    OperatorConfig cfg;
    double op[3];
    double ft[3];
    double param[3];
  };
  const Mixer mixers[] = {
      {"hyena_se", OperatorConfig::hyena(OperatorKind::kHyenaSe, d, 4), {-49.52, -74.27, -99.03}, {0.13, 0.20, 0.26},
       {0.22, 0.33, 0.43}},
      {"hyena_x", OperatorConfig::hyena(OperatorKind::kHyenaX, d, 4), {-49.90, -74.85, -99.81}, {0.13, 0.20, 0.26},
       {0.16, 0.24, 0.33}},
      {"hyena_y", OperatorConfig::hyena(OperatorKind::kHyenaY, d, 4), {-49.52, -74.27, -99.03}, {0, 0, 0},
       {0.05, 0.08, 0.11}},
      {"swa_w4", OperatorConfig::swa(d, base.heads, 4), {-48.24, -72.36, -96.48}, {0, 0, 0}, {0, 0, 0}},
  };
  for (const auto& m : mixers) {
    for (int i = 0; i < 3; ++i) {
      const FlopReport r = row(m.cfg, ratios[i], Slot::kMixer);
      const std::string key = std::string(m.name) + "@" + pct[i];
      expect(key + ".op", r.delta_op, m.op[i]);
      expect(key + ".ft", r.delta_ft, m.ft[i]);
      expect(key + ".param", r.delta_param, m.param[i]);
    }
  }
  const struct {
    double r;
    double delta[3];
  } mlps[] = {{3, {-12.5, -18.75, -25}}, {6, {25, 37.5, 50}}};
  for (const auto& m : mlps) {
    for (int i = 0; i < 3; ++i) {
      const FlopReport r = row(OperatorConfig::mlp(d, m.r), ratios[i], Slot::kMlp);
      const std::string key = "mlp_r" + fmt("%.0f", m.r) + "@" + pct[i];
      expect(key + ".op", r.delta_op, m.delta[i]);
      expect(key + ".ft", r.delta_ft, 0);
      expect(key + ".param", r.delta_param, m.delta[i]);
    }
  }
  // Mamba-2 rows are reported, not gated.
  const BaselineConfig b;
  const auto layers = make_plan(Strategy::kInterleaved, 0.5, b.depth, Slot::kMixer, b.mixer()).layers();
  const FlopReport mamba = delta_report_mamba2(b, Mamba2Config{}, layers);
  o.values["mamba2@50"] = {{"op", mamba.delta_op}, {"ft", mamba.delta_ft}, {"param", mamba.delta_param}};
  o.note(std::to_string(checked) + " table cells within " + fmt("%.2f", kTablePoints) + " points (worst " +
         fmt("%.4f", worst) + ")");
  return o;
}

// ---------------------------------------------------------------- criterion 2

Outcome band_oracle() {
  Outcome o;
  const std::int64_t n = 16;
  double worst = 0;
  bool monotone = true;
  double worst_full = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(mix_seed(2024, seed));
    std::vector<double> a(static_cast<std::size_t>(n * n));
    for (auto& v : a) v = rng.uniform() * 3.0;
    for (std::int64_t k = 0; k < n; ++k) {
      double brute = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          if (std::abs(i - j) <= k) brute += a[static_cast<std::size_t>(i * n + j)];
        }
      }
      brute /= static_cast<double>(n);
      worst = std::max(worst, std::abs(band_locality(a, n, k) - brute));
    }
    // Row-normalised copy for the stochastic properties.
    for (std::int64_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::int64_t j = 0; j < n; ++j) s += a[static_cast<std::size_t>(i * n + j)];
      for (std::int64_t j = 0; j < n; ++j) a[static_cast<std::size_t>(i * n + j)] /= s;
    }
    double prev = -1;
    for (std::int64_t k = 0; k < n; ++k) {
      const double v = band_locality(a, n, k);
      monotone = monotone && v >= prev;
      prev = v;
    }
    worst_full = std::max(worst_full, std::abs(band_locality(a, n, n - 1) - 1.0));
  }
  o.values = {{"max_abs_error", worst}, {"max_full_band_error", worst_full}, {"monotone", monotone}};
  o.require(worst <= kBandTol, "brute-force error " + fmt("%.3g", worst));
  o.require(monotone, "monotonicity in k");
  o.require(worst_full <= kBandTol, "L_{N-1} = 1 (error " + fmt("%.3g", worst_full) + ")");
  o.note("200 matrices, max error " + fmt("%.2g", worst) + ", L_15 error " + fmt("%.2g", worst_full));
  return o;
}

// ---------------------------------------------------------------- criterion 3

void jitter(const ParameterList& params, std::uint64_t seed, double std) {
  Rng rng(seed);
  for (const auto& p : params) {
    Tensor v = p.value;
    v.assign(ops::add(v.detach(), rng.normal_tensor(v.shape(), std, v.dtype())));
  }
}

// Central differences on the attention key bias, whose true gradient is zero.
double key_bias_error(TokenMixer& m, const std::function<Tensor()>& loss, double& key_grad) {
  Tensor& bias = m.param("qkv.bias");
  const std::int64_t d = m.config().width;
  bias.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  const auto g = bias.grad().to_vector();
  double worst = 0;
  key_grad = 0;
  for (std::int64_t i = 0; i < 3 * d; ++i) {
    auto v = bias.to_vector();
    const double orig = v[static_cast<std::size_t>(i)];
    v[static_cast<std::size_t>(i)] = orig + kGradStep;
    bias.assign(Tensor::from_values(v, bias.shape(), f64));
    const double up = loss().item();
    v[static_cast<std::size_t>(i)] = orig - kGradStep;
    bias.assign(Tensor::from_values(v, bias.shape(), f64));
    const double down = loss().item();
    v[static_cast<std::size_t>(i)] = orig;
    bias.assign(Tensor::from_values(v, bias.shape(), f64));
    const double numeric = (up - down) / (2 * kGradStep);
    const double analytic = g[static_cast<std::size_t>(i)];
    if (i >= d && i < 2 * d) {
      key_grad = std::max(key_grad, std::abs(analytic));
    } else {
      worst = std::max(worst, std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12));
    }
  }
  bias.zero_grad();
  return worst;
}

Outcome gradients() {
  Outcome o;
  struct ShapeCase {
    std::int64_t b, n, d;
  };
  const ShapeCase shapes[3] = {{2, 5, 4}, {1, 7, 6}, {3, 4, 8}};
  double worst = 0;
  int checks = 0;
  for (int s = 0; s < 3; ++s) {
    const auto [b, n, d] = shapes[s];
    const std::vector<OperatorConfig> kinds = {
        OperatorConfig::mha(d, 2, 1),
        OperatorConfig::swa(d, 2, 1, 2),
        OperatorConfig::hyena(OperatorKind::kHyenaSe, d, 3, 3),
        OperatorConfig::hyena(OperatorKind::kHyenaX, d, 3, 4),
        OperatorConfig::hyena(OperatorKind::kHyenaY, d, 3, 5),
        OperatorConfig::mlp(d, 2.0, 6),
        OperatorConfig::hyena_x_mlp(d, 2.0, 3, 7),
    };
    Rng rng(mix_seed(33, static_cast<std::uint64_t>(s)));
    for (const auto& c : kinds) {
      TokenMixer m(c, f64);
      jitter(m.parameters(), mix_seed(34, static_cast<std::uint64_t>(s)), 0.3);
      const Tensor x = rng.normal_tensor({b, n, d}, 1.0, f64);
      const Tensor w = rng.normal_tensor({b, n, d}, 1.0, f64);
      const std::string where = std::string(to_string(c.kind)) + " [" + std::to_string(b) + "," + std::to_string(n) +
                                "," + std::to_string(d) + "]";
      const auto rx =
          grad_check([&](const Tensor& v) { return ops::sum(ops::mul(m.forward(v), w)); }, x, kGradStep, kGradRelTol);
      ++checks;
      worst = std::max(worst, rx.max_error);
      o.require(rx.pass, where + " input (" + fmt("%.3g", rx.max_error) + ")");
      for (auto& p : m.parameters()) {
        const auto loss = [&] { return ops::sum(ops::mul(m.forward(x), w)); };
        ++checks;
        if (p.name == "qkv.bias") {
          double key_grad = 0;
          const double err = key_bias_error(m, loss, key_grad);
          worst = std::max(worst, err);
          o.require(err <= kGradRelTol, where + " qkv.bias (" + fmt("%.3g", err) + ")");
          o.require(key_grad <= kKeyBiasAbsTol, where + " key bias gradient " + fmt("%.3g", key_grad));
          continue;
        }
        const auto rp = grad_check_leaf(loss, p.value, kGradStep, kGradRelTol);
        worst = std::max(worst, rp.max_error);
        o.require(rp.pass, where + " " + p.name + " (" + fmt("%.3g", rp.max_error) + ")");
      }
    }
  }
  // Full XS model in f64 on three batch shapes; sampled coordinates per leaf.
  ModelGraph g = build_model(DiTConfig::xs(), f64);
  jitter(g.named_parameters(), 35, 0.05);
  const auto& cfg = g.config();
  for (int s = 0; s < 3; ++s) {
    const std::int64_t b = s + 1;
    Rng rng(mix_seed(36, static_cast<std::uint64_t>(s)));
    const Tensor z = rng.normal_tensor({b, cfg.image_size, cfg.image_size, cfg.channels}, 1.0, f64);
    const Tensor w = rng.normal_tensor(z.shape(), 1.0, f64);
    std::vector<std::int64_t> t, c;
    for (std::int64_t i = 0; i < b; ++i) {
      t.push_back(static_cast<std::int64_t>(rng.below(1000)));
      c.push_back(static_cast<std::int64_t>(rng.below(9)));
    }
    const auto loss = [&] { return ops::sum(ops::mul(g.forward(z, t, c), w)); };
    const auto params = g.named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      // Key bias shifts every score in a row equally; its gradient is zero.
      if (p.name.ends_with("qkv.bias")) continue;
      // A third of the leaves per shape, rotating so every leaf is covered once.
      if (i % 3 != static_cast<std::size_t>(s)) continue;
      const auto r = grad_check_leaf(loss, p.value, kGradStep, kGradRelTol, 6, mix_seed(37, i));
      ++checks;
      worst = std::max(worst, r.max_error);
      o.require(r.pass, "XS model B=" + std::to_string(b) + " " + p.name + " (" + fmt("%.3g", r.max_error) + ")");
    }
  }
  o.values = {{"checks", checks}, {"max_relative_error", worst}};
  o.note(std::to_string(checks) + " gradient checks, worst relative error " + fmt("%.2g", worst));
  return o;
}

// ---------------------------------------------------------------- criterion 4

Tensor delta_filter(std::int64_t channels, std::int64_t taps) {
  std::vector<double> v(static_cast<std::size_t>(channels * taps), 0.0);
  for (std::int64_t c = 0; c < channels; ++c) v[static_cast<std::size_t>(c * taps)] = 1.0;
  return Tensor::from_values(v, {channels, taps}, f64);
}

// out[r, j] = sum_k x[r, k] w[k, j] + b[j]
std::vector<double> dense(const std::vector<double>& x, std::int64_t rows, std::int64_t in, const Tensor& w,
                          const Tensor& b) {
  const std::int64_t out = w.dim(1);
  const auto wv = w.to_vector();
  const auto bv = b.to_vector();
  std::vector<double> y(static_cast<std::size_t>(rows * out));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < out; ++j) {
      double s = bv[static_cast<std::size_t>(j)];
      for (std::int64_t k = 0; k < in; ++k) {
        s += x[static_cast<std::size_t>(r * in + k)] * wv[static_cast<std::size_t>(k * out + j)];
      }
      y[static_cast<std::size_t>(r * out + j)] = s;
    }
  }
  return y;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome reductions() {
  Outcome o;
  // Sliding window covering every token is full attention.
  double swa_err = 0;
  for (std::int64_t n : {4, 9, 16}) {
    Rng rng(40 + static_cast<std::uint64_t>(n));
    TokenMixer mha(OperatorConfig::mha(8, 2, 9), f64);
    for (std::int64_t w : {n - 1, n + 3}) {
      TokenMixer swa(OperatorConfig::swa(8, 2, w, 9), f64);
      const Tensor x = rng.normal_tensor({2, n, 8}, 1.0, f64);
      swa_err = std::max(swa_err, max_abs_diff(mha.forward(x), swa.forward(x)));
    }
  }
  o.require(swa_err <= kReductionTol, "SWA(w >= N-1) vs MHA " + fmt("%.3g", swa_err));

  // Delta filters reduce every Hyena mixer to M((xW)(xU)(xP)).
  double hyena_err = 0;
  const std::int64_t d = 6, n = 7;
  Rng rng(41);
  const Tensor x = rng.normal_tensor({2, n, d}, 1.0, f64);
  std::vector<TokenMixer> mixers{TokenMixer(OperatorConfig::hyena(OperatorKind::kHyenaSe, d, 4, 1), f64),
                                 TokenMixer(OperatorConfig::hyena(OperatorKind::kHyenaX, d, 4, 1), f64),
                                 TokenMixer(OperatorConfig::hyena(OperatorKind::kHyenaY, d, 1, 1), f64)};
  Rng prng(42);
  const Tensor in_w = prng.normal_tensor({d, 3 * d}, 0.5, f64), in_b = prng.normal_tensor({3 * d}, 0.5, f64);
  const Tensor out_w = prng.normal_tensor({d, d}, 0.5, f64), out_b = prng.normal_tensor({d}, 0.5, f64);
  for (auto& m : mixers) {
    for (auto& p : m.parameters()) {
      if (p.name.starts_with("filter_") && !p.name.ends_with("bias")) {
        p.value.assign(delta_filter(p.value.dim(0), p.value.dim(1)));
      } else if (p.name.starts_with("filter_")) {
        p.value.assign(Tensor::zeros(p.value.shape(), f64));
      }
    }
    m.param("in_proj.weight").assign(in_w);
    m.param("in_proj.bias").assign(in_b);
    m.param("out_proj.weight").assign(out_w);
    m.param("out_proj.bias").assign(out_b);
  }
  const auto z = dense(x.to_vector(), 2 * n, d, in_w, in_b);
  std::vector<double> gated(static_cast<std::size_t>(2 * n * d));
  for (std::int64_t r = 0; r < 2 * n; ++r) {
    for (std::int64_t c = 0; c < d; ++c) {
      const auto at = [&](std::int64_t part) { return z[static_cast<std::size_t>(r * 3 * d + part * d + c)]; };
      gated[static_cast<std::size_t>(r * d + c)] = at(0) * at(1) * at(2);
    }
  }
  const auto ref = dense(gated, 2 * n, d, out_w, out_b);
  for (const auto& m : mixers) hyena_err = std::max(hyena_err, max_diff(m.forward(x).to_vector(), ref));
  o.require(hyena_err <= kReductionTol, "Hyena delta-filter reduction " + fmt("%.3g", hyena_err));

  // Perturbing tokens after position s leaves outputs up to s bit-identical.
  bool causal = true;
  bool reach = true;
  for (auto kind : {OperatorKind::kHyenaSe, OperatorKind::kHyenaX, OperatorKind::kHyenaY}) {
    const std::int64_t len = 12, k = 4, w = 3;
    TokenMixer m(OperatorConfig::hyena(kind, w, k, 2), f64);
    jitter(m.parameters(), 43, 0.3);
    Rng xr(44);
    const Tensor base = xr.normal_tensor({1, len, w}, 1.0, f64);
    const auto y0 = m.forward(base).to_vector();
    for (std::int64_t s = 0; s < len; ++s) {
      auto xv = base.to_vector();
      for (std::int64_t t = s + 1; t < len; ++t) {
        for (std::int64_t c = 0; c < w; ++c) xv[static_cast<std::size_t>(t * w + c)] += 2.5;
      }
      const auto y1 = m.forward(Tensor::from_values(xv, {1, len, w}, f64)).to_vector();
      for (std::int64_t i = 0; i < (s + 1) * w; ++i) causal = causal && y0[static_cast<std::size_t>(i)] == y1[static_cast<std::size_t>(i)];
    }
    // A change at token 0 reaches exactly the receptive field of the kind.
    const std::int64_t field = kind == OperatorKind::kHyenaSe ? 2 * (k - 1) : k - 1;
    auto xv = base.to_vector();
    xv[0] += 1.0;
    const auto y2 = m.forward(Tensor::from_values(xv, {1, len, w}, f64)).to_vector();
    for (std::int64_t t = field + 1; t < len; ++t) {
      for (std::int64_t c = 0; c < w; ++c) reach = reach && y0[static_cast<std::size_t>(t * w + c)] == y2[static_cast<std::size_t>(t * w + c)];
    }
    bool touched = false;
    for (std::int64_t c = 0; c < w; ++c) touched = touched || y0[static_cast<std::size_t>(field * w + c)] != y2[static_cast<std::size_t>(field * w + c)];
    reach = reach && touched;
  }
  o.require(causal, "causal invariance");
  o.require(reach, "receptive field extent");
  o.values = {{"swa_vs_mha", swa_err}, {"hyena_reduction", hyena_err}, {"causal_exact", causal}, {"receptive_field_exact", reach}};
  o.note("SWA/MHA " + fmt("%.2g", swa_err) + ", Hyena reduction " + fmt("%.2g", hyena_err) +
         ", causality and receptive fields exact");
  return o;
}

// ---------------------------------------------------------------- criteria 5-8

std::vector<TokenMixer> distill_all(const ModelGraph& teacher, const BlobDataset& data, const NoiseSchedule& s,
                                    const GraftPlan& plan, const std::vector<TokenMixer>& init, const Protocol& p,
                                    json& log) {
  std::vector<SlotRef> slots;
  for (const auto& t : plan.targets) slots.push_back({t.layer, t.slot});
  const auto acts = capture_activations(teacher, data, slots, s, p.capture);
  std::vector<DistillJob> jobs;
  for (std::size_t i = 0; i < init.size(); ++i) {
    DistillConfig dc = p.distill;
    dc.seed = mix_seed(p.distill.seed, static_cast<std::uint64_t>(plan.targets[i].layer));
    jobs.push_back({init[i], &acts[i], dc});
  }
  const auto results = distill_many(jobs, 1);
  std::vector<TokenMixer> ops;
  for (std::size_t i = 0; i < results.size(); ++i) {
    ops.push_back(results[i].op);
    log.push_back({{"layer", plan.targets[i].layer},
                   {"initial_val", results[i].initial_val_loss},
                   {"final_val", results[i].val_loss.back()}});
  }
  return ops;
}

Outcome self_grafting(Shared& sh) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Teacher& t = sh.get_teacher();
  const Protocol& p = sh.p;
  o.values["teacher"] = {{"final_loss", t.final_loss}, {"val_loss", t.val_loss}, {"accuracy", t.accuracy},
                         {"train_seconds", t.train_seconds}};
  o.require(t.final_loss < kTeacherLoss, "(a) teacher final loss " + fmt("%.4f", t.final_loss));
  o.require(t.accuracy >= kTeacherAccuracy, "(a) teacher accuracy " + fmt("%.3f", t.accuracy));

  const SelfGraft sg = self_graft(t.model, Slot::kMixer, 1.0, Strategy::kFull, 21);
  const ModelGraph random = integrate(t.model, sg.plan, sg.ops);
  const double random_acc = sh.accuracy(random);
  o.values["random_init"] = {{"accuracy", random_acc}, {"val_loss", sh.val_loss(random)}};
  o.require(random_acc < kRandomAccuracy, "(b) random-init accuracy " + fmt("%.3f", random_acc));
  {
    // Diagnostics for (b): attention removed outright, and the MLP-slot control.
    SelfGraft none = self_graft(t.model, Slot::kMixer, 1.0, Strategy::kFull, 21);
    for (auto& op : none.ops) op.param("proj.weight").assign(Tensor::zeros(op.param("proj.weight").shape()));
    const SelfGraft mlp = self_graft(t.model, Slot::kMlp, 1.0, Strategy::kFull, 21);
    const double none_acc = sh.accuracy(integrate(t.model, none.plan, none.ops));
    const double mlp_acc = sh.accuracy(integrate(t.model, mlp.plan, mlp.ops));
    o.values["attention_removed"] = {{"accuracy", none_acc}};
    o.values["mlp_random_init"] = {{"accuracy", mlp_acc}};
    if (random_acc >= kRandomAccuracy) {
      o.note("attention removed entirely: acc " + fmt("%.3f", none_acc) + "; random-init MLP self-graft: acc " +
             fmt("%.3f", mlp_acc));
    }
  }

  json log = json::array();
  const auto ops = distill_all(t.model, sh.train, sh.schedule, sg.plan, sg.ops, p, log);
  ModelGraph grafted = integrate(t.model, sg.plan, ops).clone();
  const double distilled_loss = sh.val_loss(grafted);
  finetune(grafted, sh.train, sh.schedule, p.finetune);
  const double loss = sh.val_loss(grafted);
  const double acc = sh.accuracy(grafted);
  o.values["distill"] = log;
  o.values["recovered"] = {{"val_loss_after_distill", distilled_loss}, {"val_loss", loss}, {"accuracy", acc},
                           {"loss_ratio", loss / t.val_loss}, {"accuracy_ratio", acc / t.accuracy}};
  o.require(loss <= kRecoveredLoss * t.val_loss, "(c) val loss " + fmt("%.4f", loss) + " vs teacher " + fmt("%.4f", t.val_loss));
  o.require(acc >= kRecoveredAccuracy * t.accuracy, "(c) accuracy " + fmt("%.3f", acc) + " vs teacher " + fmt("%.3f", t.accuracy));
  o.note("teacher loss " + fmt("%.4f", t.final_loss) + " acc " + fmt("%.3f", t.accuracy) + "; random-init acc " +
         fmt("%.3f", random_acc) + "; recovered loss x" + fmt("%.3f", loss / t.val_loss) + " acc x" +
         fmt("%.3f", acc / t.accuracy));
  // Teacher training is part of this criterion's budget even when cached.
  o.seconds = seconds_since(t0) + (t.cached ? t.train_seconds : 0);
  return o;
}

Outcome objective_direction(Shared& sh) {
  Outcome o;
  Teacher& t = sh.get_teacher();
  const Protocol& p = sh.p;
  const std::vector<int> mha_layers{4, 5, 6, 7};
  const std::vector<int> mlp_layers{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<SlotRef> slots;
  for (int l : mha_layers) slots.push_back({l, Slot::kMixer});
  for (int l : mlp_layers) slots.push_back({l, Slot::kMlp});
  const auto acts = capture_activations(t.model, sh.train, slots, sh.schedule, p.capture);
  bool mha_ok = false, mlp_ok = false;
  json rows = json::array();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& ref = slots[i];
    OperatorConfig cfg = t.model.blocks()[static_cast<std::size_t>(ref.layer)].op(ref.slot).config();
    cfg.seed = mix_seed(61, static_cast<std::uint64_t>(ref.layer));
    double held_out[2];
    const ObjectiveKind kinds[2] = {ObjectiveKind::kL1, ObjectiveKind::kL2};
    for (int k = 0; k < 2; ++k) {
      DistillConfig dc = p.distill;
      dc.objective = {kinds[k]};
      dc.seed = mix_seed(62, static_cast<std::uint64_t>(ref.layer));
      held_out[k] = distill_operator(TokenMixer(cfg), acts[i], dc).val_l2.back();
    }
    rows.push_back({{"layer", ref.layer}, {"slot", to_string(ref.slot)}, {"l1_held_out_l2", held_out[0]},
                    {"l2_held_out_l2", held_out[1]}});
    if (ref.slot == Slot::kMixer) mha_ok = mha_ok || held_out[0] <= held_out[1];
    if (ref.slot == Slot::kMlp) mlp_ok = mlp_ok || held_out[1] <= held_out[0];
  }
  o.values["layers"] = rows;
  o.require(mha_ok, "no deep MHA layer where L1 <= L2");
  o.require(mlp_ok, "no MLP layer where L2 <= L1");
  std::string s;
  for (const auto& r : rows) {
    s += std::string(r["slot"]) + std::to_string(r["layer"].get<int>()) + " " +
         fmt("%.4g", r["l1_held_out_l2"].get<double>()) + "/" + fmt("%.4g", r["l2_held_out_l2"].get<double>()) + " ";
  }
  o.note("held-out L2 (L1-trained/L2-trained): " + s);
  return o;
}

Tensor run_stack(const ModelGraph& g, Tensor x, const Tensor& cond) {
  for (int i = 0; i < g.effective_depth(); ++i) x = g.run_entry(i, x, cond);
  return x;
}

Outcome restructuring(Shared& sh) {
  Outcome o;
  const DiTConfig xl = DiTConfig::xl2();
  const std::int64_t merge = param_count_parallel(xl) - param_count(xl);
  o.values["xl2"] = {{"params", param_count(xl)}, {"params_parallel", param_count_parallel(xl)}, {"merge", merge}};
  o.require(merge == 14 * (2 * 1152 * 1152 + 1152), "merge parameter count " + std::to_string(merge));
  o.require(std::llround(static_cast<double>(merge) / 1e5) == 372, "merge params ~37.2M");
  o.require(std::llround(static_cast<double>(param_count_parallel(xl)) / 1e6) == 712, "total ~712M");
  o.require(xl.depth / 2 == 14, "28 -> 14");

  // First-order agreement at Merge = [I | I] as the residual gates shrink.
  DiTConfig c;
  c.depth = 4;
  c.width = 16;
  c.heads = 2;
  c.image_size = 8;
  c.num_classes = 4;
  c.freq_dim = 16;
  ModelGraph g = build_model(c, f64);
  jitter(g.named_parameters(), 71, 0.1);
  Rng rng(72);
  const Tensor x = rng.normal_tensor({2, 16, 16}, 1.0, f64);
  const std::vector<std::int64_t> ts{10, 700}, cs{1, 4};
  std::vector<double> errors;
  for (double s : {0.08, 0.04, 0.02, 0.01}) {
    for (auto& b : g.blocks()) {
      std::vector<double> bias(static_cast<std::size_t>(6 * c.width), 0.0);
      for (std::int64_t i = 0; i < c.width; ++i) {
        bias[static_cast<std::size_t>(2 * c.width + i)] = s;
        bias[static_cast<std::size_t>(5 * c.width + i)] = s;
      }
      b.ada_weight.assign(Tensor::zeros(b.ada_weight.shape(), f64));
      b.ada_bias.assign(Tensor::from_values(bias, {6 * c.width}, f64));
    }
    const ModelGraph p = parallelize_pairs(g);
    const Tensor cond = g.conditioning(ts, cs);
    errors.push_back(max_abs_diff(run_stack(p, x, cond), run_stack(g, x, cond)));
  }
  double min_ratio = 1e300;
  for (std::size_t i = 1; i < errors.size(); ++i) min_ratio = std::min(min_ratio, errors[i - 1] / errors[i]);
  o.values["first_order_errors"] = errors;
  o.require(min_ratio >= kFirstOrderRatio, "error ratio per halving " + fmt("%.3f", min_ratio));

  Teacher& t = sh.get_teacher();
  ModelGraph student = parallelize_pairs(t.model);
  o.require(student.effective_depth() == 4, "XS effective depth " + std::to_string(student.effective_depth()));
  const auto acts = capture_pair_activations(t.model, sh.train, sh.schedule, sh.p.capture);
  json pairs = json::array();
  for (const auto& a : acts) {
    const PairDistillResult r = distill_pair(student, a, sh.p.pair_distill);
    pairs.push_back({{"entry", a.entry}, {"initial_val", r.initial_val_loss}, {"final_val", r.val_loss.back()}});
  }
  const double before_ft = sh.val_loss(student);
  finetune(student, sh.train, sh.schedule, sh.p.pair_finetune);
  const double loss = sh.val_loss(student);
  o.values["pairs"] = pairs;
  o.values["parallel"] = {{"val_loss_after_distill", before_ft}, {"val_loss", loss}, {"ratio", loss / t.val_loss}};
  o.require(loss <= kParallelLoss * t.val_loss, "val loss " + fmt("%.4f", loss) + " vs teacher " + fmt("%.4f", t.val_loss));
  o.note("merge " + std::to_string(merge) + " params, total " + std::to_string(param_count_parallel(xl)) +
         "; first-order ratio >= " + fmt("%.2f", min_ratio) + "; XS depth 8->4, val loss x" +
         fmt("%.3f", loss / t.val_loss));
  return o;
}

Outcome heuristic_direction(Shared& sh) {
  Outcome o;
  o.soft = true;
  Teacher& t = sh.get_teacher();
  const OperatorConfig rep = OperatorConfig::hyena(OperatorKind::kHyenaX, t.model.config().width, 4, 81);
  double loss[2];
  const Strategy strategies[2] = {Strategy::kInterleaved, Strategy::kDeep};
  for (int i = 0; i < 2; ++i) {
    const GraftPlan plan = make_plan(strategies[i], 0.5, t.model.config().depth, Slot::kMixer, rep);
    std::vector<TokenMixer> init;
    for (const auto& tg : plan.targets) init.emplace_back(tg.replacement);
    json log = json::array();
    const auto ops = distill_all(t.model, sh.train, sh.schedule, plan, init, sh.p, log);
    ModelGraph g = integrate(t.model, plan, ops).clone();
    finetune(g, sh.train, sh.schedule, sh.p.finetune);
    loss[i] = sh.val_loss(g);
    o.values[std::string(to_string(strategies[i]))] = {{"layers", plan.layers()}, {"val_loss", loss[i]}, {"distill", log}};
  }
  o.require(loss[0] <= loss[1], "interleaved above deep");
  o.note("interleaved " + fmt("%.5f", loss[0]) + " vs deep " + fmt("%.5f", loss[1]));
  return o;
}

// ---------------------------------------------------------------- criterion 9

Outcome determinism(const fs::path& scratch) {
  Outcome o;
  DiTConfig c = DiTConfig::xs();
  const BlobDataset data = BlobDataset::generate(512, 91);
  const NoiseSchedule s;
  TrainConfig tc;
  tc.steps = 30;
  tc.batch = 16;
  tc.lr = 1e-3;
  tc.warmup = 5;
  tc.seed = 92;
  ModelGraph a = build_model(c), b = build_model(c);
  const auto la = train(a, data, s, tc).losses;
  const auto lb = train(b, data, s, tc).losses;
  o.require(la == lb, "loss traces differ");

  SampleConfig sc;
  sc.steps = 10;
  sc.seed = 93;
  const std::vector<std::int64_t> labels{0, 1, 2, 3, 4, 5, 6, 7};
  o.require(bit_identical(sample(a, s, sc, labels), sample(b, s, sc, labels)), "samples differ");

  fs::create_directories(scratch);
  save_checkpoint(a, scratch / "a.ckpt");
  save_checkpoint(b, scratch / "b.ckpt");
  o.require(read_text_file(scratch / "a.ckpt") == read_text_file(scratch / "b.ckpt"), "checkpoint bytes differ");
  const ModelGraph back = load_checkpoint(scratch / "a.ckpt");
  Rng rng(94);
  const Tensor z = rng.normal_tensor({4, 16, 16, 1}, 1.0);
  const std::vector<std::int64_t> t{0, 10, 500, 999}, y{0, 3, 7, 8};
  o.require(bit_identical(a.forward(z, t, y), back.forward(z, t, y)), "round-trip forward differs");

  CaptureConfig cc;
  cc.count = 128;
  cc.seed = 95;
  const std::vector<SlotRef> slots{{1, Slot::kMixer}, {4, Slot::kMlp}, {6, Slot::kMixer}};
  const auto acts = capture_activations(a, data, slots, s, cc);
  std::vector<DistillJob> jobs;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    DistillConfig dc;
    dc.epochs = 3;
    dc.seed = 96 + i;
    OperatorConfig cfg = slots[i].slot == Slot::kMixer ? OperatorConfig::hyena(OperatorKind::kHyenaX, c.width, 4, 97)
                                                       : OperatorConfig::mlp(c.width, 2.0, 98);
    jobs.push_back({TokenMixer(cfg), &acts[i], dc});
  }
  const auto one = distill_many(jobs, 1);
  const auto three = distill_many(jobs, 3);
  bool same = true;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    same = same && one[i].train_loss == three[i].train_loss;
    const auto& pa = one[i].op.parameters();
    const auto& pb = three[i].op.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) same = same && bit_identical(pa[k].value, pb[k].value);
  }
  o.require(same, "distillation depends on the parallel degree");
  fs::remove_all(scratch);
  o.note("loss traces, samples, checkpoint bytes, round-trip forward and 1-vs-3-thread distillation identical");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graftkit acceptance run"};
  std::string only;
  std::string cache;
  std::string report = "acceptance.json";
  app.add_option("--only", only, "comma-separated criteria to run (default: all)");
  app.add_option("--cache", cache, "directory for the trained teacher, reused when its protocol matches");
  app.add_option("--report", report, "JSON file for measured values");
  CLI11_PARSE(app, argc, argv);

  tune_allocator();
  configure_threads();
  std::set<int> selected;
  if (only.empty()) {
    for (int i = 1; i <= 9; ++i) selected.insert(i);
  } else {
    std::stringstream ss(only);
    for (std::string item; std::getline(ss, item, ',');) selected.insert(std::stoi(item));
  }

  Shared shared;
  if (!cache.empty()) shared.cache = fs::path(cache);
  const fs::path scratch = fs::temp_directory_path() / ("graftkit_accept_" + std::to_string(::getpid()));

  const std::pair<int, std::pair<const char*, std::function<Outcome()>>> criteria[] = {
      {1, {"cost table", table_costs}},
      {2, {"band locality oracle", band_oracle}},
      {3, {"gradient integrity", gradients}},
      {4, {"operator reductions", reductions}},
      {9, {"determinism and persistence", [&] { return determinism(scratch); }}},
      {5, {"self-grafting recovery", [&] { return self_grafting(shared); }}},
      {6, {"objective choice direction", [&] { return objective_direction(shared); }}},
      {7, {"depth to width restructuring", [&] { return restructuring(shared); }}},
      {8, {"interleaved vs deep (soft)", [&] { return heuristic_direction(shared); }}},
  };

  json out = json::object();
  bool all = true;
  for (const auto& [id, named] : criteria) {
    if (!selected.count(id)) continue;
    const auto& [name, fn] = named;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(std::string("threw: ") + e.what());
    }
    if (o.seconds == 0) o.seconds = seconds_since(t0);
    const bool in_budget = o.seconds <= kBudget[id];
    if (!in_budget) o.note("over the " + fmt("%.0f", kBudget[id]) + " s budget");
    const bool pass = o.pass && in_budget;
    if (!o.soft) all = all && pass;
    std::cout << "criterion " << id << ": " << (pass ? "PASS" : (o.soft ? "FAIL (soft, not gating)" : "FAIL")) << "  "
              << name << "  [" << fmt("%.1f", o.seconds) << " s]  " << o.detail << std::endl;
    o.values["pass"] = pass;
    o.values["seconds"] = o.seconds;
    out[std::to_string(id)] = o.values;
    write_text_file(report, out.dump(2) + "\n");
  }
  return all ? 0 : 1;
}
