#include "graftkit/graft.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "graftkit/analysis.hpp"
#include "graftkit/ops.hpp"
#include "graftkit/persistence.hpp"
#include "graftkit/rng.hpp"

namespace graftkit {

// ---- plans ----

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kFull: return "full";
    case Strategy::kInterleaved: return "interleaved";
    case Strategy::kTopLocal: return "top_local";
    case Strategy::kLowLocal: return "low_local";
    case Strategy::kDeep: return "deep";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "full") return Strategy::kFull;
  if (name == "interleaved") return Strategy::kInterleaved;
  if (name == "top_local") return Strategy::kTopLocal;
  if (name == "low_local") return Strategy::kLowLocal;
  if (name == "deep") return Strategy::kDeep;
  throw std::invalid_argument("unknown strategy '" + std::string(name) +
                              "' (expected full, interleaved, top_local, low_local or deep)");
}

std::vector<int> GraftPlan::layers() const {
  std::vector<int> out;
  for (const auto& t : targets) out.push_back(t.layer);
  return out;
}

std::int64_t plan_count(double ratio, std::int64_t depth) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("plan: ratio must lie in (0, 1]");
  if (depth < 1) throw std::invalid_argument("plan: depth must be >= 1");
  // The epsilon keeps exact halves such as 0.5 * 7 from rounding down after float error.
  return static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(depth) + 0.5 + 1e-9));
}

std::vector<int> interleaved_layers(std::int64_t count, std::int64_t depth) {
  if (count < 0 || count > depth) throw std::invalid_argument("interleaved_layers: count outside [0, depth]");
  std::vector<int> out;
  for (std::int64_t i = 0; i < depth; ++i) {
    if ((i + 1) * count / depth > i * count / depth) out.push_back(static_cast<int>(i));
  }
  return out;
}

GraftPlan make_plan(Strategy strategy, double ratio, std::int64_t depth, Slot slot, const OperatorConfig& replacement,
                    const LocalityReport* locality) {
  const std::int64_t count = plan_count(ratio, depth);
  if (count < 1) throw std::invalid_argument("plan: ratio selects no layers");
  if (strategy == Strategy::kFull && count != depth) throw std::invalid_argument("plan: full strategy needs ratio 1");
  replacement.validate();
  const bool fits = slot == Slot::kMixer ? is_token_mixer(replacement.kind) : is_channel_mixer(replacement.kind);
  if (!fits) {
    throw std::invalid_argument("plan: " + std::string(to_string(replacement.kind)) + " cannot fill the " +
                                std::string(to_string(slot)) + " slot");
  }

  std::vector<int> layers;
  switch (strategy) {
    case Strategy::kFull:
    case Strategy::kDeep:
      for (std::int64_t i = depth - count; i < depth; ++i) layers.push_back(static_cast<int>(i));
      break;
    case Strategy::kInterleaved:
      layers = interleaved_layers(count, depth);
      break;
    case Strategy::kTopLocal:
    case Strategy::kLowLocal: {
      if (!locality) throw std::invalid_argument("plan: locality strategies need a locality report");
      std::vector<std::pair<double, int>> scored;
      for (int i = 0; i < static_cast<int>(depth); ++i) scored.emplace_back(locality->summary(i), i);
      const bool top = strategy == Strategy::kTopLocal;
      std::stable_sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return top ? a.first > b.first : a.first < b.first;
        return a.second < b.second;
      });
      for (std::int64_t i = 0; i < count; ++i) layers.push_back(scored[static_cast<std::size_t>(i)].second);
      std::sort(layers.begin(), layers.end());
      break;
    }
  }

  GraftPlan plan;
  plan.strategy = strategy;
  plan.ratio = ratio;
  plan.depth = depth;
  plan.slot = slot;
  for (int layer : layers) {
    OperatorConfig cfg = replacement;
    cfg.seed = mix_seed(replacement.seed, static_cast<std::uint64_t>(layer));
    plan.targets.push_back({layer, slot, cfg});
  }
  return plan;
}

// ---- objectives ----

std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kL1: return "l1";
    case ObjectiveKind::kL2: return "l2";
    case ObjectiveKind::kHuber: return "huber";
  }
  return "?";
}

ObjectiveKind parse_objective(std::string_view name) {
  if (name == "l1") return ObjectiveKind::kL1;
  if (name == "l2") return ObjectiveKind::kL2;
  if (name == "huber") return ObjectiveKind::kHuber;
  throw std::invalid_argument("unknown objective '" + std::string(name) + "' (expected l1, l2 or huber)");
}

Tensor RegressionObjective::loss(const Tensor& pred, const Tensor& target) const {
  if (pred.shape() != target.shape()) {
    throw ShapeError("regression loss: prediction " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  const Tensor r = ops::sub(pred, target);
  switch (kind) {
    case ObjectiveKind::kL1: return ops::mean(ops::abs(r));
    case ObjectiveKind::kL2: return ops::mean(ops::mul(r, r));
    case ObjectiveKind::kHuber: return ops::mean(ops::huber(r, delta));
  }
  throw std::logic_error("regression loss: bad kind");
}

double RegressionObjective::pointwise(double r) const {
  const double a = std::abs(r);
  switch (kind) {
    case ObjectiveKind::kL1: return a;
    case ObjectiveKind::kL2: return r * r;
    case ObjectiveKind::kHuber: return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
  }
  throw std::logic_error("regression loss: bad kind");
}

RegressionObjective default_objective(Slot slot) {
  return {slot == Slot::kMixer ? ObjectiveKind::kL1 : ObjectiveKind::kL2, 1.0};
}

// ---- capture ----

namespace {

// Accumulates [*, rest...] f32 rows from successive batches.
struct RowBuffer {
  std::vector<float> values;
  Shape row_shape;

  void append(const Tensor& t) {
    const Tensor f = t.dtype() == DType::kF32 ? t : t.to(DType::kF32);
    if (row_shape.empty()) row_shape.assign(f.shape().begin() + 1, f.shape().end());
    const auto d = f.data<float>();
    values.insert(values.end(), d.begin(), d.end());
  }
  Tensor take(std::int64_t rows) {
    Shape shape{rows};
    shape.insert(shape.end(), row_shape.begin(), row_shape.end());
    return Tensor::from_storage(std::move(values), shape);
  }
};

// Rows `idx` of a [n, ...] tensor as a fresh tensor of `dtype`.
Tensor gather_rows(const Tensor& src, std::span<const std::int64_t> idx, DType dtype) {
  const std::int64_t row = src.numel() / src.dim(0);
  Shape shape = src.shape();
  shape[0] = static_cast<std::int64_t>(idx.size());
  return dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> out(idx.size() * static_cast<std::size_t>(row));
    dispatch(src.dtype(), [&](auto stag) {
      using S = decltype(stag);
      const auto d = src.data<S>();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const S* from = d.data() + idx[i] * row;
        std::transform(from, from + row, out.begin() + static_cast<std::ptrdiff_t>(i) * row,
                       [](S v) { return static_cast<T>(v); });
      }
    });
    return Tensor::from_storage(std::move(out), shape);
  });
}

struct Draw {
  std::vector<std::int64_t> idx;
  std::vector<std::int64_t> labels;
  Tensor z_t;
  DiffusionDraw diffusion;
};

Draw draw_batch(Rng& rng, const ModelGraph& g, const BlobDataset& data, const NoiseSchedule& s, std::int64_t n,
                double dropout) {
  Draw d;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(data.size())));
    d.idx.push_back(j);
    d.labels.push_back(data.labels[static_cast<std::size_t>(j)]);
  }
  const Tensor z = data.gather(d.idx, g.dtype());
  d.diffusion = draw_diffusion(rng, s, z.shape(), d.labels, dropout, g.config().null_class(), g.dtype());
  d.z_t = corrupt(s, z, d.diffusion.t, d.diffusion.eps);
  return d;
}

void check_capture(const ModelGraph& teacher, const BlobDataset& data, const CaptureConfig& cfg) {
  if (cfg.count < 1) throw std::invalid_argument("capture: count must be >= 1");
  if (cfg.batch < 1) throw std::invalid_argument("capture: batch must be >= 1");
  if (data.size() < 1) throw std::invalid_argument("capture: empty dataset");
  if (data.side != teacher.config().image_size) throw std::invalid_argument("capture: image size differs from model");
}

}  // namespace

std::vector<ActivationDataset> capture_activations(const ModelGraph& teacher, const BlobDataset& data,
                                                   std::span<const SlotRef> slots, const NoiseSchedule& s,
                                                   const CaptureConfig& cfg) {
  check_capture(teacher, data, cfg);
  if (slots.empty()) throw std::invalid_argument("capture: no slots requested");
  const int depth = static_cast<int>(teacher.blocks().size());
  for (const auto& r : slots) {
    if (r.layer < 0 || r.layer >= depth) {
      throw std::out_of_range("capture: layer " + std::to_string(r.layer) + " outside [0, " + std::to_string(depth) +
                              ")");
    }
    if (cfg.modulation_aware && r.slot != Slot::kMixer) {
      throw std::invalid_argument("capture: modulation-aware targets apply to the mixer slot only");
    }
  }
  const std::string fp = fingerprint(teacher);
  const std::size_t m = slots.size();
  std::vector<RowBuffer> in(m), out(m), gates(m);
  std::vector<ActivationDataset> sets(m);

  Rng rng(cfg.seed);
  for (std::int64_t done = 0; done < cfg.count;) {
    const std::int64_t n = std::min(cfg.batch, cfg.count - done);
    const Draw d = draw_batch(rng, teacher, data, s, n, cfg.cfg_dropout);
    ForwardHooks hooks;
    hooks.on_operator = [&](const OperatorCall& call) {
      for (std::size_t i = 0; i < m; ++i) {
        if (slots[i].layer != call.block || slots[i].slot != call.slot) continue;
        in[i].append(call.input);
        if (cfg.modulation_aware) {
          out[i].append(ops::mul(call.gate, call.output));
          gates[i].append(ops::reshape(call.gate, {call.gate.dim(0), call.gate.dim(2)}));
        } else {
          out[i].append(call.output);
        }
      }
    };
    teacher.forward(d.z_t, d.diffusion.t, d.diffusion.c, &hooks);
    for (auto& set : sets) {
      set.t.insert(set.t.end(), d.diffusion.t.begin(), d.diffusion.t.end());
      set.c.insert(set.c.end(), d.diffusion.c.begin(), d.diffusion.c.end());
    }
    done += n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    sets[i].layer = slots[i].layer;
    sets[i].slot = slots[i].slot;
    sets[i].inputs = in[i].take(cfg.count);
    sets[i].targets = out[i].take(cfg.count);
    if (cfg.modulation_aware) sets[i].gates = gates[i].take(cfg.count);
    sets[i].teacher_fingerprint = fp;
    sets[i].modulation_aware = cfg.modulation_aware;
  }
  return sets;
}

ActivationDataset capture_activations(const ModelGraph& teacher, const BlobDataset& data, int layer, Slot slot,
                                      const NoiseSchedule& s, const CaptureConfig& cfg) {
  const SlotRef one[] = {{layer, slot}};
  return std::move(capture_activations(teacher, data, one, s, cfg).front());
}

// ---- distillation ----

namespace {

struct Split {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
};

Split split_records(std::int64_t n, double val_split, std::uint64_t seed) {
  if (!(val_split >= 0.0 && val_split < 1.0)) throw std::invalid_argument("distill: val_split must lie in [0, 1)");
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(seed, 0));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto nv = static_cast<std::int64_t>(std::floor(val_split * static_cast<double>(n)));
  Split s;
  s.val.assign(perm.begin(), perm.begin() + nv);
  s.train.assign(perm.begin() + nv, perm.end());
  if (s.train.empty()) throw std::invalid_argument("distill: no training records after the validation split");
  return s;
}

struct RegressionTrace {
  std::vector<double> train, val, val_l2;
  double init_train = 0, init_val = 0, init_val_l2 = 0;
};

using Predict = std::function<Tensor(std::span<const std::int64_t>)>;
using Target = std::function<Tensor(std::span<const std::int64_t>)>;

// Mean objective value over `idx`, evaluated in chunks without a tape.
double evaluate(const Predict& predict, const Target& target, std::span<const std::int64_t> idx,
                const RegressionObjective& obj) {
  if (idx.empty()) return 0.0;
  constexpr std::size_t kChunk = 256;
  double total = 0;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    const auto part = idx.subspan(start, std::min(kChunk, idx.size() - start));
    total += obj.loss(predict(part), target(part)).item() * static_cast<double>(part.size());
  }
  return total / static_cast<double>(idx.size());
}

RegressionTrace fit(ParameterList params, std::int64_t n, const DistillConfig& cfg, const Predict& predict,
                    const Target& target) {
  if (cfg.epochs < 0) throw std::invalid_argument("distill: epochs must be >= 0");
  if (cfg.batch < 1) throw std::invalid_argument("distill: batch must be >= 1");
  const Split split = split_records(n, cfg.val_split, cfg.seed);
  const RegressionObjective l2{ObjectiveKind::kL2, 1.0};
  for (auto& p : params) p.value.set_requires_grad(true);

  RegressionTrace tr;
  auto measure = [&](double& train, double& val, double& val_l2) {
    train = evaluate(predict, target, split.train, cfg.objective);
    val = evaluate(predict, target, split.val, cfg.objective);
    val_l2 = evaluate(predict, target, split.val, l2);
  };
  measure(tr.init_train, tr.init_val, tr.init_val_l2);

  AdamW opt(params, AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<std::int64_t> order = split.train;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 1));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::span<const std::int64_t> part(order.data() + start,
                                               std::min<std::size_t>(static_cast<std::size_t>(cfg.batch),
                                                                     order.size() - start));
      double value = 0;
      try {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = cfg.objective.loss(predict(part), target(part));
        value = loss.item();
        if (!std::isfinite(value)) throw NumericError("non-finite loss");
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw DivergenceError("distillation diverged in epoch " + std::to_string(epoch) + ": " + e.what(), tr.train);
      }
      opt.clip_grad_norm(cfg.clip);
      opt.step(cfg.lr);
      opt.zero_grad();
    }
    double t = 0, v = 0, v2 = 0;
    try {
      measure(t, v, v2);
    } catch (const NumericError& e) {
      throw DivergenceError("distillation diverged in epoch " + std::to_string(epoch) + ": " + e.what(), tr.train);
    }
    if (!std::isfinite(t)) throw DivergenceError("distillation diverged in epoch " + std::to_string(epoch), tr.train);
    tr.train.push_back(t);
    tr.val.push_back(v);
    tr.val_l2.push_back(v2);
  }
  for (auto& p : params) p.value.zero_grad();
  return tr;
}

}  // namespace

DistillResult distill_operator(const TokenMixer& op, const ActivationDataset& acts, const DistillConfig& cfg) {
  if (acts.count() < 1) throw std::invalid_argument("distill: empty activation dataset");
  if (acts.inputs.dim(2) != op.config().width) {
    throw std::invalid_argument("distill: operator width " + std::to_string(op.config().width) +
                                " != activation width " + std::to_string(acts.inputs.dim(2)));
  }
  const bool fits = acts.slot == Slot::kMixer ? is_token_mixer(op.config().kind) : is_channel_mixer(op.config().kind);
  if (!fits) throw std::invalid_argument("distill: operator kind does not fit the captured slot");

  DistillResult r{op.clone(), {}, {}, {}, 0, 0, 0};
  const TokenMixer& student = r.op;
  const DType dt = student.dtype();
  const Predict predict = [&](std::span<const std::int64_t> idx) {
    Tensor y = student.forward(gather_rows(acts.inputs, idx, dt));
    if (acts.modulation_aware) {
      const Tensor g = gather_rows(acts.gates, idx, dt);
      y = ops::mul(ops::reshape(g, {g.dim(0), 1, g.dim(1)}), y);
    }
    return y;
  };
  const Target target = [&](std::span<const std::int64_t> idx) { return gather_rows(acts.targets, idx, dt); };
  RegressionTrace tr = fit(r.op.parameters(), acts.count(), cfg, predict, target);
  r.train_loss = std::move(tr.train);
  r.val_loss = std::move(tr.val);
  r.val_l2 = std::move(tr.val_l2);
  r.initial_train_loss = tr.init_train;
  r.initial_val_loss = tr.init_val;
  r.initial_val_l2 = tr.init_val_l2;
  return r;
}

std::vector<DistillResult> distill_many(const std::vector<DistillJob>& jobs, int parallelism) {
  if (parallelism < 1) throw std::invalid_argument("distill_many: parallelism must be >= 1");
  for (const auto& j : jobs) {
    if (!j.acts) throw std::invalid_argument("distill_many: job without activations");
  }
  std::vector<std::optional<DistillResult>> slots(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        slots[i].emplace(distill_operator(jobs[i].op, *jobs[i].acts, jobs[i].cfg));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(parallelism), jobs.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<DistillResult> out;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

// ---- integration and self-grafting ----

ModelGraph integrate(const ModelGraph& teacher, const GraftPlan& plan, const std::vector<TokenMixer>& ops) {
  if (ops.size() != plan.targets.size()) {
    throw std::invalid_argument("integrate: " + std::to_string(ops.size()) + " operators for " +
                                std::to_string(plan.targets.size()) + " targets");
  }
  if (plan.depth != static_cast<std::int64_t>(teacher.blocks().size())) {
    throw std::invalid_argument("integrate: plan depth differs from the model depth");
  }
  ModelGraph g = teacher;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const GraftTarget& t = plan.targets[i];
    if (ops[i].config().kind != t.replacement.kind) {
      throw std::invalid_argument("integrate: operator " + std::to_string(i) + " is " +
                                  std::string(to_string(ops[i].config().kind)) + ", plan expects " +
                                  std::string(to_string(t.replacement.kind)));
    }
    g = replace_operator(g, t.layer, t.slot, ops[i]);
  }
  return g;
}

SelfGraft self_graft(const ModelGraph& teacher, Slot slot, double ratio, Strategy strategy, std::uint64_t seed,
                     const LocalityReport* locality) {
  const auto& blocks = teacher.blocks();
  OperatorConfig base = blocks.front().op(slot).config();
  base.seed = seed;
  SelfGraft sg{make_plan(strategy, ratio, static_cast<std::int64_t>(blocks.size()), slot, base, locality), {}};
  for (auto& t : sg.plan.targets) {
    // The teacher's own per-layer config, re-seeded.
    OperatorConfig cfg = blocks[static_cast<std::size_t>(t.layer)].op(slot).config();
    cfg.seed = t.replacement.seed;
    t.replacement = cfg;
    sg.ops.emplace_back(cfg, teacher.dtype());
  }
  return sg;
}

// ---- finetuning ----

std::vector<std::int64_t> select_fraction(std::int64_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("finetune: data_fraction must lie in (0, 1]");
  if (n < 1) throw std::invalid_argument("finetune: empty dataset");
  const auto k = static_cast<std::int64_t>(std::floor(fraction * static_cast<double>(n)));
  if (k < 1) throw std::invalid_argument("finetune: data_fraction selects no images");
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  perm.resize(static_cast<std::size_t>(k));
  std::sort(perm.begin(), perm.end());
  return perm;
}

FinetuneResult finetune(ModelGraph& model, const BlobDataset& data, const NoiseSchedule& s, const FinetuneConfig& cfg) {
  FinetuneResult r;
  r.subset = select_fraction(data.size(), cfg.data_fraction, mix_seed(cfg.train.seed, 1));
  const BlobDataset part = data.subset(r.subset);
  r.trace = train(model, part, s, cfg.train);
  return r;
}

std::vector<std::string> plan_prefixes(const GraftPlan& plan) {
  std::vector<std::string> out;
  for (const auto& t : plan.targets) {
    out.push_back("blocks." + std::to_string(t.layer) + (t.slot == Slot::kMixer ? ".mixer." : ".mlp."));
  }
  return out;
}

// ---- deviation probe ----

Probe make_probe(const BlobDataset& data, const NoiseSchedule& s, std::int64_t count, std::uint64_t seed,
                 DType dtype) {
  if (count < 1) throw std::invalid_argument("probe: count must be >= 1");
  if (data.size() < 1) throw std::invalid_argument("probe: empty dataset");
  Rng rng(seed);
  Probe p;
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < count; ++i) {
    idx.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(data.size()))));
    p.c.push_back(data.labels[static_cast<std::size_t>(idx.back())]);
    p.t.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.steps()))));
  }
  const Tensor z = data.gather(idx, dtype);
  const Tensor eps = rng.normal_tensor(z.shape(), 1.0, dtype);
  p.z_t = corrupt(s, z, p.t, eps);
  return p;
}

double end_to_end_deviation(const ModelGraph& a, const ModelGraph& b, const Probe& probe, std::int64_t batch) {
  const DiTConfig& ca = a.config();
  const DiTConfig& cb = b.config();
  if (ca.image_size != cb.image_size || ca.channels != cb.channels || ca.num_classes != cb.num_classes) {
    throw std::invalid_argument("deviation: models have different input/output shapes");
  }
  if (batch < 1) throw std::invalid_argument("deviation: batch must be >= 1");
  const std::int64_t n = probe.z_t.dim(0);
  if (static_cast<std::int64_t>(probe.t.size()) != n || static_cast<std::int64_t>(probe.c.size()) != n) {
    throw std::invalid_argument("deviation: probe t/c length differs from its batch");
  }
  double total = 0;
  std::int64_t elems = 0;
  for (std::int64_t start = 0; start < n; start += batch) {
    const std::int64_t m = std::min(batch, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(m));
    std::iota(idx.begin(), idx.end(), start);
    const std::span<const std::int64_t> t(probe.t.data() + start, static_cast<std::size_t>(m));
    const std::span<const std::int64_t> c(probe.c.data() + start, static_cast<std::size_t>(m));
    const std::vector<double> ya = a.forward(gather_rows(probe.z_t, idx, a.dtype()), t, c).to_vector();
    const std::vector<double> yb = b.forward(gather_rows(probe.z_t, idx, b.dtype()), t, c).to_vector();
    for (std::size_t i = 0; i < ya.size(); ++i) total += std::abs(ya[i] - yb[i]);
    elems += static_cast<std::int64_t>(ya.size());
  }
  return total / static_cast<double>(elems);
}

// ---- parallel pairs ----

std::vector<PairActivations> capture_pair_activations(const ModelGraph& teacher, const BlobDataset& data,
                                                      const NoiseSchedule& s, const CaptureConfig& cfg) {
  check_capture(teacher, data, cfg);
  for (const auto& e : teacher.entries()) {
    if (e.is_pair()) throw std::invalid_argument("capture_pairs: teacher must be sequential");
  }
  const int pairs = static_cast<int>(teacher.effective_depth() / 2);
  if (pairs < 1) throw std::invalid_argument("capture_pairs: need at least two blocks");
  std::vector<RowBuffer> in(static_cast<std::size_t>(pairs)), cond(in.size()), out(in.size());
  std::vector<PairActivations> sets(in.size());

  Rng rng(cfg.seed);
  for (std::int64_t done = 0; done < cfg.count;) {
    const std::int64_t n = std::min(cfg.batch, cfg.count - done);
    const Draw d = draw_batch(rng, teacher, data, s, n, cfg.cfg_dropout);
    ForwardHooks hooks;
    hooks.on_entry = [&](const EntryCall& call) {
      const auto p = static_cast<std::size_t>(call.entry / 2);
      if (p >= sets.size()) return;
      if (call.entry % 2 == 0) {
        in[p].append(call.input);
        cond[p].append(call.cond);
      } else {
        out[p].append(call.output);
      }
    };
    teacher.forward(d.z_t, d.diffusion.t, d.diffusion.c, &hooks);
    for (auto& set : sets) {
      set.t.insert(set.t.end(), d.diffusion.t.begin(), d.diffusion.t.end());
      set.c.insert(set.c.end(), d.diffusion.c.begin(), d.diffusion.c.end());
    }
    done += n;
  }
  for (std::size_t p = 0; p < sets.size(); ++p) {
    sets[p].entry = static_cast<int>(p);
    sets[p].inputs = in[p].take(cfg.count);
    sets[p].conds = cond[p].take(cfg.count);
    sets[p].targets = out[p].take(cfg.count);
  }
  return sets;
}

PairDistillResult distill_pair(ModelGraph& student, const PairActivations& acts, const DistillConfig& cfg) {
  if (acts.count() < 1) throw std::invalid_argument("distill_pair: empty activation set");
  if (acts.entry < 0 || acts.entry >= student.effective_depth()) {
    throw std::out_of_range("distill_pair: entry " + std::to_string(acts.entry) + " out of range");
  }
  const Entry& e = student.entries()[static_cast<std::size_t>(acts.entry)];
  if (!e.is_pair()) throw std::invalid_argument("distill_pair: entry is not a parallel pair");
  if (acts.inputs.dim(2) != student.config().width) throw std::invalid_argument("distill_pair: width mismatch");

  ParameterList params;
  for (int b : e.blocks) {
    const Block& blk = student.blocks()[static_cast<std::size_t>(b)];
    for (const auto& p : blk.mixer.parameters()) params.push_back(p);
    for (const auto& p : blk.mlp.parameters()) params.push_back(p);
    params.push_back({"ada.weight", blk.ada_weight});
    params.push_back({"ada.bias", blk.ada_bias});
  }
  params.push_back({"merge.weight", e.merge_weight});
  params.push_back({"merge.bias", e.merge_bias});

  const DType dt = student.dtype();
  const Predict predict = [&](std::span<const std::int64_t> idx) {
    return student.run_entry(acts.entry, gather_rows(acts.inputs, idx, dt), gather_rows(acts.conds, idx, dt));
  };
  const Target target = [&](std::span<const std::int64_t> idx) { return gather_rows(acts.targets, idx, dt); };
  RegressionTrace tr = fit(params, acts.count(), cfg, predict, target);
  return {std::move(tr.train), std::move(tr.val), tr.init_val};
}

}  // namespace graftkit
