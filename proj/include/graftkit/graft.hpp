#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "graftkit/diffusion.hpp"
#include "graftkit/model.hpp"
#include "graftkit/operators.hpp"

namespace graftkit {

struct LocalityReport;

enum class Strategy { kFull, kInterleaved, kTopLocal, kLowLocal, kDeep };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct GraftTarget {
  int layer;
  Slot slot;
  OperatorConfig replacement;
  bool operator==(const GraftTarget&) const = default;
};

struct GraftPlan {
  Strategy strategy = Strategy::kFull;
  double ratio = 1.0;
  std::int64_t depth = 0;
  Slot slot = Slot::kMixer;
  std::vector<GraftTarget> targets;  // ascending layer order

  std::vector<int> layers() const;
  bool operator==(const GraftPlan&) const = default;
};

// round(ratio * depth), halves rounded up.
std::int64_t plan_count(double ratio, std::int64_t depth);

// Interleaved layers for `count` of `depth`: layer i is replaced when
// floor((i+1)c/depth) > floor(ic/depth), which keeps layer 0 and spreads the rest.
std::vector<int> interleaved_layers(std::int64_t count, std::int64_t depth);

// Replacement seeds are mix_seed(replacement.seed, layer) so every target is distinct.
GraftPlan make_plan(Strategy strategy, double ratio, std::int64_t depth, Slot slot,
                    const OperatorConfig& replacement, const LocalityReport* locality = nullptr);

enum class ObjectiveKind { kL1, kL2, kHuber };
std::string_view to_string(ObjectiveKind k);
ObjectiveKind parse_objective(std::string_view name);

struct RegressionObjective {
  ObjectiveKind kind = ObjectiveKind::kL2;
  double delta = 1.0;  // Huber threshold

  // Mean over elements.
  Tensor loss(const Tensor& pred, const Tensor& target) const;
  // Per-element value at residual r.
  double pointwise(double r) const;
};

// Default objective per slot: L1 for token mixers, L2 for MLPs.
RegressionObjective default_objective(Slot slot);

struct ActivationDataset {
  int layer = 0;
  Slot slot = Slot::kMixer;
  Tensor inputs;   // [n, N, D] f32, exactly what the teacher operator consumed
  Tensor targets;  // [n, N, D] f32, raw (or gated) operator output
  Tensor gates;    // [n, D] f32, modulation-aware sets only
  std::vector<std::int64_t> t;
  std::vector<std::int64_t> c;
  std::string teacher_fingerprint;
  bool modulation_aware = false;

  std::int64_t count() const { return static_cast<std::int64_t>(t.size()); }
};

struct CaptureConfig {
  std::int64_t count = 2048;
  std::uint64_t seed = 0;
  bool modulation_aware = false;
  std::int64_t batch = 64;
  // Label dropout during capture, matching what the teacher saw in training.
  double cfg_dropout = 0.1;
};

struct SlotRef {
  int layer;
  Slot slot;
};

// One teacher pass per batch fills every requested slot.
std::vector<ActivationDataset> capture_activations(const ModelGraph& teacher, const BlobDataset& data,
                                                   std::span<const SlotRef> slots, const NoiseSchedule& s,
                                                   const CaptureConfig& cfg);
ActivationDataset capture_activations(const ModelGraph& teacher, const BlobDataset& data, int layer, Slot slot,
                                      const NoiseSchedule& s, const CaptureConfig& cfg);

struct DistillConfig {
  RegressionObjective objective;
  std::int64_t epochs = 100;
  std::int64_t batch = 64;
  double lr = 1e-3;
  double clip = 10.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double val_split = 0.1;
};

struct DistillResult {
  TokenMixer op;
  // Per epoch, measured after the epoch's updates over the whole split.
  std::vector<double> train_loss;
  std::vector<double> val_loss;     // under the training objective
  std::vector<double> val_l2;       // held-out mean squared error
  double initial_train_loss = 0;
  double initial_val_loss = 0;
  double initial_val_l2 = 0;
};

// Trains a deep copy of `op`; the argument is left untouched.
DistillResult distill_operator(const TokenMixer& op, const ActivationDataset& acts, const DistillConfig& cfg);

struct DistillJob {
  TokenMixer op;
  const ActivationDataset* acts;
  DistillConfig cfg;
};

// Runs jobs on up to `parallelism` threads. Results are independent of the degree.
std::vector<DistillResult> distill_many(const std::vector<DistillJob>& jobs, int parallelism = 1);

// Every target replaced by the matching operator; other tensors shared with the teacher.
ModelGraph integrate(const ModelGraph& teacher, const GraftPlan& plan, const std::vector<TokenMixer>& ops);

struct SelfGraft {
  GraftPlan plan;
  std::vector<TokenMixer> ops;  // fresh, same kind and shape as the replaced operators
};

SelfGraft self_graft(const ModelGraph& teacher, Slot slot, double ratio, Strategy strategy, std::uint64_t seed,
                     const LocalityReport* locality = nullptr);

// First floor(fraction * n) indices of a seeded shuffle of [0, n).
std::vector<std::int64_t> select_fraction(std::int64_t n, double fraction, std::uint64_t seed);

struct FinetuneConfig {
  double data_fraction = 0.1;
  TrainConfig train;
};

struct FinetuneResult {
  std::vector<std::int64_t> subset;
  TrainResult trace;
};

// Trains `model` in place on the selected subset with the diffusion objective.
FinetuneResult finetune(ModelGraph& model, const BlobDataset& data, const NoiseSchedule& s,
                        const FinetuneConfig& cfg);

// Parameter-name prefixes of the slots a plan touched, for freeze-untouched finetuning.
std::vector<std::string> plan_prefixes(const GraftPlan& plan);

struct Probe {
  Tensor z_t;  // [n, H, W, C]
  std::vector<std::int64_t> t;
  std::vector<std::int64_t> c;
};

// Corrupted dataset images at uniform t with their labels.
Probe make_probe(const BlobDataset& data, const NoiseSchedule& s, std::int64_t count, std::uint64_t seed,
                 DType dtype = DType::kF32);

// Mean over probe items of mean |a - b|; symmetric and zero for identical models.
double end_to_end_deviation(const ModelGraph& a, const ModelGraph& b, const Probe& probe,
                            std::int64_t batch = 64);

// Parallel-pair distillation: regress a pair entry of `student` onto the output
// of the two teacher blocks it replaced.
struct PairActivations {
  int entry = 0;
  Tensor inputs;   // [n, N, D] token stream entering the first teacher block
  Tensor conds;    // [n, D] conditioning vector
  Tensor targets;  // [n, N, D] token stream after the second teacher block
  std::vector<std::int64_t> t;
  std::vector<std::int64_t> c;

  std::int64_t count() const { return static_cast<std::int64_t>(t.size()); }
};

// Captures every pair (2i, 2i+1) of a sequential teacher in one pass per batch.
std::vector<PairActivations> capture_pair_activations(const ModelGraph& teacher, const BlobDataset& data,
                                                      const NoiseSchedule& s, const CaptureConfig& cfg);

struct PairDistillResult {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  double initial_val_loss = 0;
};

// Trains the two branch blocks and merge of `entry` in place.
PairDistillResult distill_pair(ModelGraph& student, const PairActivations& acts, const DistillConfig& cfg);

}  // namespace graftkit
