#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "graftkit/operators.hpp"
#include "graftkit/tensor.hpp"

namespace graftkit {

// The two replaceable positions inside a block.
enum class Slot { kMixer, kMlp };

std::string_view to_string(Slot slot);
Slot parse_slot(std::string_view name);

struct DiTConfig {
  std::int64_t depth = 8;
  std::int64_t width = 64;  // D
  std::int64_t heads = 4;
  std::int64_t patch = 2;
  std::int64_t image_size = 16;
  std::int64_t channels = 1;
  std::int64_t num_classes = 8;
  double mlp_ratio = 4.0;
  double cfg_dropout = 0.1;
  std::uint64_t seed = 0;
  std::int64_t freq_dim = 128;     // sinusoidal timestep features
  std::int64_t timesteps = 1000;   // valid t is [0, timesteps)
  bool learn_sigma = false;        // doubles the output channels; only the epsilon half is returned

  void validate() const;
  std::int64_t grid() const { return image_size / patch; }
  std::int64_t tokens() const { return grid() * grid(); }
  std::int64_t patch_dim() const { return patch * patch * channels; }
  std::int64_t out_channels() const { return learn_sigma ? 2 * channels : channels; }
  std::int64_t null_class() const { return num_classes; }

  // Toy profile used throughout the tests.
  static DiTConfig xs();
  // DiT-XL/2 on 32x32x4 latents; used for parameter accounting only.
  static DiTConfig xl2();

  bool operator==(const DiTConfig&) const = default;
};

// Exact trainable-parameter count of build_model(cfg), without building it.
std::int64_t param_count(const DiTConfig& cfg);
// The same after parallelize_pairs.
std::int64_t param_count_parallel(const DiTConfig& cfg);

struct OperatorCall {
  int block;
  Slot slot;
  const TokenMixer& op;
  const Tensor& input;   // exactly what the operator consumed
  const Tensor& output;  // raw operator output
  const Tensor& gate;    // [B,1,D] residual gate applied to `output`
};

struct EntryCall {
  int entry;
  const Tensor& input;
  const Tensor& cond;  // silu(conditioning), [B, D]
  const Tensor& output;
};

struct ForwardHooks {
  std::function<void(const OperatorCall&)> on_operator;
  std::function<void(const EntryCall&)> on_entry;
};

class Block {
 public:
  Block(const DiTConfig& cfg, std::uint64_t seed, DType dtype);

  // x [B,N,D], cond = silu(c) [B,D]
  Tensor forward(const Tensor& x, const Tensor& cond, int index = -1,
                 const ForwardHooks* hooks = nullptr) const;

  TokenMixer& op(Slot slot) { return slot == Slot::kMixer ? mixer : mlp; }
  const TokenMixer& op(Slot slot) const { return slot == Slot::kMixer ? mixer : mlp; }

  TokenMixer mixer;
  TokenMixer mlp;
  Tensor ada_weight;  // [D, 6D], zero-initialised
  Tensor ada_bias;    // [6D]
};

// A graph entry: either one block or a parallel pair of blocks.
struct Entry {
  std::vector<int> blocks;
  Tensor merge_weight;  // [2D, D], pairs only
  Tensor merge_bias;    // [D]
  bool is_pair() const { return blocks.size() == 2; }
};

// Copies share parameter storage; use clone() for an independent model.
class ModelGraph {
 public:
  explicit ModelGraph(const DiTConfig& cfg, DType dtype = DType::kF32);

  const DiTConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }

  // z_t [B,H,W,C]; t and c have B entries. Returns the epsilon prediction [B,H,W,C].
  Tensor forward(const Tensor& z_t, std::span<const std::int64_t> t, std::span<const std::int64_t> c,
                 const ForwardHooks* hooks = nullptr) const;

  // silu(t_embed(t) + y_embed(c)), [B, D]
  Tensor conditioning(std::span<const std::int64_t> t, std::span<const std::int64_t> c) const;
  Tensor run_entry(int entry, const Tensor& x, const Tensor& cond, const ForwardHooks* hooks = nullptr) const;

  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::int64_t effective_depth() const { return static_cast<std::int64_t>(entries_.size()); }

  // Every trainable tensor with a stable hierarchical name.
  ParameterList named_parameters() const;
  std::int64_t param_count() const;

  ModelGraph clone() const;
  ModelGraph to(DType dtype) const;

  const Tensor& pos_embed() const { return pos_embed_; }

 private:
  friend ModelGraph parallelize_pairs(const ModelGraph& g);

  Tensor embed_tokens(const Tensor& z_t) const;
  Tensor unpatchify(const Tensor& tokens) const;

  DiTConfig cfg_;
  DType dtype_;
  ParameterList params_;  // embedders and final layer
  Tensor pos_embed_;      // fixed 2D sin-cos, not trained
  std::vector<Block> blocks_;
  std::vector<Entry> entries_;
};

// Deterministic all-MHA/MLP model with adaLN-Zero and a zeroed final layer.
ModelGraph build_model(const DiTConfig& cfg, DType dtype = DType::kF32);

// New graph whose `slot` at block `layer` is `op`; every other tensor is shared.
ModelGraph replace_operator(const ModelGraph& g, int layer, Slot slot, const TokenMixer& op);

// Pairs entries (2i, 2i+1) into parallel branches merged by [I | I]. The
// result owns deep copies of all parameters.
ModelGraph parallelize_pairs(const ModelGraph& g);

// 2D sin-cos table [grid*grid, dim] (dim divisible by 4).
Tensor sincos_pos_embed(std::int64_t dim, std::int64_t grid, DType dtype);
// [B, dim] with cos features first.
Tensor timestep_features(std::span<const std::int64_t> t, std::int64_t dim, DType dtype);

}  // namespace graftkit
