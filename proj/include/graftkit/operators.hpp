#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "graftkit/tensor.hpp"

namespace graftkit {

enum class OperatorKind { kMha, kSwa, kHyenaSe, kHyenaX, kHyenaY, kMlp, kHyenaXMlp };

std::string_view to_string(OperatorKind kind);
OperatorKind parse_operator_kind(std::string_view name);

bool is_attention(OperatorKind kind);
bool is_hyena_mixer(OperatorKind kind);
// Kinds that can occupy the token-mixing (MHA) slot of a block.
bool is_token_mixer(OperatorKind kind);
// Kinds that can occupy the channel-mixing (MLP) slot of a block.
bool is_channel_mixer(OperatorKind kind);

struct OperatorConfig {
  OperatorKind kind = OperatorKind::kMha;
  std::int64_t width = 64;   // D
  std::int64_t heads = 4;    // H, attention kinds
  std::int64_t kernel = 4;   // K, Hyena kinds
  std::int64_t window = 4;   // w, SWA half-width
  double ratio = 4.0;        // r, MLP kinds
  bool causal = true;        // Hyena kinds
  std::uint64_t seed = 0;

  // Throws std::invalid_argument on any broken invariant.
  void validate() const;
  // rD, the hidden width of MLP kinds.
  std::int64_t hidden() const;

  static OperatorConfig mha(std::int64_t width, std::int64_t heads, std::uint64_t seed = 0);
  static OperatorConfig swa(std::int64_t width, std::int64_t heads, std::int64_t window = 4,
                            std::uint64_t seed = 0);
  static OperatorConfig hyena(OperatorKind kind, std::int64_t width, std::int64_t kernel = 4,
                              std::uint64_t seed = 0);
  static OperatorConfig mlp(std::int64_t width, double ratio = 4.0, std::uint64_t seed = 0);
  static OperatorConfig hyena_x_mlp(std::int64_t width, double ratio = 2.0,
                                    std::int64_t kernel = 4, std::uint64_t seed = 0);

  bool operator==(const OperatorConfig&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
};
using ParameterList = std::vector<Parameter>;

// One MHA/MLP replacement candidate: a config plus its trainable tensors.
// Copies share parameter storage; use clone() for an independent copy.
class TokenMixer {
 public:
  explicit TokenMixer(const OperatorConfig& config, DType dtype = DType::kF32);

  const OperatorConfig& config() const { return config_; }
  DType dtype() const { return dtype_; }

  // [B, N, D] -> [B, N, D]
  Tensor forward(const Tensor& x) const;
  // Post-softmax weights [B, H, N, N]; attention kinds only.
  Tensor attention_weights(const Tensor& x) const;

  const ParameterList& parameters() const { return params_; }
  ParameterList& parameters() { return params_; }
  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  std::int64_t param_count() const;

  TokenMixer clone() const;
  TokenMixer to(DType dtype) const;

 private:
  Tensor attention(const Tensor& x, bool want_weights) const;
  Tensor hyena(const Tensor& x) const;
  Tensor mlp(const Tensor& x) const;
  Tensor hyena_channel_mlp(const Tensor& x) const;
  void add_param(std::string name, Tensor value);

  OperatorConfig config_;
  DType dtype_;
  ParameterList params_;
};

}  // namespace graftkit
