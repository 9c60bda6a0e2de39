#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "graftkit/diffusion.hpp"
#include "graftkit/model.hpp"
#include "graftkit/operators.hpp"
#include "graftkit/tensor.hpp"

namespace graftkit {

struct GraftPlan;

// ---- band-k locality ----

// (1/N) * sum_ij A_ij [|i - j| <= k] for a row-major N x N matrix.
double band_locality(std::span<const double> a, std::int64_t n, std::int64_t k);
// A is [N, N]; any dtype.
double band_locality(const Tensor& a, std::int64_t k);

// L_k for every k in `ks` from one matrix, in a single pass over A.
std::vector<double> band_curve(std::span<const double> a, std::int64_t n, std::span<const std::int64_t> ks);

// {1, 2, 4, ...} below N - 1, then N - 1.
std::vector<std::int64_t> default_k_grid(std::int64_t n);

struct LocalityConfig {
  std::int64_t num_samples = 16;
  std::int64_t steps = 50;
  double cfg_scale = 1.5;
  std::uint64_t seed = 0;
  std::int64_t batch = 16;
  std::vector<std::int64_t> k_grid;  // empty selects default_k_grid(N)
  std::int64_t summary_k = 0;        // 0 selects N / 8
};

struct LocalityReport {
  std::vector<std::int64_t> k_grid;
  std::vector<int> layers;                 // blocks whose mixer is attention
  std::vector<std::vector<double>> curves;  // curves[i][j] = L_{k_grid[j]} of layers[i]
  std::int64_t summary_k = 0;
  std::int64_t tokens = 0;
  // Protocol.
  std::string sampler = "ddim";
  std::int64_t steps = 0;
  double cfg_scale = 0;
  std::int64_t num_samples = 0;
  std::uint64_t seed = 0;
  std::int64_t matrices = 0;  // attention maps averaged per layer

  // L at summary_k for block `layer`; throws if the layer was not profiled.
  double summary(int layer) const;
  double at(int layer, std::int64_t k) const;
};

// Averages L_k over heads, timesteps (both guidance passes) and samples of a
// DDIM run. Throws std::invalid_argument when no block has an attention mixer.
LocalityReport locality_profile(const ModelGraph& g, const NoiseSchedule& s, const LocalityConfig& cfg);

nlohmann::json to_json(const LocalityReport& r);
LocalityReport locality_from_json(const nlohmann::json& j);
std::string to_csv(const LocalityReport& r);
// Line plot of every layer's curve against log2 k.
std::string to_svg(const LocalityReport& r);

// ---- FLOP and parameter accounting ----

enum class FlopClass { kOp, kFt };

struct FlopTerm {
  std::string name;
  std::int64_t flops;
  FlopClass cls;
};

struct OperatorFlops {
  std::vector<FlopTerm> terms;

  std::int64_t op() const;
  std::int64_t ft() const;
  std::int64_t total() const { return op() + ft(); }
};

// How the channel-mixing Hyena-X variant is charged. kAppendix uses the listed
// terms (dense in/out, featurizer 6LDK, gates 2LD); kTable drops the featurizer
// and charges the gates over the hidden width, 2LrD.
enum class ChannelHyenaConvention { kAppendix, kTable };

struct Mamba2Config {
  std::int64_t width = 1152;  // D
  std::int64_t expand = 2;    // E
  std::int64_t d_state = 64;
  std::int64_t conv_kernel = 4;
};

// Token mixers split into op (softmax, gates, inner convolutions) and ft
// (projections, featurizers). Channel mixers are charged entirely to op.
OperatorFlops operator_flops(const OperatorConfig& cfg, std::int64_t seq_len,
                             ChannelHyenaConvention conv = ChannelHyenaConvention::kAppendix);
// Buckets: projections, short conv and output are ft; featurization and scan are op.
OperatorFlops operator_flops(const Mamba2Config& cfg, std::int64_t seq_len);

struct ParamBreakdown {
  std::int64_t projection_weights = 0;
  std::int64_t projection_biases = 0;
  std::int64_t filters = 0;  // taps plus per-channel filter biases

  std::int64_t total() const { return projection_weights + projection_biases + filters; }
  // Weights plus filters, the convention of the cost table.
  std::int64_t table() const { return projection_weights + filters; }
};

// total() equals TokenMixer(cfg).param_count().
ParamBreakdown param_breakdown(const OperatorConfig& cfg);
// In projection 4D^2E, output D^2E, short conv (K+1)DE; not a TokenMixer kind.
ParamBreakdown param_breakdown(const Mamba2Config& cfg);

struct BaselineConfig {
  std::int64_t depth = 28;
  std::int64_t width = 1152;
  std::int64_t heads = 16;
  std::int64_t seq_len = 256;
  double mlp_ratio = 4.0;

  OperatorConfig mixer() const;
  OperatorConfig mlp() const;
};

struct LayerCost {
  int layer;
  std::string kind;
  std::int64_t op;
  std::int64_t ft;
  std::int64_t params;  // table convention
};

struct FlopReport {
  Slot slot = Slot::kMixer;
  std::vector<LayerCost> before;
  std::vector<LayerCost> after;
  std::int64_t op_before = 0, op_after = 0;
  std::int64_t ft_before = 0, ft_after = 0;
  std::int64_t params_before = 0, params_after = 0;
  // Percent change over the slot class across every layer; 0 when both sides are 0.
  double delta_op = 0;
  double delta_ft = 0;
  double delta_param = 0;
};

double percent_change(std::int64_t before, std::int64_t after);

// The plan's targets replace the baseline operator of their slot; the plan depth
// must match the baseline.
FlopReport delta_report(const BaselineConfig& base, const GraftPlan& plan,
                        ChannelHyenaConvention conv = ChannelHyenaConvention::kAppendix);
// Mamba-2 is not an OperatorConfig kind, so its rows take the replaced mixer layers directly.
FlopReport delta_report_mamba2(const BaselineConfig& base, const Mamba2Config& m, std::span<const int> layers);

nlohmann::json to_json(const FlopReport& r);
std::string to_csv(const FlopReport& r);

}  // namespace graftkit
