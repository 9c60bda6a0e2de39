#include "graftkit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "graftkit/graft.hpp"

namespace graftkit {

using nlohmann::json;

// ---- locality ----

std::vector<double> band_curve(std::span<const double> a, std::int64_t n, std::span<const std::int64_t> ks) {
  if (n < 1 || static_cast<std::int64_t>(a.size()) != n * n) {
    throw std::invalid_argument("band_locality: expected an N x N matrix");
  }
  // Mass on each diagonal offset |i - j|, then a running sum.
  std::vector<double> by_offset(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const double v = a[static_cast<std::size_t>(i * n + j)];
      if (!(v >= 0.0)) throw std::invalid_argument("band_locality: entries must be nonnegative");
      by_offset[static_cast<std::size_t>(std::abs(i - j))] += v;
    }
  }
  std::vector<double> cum(by_offset.size());
  double run = 0.0;
  for (std::size_t d = 0; d < by_offset.size(); ++d) {
    run += by_offset[d];
    cum[d] = run;
  }
  std::vector<double> out;
  out.reserve(ks.size());
  for (std::int64_t k : ks) {
    if (k < 0 || k > n - 1) throw std::invalid_argument("band_locality: k must lie in [0, N-1]");
    out.push_back(cum[static_cast<std::size_t>(k)] / static_cast<double>(n));
  }
  return out;
}

double band_locality(std::span<const double> a, std::int64_t n, std::int64_t k) {
  const std::int64_t ks[] = {k};
  return band_curve(a, n, ks)[0];
}

double band_locality(const Tensor& a, std::int64_t k) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw std::invalid_argument("band_locality: expected [N, N]");
  const std::vector<double> v = a.to_vector();
  return band_locality(v, a.dim(0), k);
}

std::vector<std::int64_t> default_k_grid(std::int64_t n) {
  if (n < 2) throw std::invalid_argument("default_k_grid: need at least 2 tokens");
  std::vector<std::int64_t> ks;
  for (std::int64_t k = 1; k < n - 1; k *= 2) ks.push_back(k);
  ks.push_back(n - 1);
  return ks;
}

namespace {

std::size_t grid_index(const std::vector<std::int64_t>& grid, std::int64_t k) {
  auto it = std::find(grid.begin(), grid.end(), k);
  if (it == grid.end()) throw std::invalid_argument("locality: k=" + std::to_string(k) + " is not on the grid");
  return static_cast<std::size_t>(it - grid.begin());
}

}  // namespace

double LocalityReport::at(int layer, std::int64_t k) const {
  auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) throw std::invalid_argument("locality: layer " + std::to_string(layer) + " not profiled");
  return curves[static_cast<std::size_t>(it - layers.begin())][grid_index(k_grid, k)];
}

double LocalityReport::summary(int layer) const { return at(layer, summary_k); }

LocalityReport locality_profile(const ModelGraph& g, const NoiseSchedule& s, const LocalityConfig& cfg) {
  const DiTConfig& mc = g.config();
  const std::int64_t n = mc.tokens();
  if (cfg.num_samples < 1) throw std::invalid_argument("locality_profile: num_samples must be >= 1");
  if (cfg.batch < 1) throw std::invalid_argument("locality_profile: batch must be >= 1");

  LocalityReport r;
  r.tokens = n;
  r.k_grid = cfg.k_grid.empty() ? default_k_grid(n) : cfg.k_grid;
  r.summary_k = cfg.summary_k > 0 ? cfg.summary_k : std::max<std::int64_t>(1, n / 8);
  r.k_grid.push_back(r.summary_k);
  std::sort(r.k_grid.begin(), r.k_grid.end());
  r.k_grid.erase(std::unique(r.k_grid.begin(), r.k_grid.end()), r.k_grid.end());
  for (std::int64_t k : r.k_grid) {
    if (k < 0 || k > n - 1) throw std::invalid_argument("locality_profile: k grid must lie in [0, N-1]");
  }
  r.steps = cfg.steps;
  r.cfg_scale = cfg.cfg_scale;
  r.num_samples = cfg.num_samples;
  r.seed = cfg.seed;

  std::map<int, std::size_t> slot_of;
  for (int b = 0; b < static_cast<int>(g.blocks().size()); ++b) {
    if (is_attention(g.blocks()[static_cast<std::size_t>(b)].mixer.config().kind)) {
      slot_of[b] = r.layers.size();
      r.layers.push_back(b);
    }
  }
  if (r.layers.empty()) throw std::invalid_argument("locality_profile: model has no attention layers");

  std::vector<std::vector<double>> sums(r.layers.size(), std::vector<double>(r.k_grid.size(), 0.0));
  std::vector<std::int64_t> counts(r.layers.size(), 0);

  ForwardHooks hooks;
  hooks.on_operator = [&](const OperatorCall& call) {
    if (call.slot != Slot::kMixer) return;
    auto it = slot_of.find(call.block);
    if (it == slot_of.end()) return;
    const Tensor w = g.blocks()[static_cast<std::size_t>(call.block)].mixer.attention_weights(call.input);
    const std::vector<double> v = w.to_vector();
    const std::int64_t maps = w.dim(0) * w.dim(1);
    auto& acc = sums[it->second];
    for (std::int64_t m = 0; m < maps; ++m) {
      std::span<const double> a(v.data() + m * n * n, static_cast<std::size_t>(n * n));
      const std::vector<double> curve = band_curve(a, n, r.k_grid);
      for (std::size_t j = 0; j < curve.size(); ++j) acc[j] += curve[j];
    }
    counts[it->second] += maps;
  };
  EpsModel model = [&](const Tensor& z, std::span<const std::int64_t> t, std::span<const std::int64_t> c) {
    return g.forward(z, t, c, &hooks);
  };

  SampleConfig sc;
  sc.method = SamplerKind::kDdim;
  sc.steps = cfg.steps;
  sc.cfg_scale = cfg.cfg_scale;
  sc.seed = cfg.seed;
  sc.batch = cfg.batch;
  std::vector<std::int64_t> labels(static_cast<std::size_t>(cfg.num_samples));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int64_t>(i) % mc.num_classes;
  sample(model, s, sc, labels, Shape{mc.image_size, mc.image_size, mc.channels}, mc.null_class());

  r.curves.resize(r.layers.size());
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    r.curves[i].resize(r.k_grid.size());
    for (std::size_t j = 0; j < r.k_grid.size(); ++j) {
      r.curves[i][j] = sums[i][j] / static_cast<double>(counts[i]);
    }
  }
  r.matrices = counts.front();
  return r;
}

json to_json(const LocalityReport& r) {
  json layers = json::array();
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    layers.push_back({{"layer", r.layers[i]}, {"curve", r.curves[i]}, {"summary", r.summary(r.layers[i])}});
  }
  return {{"k_grid", r.k_grid},
          {"summary_k", r.summary_k},
          {"tokens", r.tokens},
          {"protocol",
           {{"sampler", r.sampler},
            {"steps", r.steps},
            {"cfg_scale", r.cfg_scale},
            {"num_samples", r.num_samples},
            {"seed", r.seed},
            {"matrices", r.matrices}}},
          {"layers", layers}};
}

LocalityReport locality_from_json(const json& j) {
  try {
    LocalityReport r;
    r.k_grid = j.at("k_grid").get<std::vector<std::int64_t>>();
    r.summary_k = j.at("summary_k").get<std::int64_t>();
    r.tokens = j.at("tokens").get<std::int64_t>();
    const json& p = j.at("protocol");
    r.sampler = p.at("sampler").get<std::string>();
    r.steps = p.at("steps").get<std::int64_t>();
    r.cfg_scale = p.at("cfg_scale").get<double>();
    r.num_samples = p.at("num_samples").get<std::int64_t>();
    r.seed = p.at("seed").get<std::uint64_t>();
    r.matrices = p.at("matrices").get<std::int64_t>();
    for (const json& l : j.at("layers")) {
      r.layers.push_back(l.at("layer").get<int>());
      r.curves.push_back(l.at("curve").get<std::vector<double>>());
      if (r.curves.back().size() != r.k_grid.size()) {
        throw std::invalid_argument("locality report: curve length does not match k grid");
      }
    }
    grid_index(r.k_grid, r.summary_k);
    return r;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("locality report: ") + e.what());
  }
}

std::string to_csv(const LocalityReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "layer";
  for (std::int64_t k : r.k_grid) os << ",L_" << k;
  os << '\n';
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    os << r.layers[i];
    for (double v : r.curves[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

std::string to_svg(const LocalityReport& r) {
  constexpr double kW = 640, kH = 400, kPad = 48;
  const double xmax = std::log2(static_cast<double>(std::max<std::int64_t>(2, r.k_grid.back())));
  auto px = [&](std::int64_t k) {
    const double x = std::log2(static_cast<double>(std::max<std::int64_t>(1, k)));
    return kPad + (kW - 2 * kPad) * x / xmax;
  };
  auto py = [&](double v) { return kH - kPad - (kH - 2 * kPad) * v; };
  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << py(0) << "\" x2=\"" << kW - kPad << "\" y2=\"" << py(0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << py(0) << "\" x2=\"" << kPad << "\" y2=\"" << py(1)
     << "\" stroke=\"black\"/>\n";
  for (std::int64_t k : r.k_grid) {
    os << "<text x=\"" << px(k) << "\" y=\"" << kH - kPad + 16 << "\" font-size=\"10\" text-anchor=\"middle\">" << k
       << "</text>\n";
  }
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 8 << "\" font-size=\"12\" text-anchor=\"middle\">k</text>\n";
  os << "<text x=\"12\" y=\"" << kH / 2 << "\" font-size=\"12\">L_k</text>\n";
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    const double hue = 360.0 * static_cast<double>(i) / static_cast<double>(r.layers.size());
    os << "<polyline fill=\"none\" stroke=\"hsl(" << hue << ",70%,45%)\" points=\"";
    for (std::size_t j = 0; j < r.k_grid.size(); ++j) {
      os << px(r.k_grid[j]) << ',' << py(r.curves[i][j]) << ' ';
    }
    os << "\"><title>layer " << r.layers[i] << "</title></polyline>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---- FLOPs ----

std::int64_t OperatorFlops::op() const {
  std::int64_t s = 0;
  for (const auto& t : terms) {
    if (t.cls == FlopClass::kOp) s += t.flops;
  }
  return s;
}

std::int64_t OperatorFlops::ft() const {
  std::int64_t s = 0;
  for (const auto& t : terms) {
    if (t.cls == FlopClass::kFt) s += t.flops;
  }
  return s;
}

OperatorFlops operator_flops(const OperatorConfig& cfg, std::int64_t seq_len, ChannelHyenaConvention conv) {
  cfg.validate();
  if (seq_len < 1) throw std::invalid_argument("operator_flops: L must be >= 1");
  const std::int64_t l = seq_len, d = cfg.width, k = cfg.kernel, h = cfg.heads;
  const auto op = FlopClass::kOp;
  const auto ft = FlopClass::kFt;
  OperatorFlops f;
  switch (cfg.kind) {
    case OperatorKind::kMha:
      f.terms = {{"qkv_proj", 6 * l * d * d, ft},
                 {"attention", 4 * l * l * d + 2 * h * l * l, op},
                 {"out_proj", 2 * l * d * d, ft}};
      break;
    case OperatorKind::kSwa: {
      const std::int64_t span = 2 * cfg.window + 1;
      f.terms = {{"qkv_proj", 6 * l * d * d, ft},
                 {"attention", 4 * l * span * d + 2 * h * l * span, op},
                 {"out_proj", 2 * l * d * d, ft}};
      break;
    }
    case OperatorKind::kHyenaSe:
    case OperatorKind::kHyenaX:
    case OperatorKind::kHyenaY:
      f.terms.push_back({"in_proj", 6 * l * d * d, ft});
      if (cfg.kind != OperatorKind::kHyenaY) f.terms.push_back({"featurizer", 6 * l * d * k, ft});
      if (cfg.kind != OperatorKind::kHyenaX) f.terms.push_back({"inner_conv", 2 * l * d * k, op});
      f.terms.push_back({"gates", 2 * l * d, op});
      f.terms.push_back({"out_proj", 2 * l * d * d, ft});
      break;
    case OperatorKind::kMlp: {
      const std::int64_t hid = cfg.hidden();
      f.terms = {{"fc1", 2 * l * d * hid, op}, {"fc2", 2 * l * hid * d, op}};
      break;
    }
    case OperatorKind::kHyenaXMlp: {
      const std::int64_t hid = cfg.hidden();
      f.terms.push_back({"dense_in", 6 * l * d * hid, op});
      if (conv == ChannelHyenaConvention::kAppendix) {
        f.terms.push_back({"featurizer", 6 * l * d * k, op});
        f.terms.push_back({"gates", 2 * l * d, op});
      } else {
        f.terms.push_back({"gates", 2 * l * hid, op});
      }
      f.terms.push_back({"dense_out", 2 * l * hid * d, op});
      break;
    }
  }
  return f;
}

OperatorFlops operator_flops(const Mamba2Config& m, std::int64_t seq_len) {
  if (seq_len < 1) throw std::invalid_argument("operator_flops: L must be >= 1");
  if (m.width < 1 || m.expand < 1 || m.d_state < 1) throw std::invalid_argument("operator_flops: bad Mamba-2 config");
  const std::int64_t l = seq_len, d = m.width, e = m.expand, n = m.d_state;
  OperatorFlops f;
  f.terms = {{"projections", 8 * l * d * d * e, FlopClass::kFt},
             {"short_conv", 6 * l * d * e, FlopClass::kFt},
             {"featurization", 2 * l * d * e * (1 + 2 * n) + 2 * l * d * e, FlopClass::kOp},
             {"scan", 2 * l * d * e * n, FlopClass::kOp},
             {"output", 2 * l * d * d * e, FlopClass::kFt}};
  return f;
}

ParamBreakdown param_breakdown(const OperatorConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.width, k = cfg.kernel;
  ParamBreakdown p;
  switch (cfg.kind) {
    case OperatorKind::kMha:
    case OperatorKind::kSwa:
      p.projection_weights = 4 * d * d;
      p.projection_biases = 4 * d;
      break;
    case OperatorKind::kHyenaSe:
    case OperatorKind::kHyenaX:
    case OperatorKind::kHyenaY: {
      const std::int64_t convs = cfg.kind == OperatorKind::kHyenaSe ? 4 : cfg.kind == OperatorKind::kHyenaX ? 3 : 1;
      p.projection_weights = 4 * d * d;
      p.projection_biases = 4 * d;
      p.filters = convs * (d * k + d);
      break;
    }
    case OperatorKind::kMlp: {
      const std::int64_t h = cfg.hidden();
      p.projection_weights = 2 * d * h;
      p.projection_biases = h + d;
      break;
    }
    case OperatorKind::kHyenaXMlp: {
      const std::int64_t h = cfg.hidden();
      p.projection_weights = 4 * d * h;
      p.projection_biases = 3 * h + d;
      p.filters = 3 * (k + 1);
      break;
    }
  }
  return p;
}

ParamBreakdown param_breakdown(const Mamba2Config& m) {
  const std::int64_t d = m.width, e = m.expand;
  ParamBreakdown p;
  p.projection_weights = 4 * d * d * e + d * d * e;
  p.filters = (m.conv_kernel + 1) * d * e;
  return p;
}

OperatorConfig BaselineConfig::mixer() const { return OperatorConfig::mha(width, heads); }
OperatorConfig BaselineConfig::mlp() const { return OperatorConfig::mlp(width, mlp_ratio); }

double percent_change(std::int64_t before, std::int64_t after) {
  if (before == 0) {
    if (after == 0) return 0.0;
    throw std::domain_error("percent_change: zero baseline with nonzero result");
  }
  return 100.0 * static_cast<double>(after - before) / static_cast<double>(before);
}

namespace {

void finish(FlopReport& r) {
  for (const auto& c : r.before) {
    r.op_before += c.op;
    r.ft_before += c.ft;
    r.params_before += c.params;
  }
  for (const auto& c : r.after) {
    r.op_after += c.op;
    r.ft_after += c.ft;
    r.params_after += c.params;
  }
  r.delta_op = percent_change(r.op_before, r.op_after);
  r.delta_ft = percent_change(r.ft_before, r.ft_after);
  r.delta_param = percent_change(r.params_before, r.params_after);
}

LayerCost cost_of(int layer, const OperatorConfig& cfg, std::int64_t seq_len, ChannelHyenaConvention conv) {
  const OperatorFlops f = operator_flops(cfg, seq_len, conv);
  return {layer, std::string(to_string(cfg.kind)), f.op(), f.ft(), param_breakdown(cfg).table()};
}

void check_base(const BaselineConfig& base) {
  if (base.depth < 1 || base.seq_len < 1) throw std::invalid_argument("delta_report: bad baseline config");
  base.mixer().validate();
  base.mlp().validate();
}

}  // namespace

FlopReport delta_report(const BaselineConfig& base, const GraftPlan& plan, ChannelHyenaConvention conv) {
  check_base(base);
  if (plan.depth != base.depth) throw std::invalid_argument("delta_report: plan depth does not match the baseline");
  const OperatorConfig original = plan.slot == Slot::kMixer ? base.mixer() : base.mlp();
  std::vector<const OperatorConfig*> replaced(static_cast<std::size_t>(base.depth), nullptr);
  for (const auto& t : plan.targets) {
    if (t.layer < 0 || t.layer >= base.depth) throw std::invalid_argument("delta_report: target layer out of range");
    if (t.slot != plan.slot) throw std::invalid_argument("delta_report: mixed-slot plan");
    if (t.replacement.width != base.width) throw std::invalid_argument("delta_report: replacement width differs");
    const bool fits = plan.slot == Slot::kMixer ? is_token_mixer(t.replacement.kind)
                                                : is_channel_mixer(t.replacement.kind);
    if (!fits) throw std::invalid_argument("delta_report: replacement kind does not fit the slot");
    replaced[static_cast<std::size_t>(t.layer)] = &t.replacement;
  }
  FlopReport r;
  r.slot = plan.slot;
  for (int i = 0; i < static_cast<int>(base.depth); ++i) {
    r.before.push_back(cost_of(i, original, base.seq_len, conv));
    const OperatorConfig* rep = replaced[static_cast<std::size_t>(i)];
    r.after.push_back(rep ? cost_of(i, *rep, base.seq_len, conv) : r.before.back());
  }
  finish(r);
  return r;
}

FlopReport delta_report_mamba2(const BaselineConfig& base, const Mamba2Config& m, std::span<const int> layers) {
  check_base(base);
  if (m.width != base.width) throw std::invalid_argument("delta_report: Mamba-2 width differs");
  std::vector<bool> hit(static_cast<std::size_t>(base.depth), false);
  for (int l : layers) {
    if (l < 0 || l >= base.depth) throw std::invalid_argument("delta_report: target layer out of range");
    hit[static_cast<std::size_t>(l)] = true;
  }
  const OperatorFlops mf = operator_flops(m, base.seq_len);
  const LayerCost mamba{0, "mamba2", mf.op(), mf.ft(), param_breakdown(m).table()};
  FlopReport r;
  for (int i = 0; i < static_cast<int>(base.depth); ++i) {
    r.before.push_back(cost_of(i, base.mixer(), base.seq_len, ChannelHyenaConvention::kAppendix));
    LayerCost c = hit[static_cast<std::size_t>(i)] ? mamba : r.before.back();
    c.layer = i;
    r.after.push_back(c);
  }
  finish(r);
  return r;
}

json to_json(const FlopReport& r) {
  auto rows = [](const std::vector<LayerCost>& v) {
    json a = json::array();
    for (const auto& c : v) {
      a.push_back({{"layer", c.layer}, {"kind", c.kind}, {"op", c.op}, {"ft", c.ft}, {"params", c.params}});
    }
    return a;
  };
  return {{"slot", std::string(to_string(r.slot))},
          {"before", rows(r.before)},
          {"after", rows(r.after)},
          {"totals",
           {{"op_before", r.op_before},
            {"op_after", r.op_after},
            {"ft_before", r.ft_before},
            {"ft_after", r.ft_after},
            {"params_before", r.params_before},
            {"params_after", r.params_after}}},
          {"delta_percent", {{"op", r.delta_op}, {"ft", r.delta_ft}, {"params", r.delta_param}}}};
}

std::string to_csv(const FlopReport& r) {
  std::ostringstream os;
  os << "layer,kind_before,kind_after,op_before,op_after,ft_before,ft_after,params_before,params_after\n";
  for (std::size_t i = 0; i < r.before.size(); ++i) {
    const auto& b = r.before[i];
    const auto& a = r.after[i];
    os << b.layer << ',' << b.kind << ',' << a.kind << ',' << b.op << ',' << a.op << ',' << b.ft << ',' << a.ft
       << ',' << b.params << ',' << a.params << '\n';
  }
  os.precision(6);
  os << std::fixed << "delta_percent,,," << r.delta_op << ",," << r.delta_ft << ",," << r.delta_param << ",\n";
  return os.str();
}

}  // namespace graftkit
