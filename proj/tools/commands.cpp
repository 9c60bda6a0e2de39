#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "graftkit/analysis.hpp"
#include "graftkit/persistence.hpp"

namespace graftkit::cli {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json read_json(const std::string& path, const std::string& what) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what, path + ": " + e.what());
  }
}

std::string require_path(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ConfigError(flag, "required input is missing");
  if (!fs::exists(value)) throw ConfigError(flag, "no such file: " + value);
  return value;
}

json input_entry(const std::string& path) {
  const std::string text = read_text_file(path);
  const auto* p = reinterpret_cast<const std::uint8_t*>(text.data());
  return json{{"path", path}, {"sha256", sha256_hex({p, text.size()})}};
}

// Creates the run directory and echoes the resolved config next to the outputs.
void begin(Context& ctx, const json& inputs) {
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json",
             json{{"command", ctx.command}, {"config", to_json(ctx.cfg)}, {"inputs", inputs}});
}

std::string loss_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
  return os.str();
}

double tail_mean(const std::vector<double>& v, std::size_t n) {
  if (v.empty()) return 0;
  n = std::min(n, v.size());
  double s = 0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ModelGraph load_model(Context& ctx, json& inputs) {
  const std::string path = require_path(ctx.in.model, "--model");
  inputs["model"] = input_entry(path);
  ModelGraph g = load_checkpoint(path);
  ctx.cfg.model = g.config();
  return g;
}

void check_data(const BlobDataset& d, const DiTConfig& m) {
  if (d.side != m.image_size || m.channels != 1 || d.num_classes != m.num_classes) {
    throw std::invalid_argument("dataset (side " + std::to_string(d.side) + ", " + std::to_string(d.num_classes) +
                                " classes) does not fit the model (image " + std::to_string(m.image_size) + ", " +
                                std::to_string(m.num_classes) + " classes)");
  }
}

BlobDataset load_data(Context& ctx, json& inputs) {
  const std::string path = require_path(ctx.in.data, "--data");
  inputs["data"] = input_entry(path);
  BlobDataset d = load_dataset(path);
  check_data(d, ctx.cfg.model);
  return d;
}

// Held-out images drawn from the data generator with the eval seed.
BlobDataset validation_set(const RunConfig& cfg) {
  return BlobDataset::generate(cfg.eval.val_count, cfg.eval.val_seed, cfg.model.num_classes, cfg.model.image_size,
                               cfg.data.noise_std);
}

struct ResolvedPlan {
  GraftPlan plan;
  std::string init;
};

ResolvedPlan resolve_plan(Context& ctx, json& inputs, std::int64_t depth, std::int64_t width, std::int64_t heads) {
  ResolvedPlan r{{}, ctx.cfg.plan.init};
  if (!ctx.in.plan.empty()) {
    const std::string path = require_path(ctx.in.plan, "--plan");
    inputs["plan"] = input_entry(path);
    json j = read_json(path, "--plan");
    if (j.is_object() && j.contains("init")) {
      if (!j["init"].is_string() || (j["init"] != "fresh" && j["init"] != "copy")) {
        throw ConfigError("plan.init", "expected fresh or copy");
      }
      r.init = j["init"].get<std::string>();
      j.erase("init");
    }
    r.plan = graft_plan_from_json(j, "plan");
    ctx.cfg.plan.strategy = r.plan.strategy;
    ctx.cfg.plan.ratio = r.plan.ratio;
    ctx.cfg.plan.depth = r.plan.depth;
    ctx.cfg.plan.slot = r.plan.slot;
    ctx.cfg.plan.init = r.init;
    return r;
  }
  const PlanSpec& p = ctx.cfg.plan;
  LocalityReport loc;
  const bool wants_locality = p.strategy == Strategy::kTopLocal || p.strategy == Strategy::kLowLocal;
  if (wants_locality) {
    const std::string path = require_path(ctx.in.locality, "--locality");
    inputs["locality"] = input_entry(path);
    loc = locality_from_json(read_json(path, "--locality"));
  }
  r.plan = make_plan(p.strategy, p.ratio, p.depth > 0 ? p.depth : depth, p.slot, ctx.cfg.replacement(width, heads),
                     wants_locality ? &loc : nullptr);
  return r;
}

std::string layer_set(const std::vector<int>& layers) {
  std::string s = "{";
  for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
  return s + "}";
}

json plan_file(const ResolvedPlan& r) {
  json j = to_json(r.plan);
  j["init"] = r.init;
  return j;
}

bool same_shape(OperatorConfig a, OperatorConfig b) {
  a.seed = b.seed = 0;
  return a == b;
}

struct DistillOutcome {
  std::vector<TokenMixer> ops;
  json summary = json::array();
  std::string csv;
};

DistillOutcome run_distill(Context& ctx, const ModelGraph& g, const BlobDataset& data, const ResolvedPlan& rp) {
  const RunConfig& cfg = ctx.cfg;
  const NoiseSchedule sched = cfg.schedule.build();
  std::vector<SlotRef> slots;
  for (const auto& t : rp.plan.targets) slots.push_back({t.layer, t.slot});
  const auto acts = capture_activations(g, data, slots, sched, cfg.capture);
  if (ctx.in.save_acts) {
    fs::create_directories(ctx.out / "acts");
    for (const auto& a : acts) {
      save_activations(a, ctx.out / "acts" /
                              ("layer" + std::to_string(a.layer) + "_" + std::string(to_string(a.slot)) + ".grft"));
    }
  }

  std::vector<DistillJob> jobs;
  for (std::size_t i = 0; i < rp.plan.targets.size(); ++i) {
    const auto& t = rp.plan.targets[i];
    DistillConfig dc = cfg.distill;
    dc.objective = cfg.objective_for(t.slot);
    dc.seed = mix_seed(cfg.distill.seed, static_cast<std::uint64_t>(t.layer));
    if (rp.init == "copy") {
      const TokenMixer& teacher_op = g.blocks()[static_cast<std::size_t>(t.layer)].op(t.slot);
      if (!same_shape(teacher_op.config(), t.replacement)) {
        throw std::invalid_argument("init copy needs the replacement at layer " + std::to_string(t.layer) +
                                    " to match the teacher operator (" +
                                    std::string(to_string(teacher_op.config().kind)) + ")");
      }
      jobs.push_back({teacher_op, &acts[i], dc});
    } else {
      jobs.push_back({TokenMixer(t.replacement, g.dtype()), &acts[i], dc});
    }
  }
  const int degree = std::max(1, std::min(cfg.parallelism, ctx.threads));
  const auto results = distill_many(jobs, degree);

  DistillOutcome out;
  std::ostringstream csv;
  csv.precision(17);
  csv << "layer,slot,epoch,train_loss,val_loss,val_l2\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& t = rp.plan.targets[i];
    const auto& r = results[i];
    out.ops.push_back(r.op);
    const auto last = [](const std::vector<double>& v, double fallback) { return v.empty() ? fallback : v.back(); };
    out.summary.push_back({{"layer", t.layer},
                           {"slot", to_string(t.slot)},
                           {"kind", to_string(t.replacement.kind)},
                           {"objective", to_string(jobs[i].cfg.objective.kind)},
                           {"records", acts[i].count()},
                           {"initial_train_loss", r.initial_train_loss},
                           {"initial_val_loss", r.initial_val_loss},
                           {"initial_val_l2", r.initial_val_l2},
                           {"train_loss", last(r.train_loss, r.initial_train_loss)},
                           {"val_loss", last(r.val_loss, r.initial_val_loss)},
                           {"val_l2", last(r.val_l2, r.initial_val_l2)}});
    csv << t.layer << ',' << to_string(t.slot) << ",0," << r.initial_train_loss << ',' << r.initial_val_loss << ','
        << r.initial_val_l2 << '\n';
    for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
      csv << t.layer << ',' << to_string(t.slot) << ',' << e + 1 << ',' << r.train_loss[e] << ',' << r.val_loss[e]
          << ',' << r.val_l2[e] << '\n';
    }
    std::cerr << "layer " << t.layer << " " << to_string(t.slot) << ": val " << r.initial_val_loss << " -> "
              << last(r.val_loss, r.initial_val_loss) << "\n";
  }
  out.csv = csv.str();
  return out;
}

json model_summary(const ModelGraph& g) {
  return json{{"fingerprint", fingerprint(g)},
              {"param_count", g.param_count()},
              {"depth", g.config().depth},
              {"effective_depth", g.effective_depth()}};
}

BaselineConfig baseline_of(const DiTConfig& m) {
  BaselineConfig b;
  b.depth = m.depth;
  b.width = m.width;
  b.heads = m.heads;
  b.seq_len = m.tokens();
  b.mlp_ratio = m.mlp_ratio;
  return b;
}

// Flattens top-level scalars and one level of nested objects into "a.b" keys.
void flatten(const json& j, const std::string& prefix, json& out, int depth = 0) {
  for (const auto& [key, value] : j.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_number() || value.is_boolean() || value.is_string()) {
      out[name] = value;
    } else if (value.is_object() && depth < 1) {
      flatten(value, name, out, depth + 1);
    }
  }
}

}  // namespace

int gen_data(Context& ctx) {
  const auto& c = ctx.cfg;
  begin(ctx, json::object());
  const BlobDataset d =
      BlobDataset::generate(c.data.size, c.data.seed, c.model.num_classes, c.model.image_size, c.data.noise_std);
  save_dataset(d, ctx.out / "dataset.grft");
  std::cout << "wrote " << d.size() << " images to " << (ctx.out / "dataset.grft").string() << "\n";
  return 0;
}

int train_teacher(Context& ctx) {
  json inputs;
  const BlobDataset data = load_data(ctx, inputs);
  begin(ctx, inputs);
  const auto& c = ctx.cfg;
  const NoiseSchedule sched = c.schedule.build();
  ModelGraph g = build_model(c.model);
  const TrainResult tr = train(g, data, sched, c.train);
  const double val = validation_loss(g, sched, validation_set(c), c.eval.loss_seed, c.eval.val_count);
  save_checkpoint(g, ctx.out / "teacher.ckpt", json{{"train", to_json(c)["train"]}});
  write_text_file(ctx.out / "losses.csv", loss_csv(tr.losses));
  const json summary{{"steps", c.train.steps},
                     {"final_loss", tail_mean(tr.losses, 100)},
                     {"val_loss", val},
                     {"model", model_summary(g)}};
  write_json(ctx.out / "train.json", summary);
  std::cout << "final loss " << fmt("%.5f", tail_mean(tr.losses, 100)) << ", val loss " << fmt("%.5f", val) << "\n";
  return 0;
}

int locality(Context& ctx) {
  json inputs;
  const ModelGraph g = load_model(ctx, inputs);
  begin(ctx, inputs);
  const LocalityReport r = locality_profile(g, ctx.cfg.schedule.build(), ctx.cfg.locality);
  write_json(ctx.out / "locality.json", to_json(r));
  write_text_file(ctx.out / "locality.csv", to_csv(r));
  write_text_file(ctx.out / "locality.svg", to_svg(r));
  for (int layer : r.layers) {
    std::cout << "layer " << layer << ": L_" << r.summary_k << " = " << fmt("%.4f", r.summary(layer)) << "\n";
  }
  return 0;
}

int plan(Context& ctx) {
  json inputs = json::object();
  DiTConfig m = ctx.cfg.model;
  if (!ctx.in.model.empty()) m = load_model(ctx, inputs).config();
  const ResolvedPlan rp = resolve_plan(ctx, inputs, m.depth, m.width, m.heads);
  begin(ctx, inputs);
  write_json(ctx.out / "plan.json", plan_file(rp));
  std::cout << layer_set(rp.plan.layers()) << "\n";
  return 0;
}

int distill(Context& ctx) {
  json inputs;
  const ModelGraph g = load_model(ctx, inputs);
  const BlobDataset data = load_data(ctx, inputs);
  const auto& m = g.config();
  const ResolvedPlan rp = resolve_plan(ctx, inputs, m.depth, m.width, m.heads);
  begin(ctx, inputs);
  write_json(ctx.out / "plan.json", plan_file(rp));
  const DistillOutcome d = run_distill(ctx, g, data, rp);
  save_operators({rp.plan, d.ops}, ctx.out / "operators.grft",
                 json{{"teacher_fingerprint", fingerprint(g)}, {"init", rp.init}});
  write_json(ctx.out / "distill.json", json{{"init", rp.init}, {"targets", d.summary}});
  write_text_file(ctx.out / "distill.csv", d.csv);
  return 0;
}

int graft(Context& ctx) {
  json inputs;
  const ModelGraph g = load_model(ctx, inputs);
  const auto& m = g.config();
  GraftPlan p;
  std::vector<TokenMixer> ops;
  json summary;
  if (!ctx.in.operators.empty()) {
    const std::string path = require_path(ctx.in.operators, "--operators");
    inputs["operators"] = input_entry(path);
    OperatorBundle b = load_operators(path);
    begin(ctx, inputs);
    p = b.plan;
    ops = std::move(b.ops);
    summary["init"] = "bundle";
  } else {
    const BlobDataset data = load_data(ctx, inputs);
    const ResolvedPlan rp = resolve_plan(ctx, inputs, m.depth, m.width, m.heads);
    begin(ctx, inputs);
    const DistillOutcome d = run_distill(ctx, g, data, rp);
    p = rp.plan;
    ops = d.ops;
    save_operators({p, ops}, ctx.out / "operators.grft", json{{"teacher_fingerprint", fingerprint(g)}, {"init", rp.init}});
    write_text_file(ctx.out / "distill.csv", d.csv);
    summary["init"] = rp.init;
    summary["targets"] = d.summary;
  }
  write_json(ctx.out / "plan.json", to_json(p));
  const ModelGraph grafted = integrate(g, p, ops);
  save_checkpoint(grafted, ctx.out / "grafted.ckpt", json{{"plan", to_json(p)}, {"teacher_fingerprint", fingerprint(g)}});

  const NoiseSchedule sched = ctx.cfg.schedule.build();
  const Probe probe = make_probe(validation_set(ctx.cfg), sched, ctx.cfg.eval.probe_count, ctx.cfg.eval.probe_seed,
                                 g.dtype());
  const double dev = end_to_end_deviation(g, grafted, probe);
  summary["layers"] = p.layers();
  summary["teacher"] = model_summary(g);
  summary["grafted"] = model_summary(grafted);
  summary["deviation"] = dev;
  write_json(ctx.out / "graft.json", summary);
  std::cout << "grafted " << layer_set(p.layers()) << ", deviation from teacher " << fmt("%.6g", dev) << "\n";
  return 0;
}

int finetune(Context& ctx) {
  json inputs;
  ModelGraph g = load_model(ctx, inputs);
  const BlobDataset data = load_data(ctx, inputs);
  FinetuneConfig fc = ctx.cfg.finetune;
  if (ctx.in.freeze_untouched) {
    const auto& m = g.config();
    const ResolvedPlan rp = resolve_plan(ctx, inputs, m.depth, m.width, m.heads);
    fc.train.trainable = plan_prefixes(rp.plan);
  }
  begin(ctx, inputs);
  const NoiseSchedule sched = ctx.cfg.schedule.build();
  const FinetuneResult r = graftkit::finetune(g, data, sched, fc);
  const double val = validation_loss(g, sched, validation_set(ctx.cfg), ctx.cfg.eval.loss_seed, ctx.cfg.eval.val_count);
  save_checkpoint(g, ctx.out / "finetuned.ckpt");
  write_text_file(ctx.out / "losses.csv", loss_csv(r.trace.losses));
  write_json(ctx.out / "finetune.json", json{{"subset_size", r.subset.size()},
                                              {"trainable_prefixes", fc.train.trainable},
                                              {"final_loss", tail_mean(r.trace.losses, 100)},
                                              {"val_loss", val},
                                              {"model", model_summary(g)}});
  std::cout << "finetuned on " << r.subset.size() << " images, val loss " << fmt("%.5f", val) << "\n";
  return 0;
}

int rewire_parallel(Context& ctx) {
  json inputs;
  const ModelGraph g = load_model(ctx, inputs);
  BlobDataset data;
  if (ctx.in.distill_pairs) data = load_data(ctx, inputs);
  begin(ctx, inputs);
  ModelGraph p = parallelize_pairs(g);
  json summary{{"before", model_summary(g)}, {"merge_params", p.param_count() - g.param_count()}};
  const NoiseSchedule sched = ctx.cfg.schedule.build();
  if (ctx.in.distill_pairs) {
    const auto acts = capture_pair_activations(g, data, sched, ctx.cfg.capture);
    DistillConfig dc = ctx.cfg.distill;
    dc.objective = ctx.cfg.objective == "auto" ? RegressionObjective{} : ctx.cfg.objective_for(Slot::kMixer);
    json pairs = json::array();
    for (const auto& a : acts) {
      const PairDistillResult r = distill_pair(p, a, dc);
      pairs.push_back({{"entry", a.entry},
                       {"initial_val_loss", r.initial_val_loss},
                       {"val_loss", r.val_loss.empty() ? r.initial_val_loss : r.val_loss.back()}});
    }
    summary["pairs"] = pairs;
  }
  const Probe probe = make_probe(validation_set(ctx.cfg), sched, ctx.cfg.eval.probe_count, ctx.cfg.eval.probe_seed,
                                 g.dtype());
  summary["after"] = model_summary(p);
  summary["deviation"] = end_to_end_deviation(g, p, probe);
  save_checkpoint(p, ctx.out / "parallel.ckpt");
  write_json(ctx.out / "rewire.json", summary);
  std::cout << "effective depth " << g.effective_depth() << " -> " << p.effective_depth() << ", params "
            << g.param_count() << " -> " << p.param_count() << "\n";
  return 0;
}

int flops(Context& ctx) {
  json inputs = json::object();
  DiTConfig m;
  if (ctx.in.baseline == "xl2") {
    m = DiTConfig::xl2();
  } else if (ctx.in.baseline == "xs") {
    m = DiTConfig::xs();
  } else {
    ctx.in.model = ctx.in.baseline;
    m = load_model(ctx, inputs).config();
  }
  ctx.cfg.model = m;
  ChannelHyenaConvention conv;
  if (ctx.in.convention == "appendix") {
    conv = ChannelHyenaConvention::kAppendix;
  } else if (ctx.in.convention == "table") {
    conv = ChannelHyenaConvention::kTable;
  } else {
    throw ConfigError("--convention", "expected appendix or table");
  }
  const ResolvedPlan rp = resolve_plan(ctx, inputs, m.depth, m.width, m.heads);
  begin(ctx, inputs);
  const BaselineConfig base = baseline_of(m);
  FlopReport r;
  if (ctx.in.mamba2) {
    if (rp.plan.slot != Slot::kMixer) throw ConfigError("plan.slot", "Mamba-2 replaces token mixers only");
    Mamba2Config mc;
    mc.width = m.width;
    const auto layers = rp.plan.layers();
    r = delta_report_mamba2(base, mc, layers);
  } else {
    r = delta_report(base, rp.plan, conv);
  }
  json j = to_json(r);
  j["baseline"] = ctx.in.baseline;
  j["layers"] = rp.plan.layers();
  write_json(ctx.out / "flops.json", j);
  write_text_file(ctx.out / "flops.csv", to_csv(r));
  std::cout << "delta_op " << fmt("%+.2f%%", r.delta_op) << "  delta_ft " << fmt("%+.2f%%", r.delta_ft)
            << "  delta_param " << fmt("%+.2f%%", r.delta_param) << "\n";
  return 0;
}

int eval(Context& ctx) {
  json inputs;
  const ModelGraph g = load_model(ctx, inputs);
  BlobDataset val;
  if (!ctx.in.data.empty()) {
    val = load_data(ctx, inputs);
  } else {
    val = validation_set(ctx.cfg);
  }
  std::optional<ModelGraph> ref;
  if (!ctx.in.reference.empty()) {
    const std::string path = require_path(ctx.in.reference, "--reference");
    inputs["reference"] = input_entry(path);
    ref = load_checkpoint(path);
  }
  begin(ctx, inputs);
  const auto& c = ctx.cfg;
  const NoiseSchedule sched = c.schedule.build();
  json summary{{"model", model_summary(g)}};
  summary["val_loss"] = validation_loss(g, sched, val, c.eval.loss_seed, std::min(c.eval.val_count, val.size()));
  if (c.eval.samples > 0) {
    std::vector<std::int64_t> labels(static_cast<std::size_t>(c.eval.samples));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int64_t>(i) % g.config().num_classes;
    const Tensor images = sample(g, sched, c.sample, labels);
    summary["blob_accuracy"] = blob_accuracy(images, labels, g.config().num_classes);
    write_artifact(ctx.out / "samples.grft", ArtifactKind::kReport, {{"samples", images}},
                   json{{"content", "samples"}, {"labels", labels}});
  }
  if (ref) {
    const Probe probe = make_probe(val, sched, c.eval.probe_count, c.eval.probe_seed, g.dtype());
    summary["deviation"] = end_to_end_deviation(g, *ref, probe);
    summary["reference"] = model_summary(*ref);
  }
  write_json(ctx.out / "eval.json", summary);
  std::cout << "val loss " << fmt("%.5f", summary["val_loss"].get<double>());
  if (summary.contains("blob_accuracy")) std::cout << ", blob accuracy " << fmt("%.4f", summary["blob_accuracy"].get<double>());
  if (summary.contains("deviation")) std::cout << ", deviation " << fmt("%.6g", summary["deviation"].get<double>());
  std::cout << "\n";
  return 0;
}

int report(Context& ctx) {
  if (ctx.in.runs.empty()) throw ConfigError("--runs", "name at least one run directory");
  static const char* kReports[] = {"train.json", "distill.json", "graft.json", "finetune.json",
                                   "rewire.json", "flops.json",   "eval.json"};
  json runs = json::array();
  json inputs = json::object();
  std::ostringstream csv;
  csv.precision(17);
  csv << "run,command,metric,value\n";
  for (const auto& dir : ctx.in.runs) {
    const fs::path cfg_path = fs::path(dir) / "config.json";
    if (!fs::exists(cfg_path)) throw ConfigError("--runs", dir + " is not a run directory (no config.json)");
    const json cfg = read_json(cfg_path.string(), "--runs");
    const std::string command = cfg.value("command", "");
    json metrics = json::object();
    for (const char* name : kReports) {
      const fs::path p = fs::path(dir) / name;
      if (!fs::exists(p)) continue;
      const std::string stem = fs::path(name).stem().string();
      flatten(read_json(p.string(), "--runs"), stem, metrics);
    }
    for (const auto& [key, value] : metrics.items()) {
      csv << dir << ',' << command << ',' << key << ',';
      if (value.is_string()) {
        csv << value.get<std::string>();
      } else if (value.is_number_float()) {
        csv << value.get<double>();
      } else {
        csv << value.dump();
      }
      csv << '\n';
    }
    runs.push_back({{"run", dir}, {"command", command}, {"metrics", metrics}});
    inputs[dir] = input_entry(cfg_path.string());
  }
  begin(ctx, inputs);
  write_json(ctx.out / "report.json", json{{"runs", runs}});
  write_text_file(ctx.out / "report.csv", csv.str());
  std::cout << "summarised " << runs.size() << " runs into " << (ctx.out / "report.csv").string() << "\n";
  return 0;
}

}  // namespace graftkit::cli
