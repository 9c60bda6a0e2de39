#include "run_config.hpp"

#include "graftkit/persistence.hpp"
#include "graftkit/rng.hpp"

namespace graftkit::cli {

namespace {

// Section tags for seed derivation from the top-level seed.
enum SeedTag : std::uint64_t { kData = 1, kTrain, kCapture, kDistill, kFinetune, kSample, kLocality, kPlan, kEval };

template <class Fn>
auto parse_name(JsonReader& r, std::string_view key, Fn fn) {
  try {
    return fn(r.require<std::string>(key));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.child_path(key), e.what());
  }
}

// Reads `key` into `seed`; when absent and a base seed exists, derives it.
void seed_field(JsonReader& r, std::uint64_t& seed, const std::optional<std::uint64_t>& base, SeedTag tag) {
  if (r.has("seed")) {
    seed = r.require<std::uint64_t>("seed");
  } else if (base) {
    seed = mix_seed(*base, tag);
  }
}

void positive(JsonReader& r, std::string_view key, double v) {
  if (!(v > 0)) throw ConfigError(r.child_path(key), "must be positive");
}

void parse_train(JsonReader& r, TrainConfig& t, const std::optional<std::uint64_t>& base, SeedTag tag) {
  t.steps = r.get("steps", t.steps);
  if (t.steps < 0) throw ConfigError(r.child_path("steps"), "must be non-negative");
  t.batch = r.get("batch", t.batch);
  positive(r, "batch", static_cast<double>(t.batch));
  t.lr = r.get("lr", t.lr);
  positive(r, "lr", t.lr);
  t.warmup = r.get("warmup", t.warmup);
  t.weight_decay = r.get("weight_decay", t.weight_decay);
  t.clip_norm = r.get("clip_norm", t.clip_norm);
  t.cfg_dropout = r.get("cfg_dropout", t.cfg_dropout);
  if (t.cfg_dropout < 0 || t.cfg_dropout > 1) throw ConfigError(r.child_path("cfg_dropout"), "must lie in [0, 1]");
  seed_field(r, t.seed, base, tag);
}

json train_json(const TrainConfig& t) {
  return json{{"steps", t.steps},         {"batch", t.batch},         {"lr", t.lr},
              {"warmup", t.warmup},       {"weight_decay", t.weight_decay}, {"clip_norm", t.clip_norm},
              {"cfg_dropout", t.cfg_dropout}, {"seed", t.seed}};
}

}  // namespace

RunConfig::RunConfig() {
  train.steps = 1500;
  train.batch = 64;
  train.lr = 2e-3;
  train.warmup = 100;
  train.seed = 3;
  capture.seed = 11;
  distill.epochs = 30;
  distill.seed = 12;
  finetune.data_fraction = 0.1;
  finetune.train.steps = 2000;
  finetune.train.batch = 64;
  finetune.train.lr = 3e-4;
  finetune.train.warmup = 50;
  finetune.train.seed = 13;
  sample.seed = 14;
  sample.batch = 128;
  locality.seed = 15;
}

RegressionObjective RunConfig::objective_for(Slot slot) const {
  if (objective == "auto") return default_objective(slot);
  RegressionObjective o = distill.objective;
  o.kind = parse_objective(objective);
  return o;
}

OperatorConfig RunConfig::replacement(std::int64_t width, std::int64_t heads) const {
  json j = plan.replacement;
  if (!j.contains("width")) j["width"] = width;
  try {
    if (is_attention(parse_operator_kind(j.value("kind", std::string()))) && !j.contains("heads")) j["heads"] = heads;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("plan.replacement.kind", e.what());
  }
  return operator_config_from_json(j, "plan.replacement");
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  JsonReader r(j, "");
  std::optional<std::uint64_t> base;
  if (r.has("seed")) base = r.require<std::uint64_t>("seed");

  if (const json* m = r.child("model")) c.model = dit_config_from_json(*m, "model");

  if (const json* s = r.child("schedule")) {
    JsonReader sr(*s, "schedule");
    c.schedule.steps = sr.get("steps", c.schedule.steps);
    c.schedule.beta_start = sr.get("beta_start", c.schedule.beta_start);
    c.schedule.beta_end = sr.get("beta_end", c.schedule.beta_end);
    sr.finish();
    if (!(c.schedule.beta_start > 0 && c.schedule.beta_start <= c.schedule.beta_end && c.schedule.beta_end < 1)) {
      throw ConfigError("schedule", "need 0 < beta_start <= beta_end < 1");
    }
  }
  if (c.schedule.steps != c.model.timesteps) {
    throw ConfigError("schedule.steps", "must equal model.timesteps (" + std::to_string(c.model.timesteps) + ")");
  }

  if (const json* d = r.child("data")) {
    JsonReader dr(*d, "data");
    c.data.size = dr.get("size", c.data.size);
    positive(dr, "size", static_cast<double>(c.data.size));
    c.data.noise_std = dr.get("noise_std", c.data.noise_std);
    seed_field(dr, c.data.seed, base, kData);
    dr.finish();
  } else if (base) {
    c.data.seed = mix_seed(*base, kData);
  }

  auto section = [&](std::string_view key, SeedTag tag, auto&& fill, std::uint64_t& seed) {
    if (const json* s = r.child(key)) {
      JsonReader sr(*s, std::string(key));
      fill(sr);
      sr.finish();
    } else if (base) {
      seed = mix_seed(*base, tag);
    }
  };

  section("train", kTrain, [&](JsonReader& sr) { parse_train(sr, c.train, base, kTrain); }, c.train.seed);

  section(
      "capture", kCapture,
      [&](JsonReader& sr) {
        c.capture.count = sr.get("count", c.capture.count);
        positive(sr, "count", static_cast<double>(c.capture.count));
        c.capture.batch = sr.get("batch", c.capture.batch);
        positive(sr, "batch", static_cast<double>(c.capture.batch));
        c.capture.modulation_aware = sr.get("modulation_aware", c.capture.modulation_aware);
        c.capture.cfg_dropout = sr.get("cfg_dropout", c.capture.cfg_dropout);
        seed_field(sr, c.capture.seed, base, kCapture);
      },
      c.capture.seed);

  section(
      "distill", kDistill,
      [&](JsonReader& sr) {
        c.distill.epochs = sr.get("epochs", c.distill.epochs);
        if (c.distill.epochs < 0) throw ConfigError(sr.child_path("epochs"), "must be non-negative");
        c.distill.batch = sr.get("batch", c.distill.batch);
        positive(sr, "batch", static_cast<double>(c.distill.batch));
        c.distill.lr = sr.get("lr", c.distill.lr);
        positive(sr, "lr", c.distill.lr);
        c.distill.clip = sr.get("clip", c.distill.clip);
        c.distill.weight_decay = sr.get("weight_decay", c.distill.weight_decay);
        c.distill.val_split = sr.get("val_split", c.distill.val_split);
        if (c.distill.val_split < 0 || c.distill.val_split >= 1) {
          throw ConfigError(sr.child_path("val_split"), "must lie in [0, 1)");
        }
        if (sr.has("objective")) {
          c.objective = sr.require<std::string>("objective");
          if (c.objective != "auto") {
            parse_name(sr, "objective", [](const std::string& s) { return parse_objective(s); });
          }
        }
        c.distill.objective.delta = sr.get("huber_delta", c.distill.objective.delta);
        seed_field(sr, c.distill.seed, base, kDistill);
      },
      c.distill.seed);

  section(
      "finetune", kFinetune,
      [&](JsonReader& sr) {
        c.finetune.data_fraction = sr.get("data_fraction", c.finetune.data_fraction);
        if (!(c.finetune.data_fraction > 0 && c.finetune.data_fraction <= 1)) {
          throw ConfigError(sr.child_path("data_fraction"), "must lie in (0, 1]");
        }
        parse_train(sr, c.finetune.train, base, kFinetune);
      },
      c.finetune.train.seed);

  section(
      "sample", kSample,
      [&](JsonReader& sr) {
        if (sr.has("method")) c.sample.method = parse_name(sr, "method", [](const std::string& s) { return parse_sampler(s); });
        c.sample.steps = sr.get("steps", c.sample.steps);
        positive(sr, "steps", static_cast<double>(c.sample.steps));
        c.sample.cfg_scale = sr.get("cfg_scale", c.sample.cfg_scale);
        c.sample.batch = sr.get("batch", c.sample.batch);
        positive(sr, "batch", static_cast<double>(c.sample.batch));
        seed_field(sr, c.sample.seed, base, kSample);
      },
      c.sample.seed);

  section(
      "locality", kLocality,
      [&](JsonReader& sr) {
        c.locality.num_samples = sr.get("num_samples", c.locality.num_samples);
        positive(sr, "num_samples", static_cast<double>(c.locality.num_samples));
        c.locality.steps = sr.get("steps", c.locality.steps);
        c.locality.cfg_scale = sr.get("cfg_scale", c.locality.cfg_scale);
        c.locality.batch = sr.get("batch", c.locality.batch);
        c.locality.summary_k = sr.get("summary_k", c.locality.summary_k);
        if (const json* k = sr.child("k_grid")) {
          try {
            c.locality.k_grid = k->get<std::vector<std::int64_t>>();
          } catch (const json::exception&) {
            throw ConfigError(sr.child_path("k_grid"), "expected an array of integers");
          }
        }
        seed_field(sr, c.locality.seed, base, kLocality);
      },
      c.locality.seed);

  bool plan_seed_set = false;
  if (const json* p = r.child("plan")) {
    JsonReader pr(*p, "plan");
    if (pr.has("strategy")) c.plan.strategy = parse_name(pr, "strategy", [](const std::string& s) { return parse_strategy(s); });
    if (pr.has("slot")) c.plan.slot = parse_name(pr, "slot", [](const std::string& s) { return parse_slot(s); });
    c.plan.ratio = pr.get("ratio", c.plan.ratio);
    if (c.plan.ratio < 0 || c.plan.ratio > 1) throw ConfigError(pr.child_path("ratio"), "must lie in [0, 1]");
    c.plan.depth = pr.get("depth", c.plan.depth);
    if (c.plan.depth < 0) throw ConfigError(pr.child_path("depth"), "must be non-negative");
    c.plan.init = pr.get("init", c.plan.init);
    if (c.plan.init != "fresh" && c.plan.init != "copy") throw ConfigError(pr.child_path("init"), "expected fresh or copy");
    if (const json* rep = pr.child("replacement")) {
      if (!rep->is_object()) throw ConfigError(pr.child_path("replacement"), "expected an object");
      c.plan.replacement.merge_patch(*rep);
      plan_seed_set = rep->contains("seed");
    }
    pr.finish();
  }
  if (!plan_seed_set && base) {
    c.plan.replacement["seed"] = mix_seed(*base, kPlan);
  }
  // Validates the replacement against the configured model now, so key paths point at the config.
  (void)c.replacement(c.model.width, c.model.heads);

  if (const json* e = r.child("eval")) {
    JsonReader er(*e, "eval");
    c.eval.val_count = er.get("val_count", c.eval.val_count);
    positive(er, "val_count", static_cast<double>(c.eval.val_count));
    c.eval.val_seed = er.get("val_seed", c.eval.val_seed);
    c.eval.loss_seed = er.get("loss_seed", c.eval.loss_seed);
    c.eval.samples = er.get("samples", c.eval.samples);
    c.eval.probe_count = er.get("probe_count", c.eval.probe_count);
    c.eval.probe_seed = er.get("probe_seed", c.eval.probe_seed);
    er.finish();
  }

  c.parallelism = r.get("parallelism", c.parallelism);
  if (c.parallelism < 1) throw ConfigError("parallelism", "must be at least 1");
  r.finish();
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["schedule"] = {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["data"] = {{"size", c.data.size}, {"seed", c.data.seed}, {"noise_std", c.data.noise_std}};
  j["train"] = train_json(c.train);
  j["capture"] = {{"count", c.capture.count},
                  {"batch", c.capture.batch},
                  {"modulation_aware", c.capture.modulation_aware},
                  {"cfg_dropout", c.capture.cfg_dropout},
                  {"seed", c.capture.seed}};
  j["distill"] = {{"epochs", c.distill.epochs},       {"batch", c.distill.batch},
                  {"lr", c.distill.lr},               {"clip", c.distill.clip},
                  {"weight_decay", c.distill.weight_decay}, {"val_split", c.distill.val_split},
                  {"objective", c.objective},         {"huber_delta", c.distill.objective.delta},
                  {"seed", c.distill.seed}};
  json ft = train_json(c.finetune.train);
  ft["data_fraction"] = c.finetune.data_fraction;
  j["finetune"] = ft;
  j["sample"] = {{"method", to_string(c.sample.method)}, {"steps", c.sample.steps}, {"cfg_scale", c.sample.cfg_scale},
                 {"batch", c.sample.batch},               {"seed", c.sample.seed}};
  j["locality"] = {{"num_samples", c.locality.num_samples}, {"steps", c.locality.steps},
                   {"cfg_scale", c.locality.cfg_scale},     {"batch", c.locality.batch},
                   {"summary_k", c.locality.summary_k},     {"k_grid", c.locality.k_grid},
                   {"seed", c.locality.seed}};
  j["plan"] = {{"strategy", to_string(c.plan.strategy)}, {"ratio", c.plan.ratio},     {"depth", c.plan.depth},
               {"slot", to_string(c.plan.slot)},         {"init", c.plan.init},       {"replacement", c.plan.replacement}};
  j["eval"] = {{"val_count", c.eval.val_count}, {"val_seed", c.eval.val_seed},     {"loss_seed", c.eval.loss_seed},
               {"samples", c.eval.samples},     {"probe_count", c.eval.probe_count}, {"probe_seed", c.eval.probe_seed}};
  j["parallelism"] = c.parallelism;
  return j;
}

}  // namespace graftkit::cli
