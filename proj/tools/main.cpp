#include <chrono>
#include <ctime>
#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "commands.hpp"
#include "graftkit/persistence.hpp"
#include "graftkit/runtime.hpp"

using namespace graftkit;
using namespace graftkit::cli;

namespace {

// Flag values land in a JSON patch over the config file, so they go through the
// same strict validation as the file itself.
struct Patch {
  json j = json::object();

  template <class T>
  void add(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    app->add_option_function<T>(flag, [this, pointer](const T& v) { j[json::json_pointer(pointer)] = v; }, help);
  }
  void flag(CLI::App* app, const std::string& name, const std::string& pointer, const std::string& help) {
    app->add_flag_function(name, [this, pointer](std::int64_t) { j[json::json_pointer(pointer)] = true; }, help);
  }
};

std::string compact_utc() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%S", &tm);
  return buf;
}

void plan_flags(CLI::App* app, Patch& p, Inputs& in) {
  app->add_option("--plan", in.plan, "plan JSON written by `plan`");
  app->add_option("--locality", in.locality, "locality report for top_local/low_local plans");
  p.add<std::string>(app, "--strategy", "/plan/strategy", "full, interleaved, top_local, low_local or deep");
  p.add<double>(app, "--ratio", "/plan/ratio", "fraction of layers to replace");
  p.add<std::int64_t>(app, "--depth", "/plan/depth", "plan depth (default: model depth)");
  p.add<std::string>(app, "--slot", "/plan/slot", "mha or mlp");
  p.add<std::string>(app, "--operator", "/plan/replacement/kind", "replacement kind");
  p.add<std::int64_t>(app, "--width", "/plan/replacement/width", "replacement width (default: model width)");
  p.add<std::int64_t>(app, "--heads", "/plan/replacement/heads", "attention heads");
  p.add<std::int64_t>(app, "--kernel", "/plan/replacement/kernel", "Hyena filter length");
  p.add<std::int64_t>(app, "--window", "/plan/replacement/window", "SWA half-width");
  p.add<double>(app, "--mlp-ratio", "/plan/replacement/ratio", "hidden ratio of MLP replacements");
  p.add<std::string>(app, "--init", "/plan/init", "fresh, or copy to start from the teacher's weights");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graftkit: operator grafting experiments on toy diffusion transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "graftkit 0.1.0");

  Context ctx;
  Patch patch;
  std::string config_path;
  std::string out;

  using Handler = std::function<int(Context&)>;
  std::map<CLI::App*, std::pair<std::string, Handler>> handlers;
  auto command = [&](const std::string& name, const std::string& help, Handler h) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "run config JSON")->check(CLI::ExistingFile);
    sub->add_option("--out", out, "run directory (default: runs/<command>-<utc time>)");
    patch.add<std::uint64_t>(sub, "--seed", "/seed", "base seed for every section without its own");
    patch.add<std::string>(sub, "--profile", "/model/profile", "model profile, xs or xl2");
    handlers[sub] = {name, std::move(h)};
    return sub;
  };
  Inputs& in = ctx.in;

  auto* gen = command("gen-data", "generate the synthetic blob dataset", gen_data);
  patch.add<std::int64_t>(gen, "--size", "/data/size", "number of images");
  patch.add<std::uint64_t>(gen, "--data-seed", "/data/seed", "generator seed");
  patch.add<double>(gen, "--noise-std", "/data/noise_std", "pixel noise");

  auto* teach = command("train-teacher", "train an all-attention teacher", train_teacher);
  teach->add_option("--data", in.data, "dataset artifact");
  patch.add<std::int64_t>(teach, "--steps", "/train/steps", "optimizer steps");
  patch.add<std::int64_t>(teach, "--batch", "/train/batch", "batch size");
  patch.add<double>(teach, "--lr", "/train/lr", "peak learning rate");
  patch.add<std::int64_t>(teach, "--warmup", "/train/warmup", "linear warmup steps");

  auto* loc = command("locality", "profile band-k locality of attention maps", locality);
  loc->add_option("--model", in.model, "checkpoint");
  patch.add<std::int64_t>(loc, "--samples", "/locality/num_samples", "generated samples");
  patch.add<std::int64_t>(loc, "--sampling-steps", "/locality/steps", "DDIM steps");
  patch.add<std::int64_t>(loc, "--summary-k", "/locality/summary_k", "k used to rank layers");

  auto* pl = command("plan", "select layers to replace", plan);
  pl->add_option("--model", in.model, "checkpoint supplying depth and width");
  plan_flags(pl, patch, in);

  auto distill_flags = [&](CLI::App* sub) {
    sub->add_option("--model", in.model, "teacher checkpoint");
    sub->add_option("--data", in.data, "dataset artifact");
    plan_flags(sub, patch, in);
    patch.add<std::int64_t>(sub, "--records", "/capture/count", "activation records per target");
    patch.flag(sub, "--modulation-aware", "/capture/modulation_aware", "regress gated outputs");
    patch.add<std::int64_t>(sub, "--epochs", "/distill/epochs", "distillation epochs");
    patch.add<double>(sub, "--distill-lr", "/distill/lr", "distillation learning rate");
    patch.add<std::string>(sub, "--objective", "/distill/objective", "auto, l1, l2 or huber");
    patch.add<int>(sub, "--parallel", "/parallelism", "targets distilled concurrently");
    sub->add_flag("--save-acts", in.save_acts, "keep activation sets under acts/");
  };
  auto* dist = command("distill", "capture activations and distill replacements", distill);
  distill_flags(dist);
  auto* gr = command("graft", "plan, distill every target and integrate", graft);
  distill_flags(gr);
  gr->add_option("--operators", in.operators, "reuse an operator bundle instead of distilling");

  auto* ft = command("finetune", "end-to-end finetuning on a data fraction", cli::finetune);
  ft->add_option("--model", in.model, "checkpoint");
  ft->add_option("--data", in.data, "dataset artifact");
  ft->add_flag("--freeze-untouched", in.freeze_untouched, "train only the slots named by the plan");
  plan_flags(ft, patch, in);
  patch.add<double>(ft, "--fraction", "/finetune/data_fraction", "fraction of the dataset");
  patch.add<std::int64_t>(ft, "--steps", "/finetune/steps", "optimizer steps");
  patch.add<std::int64_t>(ft, "--batch", "/finetune/batch", "batch size");
  patch.add<double>(ft, "--lr", "/finetune/lr", "peak learning rate");

  auto* rw = command("rewire-parallel", "pair sequential blocks into parallel branches", rewire_parallel);
  rw->add_option("--model", in.model, "checkpoint");
  rw->add_option("--data", in.data, "dataset artifact (with --distill-pairs)");
  rw->add_flag("--distill-pairs", in.distill_pairs, "regress each pair onto the blocks it replaced");
  patch.add<std::int64_t>(rw, "--records", "/capture/count", "activation records");
  patch.add<std::int64_t>(rw, "--epochs", "/distill/epochs", "distillation epochs");

  auto* fl = command("flops", "FLOP and parameter deltas of a plan", flops);
  fl->add_option("--baseline", in.baseline, "xl2, xs or a checkpoint path");
  fl->add_option("--convention", in.convention, "appendix or table (channel Hyena-X accounting)");
  fl->add_flag("--mamba2", in.mamba2, "charge the plan's layers as Mamba-2 mixers");
  plan_flags(fl, patch, in);

  auto* ev = command("eval", "validation loss, sample accuracy and deviation", eval);
  ev->add_option("--model", in.model, "checkpoint");
  ev->add_option("--data", in.data, "validation dataset (default: generated from eval seeds)");
  ev->add_option("--reference", in.reference, "checkpoint to measure deviation against");
  patch.add<std::int64_t>(ev, "--samples", "/eval/samples", "generated samples (0 skips sampling)");
  patch.add<std::int64_t>(ev, "--sampling-steps", "/sample/steps", "sampler steps");
  patch.add<double>(ev, "--cfg-scale", "/sample/cfg_scale", "guidance scale");

  auto* rep = command("report", "collect metrics from run directories", report);
  rep->add_option("--runs", in.runs, "run directories")->expected(1, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    tune_allocator();
    ctx.threads = configure_threads();
    CLI::App* sub = app.get_subcommands().front();
    const auto& [name, handler] = handlers.at(sub);
    ctx.command = name;

    json j = json::object();
    if (!config_path.empty()) {
      try {
        j = json::parse(read_text_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError("--config", e.what());
      }
      if (!j.is_object()) throw ConfigError("--config", "expected a JSON object");
    }
    j.merge_patch(patch.j);
    ctx.cfg = run_config_from_json(j);
    ctx.out = out.empty() ? std::filesystem::path("runs") / (name + "-" + compact_utc()) : std::filesystem::path(out);
    return handler(ctx);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
