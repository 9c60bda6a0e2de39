#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace graftkit::cli {

// Input artifact paths and switches gathered from the command line.
struct Inputs {
  std::string model;
  std::string data;
  std::string plan;
  std::string reference;
  std::string operators;
  std::string locality;
  std::string baseline = "xl2";
  std::string convention = "appendix";
  std::vector<std::string> runs;
  bool save_acts = false;
  bool freeze_untouched = false;
  bool distill_pairs = false;
  bool mamba2 = false;
};

struct Context {
  std::string command;
  RunConfig cfg;
  Inputs in;
  std::filesystem::path out;
  int threads = 1;  // GRAFTKIT_THREADS
};

int gen_data(Context& ctx);
int train_teacher(Context& ctx);
int locality(Context& ctx);
int plan(Context& ctx);
int distill(Context& ctx);
int graft(Context& ctx);
int finetune(Context& ctx);
int rewire_parallel(Context& ctx);
int flops(Context& ctx);
int eval(Context& ctx);
int report(Context& ctx);

}  // namespace graftkit::cli
