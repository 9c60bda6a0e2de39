#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "graftkit/persistence.hpp"
#include "run_config.hpp"

using namespace graftkit;
namespace fs = std::filesystem;

namespace {

struct Result {
  int status;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
Result run(const std::string& args) {
  const std::string cmd = std::string(GRAFTKIT_CLI) + " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int rc = ::pclose(p);
  return {WIFEXITED(rc) ? WEXITSTATUS(rc) : -1, out};
}

struct RunDir {
  fs::path path;
  RunDir() : path(fs::temp_directory_path() / ("graftkit_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~RunDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

json load(const std::string& path) { return json::parse(read_text_file(path)); }

const char* kTiny = R"({"model": {"profile": "xs", "depth": 4, "width": 32, "heads": 2},
 "data": {"size": 128},
 "train": {"steps": 15, "batch": 16},
 "capture": {"count": 32, "batch": 32},
 "distill": {"epochs": 0},
 "eval": {"val_count": 32, "samples": 8, "probe_count": 8},
 "sample": {"steps": 4}})";

}  // namespace

TEST_CASE("plan prints the interleaved layer set") {
  RunDir dir;
  const Result r = run("plan --strategy interleaved --ratio 0.5 --depth 8 --out " + dir / "p");
  CHECK(r.status == 0);
  CHECK(r.out == "{1,3,5,7}\n");
  const json plan = load(dir / "p/plan.json");
  CHECK(plan.at("layers") == json::parse("[1,3,5,7]"));
  CHECK(plan.at("init") == "fresh");

  // The echoed config is complete and parses back to itself.
  const json echo = load(dir / "p/config.json");
  CHECK(echo.at("command") == "plan");
  const json cfg = echo.at("config");
  CHECK(cli::to_json(cli::run_config_from_json(cfg)) == cfg);
  CHECK(cfg.at("plan").at("depth") == 8);
}

TEST_CASE("flops on the shipped SWA plan reports the table value") {
  RunDir dir;
  const Result r = run("flops --baseline xl2 --plan " + std::string(GRAFTKIT_PLANS) + "/swa_w4_interleaved50.json --out " +
                       dir / "f");
  CHECK(r.status == 0);
  CHECK(r.out.find("-48.24%") != std::string::npos);
  const json rep = load(dir / "f/flops.json");
  CHECK(std::abs(rep.at("delta_percent").at("op").get<double>() + 48.24) <= 0.01);
  CHECK(fs::exists(dir / "f/flops.csv"));
}

TEST_CASE("exit codes separate validation and numeric failures") {
  RunDir dir;
  {
    std::ofstream(dir / "bad.json") << R"({"model": {"depht": 3}})";
    const Result r = run("plan --config " + dir / "bad.json" + " --out " + dir / "x");
    CHECK(r.status == 1);
    CHECK(r.out.find("model.depht") != std::string::npos);
  }
  {
    const Result r = run("plan --ratio 1.5 --out " + dir / "x");
    CHECK(r.status == 1);
    CHECK(r.out.find("plan.ratio") != std::string::npos);
  }
  {
    const Result r = run("eval --out " + dir / "x");
    CHECK(r.status == 1);
    CHECK(r.out.find("--model") != std::string::npos);
  }
  CHECK(run("graft --no-such-flag").status == 1);
  CHECK(run("--help").status == 0);

  std::ofstream(dir / "tiny.json") << kTiny;
  REQUIRE(run("gen-data --config " + dir / "tiny.json" + " --out " + dir / "d").status == 0);
  const Result r = run("train-teacher --config " + dir / "tiny.json" + " --data " + dir / "d/dataset.grft" +
                       " --lr 1e8 --out " + dir / "diverged");
  CHECK(r.status == 2);
}

TEST_CASE("exact-copy graft leaves the teacher unchanged") {
  RunDir dir;
  std::ofstream(dir / "tiny.json") << kTiny;
  const std::string cfg = " --config " + dir / "tiny.json";
  REQUIRE(run("gen-data" + cfg + " --out " + dir / "d").status == 0);
  REQUIRE(run("train-teacher" + cfg + " --data " + dir / "d/dataset.grft --out " + dir / "t").status == 0);
  const Result g = run("graft" + cfg + " --model " + dir / "t/teacher.ckpt" + " --data " + dir / "d/dataset.grft" +
                       " --strategy full --ratio 1 --operator mha --init copy --out " + dir / "g");
  REQUIRE(g.status == 0);
  REQUIRE(run("eval" + cfg + " --model " + dir / "g/grafted.ckpt" + " --reference " + dir / "t/teacher.ckpt" +
              " --out " + dir / "e1")
              .status == 0);
  REQUIRE(run("eval" + cfg + " --model " + dir / "t/teacher.ckpt" + " --out " + dir / "e0").status == 0);

  const json e0 = load(dir / "e0/eval.json");
  const json e1 = load(dir / "e1/eval.json");
  CHECK(e1.at("deviation").get<double>() == 0.0);
  CHECK(e1.at("blob_accuracy") == e0.at("blob_accuracy"));
  CHECK(e1.at("val_loss") == e0.at("val_loss"));
  CHECK(e1.at("model").at("fingerprint") == e0.at("model").at("fingerprint"));

  // Re-running is byte-identical apart from manifest timestamps.
  REQUIRE(run("train-teacher" + cfg + " --data " + dir / "d/dataset.grft --out " + dir / "t2").status == 0);
  for (const char* f : {"teacher.ckpt", "losses.csv", "train.json", "config.json"}) {
    CHECK_MESSAGE(read_text_file(dir / ("t/" + std::string(f))) == read_text_file(dir / ("t2/" + std::string(f))), f);
  }

  const Result rep = run("report --runs " + dir / "e0" + " " + dir / "e1" + " --out " + dir / "rep");
  CHECK(rep.status == 0);
  CHECK(read_text_file(dir / "rep/report.csv").find("eval.deviation,0") != std::string::npos);
}
