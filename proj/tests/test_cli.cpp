// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "blu/checkpoint.hpp"
#include "blu/config.hpp"
#include "doctest.h"

namespace fs = std::filesystem;
using namespace blu;

namespace {

const std::string kExe = BLU_EXE;
const std::string kTiny = BLU_TINY_CONFIG;

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "blu-cli-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_blu(const std::string& args) {
  const std::string cmd = kExe + " " + args + " 2>/dev/null";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

// Every CSV and checkpoint under `dir`, keyed by relative path.
std::map<std::string, std::string> outputs(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext == ".csv" || ext == ".ckpt" || ext == ".json") files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

}  // namespace

TEST_CASE("run pipeline writes every artifact and reruns byte-identically from the echoed config") {
  const fs::path a = fresh_dir("run-a"), b = fresh_dir("run-b");
  REQUIRE(run_blu("run --config " + kTiny + " --out " + a.string()) == 0);
  for (const char* f : {"config.resolved.json", "teacher.ckpt", "pruned.ckpt", "curve_train.csv", "prune_report.csv",
                        "curve_finetune_pruned-distill.csv", "curve_finetune_pruned-plain.csv",
                        "curve_finetune_random-distill.csv", "history_bilevel.csv", "history_two-stage.csv",
                        "unlearn_bilevel.ckpt", "unlearn_two-stage.ckpt", "distilled_two-stage.ckpt", "report.csv",
                        "concepts.csv", "ranking.csv"})
    CHECK_MESSAGE(fs::exists(a / f), f);

  // The echoed config alone reproduces the run.
  REQUIRE(run_blu("run --config " + (a / "config.resolved.json").string() + " --out " + b.string()) == 0);
  const auto first = outputs(a), second = outputs(b);
  REQUIRE(first.size() == second.size());
  for (const auto& [name, bytes] : first) {
    CAPTURE(name);
    if (name == "config.resolved.json") continue;  // differs only in "out"
    CHECK(second.at(name) == bytes);
  }
  CHECK(load_config(a / "config.resolved.json").seed == 2);

  // Checkpoints carry the digest of the resolved config; sparsity survives every stage.
  const ExperimentConfig cfg = load_config(a / "config.resolved.json");
  const Checkpoint pruned = load_checkpoint(a / "pruned.ckpt");
  CHECK(pruned.config_digest == config_digest(cfg));
  for (const char* f : {"finetune_pruned-distill.ckpt", "finetune_pruned-plain.ckpt", "finetune_random-distill.ckpt",
                        "unlearn_bilevel.ckpt", "unlearn_two-stage.ckpt", "distilled_two-stage.ckpt"})
    CHECK_MESSAGE(load_checkpoint(a / f).params.nnz() == pruned.params.nnz(), f);
}

TEST_CASE("individual subcommands chain through checkpoints") {
  const fs::path d = fresh_dir("chain");
  const std::string common = " --config " + kTiny + " --out " + d.string();
  REQUIRE(run_blu("train-base" + common) == 0);
  REQUIRE(run_blu("prune" + common + " --teacher " + (d / "teacher.ckpt").string()) == 0);
  const std::string ckpts = " --teacher " + (d / "teacher.ckpt").string() + " --pruned " + (d / "pruned.ckpt").string();
  REQUIRE(run_blu("finetune" + common + ckpts + " --without-distill") == 0);
  REQUIRE(run_blu("finetune" + common + ckpts + " --with-distill --init random") == 0);
  CHECK(fs::exists(d / "curve_finetune_pruned-plain.csv"));
  CHECK(fs::exists(d / "curve_finetune_random-distill.csv"));
  CHECK(load_config(d / "config.resolved.json").ft.init == InitMode::Random);
  REQUIRE(run_blu("unlearn" + common + ckpts + " --method two-stage") == 0);
  CHECK(fs::exists(d / "history_two-stage.csv"));

  const std::string eval = "eval" + common + " --teacher " + (d / "teacher.ckpt").string() + " --ckpt " +
                           (d / "unlearn_two-stage.ckpt").string();
  REQUIRE(run_blu(eval) == 0);
  const std::string report = slurp(d / "report_unlearn_two-stage.csv");
  REQUIRE(run_blu(eval) == 0);
  CHECK(slurp(d / "report_unlearn_two-stage.csv") == report);

  const std::string sample = "sample" + common + " --ckpt " + (d / "teacher.ckpt").string() + " --concept 2 -n 37";
  REQUIRE(run_blu(sample) == 0);
  const std::string samples = slurp(d / "samples_c2.csv");
  CHECK(count_lines(samples) == 38);
  CHECK(samples.rfind("x,y,concept\n", 0) == 0);
  REQUIRE(run_blu(sample) == 0);
  CHECK(slurp(d / "samples_c2.csv") == samples);
}

TEST_CASE("bad inputs fail with a non-zero exit") {
  const fs::path d = fresh_dir("bad");
  std::ofstream(d / "bad.json") << R"({"ft": {"lrr": 1}})";
  CHECK(run_blu("train-base --config " + (d / "bad.json").string() + " --out " + d.string()) != 0);
  CHECK(run_blu("nonsense") != 0);
  CHECK(run_blu("unlearn --config " + kTiny + " --teacher " + kTiny + " --pruned " + kTiny + " --out " + d.string()) != 0);
  std::ofstream(d / "budget.json") << R"({"bilevel": {"E": 4, "K": 2}, "two_stage": {"N": 100, "M": 4}})";
  CHECK(run_blu("run --config " + (d / "budget.json").string() + " --out " + d.string()) != 0);
}

TEST_CASE("sweep fans out seeds into separate directories and plot-data collects them") {
  const fs::path d = fresh_dir("sweep");
  REQUIRE(run_blu("sweep --stage train-base --seeds 0-1,5 --jobs 2 --config " + kTiny + " --out " + d.string()) == 0);
  for (const char* s : {"seed-0", "seed-1", "seed-5"}) CHECK(fs::exists(d / s / "teacher.ckpt"));
  CHECK(slurp(d / "sweep_index.csv") == "seed,out,exit_code\n0,seed-0,0\n1,seed-1,0\n5,seed-5,0\n");
  CHECK(slurp(d / "seed-0" / "teacher.ckpt") != slurp(d / "seed-1" / "teacher.ckpt"));

  REQUIRE(run_blu("plot-data --in " + d.string()) == 0);
  const std::string curves = slurp(d / "plot_curves.csv");
  CHECK(curves.rfind("run,arm,iter,metric,value\n", 0) == 0);
  CHECK(curves.find("seed-5,train,60,heldout_diff_loss,") != std::string::npos);
  const std::string dat = slurp(d / "plot_curves.dat");
  CHECK(dat.find("# seed-1 train") != std::string::npos);
}
