// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: train-base, prune, finetune, unlearn, eval, sample,
// run (the whole pipeline), sweep and plot-data.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "blu/checkpoint.hpp"
#include "blu/pipeline.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace blu;

namespace {

struct Common {
  std::string config;
  std::int64_t seed = -1;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON, comments allowed)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Overrides the config seed")->check(CLI::NonNegativeNumber);
  cmd->add_option("--out", c.out, "Overrides the output directory");
}

// Resolves the config and echoes it before any computation.
ExperimentConfig resolve(const Common& c, const std::string& init_mode = "") {
  ExperimentConfig cfg = c.config.empty() ? parse_config("{}") : load_config(c.config);
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  if (!c.out.empty()) cfg.out = c.out;
  if (!init_mode.empty()) cfg.ft.init = init_mode == "random" ? InitMode::Random : InitMode::PrunedFromTeacher;
  cfg.validate();
  echo_config(cfg, cfg.out);
  return cfg;
}

fs::path out_path(const ExperimentConfig& cfg, const std::string& name) { return fs::path(cfg.out) / name; }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

ParamStore load_params(const ExperimentConfig& cfg, const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.model == cfg.model)) throw ConfigError(path + ": model architecture differs from the config");
  return std::move(ck.params);
}

void save_params(const ExperimentConfig& cfg, const ParamStore& params, std::int64_t step, const std::string& name) {
  Checkpoint ck{cfg.model, params, config_digest(cfg), step, {}};
  save_checkpoint(ck, out_path(cfg, name));
  std::cerr << "wrote " << out_path(cfg, name).string() << " (" << ck.content_hash << ")\n";
}

void save_curve(const ExperimentConfig& cfg, const std::string& arm, const std::vector<CurveRow>& rows,
                const std::string& name) {
  std::ostringstream os;
  write_curve_csv(os, arm, rows);
  write_file(out_path(cfg, name), os.str());
}

std::string prune_report_csv(const PruneReport& r) {
  std::ostringstream os;
  os << "tensor,kept_fraction\n";
  os << "_global," << fmt_double(r.global_kept_fraction) << '\n';
  for (const auto& [name, f] : r.per_tensor_kept_fraction) os << name << ',' << fmt_double(f) << '\n';
  return os.str();
}

void save_reports(const ExperimentConfig& cfg, const std::vector<EvalReport>& reports, const std::string& suffix) {
  std::ostringstream rep, con;
  write_report_csv(rep, reports);
  write_concept_csv(con, reports);
  write_file(out_path(cfg, "report" + suffix + ".csv"), rep.str());
  write_file(out_path(cfg, "concepts" + suffix + ".csv"), con.str());
}

std::string arm_name(const ExperimentConfig& cfg, bool distill) {
  return std::string(cfg.ft.init == InitMode::Random ? "random" : "pruned") + (distill ? "-distill" : "-plain");
}

// Stage bodies shared by the individual subcommands and `run`.

ParamStore do_train_base(const ExperimentConfig& cfg) {
  TrainResult r = train_base(cfg);
  save_curve(cfg, "train", r.curve, "curve_train.csv");
  save_params(cfg, r.params, r.steps, "teacher.ckpt");
  if (!r.error.empty()) throw NumericError(r.error + " (last good parameters saved)");
  return std::move(r.params);
}

ParamStore do_prune(const ExperimentConfig& cfg, const ParamStore& teacher) {
  PruneResult r = prune_model(cfg, teacher);
  write_file(out_path(cfg, "prune_report.csv"), prune_report_csv(r.report));
  save_params(cfg, r.params, 0, "pruned.ckpt");
  std::cerr << "kept fraction " << r.report.global_kept_fraction << ", nnz " << r.params.nnz() << "\n";
  return std::move(r.params);
}

ParamStore do_finetune(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& pruned,
                       bool distill) {
  const std::string arm = arm_name(cfg, distill);
  TrainResult r = finetune(cfg, teacher, init_finetune(cfg, pruned), distill);
  save_curve(cfg, arm, r.curve, "curve_finetune_" + arm + ".csv");
  save_params(cfg, r.params, r.steps, "finetune_" + arm + ".ckpt");
  if (!r.error.empty()) throw NumericError(r.error + " (last good parameters saved)");
  return std::move(r.params);
}

UnlearnResult do_unlearn(const ExperimentConfig& cfg, const ParamStore& teacher, const ParamStore& init,
                         const std::string& method) {
  check_budget(cfg);
  UnlearnResult r = method == "bilevel" ? unlearn_bilevel(cfg, teacher, init) : unlearn_two_stage(cfg, teacher, init);
  std::ostringstream os;
  write_history_csv(os, r.history);
  write_file(out_path(cfg, "history_" + method + ".csv"), os.str());
  save_params(cfg, r.theta, r.total_iterations, "unlearn_" + method + ".ckpt");
  if (method == "two-stage") save_params(cfg, r.distilled, cfg.two_stage.N, "distilled_two-stage.ckpt");
  std::cerr << method << ": " << r.total_iterations << " iterations, forward calls " << r.fwd.calls() << "\n";
  return r;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

// Reads a headered CSV into rows of column-name -> cell.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream f(path);
  std::string line;
  std::vector<std::map<std::string, std::string>> rows;
  if (!std::getline(f, line)) return rows;
  const auto header = split(line, ',');
  while (std::getline(f, line)) {
    const auto cells = split(line, ',');
    if (cells.size() != header.size()) throw std::runtime_error(path.string() + ": ragged row");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

// Long-format tables plus a gnuplot data file with one indexed block per curve.
void plot_data(const fs::path& in, const fs::path& out) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::ostringstream curves, gnuplot, tradeoff;
  curves << "run,arm,iter,metric,value\n";
  tradeoff << "run,label,seed,removal_energy,mean_retention_energy\n";
  int block = 0;
  for (const auto& path : files) {
    const std::string name = path.filename().string();
    const std::string run = fs::relative(path.parent_path(), in).generic_string();
    if (name.rfind("curve_", 0) == 0 && path.extension() == ".csv") {
      const auto rows = read_csv(path);
      if (rows.empty()) continue;
      gnuplot << (block++ ? "\n\n" : "") << "# " << run << ' ' << rows.front().at("arm")
              << "\n# iter heldout_diff_loss heldout_ft_loss\n";
      for (const auto& r : rows) {
        for (const char* m : {"train_loss", "heldout_diff_loss", "heldout_ft_loss"})
          if (!r.at(m).empty()) curves << run << ',' << r.at("arm") << ',' << r.at("iter") << ',' << m << ',' << r.at(m) << '\n';
        gnuplot << r.at("iter") << ' ' << (r.at("heldout_diff_loss").empty() ? "NaN" : r.at("heldout_diff_loss")) << ' '
                << (r.at("heldout_ft_loss").empty() ? "NaN" : r.at("heldout_ft_loss")) << '\n';
      }
    } else if (name.rfind("report", 0) == 0 && path.extension() == ".csv") {
      for (const auto& r : read_csv(path))
        tradeoff << run << ',' << r.at("label") << ',' << r.at("seed") << ',' << r.at("removal_energy") << ','
                 << r.at("mean_retention_energy") << '\n';
    }
  }
  fs::create_directories(out);
  write_file(out / "plot_curves.csv", curves.str());
  write_file(out / "plot_curves.dat", gnuplot.str());
  write_file(out / "plot_tradeoff.csv", tradeoff.str());
  std::cerr << "wrote " << block << " curve blocks to " << out.string() << "\n";
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : split(text, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      seeds.push_back(std::stoull(part));
    } else {
      const auto lo = std::stoull(part.substr(0, dash)), hi = std::stoull(part.substr(dash + 1));
      if (hi < lo) throw ConfigError("bad seed range '" + part + "'");
      for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
    }
  }
  if (seeds.empty()) throw ConfigError("no seeds given");
  return seeds;
}

// Runs `blu <stage>` once per seed in child processes, `jobs` at a time, each
// with its own output directory.
int sweep(const Common& c, const std::string& stage, const std::vector<std::uint64_t>& seeds, int jobs) {
  const ExperimentConfig base = c.config.empty() ? parse_config("{}") : load_config(c.config);
  const fs::path root = c.out.empty() ? fs::path(base.out) : fs::path(c.out);
  fs::create_directories(root);
  const std::string exe = fs::read_symlink("/proc/self/exe").string();

  std::map<pid_t, std::uint64_t> running;
  std::map<std::uint64_t, int> status;
  auto reap = [&] {
    int st = 0;
    const pid_t pid = ::waitpid(-1, &st, 0);
    if (pid < 0) throw std::runtime_error("waitpid failed");
    status[running.at(pid)] = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
    running.erase(pid);
  };
  for (std::uint64_t seed : seeds) {
    while (static_cast<int>(running.size()) >= jobs) reap();
    std::vector<std::string> args{exe, stage, "--seed", std::to_string(seed), "--out",
                                  (root / ("seed-" + std::to_string(seed))).string()};
    if (!c.config.empty()) args.insert(args.end(), {"--config", c.config});
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (::posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ) != 0)
      throw std::runtime_error("cannot spawn " + exe);
    running[pid] = seed;
  }
  while (!running.empty()) reap();

  std::ostringstream index;
  index << "seed,out,exit_code\n";
  int failures = 0;
  for (const auto& [seed, code] : status) {
    index << seed << ",seed-" << seed << ',' << code << '\n';
    failures += code != 0;
  }
  write_file(root / "sweep_index.csv", index.str());
  std::cerr << seeds.size() - failures << "/" << seeds.size() << " runs succeeded\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel fine-tuning and unlearning of pruned diffusion models on synthetic concepts"};
  app.require_subcommand(1);

  Common common;
  std::string teacher_path, pruned_path, ckpt_path, label, method = "bilevel", init_mode, seeds_text = "0-4",
                                                           stage = "run", plot_in, plot_out;
  bool distill = true;
  int concept_id = 1, jobs = 1;
  std::size_t n = 1000;
  double guidance = 0.0;

  auto* train = app.add_subcommand("train-base", "Train the teacher on the full mixture");
  add_common(train, common);

  auto* prune = app.add_subcommand("prune", "Magnitude-prune a teacher checkpoint");
  add_common(prune, common);
  prune->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);

  auto* ft = app.add_subcommand("finetune", "Fine-tune a pruned checkpoint");
  add_common(ft, common);
  ft->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--pruned", pruned_path, "Pruned checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_flag("--with-distill,!--without-distill", distill, "Include the distillation terms (default on)");
  ft->add_option("--init", init_mode, "pruned|random (overrides ft.init)")->check(CLI::IsMember({"pruned", "random"}));

  auto* un = app.add_subcommand("unlearn", "Fine-tune while unlearning the target concept");
  add_common(un, common);
  un->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  un->add_option("--pruned", pruned_path, "Pruned checkpoint")->required()->check(CLI::ExistingFile);
  un->add_option("--method", method, "bilevel|two-stage")->check(CLI::IsMember({"bilevel", "two-stage"}));

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against the mixture");
  add_common(ev, common);
  ev->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--ckpt", ckpt_path, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  ev->add_option("--label", label, "Row label (default: file stem)");

  auto* sm = app.add_subcommand("sample", "Write samples for one concept as CSV");
  add_common(sm, common);
  sm->add_option("--ckpt", ckpt_path, "Checkpoint to sample")->required()->check(CLI::ExistingFile);
  sm->add_option("--concept", concept_id, "Concept id (0 is unconditional)")->check(CLI::NonNegativeNumber);
  sm->add_option("-n", n, "Number of samples")->check(CLI::PositiveNumber);
  sm->add_option("--guidance", guidance, "Guidance scale")->check(CLI::NonNegativeNumber);

  auto* run = app.add_subcommand("run", "Whole pipeline: train, prune, fine-tune arms, unlearn, evaluate");
  add_common(run, common);

  auto* sw = app.add_subcommand("sweep", "Run a stage for several seeds in worker processes");
  add_common(sw, common);
  sw->add_option("--seeds", seeds_text, "Seeds, e.g. 0-4 or 1,3,7");
  sw->add_option("--jobs", jobs, "Concurrent workers")->check(CLI::PositiveNumber);
  sw->add_option("--stage", stage, "Subcommand to run per seed")->check(CLI::IsMember({"run", "train-base"}));

  auto* pd = app.add_subcommand("plot-data", "Collect curves and reports into plotting tables");
  pd->add_option("--in", plot_in, "Directory to scan (recursively)")->required()->check(CLI::ExistingDirectory);
  pd->add_option("--out", plot_out, "Output directory (default: --in)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      do_train_base(resolve(common));
    } else if (*prune) {
      const ExperimentConfig cfg = resolve(common);
      do_prune(cfg, load_params(cfg, teacher_path));
    } else if (*ft) {
      const ExperimentConfig cfg = resolve(common, init_mode);
      do_finetune(cfg, load_params(cfg, teacher_path), load_params(cfg, pruned_path), distill);
    } else if (*un) {
      const ExperimentConfig cfg = resolve(common);
      do_unlearn(cfg, load_params(cfg, teacher_path), load_params(cfg, pruned_path), method);
    } else if (*ev) {
      const ExperimentConfig cfg = resolve(common);
      if (label.empty()) label = fs::path(ckpt_path).stem().string();
      save_reports(cfg, {evaluate_params(cfg, load_params(cfg, ckpt_path), load_params(cfg, teacher_path), label)},
                   "_" + label);
    } else if (*sm) {
      const ExperimentConfig cfg = resolve(common);
      const ParamStore params = load_params(cfg, ckpt_path);
      const Tensor x = ancestral_sample(Denoiser(cfg.model, params), concept_id, n, cfg.schedule.build(), guidance,
                                        Stream(cfg.seed).split("sample").split(static_cast<std::uint64_t>(concept_id)));
      std::ostringstream os;
      os << "x,y,concept\n";
      for (std::size_t i = 0; i < n; ++i)
        os << fmt_double(x.at(i, 0)) << ',' << fmt_double(x.at(i, 1)) << ',' << concept_id << '\n';
      write_file(out_path(cfg, "samples_c" + std::to_string(concept_id) + ".csv"), os.str());
    } else if (*run) {
      ExperimentConfig cfg = resolve(common);
      check_budget(cfg);
      const ParamStore teacher = do_train_base(cfg);
      const ParamStore pruned = do_prune(cfg, teacher);
      std::vector<EvalReport> reports{evaluate_params(cfg, teacher, teacher, "teacher"),
                                      evaluate_params(cfg, pruned, teacher, "pruned")};
      do_finetune(cfg, teacher, pruned, true);
      do_finetune(cfg, teacher, pruned, false);
      ExperimentConfig random = cfg;
      random.ft.init = InitMode::Random;
      do_finetune(random, teacher, pruned, true);
      const UnlearnResult bl = do_unlearn(cfg, teacher, pruned, "bilevel");
      const UnlearnResult ts = do_unlearn(cfg, teacher, pruned, "two-stage");
      reports.push_back(evaluate_params(cfg, ts.distilled, teacher, "distilled"));
      reports.push_back(evaluate_params(cfg, bl.theta, teacher, "bilevel"));
      reports.push_back(evaluate_params(cfg, ts.theta, teacher, "two-stage"));
      reports[3].fwd_teacher = bl.fwd.teacher.calls;
      reports[3].fwd_theta = bl.fwd.theta.calls;
      reports[3].fwd_vartheta = bl.fwd.vartheta.calls;
      reports[4].fwd_teacher = ts.fwd.teacher.calls;
      reports[4].fwd_theta = ts.fwd.theta.calls;
      save_reports(cfg, reports, "");
      std::ostringstream os;
      write_ranking_csv(os, compare_runs({reports[2], reports[3], reports[4]}));
      write_file(out_path(cfg, "ranking.csv"), os.str());
    } else if (*sw) {
      return sweep(common, stage, parse_seeds(seeds_text), jobs);
    } else if (*pd) {
      plot_data(plot_in, plot_out.empty() ? fs::path(plot_in) : fs::path(plot_out));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
