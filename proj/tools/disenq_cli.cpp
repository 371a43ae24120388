#include "disenq/disenq.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DisenQ activity-biometrics toolkit"};
  app.require_subcommand(1);
  int workers = 1;
  app.add_option("--workers", workers, "worker threads (1 = reproducible reference)")->check(CLI::PositiveNumber);

  std::string config_path, out_dir, data_dir, ckpt_path, resume_path, protocols;
  bool force = false, plots = false;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen->add_option("--config", config_path, "run config (JSON)")->required();
  gen->add_option("--out", out_dir, "dataset directory (default $DISENQ_OUTPUT_ROOT/data)");
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--data", data_dir, "dataset directory or manifest")->required();
  train->add_option("--out", out_dir, "run directory (default $DISENQ_OUTPUT_ROOT/train)");
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* eval = app.add_subcommand("evaluate", "retrieval evaluation");
  eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval->add_option("--data", data_dir, "dataset directory or manifest")->required();
  eval->add_option("--protocols", protocols, "comma-separated protocols or 'all'")->default_val("all");
  eval->add_option("--out", out_dir, "report directory (default $DISENQ_OUTPUT_ROOT/eval)");
  eval->add_flag("--plots", plots, "write CMC and loss-curve SVGs");

  auto* diag = app.add_subcommand("diagnose", "disentanglement diagnostics");
  diag->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  diag->add_option("--data", data_dir, "dataset directory or manifest")->required();
  diag->add_option("--out", out_dir, "report directory (default $DISENQ_OUTPUT_ROOT/diagnose)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    using disenq::fs::path;
    if (gen->parsed()) {
      auto cfg = disenq::load_config(config_path);
      const path out = out_dir.empty() ? disenq::output_root(cfg.output_dir) / "data" : path(out_dir);
      disenq::cmd_generate(cfg, out, force, std::cout);
    } else if (train->parsed()) {
      auto cfg = disenq::load_config(config_path);
      cfg.workers = workers;
      const path out = out_dir.empty() ? disenq::output_root(cfg.output_dir) / "train" : path(out_dir);
      std::optional<path> resume;
      if (!resume_path.empty()) resume = path(resume_path);
      disenq::cmd_train(cfg, data_dir, out, resume, std::cout);
    } else if (eval->parsed()) {
      std::vector<std::string> list;
      if (protocols == "all") {
        for (const auto& p : disenq::Protocol::all()) list.push_back(p.name());
      } else {
        list = split_list(protocols);
      }
      const path out = out_dir.empty() ? disenq::output_root() / "eval" : path(out_dir);
      disenq::cmd_evaluate(ckpt_path, data_dir, list, plots, out, workers, std::cout);
    } else if (diag->parsed()) {
      const path out = out_dir.empty() ? disenq::output_root() / "diagnose" : path(out_dir);
      disenq::cmd_diagnose(ckpt_path, data_dir, out, workers, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
