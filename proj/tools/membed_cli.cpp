#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "membed/config.hpp"
#include "membed/experiment.hpp"

namespace {

membed::ExperimentConfig resolve(const std::string& config_path, const std::optional<std::uint64_t>& seed) {
  membed::Config c;
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw std::runtime_error("cannot open config '" + config_path + "'");
    c = membed::Config::parse(is);
  }
  if (seed) c.set("seed", std::to_string(*seed));
  return membed::make_experiment_config(c);
}

void print_file(const membed::Workspace& ws, const std::string& rel) {
  std::ifstream is(ws.path(rel));
  if (!is) return;
  std::cout << "== " << rel << '\n' << is.rdbuf();
}

void list_written(const membed::Workspace& ws) {
  for (const auto& a : ws.written()) std::cout << "wrote " << (ws.root() / a).string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-embedding classifiers: synthetic experiments, OOD and adversarial detection"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir = "membed-out";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Experiment config file (key = value)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Master seed; overrides 'seed' in the config");
  app.add_option("--out-dir", out_dir, "Directory for data, models and reports")->capture_default_str();

  auto* gen_data = app.add_subcommand("gen-data", "Generate the synthetic train/val/test and OOD splits");
  auto* gen_emb = app.add_subcommand("gen-embeddings", "Generate synthetic label-embedding spaces");
  auto* train = app.add_subcommand("train", "Train baseline, ensemble, k-embedding and surrogate models");
  auto* eval_ood = app.add_subcommand("eval-ood", "Out-of-distribution detection reports and histograms");
  auto* eval_adv = app.add_subcommand("eval-adv", "Black-box FGSM set and agreement-detector rates");
  auto* eval_sem = app.add_subcommand("eval-semantic", "Accuracy and taxonomy relatedness of mistakes");
  auto* report = app.add_subcommand("report", "Run every stage and write the run manifest");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = resolve(config_path, seed);
    membed::Workspace ws(out_dir);
    if (report->parsed()) {
      const auto m = membed::run_experiment(cfg, out_dir);
      print_file(ws, "ood/report.csv");
      if (cfg.adv_enabled) print_file(ws, "adv/matched.csv");
      print_file(ws, "semantic/table.csv");
      std::cout << "config hash " << membed::hex(m.config_hash) << ", " << m.artifacts.size() << " artifacts, "
                << membed::detail::fixed(m.wall_clock_seconds, 1) << " s; manifest at "
                << (ws.root() / "manifest.txt").string() << '\n';
      return 0;
    }
    membed::bind_config(cfg, ws);
    if (gen_data->parsed()) membed::stage_gen_data(cfg, ws);
    if (gen_emb->parsed()) membed::stage_gen_embeddings(cfg, ws);
    if (train->parsed()) membed::stage_train(cfg, ws);
    if (eval_ood->parsed()) {
      membed::stage_eval_ood(cfg, ws);
      print_file(ws, "ood/report.csv");
    }
    if (eval_adv->parsed()) {
      membed::stage_eval_adv(cfg, ws);
      print_file(ws, "adv/matched.csv");
    }
    if (eval_sem->parsed()) {
      membed::stage_eval_semantic(cfg, ws);
      print_file(ws, "semantic/table.csv");
    }
    list_written(ws);
  } catch (const std::exception& e) {
    std::cerr << "membed: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
