// fedqsn command line front end: run experiments, sweep one parameter axis,
// compare run summaries, and inspect checkpoint files.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedqsn/fedqsn.hpp"

namespace {

using fedqsn::RunConfig;
using fedqsn::RunSummary;

void print_summary(const RunSummary& s) {
  std::printf("config_hash        %016llx\n", static_cast<unsigned long long>(s.config_hash));
  std::printf("rounds             %zu\n", s.rounds.size());
  std::printf("best_global_loss   %.6g\n", s.best_global_loss);
  std::printf("best_proxy_loss    %.6g\n", s.best_proxy_loss);
  std::printf("gap                %.6g\n", s.gap);
  std::printf("mean_proxy_cosine  %.6g\n", s.mean_proxy_cosine);
  std::printf("reconstructed      %.6g (rescaled)  %.6g (raw)\n", s.reconstructed_loss_rescaled,
              s.reconstructed_loss_raw);
  std::printf("total_seconds      %.3f\n", s.total_seconds);
}

int cmd_run(const std::string& config_path, const std::string& output_dir,
            const std::string& resume) {
  RunConfig cfg = fedqsn::parse_config(config_path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  const std::optional<std::string> resume_opt =
      resume.empty() ? std::nullopt : std::optional<std::string>(resume);
  const RunSummary summary = fedqsn::run_experiment(cfg, resume_opt);
  print_summary(summary);
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& output_dir,
              const std::string& axis, const std::vector<double>& values) {
  RunConfig cfg = fedqsn::parse_config(config_path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  const auto summaries = fedqsn::sweep(cfg, axis, values);
  std::printf("%-12s %-14s %-14s %-12s %-12s\n", axis.c_str(), "best_global", "best_proxy",
              "gap", "cosine");
  for (std::size_t i = 0; i < summaries.size(); ++i)
    std::printf("%-12g %-14.6g %-14.6g %-12.6g %-12.6g\n", values[i],
                summaries[i].best_global_loss, summaries[i].best_proxy_loss, summaries[i].gap,
                summaries[i].mean_proxy_cosine);
  return 0;
}

int cmd_compare(const std::string& path_a, const std::string& path_b) {
  auto load = [](const std::string& path) {
    std::ifstream in(path);
    if (!in) throw fedqsn::IoError("cannot open '" + path + "'");
    return nlohmann::json::parse(in);
  };
  nlohmann::json a = load(path_a);
  nlohmann::json b = load(path_b);
  a.erase("runtime");
  b.erase("runtime");

  auto field = [](const nlohmann::json& j, const char* key) {
    return j.contains("results") && j["results"].contains(key)
               ? j["results"][key].get<double>()
               : std::numeric_limits<double>::quiet_NaN();
  };
  std::printf("%-22s %-16s %-16s %-16s\n", "field", "a", "b", "delta");
  for (const char* key : {"best_global_loss", "best_proxy_loss", "gap", "mean_proxy_cosine"}) {
    const double va = field(a, key), vb = field(b, key);
    std::printf("%-22s %-16.8g %-16.8g %-16.8g\n", key, va, vb, vb - va);
  }
  if (a == b) {
    std::printf("summaries match exactly (runtime excluded)\n");
    return 0;
  }
  std::printf("summaries differ\n");
  return 1;
}

int cmd_inspect(const std::string& path) {
  const fedqsn::Checkpoint cp = fedqsn::load_checkpoint(path);
  std::printf("config_hash   %016llx\n", static_cast<unsigned long long>(cp.config_hash));
  std::printf("round         %u\n", cp.server.round);
  std::printf("reports       %zu\n", cp.reports.size());
  std::printf("server mask   ratio %.4g, realized drop %.4g, keep scale %.6g\n",
              cp.server.server_mask.spec.ratio, cp.server.server_mask.realized_drop_fraction(),
              cp.server.server_mask.keep_scale);
  std::printf("tensors\n");
  for (const auto& [name, t] : cp.server.global_model.params) {
    std::printf("  %-20s [", name.c_str());
    for (std::size_t i = 0; i < t.shape().size(); ++i)
      std::printf(i == 0 ? "%zu" : " x %zu", t.shape()[i]);
    std::printf("]");
    const auto mit = cp.server.server_mask.tensors.find(name);
    if (mit != cp.server.server_mask.tensors.end())
      std::printf("  masked %zu/%zu columns", mit->second.dropped_count(), mit->second.columns);
    std::printf("\n");
  }
  for (const auto& [key, value] : cp.server.global_model.meta)
    std::printf("meta          %s = %s\n", key.c_str(), value.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedQSN federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path, output_dir, resume, axis, path_a, path_b, ckpt_path;
  std::vector<double> values;

  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config_path, "Path to the run configuration")->required();
  run->add_option("--output-dir", output_dir, "Override the configured output directory");
  run->add_option("--resume", resume, "Continue from a checkpoint file");

  auto* sw = app.add_subcommand("sweep", "Run one experiment per value of a single axis");
  sw->add_option("config", config_path, "Path to the run configuration")->required();
  sw->add_option("--axis", axis,
                 "Swept field: p1, p2, quant_bits, local_epochs, learning_rate, clients_per_round")
      ->required();
  sw->add_option("--values", values, "Comma separated values")->required()->delimiter(',');
  sw->add_option("--output-dir", output_dir, "Override the configured output directory");

  auto* cmp = app.add_subcommand("compare", "Compare two summary.json files");
  cmp->add_option("summary_a", path_a, "First summary")->required();
  cmp->add_option("summary_b", path_b, "Second summary")->required();

  auto* inspect = app.add_subcommand("inspect-checkpoint", "Describe a checkpoint file");
  inspect->add_option("path", ckpt_path, "Checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, output_dir, resume);
    if (sw->parsed()) return cmd_sweep(config_path, output_dir, axis, values);
    if (cmp->parsed()) return cmd_compare(path_a, path_b);
    if (inspect->parsed()) return cmd_inspect(ckpt_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
