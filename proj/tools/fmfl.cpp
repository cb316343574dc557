// Command-line front end: run, sweep, validate.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fmfl/harness.hpp"

namespace {

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::istringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (item.find_first_not_of(" \t", used) != std::string::npos)
      throw fmfl::Error("bad sweep value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw fmfl::Error("--values is empty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Foundation-model FL backdoor simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, axis, values;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("--config", config_path, "Config file")->required();
  run->add_option("--out", out_dir, "Output directory (overrides output.dir)");
  run->add_option("--seed", seed, "Master seed (overrides seed)");

  auto* sweep = app.add_subcommand("sweep", "Run one experiment per axis value");
  sweep->add_option("--config", config_path, "Config file")->required();
  sweep->add_option("--axis", axis, "poison_ratio | ldi_ratio | beta | alpha | tau")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--out", out_dir, "Output directory (overrides output.dir)");

  auto* validate = app.add_subcommand("validate", "Check a config file");
  validate->add_option("--config", config_path, "Config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    fmfl::ExperimentConfig cfg = fmfl::load_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.fl.seed = *seed;
    }
    if (!out_dir.empty()) cfg.output.dir = out_dir;

    if (*validate) {
      std::cout << fmfl::config_json(cfg) << '\n';
      return 0;
    }
    if (*run) {
      const auto result = fmfl::run_config(cfg);
      fmfl::write_outputs(result, cfg.output.dir);
      const auto& last = result.final_record();
      std::cout << "round " << last.round << "  acc " << fmfl::format_real(last.mean_acc)
                << "  asr " << fmfl::format_real(last.mean_asr) << "  -> " << cfg.output.dir
                << '\n';
      return 0;
    }
    const auto ax = fmfl::parse_sweep_axis(axis);
    const auto rows = fmfl::run_sweep(cfg, ax, parse_values(values));
    std::filesystem::create_directories(cfg.output.dir);
    const auto path = std::filesystem::path(cfg.output.dir) / "sweep.csv";
    std::ofstream os(path, std::ios::binary);
    fmfl::write_sweep_csv(os, ax, rows);
    if (!os) throw fmfl::Error("failed writing '" + path.string() + "'");
    fmfl::write_sweep_csv(std::cout, ax, rows);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
