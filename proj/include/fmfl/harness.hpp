#pragma once

// Experiment runner and result files: rounds.csv, summary.json, curves.svg,
// parameter sweeps and the defense threshold search.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fmfl/config.hpp"

namespace fmfl {

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RoundRecord> records;
  double max_asr_early = 0;  // max mean ASR over rounds 0..5
  int total_filtered = 0;
  int total_fallbacks = 0;

  const RoundRecord& final_record() const { return records.back(); }
};

/// Wires data, scenario and defense from the configuration and runs all
/// rounds.
ExperimentResult run_config(const ExperimentConfig& cfg);

/// Shortest decimal form that reads back to the same double.
std::string format_real(double v);

void write_rounds_csv(std::ostream& os, const std::vector<RoundRecord>& records);
std::string summary_json(const ExperimentResult& result);
/// Line chart of mean ACC and ASR against the round index.
void write_curves_svg(std::ostream& os, const std::vector<RoundRecord>& records,
                      const std::string& title);
/// Writes rounds.csv, summary.json and (when enabled) curves.svg into `dir`.
void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir);

enum class SweepAxis { poison_ratio, ldi_ratio, beta, alpha, tau };

std::string to_string(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& s);

/// Copy of `cfg` with the axis set to `value`; validates the result.
/// ldi_ratio sets local_epochs = round(value * distill_epochs); beta switches
/// to the Dirichlet partition.
ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis, double value);

struct SweepRow {
  double value = 0;
  RoundRecord final;
};

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                                const std::vector<double>& values);
void write_sweep_csv(std::ostream& os, SweepAxis axis, const std::vector<SweepRow>& rows);

/// Sets the parameter that controls how strict a defense is: norm_threshold
/// (norm_thr), dp_sigma (dp), krum_f (krum), clip_cluster_c (clip_cluster),
/// sign_guard_hi (sign_guard), rfout_k (rfout).
void set_defense_strength(DefenseConfig& d, double value);

struct TuneResult {
  DefenseConfig defense;
  double value = 0;
  double final_acc = 0;
  double final_asr = 0;
  bool within_budget = false;
};

/// Tries `candidates` in order (strictest first) and returns the first whose
/// final ACC is at least `reference_acc - max_drop`; if none qualifies, the
/// one with the highest ACC.
TuneResult tune_defense(const ExperimentConfig& cfg, const std::vector<double>& candidates,
                        double reference_acc, double max_drop);

}  // namespace fmfl
