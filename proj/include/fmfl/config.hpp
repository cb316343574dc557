#pragma once

// Experiment configuration and its text format.
//
// Grammar (one statement per line, UTF-8):
//
//   # comment               full-line comment; " #" also starts a trailing comment
//   [section]               following keys are read as section.key
//   key = value             value runs to end of line, surrounding blanks trimmed
//   fl.rounds = 5           dotted keys are read relative to the current section
//                           (before any header: absolute)
//
// Lists are comma-separated ("64, 32"). Booleans are true/false. A key may
// appear only once. Unknown keys are rejected.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fmfl/defense.hpp"
#include "fmfl/fl.hpp"
#include "fmfl/threat.hpp"

namespace fmfl {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct TaskConfig {
  InputMode mode = InputMode::vector;
  int dim = 32;  // feature count, or embedding width in token mode
  int classes = 5;
  double separation = 3.0;
  int vocab_size = 64;
  int seq_len = 12;
};

struct ModelConfig {
  std::vector<int> hidden = {64};
  bool hete = false;           // prototype p gets 1 + p % 3 extra pairs
  double width_scale = 0.25;   // applied to the 128/192/256 extra widths
};

enum class PartitionKind { iid, dirichlet };

struct DataConfig {
  int synthetic_size = 1000;
  int client_samples = 200;
  PartitionKind partition = PartitionKind::iid;
  double beta = 0.1;
  int eval_per_class = 200;
};

struct OutputConfig {
  std::string dir = "out";
  bool svg = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  TaskConfig task;
  ModelConfig model;
  DataConfig data;
  FLConfig fl;
  TriggerSpec trigger;
  ScenarioSpec scenario;  // its trigger field is ignored; `trigger` is used
  DefenseConfig defense;
  OutputConfig output;

  void validate() const;
};

/// Default configuration with the trigger resolved for the default task.
ExperimentConfig default_config();

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Resolved configuration as JSON text.
std::string config_json(const ExperimentConfig& cfg);

/// Architecture of every prototype.
std::vector<ArchSpec> build_arches(const ExperimentConfig& cfg);

}  // namespace fmfl
