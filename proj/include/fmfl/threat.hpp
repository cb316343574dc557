#pragma once

// Scenario wiring: which datasets are poisoned and which client updates are
// rewritten, for the attack-free control, the classic client-side backdoor,
// the synthetic-data backdoor and its two ablations.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fmfl/data.hpp"
#include "fmfl/fl.hpp"

namespace fmfl {

enum class ScenarioKind { AF_FL, BD_FL, BD_FMFL, BD_FMFL_no_init, BD_FMFL_no_KD };

std::string to_string(ScenarioKind k);
ScenarioKind parse_scenario_kind(const std::string& s);

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::AF_FL;
  TriggerSpec trigger;
  std::vector<int> compromised;  // BD_FL only
  double replacement_scale = 3.0;
  double local_poison_ratio = 0.2;
  // Ratio for the triggered copies injected into the BD_FL distillation set.
  double distill_inject_ratio = 0.01;

  void validate(int n_clients) const;
};

struct ScenarioData {
  std::shared_ptr<const Dataset> init_data;
  std::shared_ptr<const Dataset> distill_data;
  std::vector<std::shared_ptr<const Dataset>> client_data;
  UpdateTransform transform;
};

/// `synthetic` is the clean synthetic set; `clients` the clean local sets.
/// Neither is modified: poisoned variants are fresh copies.
ScenarioData build_scenario(const ScenarioSpec& spec, const Dataset& synthetic,
                            const std::vector<Dataset>& clients, std::uint64_t seed);

void apply_model_replacement(Vec& delta, double scale);

}  // namespace fmfl
