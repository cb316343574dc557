#include "fmfl/threat.hpp"

#include <algorithm>
#include <set>

namespace fmfl {

std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::AF_FL: return "AF_FL";
    case ScenarioKind::BD_FL: return "BD_FL";
    case ScenarioKind::BD_FMFL: return "BD_FMFL";
    case ScenarioKind::BD_FMFL_no_init: return "BD_FMFL_no_init";
    case ScenarioKind::BD_FMFL_no_KD: return "BD_FMFL_no_KD";
  }
  return "AF_FL";
}

ScenarioKind parse_scenario_kind(const std::string& s) {
  for (auto k : {ScenarioKind::AF_FL, ScenarioKind::BD_FL, ScenarioKind::BD_FMFL,
                 ScenarioKind::BD_FMFL_no_init, ScenarioKind::BD_FMFL_no_KD})
    if (to_string(k) == s) return k;
  throw Error("unknown scenario kind '" + s + "'");
}

void ScenarioSpec::validate(int n_clients) const {
  if (kind != ScenarioKind::BD_FL && !compromised.empty())
    throw Error("scenario.compromised is only allowed for BD_FL");
  if (kind == ScenarioKind::BD_FL && compromised.empty())
    throw Error("scenario.compromised: BD_FL needs at least one compromised client");
  if (std::set<int>(compromised.begin(), compromised.end()).size() != compromised.size())
    throw Error("scenario.compromised: duplicate client id");
  for (int id : compromised)
    if (id < 0 || id >= n_clients)
      throw Error("scenario.compromised: client id " + std::to_string(id) + " out of range");
  if (!(replacement_scale >= 0)) throw Error("scenario.replacement_scale must be >= 0");
  if (!(local_poison_ratio >= 0 && local_poison_ratio <= 1))
    throw Error("scenario.local_poison_ratio must be in [0, 1]");
  if (!(distill_inject_ratio >= 0 && distill_inject_ratio <= 1))
    throw Error("scenario.distill_inject_ratio must be in [0, 1]");
}

void apply_model_replacement(Vec& delta, double scale) { delta *= scale; }

ScenarioData build_scenario(const ScenarioSpec& spec, const Dataset& synthetic,
                            const std::vector<Dataset>& clients, std::uint64_t seed) {
  spec.validate(static_cast<int>(clients.size()));
  if (synthetic.poisoned_count() != 0) throw Error("build_scenario: synthetic set already poisoned");

  ScenarioData out;
  auto clean_syn = std::make_shared<const Dataset>(synthetic);
  auto poisoned_syn = [&] {
    return std::make_shared<const Dataset>(
        poison_dataset(synthetic, spec.trigger, derive_seed(seed, "syn-poison")));
  };
  for (const auto& c : clients) out.client_data.push_back(std::make_shared<const Dataset>(c));

  switch (spec.kind) {
    case ScenarioKind::AF_FL:
      out.init_data = out.distill_data = clean_syn;
      break;
    case ScenarioKind::BD_FMFL:
      out.init_data = out.distill_data = poisoned_syn();
      break;
    case ScenarioKind::BD_FMFL_no_init:
      out.init_data = clean_syn;
      out.distill_data = poisoned_syn();
      break;
    case ScenarioKind::BD_FMFL_no_KD:
      out.init_data = poisoned_syn();
      out.distill_data = clean_syn;
      break;
    case ScenarioKind::BD_FL: {
      out.init_data = clean_syn;
      out.distill_data = std::make_shared<const Dataset>(
          poison_dataset(synthetic, spec.trigger, spec.distill_inject_ratio, derive_seed(seed, "distill-inject")));
      for (int id : spec.compromised)
        out.client_data[id] = std::make_shared<const Dataset>(
            poison_dataset(clients[id], spec.trigger, spec.local_poison_ratio,
                           derive_seed(seed, "client-poison", {std::uint64_t(id)})));
      out.transform = [ids = spec.compromised, scale = spec.replacement_scale](int client, Vec& d) {
        if (std::find(ids.begin(), ids.end(), client) != ids.end()) apply_model_replacement(d, scale);
      };
      break;
    }
  }
  return out;
}

}  // namespace fmfl
