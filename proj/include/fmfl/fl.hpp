#pragma once

// The FM-FL training cycle: prototype pretraining on the synthetic set,
// per-round client selection and local fine-tuning, aggregation within
// prototype groups, ensemble distillation against all selected clients,
// and redistribution of prototype parameters.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmfl/data.hpp"
#include "fmfl/nn.hpp"

namespace fmfl {

enum class Regime { cross_silo, cross_device };

struct FLConfig {
  int rounds = 30;
  int clients = 10;
  double participation = 1.0;
  Regime regime = Regime::cross_silo;
  int local_epochs = 3;
  int distill_epochs = 1;
  int pretrain_epochs = 10;
  double lr_pretrain = 0.05;
  double lr_local = 0.05;
  double lr_distill = 0.01;
  int batch_size = 32;
  double alpha = 0.2;
  double tau = 1.0;
  KlDirection kl_direction = KlDirection::student_first;
  int prototypes = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PrototypeState {
  int id = 0;
  ArchSpec arch;
  ParamSet params;
};

struct ClientState {
  int id = 0;
  int prototype = 0;
  ParamSet params;
  std::shared_ptr<const Dataset> data;
};

/// Client updates of one prototype group, as flat vectors relative to the
/// round-start prototype.
struct UpdateSet {
  std::vector<Vec> deltas;
  std::vector<int> client_ids;

  std::size_t size() const { return deltas.size(); }
  void validate() const;
};

struct AggregateResult {
  Vec delta;
  int filtered = 0;       // clients excluded by the rule
  bool fallback = false;  // rule degenerated to a plain mean
  std::optional<int> selected;
};

using Aggregator = std::function<AggregateResult(const UpdateSet&, std::uint64_t seed)>;
/// Scenario hook: may rewrite a client's delta before aggregation.
using UpdateTransform = std::function<void(int client_id, Vec& delta)>;

struct FLState;
/// Runs once after the last round (post-training defenses).
using PostTraining = std::function<void(FLState&)>;

struct Hooks {
  Aggregator aggregate;  // empty: FedAvg
  UpdateTransform transform;
  PostTraining post_training;
  std::string defense_name = "none";
  std::string scenario_name = "AF_FL";
};

struct RoundRecord {
  int round = 0;
  double mean_acc = 0;
  double mean_asr = 0;
  std::vector<double> proto_acc;
  std::vector<double> proto_asr;
  std::string defense;
  std::string scenario;
  int selected = 0;
  int teachers = 0;  // size of the distillation teacher ensemble
  int filtered = 0;
  int fallbacks = 0;
  double wall_time = 0;  // seconds; not written to result files
};

struct FLState {
  FLConfig cfg;
  std::vector<PrototypeState> prototypes;
  std::vector<ClientState> clients;
  std::shared_ptr<const Dataset> init_data;
  std::shared_ptr<const Dataset> distill_data;
  EvalSets eval;
  int target = 0;
};

int hash_assign(int client, int num_prototypes);

std::vector<PrototypeState> init_prototypes(std::span<const ArchSpec> arches,
                                            const Dataset& init_data, int epochs, double lr,
                                            int batch_size, std::uint64_t seed);

std::vector<int> select_clients(int n_clients, double participation, int round,
                                std::uint64_t seed);

/// Coordinate-wise mean.
ParamSet fedavg(std::span<const ParamSet> params);

struct TeacherRef {
  const ParamSet* params;
  const ArchSpec* arch;
};

/// Mean teacher logits, one column per input.
Mat avg_teacher_logits(std::span<const TeacherRef> teachers, std::span<const Input> inputs);
Vec avg_teacher_logits(std::span<const TeacherRef> teachers, const Input& input);

struct DistillOptions {
  double alpha = 0.2;
  double tau = 1.0;
  KlDirection kl_direction = KlDirection::student_first;
  int epochs = 1;
  double lr = 0.01;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

PrototypeState ensemble_distill(PrototypeState proto, std::span<const TeacherRef> teachers,
                                const Dataset& data, const DistillOptions& opt);

/// Mean distillation objective of `params` over `data`.
double distill_objective(const ParamSet& params, const ArchSpec& arch,
                         std::span<const TeacherRef> teachers, const Dataset& data, double alpha,
                         double tau, KlDirection dir);

/// Builds the initial state: clients assigned by hash_assign, one local
/// dataset each. Prototypes are created by run_experiment.
FLState make_state(const FLConfig& cfg, std::vector<ArchSpec> arches,
                   std::vector<std::shared_ptr<const Dataset>> client_data,
                   std::shared_ptr<const Dataset> init_data,
                   std::shared_ptr<const Dataset> distill_data, EvalSets eval, int target);

/// Stage 1: pretrain prototypes and copy them to their clients.
void initialize(FLState& state);

/// Evaluates ACC/ASR averaged over all clients.
RoundRecord evaluate(const FLState& state, int round, const Hooks& hooks);

RoundRecord run_round(FLState& state, int round, const Hooks& hooks);

/// Stage 1, then rounds 1..T; returns T + 1 records (record 0 is the
/// initialization). When a post-training hook is set it runs after the last
/// round and the final record reports the post-processed models.
std::vector<RoundRecord> run_experiment(FLState& state, const Hooks& hooks);

/// Worker count from FMFL_THREADS (default: hardware concurrency).
int thread_count();

}  // namespace fmfl
