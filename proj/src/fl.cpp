#include "fmfl/fl.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "fmfl/metrics.hpp"

namespace fmfl {

void FLConfig::validate() const {
  if (rounds < 0) throw Error("fl.rounds must be >= 0");
  if (clients < 1) throw Error("fl.clients must be >= 1");
  if (!(participation > 0 && participation <= 1)) throw Error("fl.participation must be in (0, 1]");
  if (local_epochs < 0 || distill_epochs < 0 || pretrain_epochs < 0)
    throw Error("fl: epochs must be >= 0");
  if (!(lr_pretrain >= 0 && lr_local >= 0 && lr_distill >= 0))
    throw Error("fl: learning rates must be >= 0");
  if (batch_size <= 0) throw Error("fl.batch_size must be positive");
  if (!(alpha >= 0 && alpha <= 1)) throw Error("fl.alpha must be in [0, 1]");
  if (!(tau > 0)) throw Error("fl.tau must be positive");
  if (prototypes < 1) throw Error("fl.prototypes must be >= 1");
}

void UpdateSet::validate() const {
  if (deltas.empty()) throw Error("update set is empty");
  if (client_ids.size() != deltas.size()) throw Error("update set: ids and deltas differ in length");
  for (const auto& d : deltas) {
    if (d.size() != deltas.front().size()) throw DimensionError("update set: shape mismatch");
    if (!d.allFinite()) throw NonFiniteError("update set: non-finite delta");
  }
}

int thread_count() {
  if (const char* env = std::getenv("FMFL_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Runs fn(i) for i in [0, n). Each index writes only its own slot, so the
// result does not depend on scheduling.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(thread_count()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

int hash_assign(int client, int num_prototypes) {
  if (num_prototypes < 1) throw Error("hash_assign: need at least one prototype");
  return client % num_prototypes;
}

std::vector<PrototypeState> init_prototypes(std::span<const ArchSpec> arches,
                                            const Dataset& init_data, int epochs, double lr,
                                            int batch_size, std::uint64_t seed) {
  std::vector<PrototypeState> out;
  for (std::size_t p = 0; p < arches.size(); ++p) {
    PrototypeState proto{static_cast<int>(p), arches[p],
                         init_params(arches[p], derive_seed(seed, "proto-init", {p}))};
    SgdOptions opt{epochs, batch_size, lr, derive_seed(seed, "pretrain", {p})};
    proto.params = sgd_train(std::move(proto.params), proto.arch, std::span(init_data.inputs),
                             std::span(init_data.labels), opt, LossConfig{});
    out.push_back(std::move(proto));
  }
  return out;
}

std::vector<int> select_clients(int n_clients, double participation, int round,
                                std::uint64_t seed) {
  if (!(participation > 0 && participation <= 1))
    throw Error("select_clients: participation must be in (0, 1]");
  const int m = std::clamp(static_cast<int>(std::lround(participation * n_clients)), 1, n_clients);
  std::vector<int> ids(n_clients);
  std::iota(ids.begin(), ids.end(), 0);
  if (m == n_clients) return ids;
  Engine rng = make_engine(derive_seed(seed, "select", {std::uint64_t(round)}));
  // partial Fisher-Yates
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, n_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

ParamSet fedavg(std::span<const ParamSet> params) {
  if (params.empty()) throw Error("fedavg: empty parameter list");
  const ParamSet& first = params.front();
  // shapes must agree block by block, not just in total size
  for (const auto& p : params) {
    if (p.layers.size() != first.layers.size() || p.embedding.rows() != first.embedding.rows() ||
        p.embedding.cols() != first.embedding.cols())
      throw DimensionError("fedavg: shape mismatch");
    for (std::size_t l = 0; l < p.layers.size(); ++l)
      if (p.layers[l].weight.rows() != first.layers[l].weight.rows() ||
          p.layers[l].weight.cols() != first.layers[l].weight.cols())
        throw DimensionError("fedavg: shape mismatch");
  }
  Vec sum = Vec::Zero(first.size());
  for (const auto& p : params) sum += flatten(p);
  ParamSet out = first;
  Index off = 0;
  const Vec mean = sum / static_cast<double>(params.size());
  out.for_each_block([&](auto block) {
    block = mean.segment(off, block.size());
    off += block.size();
  });
  return out;
}

Mat avg_teacher_logits(std::span<const TeacherRef> teachers, std::span<const Input> inputs) {
  if (teachers.empty()) throw Error("avg_teacher_logits: no teachers");
  Mat sum = forward_batch(*teachers[0].params, *teachers[0].arch, inputs);
  for (std::size_t t = 1; t < teachers.size(); ++t) {
    const Mat z = forward_batch(*teachers[t].params, *teachers[t].arch, inputs);
    if (z.rows() != sum.rows()) throw DimensionError("avg_teacher_logits: class count mismatch");
    sum += z;
  }
  return sum / static_cast<double>(teachers.size());
}

Vec avg_teacher_logits(std::span<const TeacherRef> teachers, const Input& input) {
  return avg_teacher_logits(teachers, std::span<const Input>(&input, 1)).col(0);
}

PrototypeState ensemble_distill(PrototypeState proto, std::span<const TeacherRef> teachers,
                                const Dataset& data, const DistillOptions& opt) {
  if (opt.epochs == 0 || opt.lr == 0) return proto;
  if (teachers.empty()) throw Error("ensemble_distill: no teachers");
  LossConfig cfg;
  cfg.alpha = opt.alpha;
  cfg.tau = opt.tau;
  cfg.kl_direction = opt.kl_direction;
  TeacherFn<double> teacher;
  if (opt.alpha < 1)
    teacher = [teachers](const Batch& b) { return avg_teacher_logits(teachers, std::span(b.inputs)); };
  SgdOptions sgd{opt.epochs, opt.batch_size, opt.lr, opt.seed};
  proto.params = sgd_train(std::move(proto.params), proto.arch, std::span(data.inputs),
                           std::span(data.labels), sgd, cfg, teacher);
  return proto;
}

double distill_objective(const ParamSet& params, const ArchSpec& arch,
                         std::span<const TeacherRef> teachers, const Dataset& data, double alpha,
                         double tau, KlDirection dir) {
  if (data.empty()) throw Error("distill_objective: empty dataset");
  const Mat z = forward_batch(params, arch, std::span(data.inputs));
  Mat t;
  if (alpha < 1) t = avg_teacher_logits(teachers, std::span(data.inputs));
  double total = 0;
  for (Index b = 0; b < z.cols(); ++b) {
    const Vec tb = alpha < 1 ? Vec(t.col(b)) : Vec();
    total += distill_loss<double>(z.col(b), data.labels[b], alpha, tau, dir,
                                  alpha < 1 ? &tb : nullptr);
  }
  return total / static_cast<double>(z.cols());
}

FLState make_state(const FLConfig& cfg, std::vector<ArchSpec> arches,
                   std::vector<std::shared_ptr<const Dataset>> client_data,
                   std::shared_ptr<const Dataset> init_data,
                   std::shared_ptr<const Dataset> distill_data, EvalSets eval, int target) {
  cfg.validate();
  if (static_cast<int>(arches.size()) != cfg.prototypes)
    throw Error("make_state: one architecture per prototype required");
  if (static_cast<int>(client_data.size()) != cfg.clients)
    throw Error("make_state: one dataset per client required");
  FLState s;
  s.cfg = cfg;
  for (int p = 0; p < cfg.prototypes; ++p) s.prototypes.push_back({p, arches[p], {}});
  for (int i = 0; i < cfg.clients; ++i) {
    if (!client_data[i] || client_data[i]->empty())
      throw Error("make_state: client " + std::to_string(i) + " has no data");
    s.clients.push_back({i, hash_assign(i, cfg.prototypes), {}, client_data[i]});
  }
  s.init_data = std::move(init_data);
  s.distill_data = std::move(distill_data);
  s.eval = std::move(eval);
  s.target = target;
  return s;
}

namespace {

void distribute(FLState& s, int p) {
  for (auto& c : s.clients)
    if (c.prototype == p) c.params = s.prototypes[p].params;
}

}  // namespace

void initialize(FLState& s) {
  std::vector<ArchSpec> arches;
  for (const auto& p : s.prototypes) arches.push_back(p.arch);
  s.prototypes = init_prototypes(arches, *s.init_data, s.cfg.pretrain_epochs, s.cfg.lr_pretrain,
                                 s.cfg.batch_size, s.cfg.seed);
  for (int p = 0; p < s.cfg.prototypes; ++p) distribute(s, p);
}

RoundRecord evaluate(const FLState& s, int round, const Hooks& hooks) {
  RoundRecord rec;
  rec.round = round;
  rec.defense = hooks.defense_name;
  rec.scenario = hooks.scenario_name;
  for (const auto& p : s.prototypes) {
    rec.proto_acc.push_back(accuracy(p.params, p.arch, s.eval.clean));
    rec.proto_asr.push_back(asr(p.params, p.arch, s.eval.triggered, s.target));
  }
  // Clients holding exactly their prototype's parameters share its metrics.
  double acc = 0, attack = 0;
  for (const auto& c : s.clients) {
    const auto& p = s.prototypes[c.prototype];
    if (c.params == p.params) {
      acc += rec.proto_acc[c.prototype];
      attack += rec.proto_asr[c.prototype];
    } else {
      const ModelView v{&c.params, &p.arch};
      const auto m = mean_client_metrics(std::span(&v, 1), s.eval.clean, s.eval.triggered, s.target);
      acc += m.acc;
      attack += m.asr;
    }
  }
  rec.mean_acc = acc / static_cast<double>(s.clients.size());
  rec.mean_asr = attack / static_cast<double>(s.clients.size());
  return rec;
}

RoundRecord run_round(FLState& s, int round, const Hooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& cfg = s.cfg;
  const auto selected = select_clients(cfg.clients, cfg.participation, round, cfg.seed);

  // Stage 2: local fine-tuning, one slot per selected client.
  std::vector<ParamSet> uploaded(selected.size());
  std::vector<Vec> deltas(selected.size());
  parallel_for(selected.size(), [&](std::size_t k) {
    const auto& c = s.clients[selected[k]];
    const auto& arch = s.prototypes[c.prototype].arch;
    SgdOptions opt{cfg.local_epochs, cfg.batch_size, cfg.lr_local,
                   derive_seed(cfg.seed, "client", {std::uint64_t(c.id), std::uint64_t(round)})};
    const ParamSet local = sgd_train(c.params, arch, std::span(c.data->inputs),
                                     std::span(c.data->labels), opt, LossConfig{});
    const Vec start = flatten(c.params);
    deltas[k] = flatten(local) - start;
    if (hooks.transform) hooks.transform(c.id, deltas[k]);
    uploaded[k] = unflatten<double>(arch, start + deltas[k]);
  });

  RoundRecord tmp;
  // Teachers point at copies: prototypes are moved through distillation below.
  std::vector<ArchSpec> arches;
  for (const auto& p : s.prototypes) arches.push_back(p.arch);
  std::vector<TeacherRef> teachers;
  for (std::size_t k = 0; k < selected.size(); ++k)
    teachers.push_back({&uploaded[k], &arches[s.clients[selected[k]].prototype]});

  // Stage 3: per-prototype aggregation, then distillation against all of S_t.
  for (auto& proto : s.prototypes) {
    UpdateSet group;
    for (std::size_t k = 0; k < selected.size(); ++k)
      if (s.clients[selected[k]].prototype == proto.id) {
        group.deltas.push_back(deltas[k]);
        group.client_ids.push_back(selected[k]);
      }
    if (group.deltas.empty()) continue;

    const auto agg_seed =
        derive_seed(cfg.seed, "aggregate", {std::uint64_t(proto.id), std::uint64_t(round)});
    AggregateResult res;
    if (hooks.aggregate) {
      res = hooks.aggregate(group, agg_seed);
    } else {
      group.validate();
      res.delta = Vec::Zero(group.deltas.front().size());
      for (const auto& d : group.deltas) res.delta += d;
      res.delta /= static_cast<double>(group.size());
    }
    tmp.filtered += res.filtered;
    tmp.fallbacks += res.fallback ? 1 : 0;
    if (!res.delta.allFinite()) throw NonFiniteError("aggregation produced non-finite values");
    proto.params = unflatten<double>(proto.arch, flatten(proto.params) + res.delta);

    DistillOptions opt{cfg.alpha,          cfg.tau,        cfg.kl_direction,
                       cfg.distill_epochs, cfg.lr_distill, cfg.batch_size,
                       derive_seed(cfg.seed, "distill", {std::uint64_t(proto.id), std::uint64_t(round)})};
    proto = ensemble_distill(std::move(proto), teachers, *s.distill_data, opt);
    distribute(s, proto.id);
  }

  RoundRecord rec = evaluate(s, round, hooks);
  rec.selected = static_cast<int>(selected.size());
  rec.teachers = static_cast<int>(teachers.size());
  rec.filtered = tmp.filtered;
  rec.fallbacks = tmp.fallbacks;
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<RoundRecord> run_experiment(FLState& s, const Hooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  initialize(s);
  std::vector<RoundRecord> records;
  records.push_back(evaluate(s, 0, hooks));
  records.back().wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (int t = 1; t <= s.cfg.rounds; ++t) records.push_back(run_round(s, t, hooks));
  if (hooks.post_training) {
    hooks.post_training(s);
    RoundRecord& last = records.back();
    const RoundRecord post = evaluate(s, last.round, hooks);
    last.mean_acc = post.mean_acc;
    last.mean_asr = post.mean_asr;
    last.proto_acc = post.proto_acc;
    last.proto_asr = post.proto_asr;
  }
  return records;
}

}  // namespace fmfl
