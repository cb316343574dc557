#include <algorithm>
#include <cstdlib>
#include <mutex>

#include "doctest.h"
#include "fmfl/fl.hpp"
#include "fmfl/metrics.hpp"
#include "support.hpp"

using namespace fmfl;
using fmfl::testing::Gen;

namespace {

ArchSpec small_arch(int extra_pairs = 0) {
  ArchSpec a;
  a.input_dim = 6;
  a.hidden_sizes = {8};
  a.num_classes = 3;
  a.extra_pairs = extra_pairs;
  a.extra_width = extra_pairs ? 5 : 0;
  return a;
}

struct Tiny {
  SyntheticSource src = make_vector_source(6, 3, 3.0, 1);
  TriggerSpec trig;
  Tiny() { trig.variant = PatchTrigger{{5}, {4.0}}; }

  FLState state(FLConfig cfg, std::vector<ArchSpec> arches) {
    std::vector<std::shared_ptr<const Dataset>> data;
    for (int i = 0; i < cfg.clients; ++i)
      data.push_back(std::make_shared<const Dataset>(sample_clean(src, 10, 100 + i)));
    auto syn = std::make_shared<const Dataset>(sample_clean(src, 20, 7));
    return make_state(cfg, std::move(arches), data, syn, syn, build_eval_sets(src, trig, 20, 3), 0);
  }
};

FLConfig tiny_cfg() {
  FLConfig c;
  c.rounds = 3;
  c.clients = 4;
  c.local_epochs = 1;
  c.distill_epochs = 1;
  c.pretrain_epochs = 2;
  c.batch_size = 8;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("hash_assign") {
  CHECK(hash_assign(0, 1) == 0);
  CHECK(hash_assign(7, 3) == 1);
  CHECK(hash_assign(7, 3) == hash_assign(7, 3));
  CHECK_THROWS_AS(hash_assign(1, 0), Error);
}

TEST_CASE("select_clients") {
  CHECK(select_clients(100, 0.1, 1, 9).size() == 10);
  CHECK(select_clients(7, 1.0, 3, 9) == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(select_clients(50, 0.2, 4, 9) == select_clients(50, 0.2, 4, 9));
  CHECK(select_clients(10, 0.01, 1, 9).size() == 1);
  Gen g(3);
  for (int k = 0; k < 100; ++k) {
    const int n = g.integer(1, 60);
    const auto s = select_clients(n, g.real(0.01, 1), g.integer(0, 50), g.integer(0, 1000));
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
    CHECK(s.front() >= 0);
    CHECK(s.back() < n);
  }
  CHECK_THROWS_AS(select_clients(10, 0.0, 1, 1), Error);
}

TEST_CASE("fedavg") {
  ArchSpec a;
  a.input_dim = 1;
  a.num_classes = 2;
  a.hidden_sizes = {};
  // two flat parameter vectors: W is 2x1, b is 2
  ParamSet x = unflatten<double>(a, (Vec(4) << 1, 3, 0, 0).finished());
  ParamSet y = unflatten<double>(a, (Vec(4) << 3, 5, 0, 0).finished());
  const std::vector<ParamSet> both{x, y};
  CHECK(flatten(fedavg(both)) == (Vec(4) << 2, 4, 0, 0).finished());
  CHECK(fedavg(std::vector<ParamSet>{x}) == x);
  CHECK(fedavg(std::vector<ParamSet>{x, x, x}) == x);
  CHECK_THROWS_AS(fedavg(std::vector<ParamSet>{}), Error);
  CHECK_THROWS_AS(fedavg(std::vector<ParamSet>{x, init_params(small_arch(), 1)}), DimensionError);

  Gen g(19);
  for (int k = 0; k < 50; ++k) {
    const ArchSpec arch = g.arch();
    std::vector<ParamSet> ps;
    const int n = g.integer(1, 6);
    for (int i = 0; i < n; ++i) ps.push_back(g.params(arch));
    const Vec avg = flatten(fedavg(ps));
    Vec mean = Vec::Zero(avg.size()), lo = flatten(ps[0]), hi = lo;
    for (const auto& p : ps) {
      const Vec f = flatten(p);
      mean += f;
      lo = lo.cwiseMin(f);
      hi = hi.cwiseMax(f);
    }
    mean /= n;
    CHECK((avg - mean).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(((avg.array() >= lo.array() - 1e-12) && (avg.array() <= hi.array() + 1e-12)).all());
  }
}

TEST_CASE("avg_teacher_logits") {
  ArchSpec a;
  a.input_dim = 2;
  a.num_classes = 2;
  ParamSet id = zero_params<double>(a), swap = zero_params<double>(a);
  id.layers[0].weight.setIdentity();
  swap.layers[0].weight << 0, 1, 1, 0;
  Input x;
  x.features = (Vec(2) << 1, 0).finished();

  const TeacherRef one[] = {{&id, &a}};
  CHECK(avg_teacher_logits(one, x) == x.features);
  const TeacherRef same[] = {{&id, &a}, {&id, &a}};
  CHECK(avg_teacher_logits(same, x) == x.features);
  const TeacherRef mixed[] = {{&id, &a}, {&swap, &a}};
  const Vec m = avg_teacher_logits(mixed, x);
  CHECK(m(0) == 0.5);
  CHECK(m(1) == 0.5);
  CHECK_THROWS_AS(avg_teacher_logits(std::span<const TeacherRef>{}, x), Error);

  // heterogeneous teachers
  const ArchSpec b = small_arch(2), c = small_arch(0);
  const ParamSet pb = init_params(b, 1), pc = init_params(c, 2);
  Input y;
  y.features = Vec::Ones(6);
  const TeacherRef hete[] = {{&pb, &b}, {&pc, &c}};
  const Vec expect = (forward(pb, b, y) + forward(pc, c, y)) / 2;
  CHECK((avg_teacher_logits(hete, y) - expect).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("ensemble_distill") {
  Tiny t;
  const ArchSpec a = small_arch();
  const Dataset d = sample_clean(t.src, 30, 4);
  PrototypeState proto{0, a, init_params(a, 3)};
  const ParamSet teacher = init_params(a, 4);
  const TeacherRef teachers[] = {{&teacher, &a}};

  DistillOptions opt;
  opt.epochs = 0;
  CHECK(ensemble_distill(proto, teachers, d, opt).params == proto.params);
  opt.epochs = 2;
  opt.lr = 0;
  CHECK(ensemble_distill(proto, teachers, d, opt).params == proto.params);

  // full-batch step with a small rate does not increase the objective
  opt.epochs = 1;
  opt.lr = 1e-3;
  opt.batch_size = static_cast<int>(d.size());
  const double before = distill_objective(proto.params, a, teachers, d, opt.alpha, opt.tau, opt.kl_direction);
  const auto after_proto = ensemble_distill(proto, teachers, d, opt);
  const double after =
      distill_objective(after_proto.params, a, teachers, d, opt.alpha, opt.tau, opt.kl_direction);
  CHECK(after <= before + 1e-6);
}

TEST_CASE("init_prototypes with zero epochs is a fresh initialization") {
  Tiny t;
  const Dataset d = sample_clean(t.src, 5, 1);
  const std::vector<ArchSpec> arches{small_arch(), small_arch(1)};
  const auto protos = init_prototypes(arches, d, 0, 0.1, 8, 77);
  REQUIRE(protos.size() == 2);
  for (std::size_t p = 0; p < 2; ++p)
    CHECK(protos[p].params == init_params(arches[p], derive_seed(77, "proto-init", {p})));
}

TEST_CASE("run_experiment: T = 0 gives only the initialization record") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  cfg.rounds = 0;
  FLState s = t.state(cfg, {small_arch()});
  const auto recs = run_experiment(s, {});
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].round == 0);
}

TEST_CASE("one client, no distillation: prototype equals the fine-tuned client") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  cfg.clients = 1;
  cfg.distill_epochs = 0;
  FLState s = t.state(cfg, {small_arch()});
  initialize(s);
  const ParamSet start = s.prototypes[0].params;
  run_round(s, 1, {});
  const auto& c = s.clients[0];
  const ParamSet local =
      sgd_train(start, small_arch(), std::span(c.data->inputs), std::span(c.data->labels),
                {cfg.local_epochs, cfg.batch_size, cfg.lr_local, derive_seed(cfg.seed, "client", {0, 1})},
                LossConfig{});
  CHECK((flatten(s.prototypes[0].params) - flatten(local)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("prototype without selected clients keeps its parameters") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  cfg.clients = 2;
  cfg.prototypes = 2;
  cfg.participation = 0.5;
  FLState s = t.state(cfg, {small_arch(), small_arch(1)});
  initialize(s);
  const auto sel = select_clients(2, 0.5, 1, cfg.seed);
  REQUIRE(sel.size() == 1);
  const int idle = 1 - s.clients[sel[0]].prototype;
  const ParamSet before = s.prototypes[idle].params;
  run_round(s, 1, {});
  CHECK(s.prototypes[idle].params == before);
}

TEST_CASE("rho = 1, P = 1, no distillation reduces to plain FedAvg") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  cfg.distill_epochs = 0;
  FLState s = t.state(cfg, {small_arch()});
  const auto arch = small_arch();
  initialize(s);
  ParamSet global = s.prototypes[0].params;
  std::vector<std::shared_ptr<const Dataset>> data;
  for (const auto& c : s.clients) data.push_back(c.data);

  for (int round = 1; round <= cfg.rounds; ++round) {
    run_round(s, round, {});
    // reference loop
    std::vector<ParamSet> locals;
    for (int i = 0; i < cfg.clients; ++i)
      locals.push_back(sgd_train(global, arch, std::span(data[i]->inputs),
                                 std::span(data[i]->labels),
                                 {cfg.local_epochs, cfg.batch_size, cfg.lr_local,
                                  derive_seed(cfg.seed, "client", {std::uint64_t(i), std::uint64_t(round)})},
                                 LossConfig{}));
    global = fedavg(locals);
    CHECK((flatten(s.prototypes[0].params) - flatten(global)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("distillation teachers are all selected clients, aggregation is per group") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  cfg.clients = 6;
  cfg.prototypes = 3;
  FLState s = t.state(cfg, {small_arch(1), small_arch(2), small_arch(3)});
  std::vector<std::size_t> group_sizes;
  Hooks hooks;
  hooks.aggregate = [&](const UpdateSet& u, std::uint64_t) {
    group_sizes.push_back(u.size());
    AggregateResult r;
    r.delta = Vec::Zero(u.deltas.front().size());
    for (const auto& d : u.deltas) r.delta += d / double(u.size());
    return r;
  };
  const auto recs = run_experiment(s, hooks);
  for (std::size_t r = 1; r < recs.size(); ++r) CHECK(recs[r].teachers == 6);
  CHECK(group_sizes.size() == 3 * cfg.rounds);
  for (auto n : group_sizes) CHECK(n == 2);
  for (const auto& c : s.clients) CHECK(matches(c.params, s.prototypes[c.prototype].arch));
}

TEST_CASE("run_experiment is deterministic and independent of the thread count") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  cfg.clients = 5;
  cfg.prototypes = 2;
  auto once = [&](const char* threads) {
    setenv("FMFL_THREADS", threads, 1);
    FLState s = t.state(cfg, {small_arch(), small_arch(2)});
    auto recs = run_experiment(s, {});
    unsetenv("FMFL_THREADS");
    return std::make_pair(recs, s.prototypes);
  };
  const auto [r1, p1] = once("1");
  const auto [r4, p4] = once("4");
  REQUIRE(r1.size() == r4.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].mean_acc == r4[i].mean_acc);
    CHECK(r1[i].mean_asr == r4[i].mean_asr);
  }
  for (std::size_t p = 0; p < p1.size(); ++p) CHECK(p1[p].params == p4[p].params);
}

TEST_CASE("update transform sees each selected client once") {
  Tiny t;
  FLConfig cfg = tiny_cfg();
  FLState s = t.state(cfg, {small_arch()});
  std::vector<int> seen;
  std::mutex mu;
  Hooks hooks;
  hooks.transform = [&](int id, Vec&) {
    std::lock_guard lock(mu);
    seen.push_back(id);
  };
  initialize(s);
  run_round(s, 1, hooks);
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("FLConfig validation") {
  FLConfig c;
  CHECK_NOTHROW(c.validate());
  c.participation = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = FLConfig{};
  c.rounds = -1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = FLConfig{};
  c.tau = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("metrics") {
  ArchSpec a;
  a.input_dim = 2;
  a.num_classes = 5;
  const ParamSet zero = zero_params<double>(a);
  const auto src = make_vector_source(2, 5, 3.0, 1);
  const Dataset balanced = sample_clean(src, 40, 2);
  CHECK(accuracy(zero, a, balanced) == doctest::Approx(0.2));

  // a constant-class predictor via the bias
  ParamSet to_class = zero;
  to_class.layers[0].bias(3) = 1;
  TriggerSpec trig;
  trig.variant = PatchTrigger{{0}, {5.0}};
  trig.target = 3;
  const auto ev = build_eval_sets(src, trig, 10, 4);
  CHECK(asr(to_class, a, ev.triggered, 3) == 1.0);
  CHECK(asr(zero, a, ev.triggered, 3) == 0.0);
  CHECK_THROWS_AS(accuracy(zero, a, Dataset{}), Error);
  CHECK_THROWS_AS(asr(zero, a, ev.clean, 3), Error);  // contains target originals

  const ModelView views[] = {{&to_class, &a}, {&zero, &a}};
  const auto m = mean_client_metrics(views, ev.clean, ev.triggered, 3);
  CHECK(m.asr == doctest::Approx(0.5));
  CHECK(m.acc == doctest::Approx((accuracy(to_class, a, ev.clean) + accuracy(zero, a, ev.clean)) / 2));

  // random weights on a large balanced set land near chance
  const ArchSpec r = [] {
    ArchSpec s;
    s.input_dim = 8;
    s.hidden_sizes = {16};
    s.num_classes = 5;
    return s;
  }();
  const auto src8 = make_vector_source(8, 5, 0.01, 3);
  const Dataset big = sample_clean(src8, 2000, 5);
  CHECK(std::abs(accuracy(init_params(r, 11), r, big) - 0.2) <= 0.05);
}
