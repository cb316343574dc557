#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fmfl/defense.hpp"
#include "support.hpp"

using namespace fmfl;
using fmfl::testing::Gen;

namespace {

UpdateSet updates(std::vector<Vec> ds) {
  UpdateSet u;
  u.deltas = std::move(ds);
  u.client_ids.resize(u.deltas.size());
  std::iota(u.client_ids.begin(), u.client_ids.end(), 0);
  return u;
}

Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

// Krum by enumeration: every score from all pairwise distances.
int brute_krum(const UpdateSet& u, int f) {
  const int n = static_cast<int>(u.size());
  int best = -1;
  double best_score = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> d;
    for (int j = 0; j < n; ++j)
      if (j != i) d.push_back((u.deltas[i] - u.deltas[j]).squaredNorm());
    std::sort(d.begin(), d.end());
    double s = 0;
    for (int k = 0; k < n - f - 2; ++k) s += d[k];
    if (best < 0 || s < best_score || (s == best_score && u.client_ids[i] < u.client_ids[best])) {
      best = i;
      best_score = s;
    }
  }
  return u.client_ids[best];
}

// Best 2-way split of sorted 1-D values by within-cluster sum of squares.
std::pair<double, double> brute_two_means(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  double best = -1, lo = 0, hi = 0;
  for (std::size_t cut = 1; cut < x.size(); ++cut) {
    const double m0 = std::accumulate(x.begin(), x.begin() + cut, 0.0) / cut;
    const double m1 = std::accumulate(x.begin() + cut, x.end(), 0.0) / (x.size() - cut);
    double sse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) sse += std::pow(x[i] - (i < cut ? m0 : m1), 2);
    if (best < 0 || sse < best) {
      best = sse;
      lo = m0;
      hi = m1;
    }
  }
  return {lo, hi};
}

UpdateSet benign_cloud(Gen& g, const Vec& center, int n, double spread) {
  std::vector<Vec> ds;
  for (int i = 0; i < n; ++i) ds.push_back(center + g.vec(center.size(), spread));
  return updates(ds);
}

}  // namespace

TEST_CASE("norm_clip_aggregate") {
  const auto small = updates({v2(0.1, 0), v2(0, 0.2)});
  CHECK(norm_clip_aggregate(small, 1.0).delta == mean_delta(small));

  const auto big = updates({v2(6, 8)});
  const Vec out = norm_clip_aggregate(big, 5.0).delta;
  CHECK(out.norm() == doctest::Approx(5.0));
  CHECK(out(0) / out(1) == doctest::Approx(0.75));

  CHECK(norm_clip_aggregate(updates({v2(0, 0), v2(0, 0)}), 1.0).delta.isZero(0));
  CHECK_THROWS_AS(norm_clip_aggregate(UpdateSet{}, 1.0), Error);
  CHECK_THROWS_AS(norm_clip_aggregate(small, 0.0), Error);

  Gen g(2);
  for (int k = 0; k < 50; ++k) {
    const auto u = benign_cloud(g, g.vec(6, 3), g.integer(1, 8), 2.0);
    const double t = g.real(0.1, 5);
    CHECK(norm_clip_aggregate(u, t).delta.norm() <= t + 1e-12);
  }
}

TEST_CASE("dp_aggregate") {
  Gen g(3);
  const auto u = benign_cloud(g, g.vec(10, 1), 5, 0.5);
  CHECK(dp_aggregate(u, 2.0, 0.0, 7).delta == norm_clip_aggregate(u, 2.0).delta);
  CHECK(dp_aggregate(u, 2.0, 0.3, 7).delta == dp_aggregate(u, 2.0, 0.3, 7).delta);
  CHECK_FALSE(dp_aggregate(u, 2.0, 0.3, 7).delta == dp_aggregate(u, 2.0, 0.3, 8).delta);

  const auto wide = benign_cloud(g, g.vec(10000, 0.01), 3, 0.01);
  const Vec noise = dp_aggregate(wide, 1.0, 0.1, 1).delta - norm_clip_aggregate(wide, 1.0).delta;
  const double mean = noise.mean();
  const double sd = std::sqrt((noise.array() - mean).square().sum() / (noise.size() - 1));
  CHECK(sd == doctest::Approx(0.1).epsilon(0.1));
}

TEST_CASE("krum_select") {
  SUBCASE("identical updates pick the lowest id") {
    UpdateSet u = updates(std::vector<Vec>(5, v2(1, 1)));
    u.client_ids = {9, 4, 7, 3, 8};
    const auto r = krum_select(u, 1);
    CHECK(r.selected == 3);
    CHECK(r.filtered == 4);
  }
  SUBCASE("outlier is never selected") {
    const auto u = updates({v2(0, 0), v2(0.1, 0), v2(0, 0.1), v2(0.1, 0.1), v2(10, 10)});
    const auto r = krum_select(u, 1);
    CHECK(*r.selected == brute_krum(u, 1));
    CHECK(*r.selected != 4);
  }
  SUBCASE("insufficient clients") {
    CHECK_THROWS_AS(krum_select(updates(std::vector<Vec>(4, v2(0, 0))), 1), Error);
  }
  SUBCASE("matches enumeration on 100 random sets") {
    Gen g(41);
    for (int k = 0; k < 100; ++k) {
      const int f = g.integer(0, 2);
      const int n = g.integer(2 * f + 3, 9);
      std::vector<Vec> ds;
      const int dim = g.integer(1, 5);
      for (int i = 0; i < n; ++i) ds.push_back(g.vec(dim, g.coin() ? 1.0 : 5.0));
      if (g.coin()) ds[g.integer(0, n - 1)] = ds[0];  // exercise ties
      UpdateSet u = updates(ds);
      std::shuffle(u.client_ids.begin(), u.client_ids.end(), g.rng);
      const auto r = krum_select(u, f);
      CHECK(*r.selected == brute_krum(u, f));
      const auto pos = std::find(u.client_ids.begin(), u.client_ids.end(), *r.selected) - u.client_ids.begin();
      CHECK(r.delta == u.deltas[pos]);
    }
  }
}

TEST_CASE("make_aggregator falls back for small Krum groups") {
  DefenseConfig cfg;
  cfg.kind = DefenseKind::krum;
  cfg.krum_f = 1;
  const auto agg = make_aggregator(cfg);
  const auto u = updates({v2(1, 0), v2(0, 1)});
  const auto r = agg(u, 0);
  CHECK(r.fallback);
  CHECK(r.delta == mean_delta(u));
}

TEST_CASE("clip_cluster_aggregate") {
  SUBCASE("equal norms reduce to the mean") {
    const auto u = updates({v2(1, 0), v2(0, 1), v2(-1, 0)});
    const auto r = clip_cluster_aggregate(u, 2.0);
    CHECK((r.delta - mean_delta(u)).norm() <= 1e-15);
    CHECK(r.filtered == 0);
  }
  SUBCASE("a norm-100 outlier among unit norms is dropped") {
    std::vector<Vec> ds;
    Gen g(5);
    for (int i = 0; i < 9; ++i) ds.push_back(g.vec(4).normalized());
    ds.push_back(g.vec(4).normalized() * 100);
    const auto u = updates(ds);
    std::vector<double> norms;
    for (const auto& d : ds) norms.push_back(d.norm());
    const auto [lo, hi] = brute_two_means(norms);
    REQUIRE(hi > 2.0 * lo);
    const auto r = clip_cluster_aggregate(u, 2.0);
    CHECK(r.filtered == 1);
    Vec mean9 = Vec::Zero(4);
    for (int i = 0; i < 9; ++i) mean9 += ds[i];
    CHECK((r.delta - mean9 / 9).norm() <= 1e-12);
  }
  SUBCASE("single client") {
    const auto u = updates({v2(3, 4)});
    CHECK(clip_cluster_aggregate(u, 2.0).delta == v2(3, 4));
  }
}

TEST_CASE("sign_guard_aggregate") {
  SUBCASE("identical updates") {
    const auto u = updates(std::vector<Vec>(4, v2(0.5, -2)));
    const auto r = sign_guard_aggregate(u, 0.1, 3.0, 1.0, 1);
    CHECK(r.delta == v2(0.5, -2));
    CHECK(r.filtered == 0);
  }
  SUBCASE("a sign-flipped client is filtered") {
    Gen g(6);
    std::vector<Vec> ds;
    for (int i = 0; i < 9; ++i) ds.push_back(g.vec(50).cwiseAbs() + Vec::Constant(50, 0.1));
    ds.push_back(-ds[0]);
    // every aligned client has sign statistics (1, 0, 0) and the flipped one
    // (0, 1, 0), whatever coordinates are sampled
    const auto r = sign_guard_aggregate(updates(ds), 0.1, 3.0, 0.2, 3);
    CHECK(r.filtered == 1);
    Vec mean9 = Vec::Zero(50);
    for (int i = 0; i < 9; ++i) mean9 += ds[i];
    CHECK((r.delta - mean9 / 9).norm() <= 1e-12);
  }
  SUBCASE("single client") {
    CHECK(sign_guard_aggregate(updates({v2(1, -1)}), 0.1, 3.0, 0.5, 1).delta == v2(1, -1));
  }
  SUBCASE("bad bounds") {
    CHECK_THROWS_AS(sign_guard_aggregate(updates({v2(1, 1)}), 2.0, 1.0, 0.5, 1), Error);
  }
}

TEST_CASE("rfout_aggregate") {
  SUBCASE("identical updates") {
    const auto u = updates(std::vector<Vec>(5, v2(2, 2)));
    const auto r = rfout_aggregate(u, 3.0);
    CHECK(r.delta == v2(2, 2));
    CHECK(r.filtered == 0);
  }
  SUBCASE("far outlier is filtered") {
    Gen g(9);
    std::vector<Vec> ds;
    for (int i = 0; i < 9; ++i) ds.push_back(Vec::Ones(3) + g.vec(3, 0.1));
    ds.push_back(Vec::Constant(3, 50.0));
    // independent computation of the cut-off
    Vec med(3);
    for (int j = 0; j < 3; ++j) {
      std::vector<double> col;
      for (const auto& d : ds) col.push_back(d(j));
      std::sort(col.begin(), col.end());
      med(j) = (col[4] + col[5]) / 2;
    }
    std::vector<double> dist;
    for (const auto& d : ds) dist.push_back((d - med).norm());
    std::vector<double> sorted = dist;
    std::sort(sorted.begin(), sorted.end());
    const double m = (sorted[4] + sorted[5]) / 2;
    std::vector<double> dev;
    for (double d : dist) dev.push_back(std::abs(d - m));
    std::sort(dev.begin(), dev.end());
    const double cut = m + 3.0 * 1.4826 * (dev[4] + dev[5]) / 2;
    int expect_filtered = 0;
    for (double d : dist) expect_filtered += d > cut;
    REQUIRE(dist[9] > cut);

    const auto r = rfout_aggregate(updates(ds), 3.0);
    CHECK(r.filtered == expect_filtered);
  }
  SUBCASE("two clients keep both") {
    const auto u = updates({v2(0, 0), v2(5, 5)});
    const auto r = rfout_aggregate(u, 3.0);
    CHECK(r.filtered == 0);
    CHECK(r.delta == mean_delta(u));
  }
}

TEST_CASE("defense outputs on benign clouds") {
  Gen g(13);
  for (int k = 0; k < 30; ++k) {
    const Vec center = g.vec(200, 0.3);  // sign statistics need more than a few coordinates
    const int n = g.integer(5, 10);
    const auto u = benign_cloud(g, center, n, 0.05);
    const double base = (mean_delta(u) - center).norm();
    const double max_norm = std::max_element(u.deltas.begin(), u.deltas.end(), [](auto& a, auto& b) {
                              return a.norm() < b.norm();
                            })->norm();

    std::vector<std::pair<std::string, AggregateResult>> outs = {
        {"norm_thr", norm_clip_aggregate(u, max_norm)},
        {"dp", dp_aggregate(u, max_norm, 0.0, 1)},
        {"clip_cluster", clip_cluster_aggregate(u, 2.0)},
        {"sign_guard", sign_guard_aggregate(u, 0.1, 3.0, 1.0, 2)},
        {"rfout", rfout_aggregate(u, 3.0)},
    };
    for (const auto& [name, r] : outs) {
      CAPTURE(name);
      CHECK(r.delta.size() == center.size());
      CHECK(r.delta.allFinite());
      CHECK((r.delta - center).norm() <= 2 * base + 1e-12);
    }
    // Krum returns one client, so its error is bounded by the client spread
    const auto kr = krum_select(u, 1);
    double worst = 0;
    for (const auto& d : u.deltas) worst = std::max(worst, (d - center).norm());
    CHECK((kr.delta - center).norm() <= worst);
  }
}

TEST_CASE("prune") {
  ArchSpec a;
  a.input_dim = 3;
  a.hidden_sizes = {10};
  a.num_classes = 2;
  Gen g(17);
  PrototypeState proto{0, a, g.params(a)};
  Batch clean = g.batch(a, 40);

  SUBCASE("rate 0 leaves parameters unchanged") {
    const auto r = prune(proto, clean, 0.0);
    CHECK(r.proto.params == proto.params);
    CHECK(r.pruned_units.empty());
  }
  SUBCASE("rate 0.2 on 10 units zeroes the two least active") {
    const auto r = prune(proto, clean, 0.2);
    REQUIRE(r.pruned_units.size() == 2);

    // independent per-sample activations
    std::vector<std::pair<double, int>> act;
    for (int u = 0; u < 10; ++u) {
      double s = 0;
      for (const auto& in : clean.inputs)
        s += std::max(0.0, proto.params.layers[0].weight.row(u).dot(in.features) +
                               proto.params.layers[0].bias(u));
      act.emplace_back(s / clean.size(), u);
    }
    std::stable_sort(act.begin(), act.end(),
                     [](auto& x, auto& y) { return x.first < y.first; });
    std::vector<int> expect{act[0].second, act[1].second};
    std::sort(expect.begin(), expect.end());
    CHECK(r.pruned_units == expect);

    // exactly those units changed
    const auto& before = proto.params;
    const auto& after = r.proto.params;
    for (int u = 0; u < 10; ++u) {
      const bool pruned = std::find(expect.begin(), expect.end(), u) != expect.end();
      if (pruned) {
        CHECK(after.layers[0].weight.row(u).isZero(0));
        CHECK(after.layers[0].bias(u) == 0);
        CHECK(after.layers[1].weight.col(u).isZero(0));
      } else {
        CHECK(after.layers[0].weight.row(u) == before.layers[0].weight.row(u));
        CHECK(after.layers[0].bias(u) == before.layers[0].bias(u));
        CHECK(after.layers[1].weight.col(u) == before.layers[1].weight.col(u));
      }
    }
    CHECK(after.layers[1].bias == before.layers[1].bias);
  }
  SUBCASE("ceil count over random widths and rates") {
    for (int k = 0; k < 30; ++k) {
      ArchSpec b = a;
      b.hidden_sizes = {g.integer(1, 20)};
      const double rate = g.real(0, 1);
      PrototypeState p{0, b, g.params(b)};
      const auto r = prune(p, g.batch(b, 5), rate);
      CHECK(r.pruned_units.size() ==
            static_cast<std::size_t>(std::ceil(rate * b.hidden_sizes[0] - 1e-9)));
    }
  }
  SUBCASE("invalid rate") {
    CHECK_THROWS_AS(prune(proto, clean, 1.5), Error);
    CHECK_THROWS_AS(prune(proto, Batch{}, 0.2), Error);
  }
}

TEST_CASE("defense config parsing and validation") {
  CHECK(parse_defense_kind("clip_cluster") == DefenseKind::clip_cluster);
  CHECK_THROWS_AS(parse_defense_kind("flame"), Error);
  DefenseConfig d;
  d.kind = DefenseKind::rfout;
  d.pruning = true;
  CHECK(d.name() == "rfout+pruning");
  d.norm_threshold = 0;
  CHECK_THROWS_AS(d.validate(), Error);
}
