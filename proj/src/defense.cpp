#include "fmfl/defense.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fmfl {

std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::norm_thr: return "norm_thr";
    case DefenseKind::dp: return "dp";
    case DefenseKind::krum: return "krum";
    case DefenseKind::clip_cluster: return "clip_cluster";
    case DefenseKind::sign_guard: return "sign_guard";
    case DefenseKind::rfout: return "rfout";
  }
  return "none";
}

DefenseKind parse_defense_kind(const std::string& s) {
  for (auto k : {DefenseKind::none, DefenseKind::norm_thr, DefenseKind::dp, DefenseKind::krum,
                 DefenseKind::clip_cluster, DefenseKind::sign_guard, DefenseKind::rfout})
    if (to_string(k) == s) return k;
  throw Error("unknown defense kind '" + s + "'");
}

void DefenseConfig::validate() const {
  if (!(norm_threshold > 0)) throw Error("defense.norm_threshold must be > 0");
  if (!(dp_sigma >= 0)) throw Error("defense.dp_sigma must be >= 0");
  if (krum_f < 0) throw Error("defense.krum_f must be >= 0");
  if (!(clip_cluster_c > 1)) throw Error("defense.clip_cluster_c must be > 1");
  if (!(sign_guard_lo > 0 && sign_guard_lo < sign_guard_hi))
    throw Error("defense.sign_guard bounds must satisfy 0 < lo < hi");
  if (!(sign_guard_fraction > 0 && sign_guard_fraction <= 1))
    throw Error("defense.sign_guard_fraction must be in (0, 1]");
  if (!(rfout_k > 0)) throw Error("defense.rfout_k must be > 0");
  if (!(pruning_rate >= 0 && pruning_rate <= 1)) throw Error("defense.pruning_rate must be in [0, 1]");
  if (pruning_samples <= 0) throw Error("defense.pruning_samples must be positive");
}

std::string DefenseConfig::name() const {
  return to_string(kind) + (pruning ? "+pruning" : "");
}

namespace {

// Minimum centroid distance, in sign-fraction units, for SignGuard to split.
constexpr double kSignGap = 0.1;

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Vec mean_of(const UpdateSet& u, const std::vector<std::size_t>& keep) {
  Vec m = Vec::Zero(u.deltas.front().size());
  for (auto i : keep) m += u.deltas[i];
  return m / static_cast<double>(keep.size());
}

Vec clipped(const Vec& d, double threshold) {
  const double n = d.norm();
  return n > threshold ? Vec(d * (threshold / n)) : d;
}

}  // namespace

Vec mean_delta(const UpdateSet& updates) {
  updates.validate();
  std::vector<std::size_t> all(updates.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return mean_of(updates, all);
}

AggregateResult norm_clip_aggregate(const UpdateSet& updates, double threshold) {
  updates.validate();
  if (!(threshold > 0)) throw Error("norm_clip: threshold must be > 0");
  AggregateResult r;
  r.delta = Vec::Zero(updates.deltas.front().size());
  for (const auto& d : updates.deltas) r.delta += clipped(d, threshold);
  r.delta /= static_cast<double>(updates.size());
  return r;
}

AggregateResult dp_aggregate(const UpdateSet& updates, double threshold, double sigma,
                             std::uint64_t seed) {
  if (!(sigma >= 0)) throw Error("dp: sigma must be >= 0");
  AggregateResult r = norm_clip_aggregate(updates, threshold);
  if (sigma > 0) {
    Engine rng = make_engine(derive_seed(seed, "dp-noise"));
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& x : r.delta) x += noise(rng);
  }
  return r;
}

AggregateResult krum_select(const UpdateSet& updates, int f) {
  updates.validate();
  const int n = static_cast<int>(updates.size());
  if (f < 0) throw Error("krum: f must be >= 0");
  if (n < 2 * f + 3)
    throw Error("krum: insufficient clients (n = " + std::to_string(n) + ", need " +
                std::to_string(2 * f + 3) + ")");
  Mat d2(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j)
      d2(i, j) = d2(j, i) = (updates.deltas[i] - updates.deltas[j]).squaredNorm();
  const int m = n - f - 2;
  int best = -1;
  double best_score = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    std::vector<double> others;
    for (int j = 0; j < n; ++j)
      if (j != i) others.push_back(d2(i, j));
    std::partial_sort(others.begin(), others.begin() + m, others.end());
    const double score = std::accumulate(others.begin(), others.begin() + m, 0.0);
    if (score < best_score ||
        (score == best_score && updates.client_ids[i] < updates.client_ids[best])) {
      best = i;
      best_score = score;
    }
  }
  AggregateResult r;
  r.delta = updates.deltas[best];
  r.selected = updates.client_ids[best];
  r.filtered = n - 1;
  return r;
}

AggregateResult clip_cluster_aggregate(const UpdateSet& updates, double c) {
  updates.validate();
  if (!(c > 1)) throw Error("clip_cluster: c must be > 1");
  const std::size_t n = updates.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = updates.deltas[i].norm();

  // 1-D two-means seeded at the extremes
  double lo = *std::min_element(norms.begin(), norms.end());
  double hi = *std::max_element(norms.begin(), norms.end());
  std::vector<char> high(n, 0);
  if (hi > lo) {
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = false;
      for (std::size_t i = 0; i < n; ++i) {
        const char h = std::abs(norms[i] - hi) < std::abs(norms[i] - lo);
        changed |= h != high[i];
        high[i] = h;
      }
      double s[2] = {0, 0};
      std::size_t cnt[2] = {0, 0};
      for (std::size_t i = 0; i < n; ++i) {
        s[int(high[i])] += norms[i];
        ++cnt[int(high[i])];
      }
      if (cnt[0] == 0 || cnt[1] == 0) break;
      lo = s[0] / double(cnt[0]);
      hi = s[1] / double(cnt[1]);
      if (!changed && iter > 0) break;
    }
  }
  const auto n_low = static_cast<std::size_t>(std::count(high.begin(), high.end(), 0));
  const bool split = n_low > 0 && n_low < n;
  const bool discard = split && hi > c * lo && n_low >= (n + 1) / 2;

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (!discard || !high[i]) keep.push_back(i);
  std::vector<double> kept_norms;
  for (auto i : keep) kept_norms.push_back(norms[i]);
  const double bound = median(kept_norms);

  AggregateResult r;
  r.delta = Vec::Zero(updates.deltas.front().size());
  for (auto i : keep) r.delta += bound > 0 ? clipped(updates.deltas[i], bound) : updates.deltas[i];
  r.delta /= static_cast<double>(keep.size());
  r.filtered = static_cast<int>(n - keep.size());
  return r;
}

AggregateResult sign_guard_aggregate(const UpdateSet& updates, double lo, double hi,
                                     double fraction, std::uint64_t seed) {
  updates.validate();
  if (!(lo > 0 && lo < hi)) throw Error("sign_guard: bounds must satisfy 0 < lo < hi");
  if (!(fraction > 0 && fraction <= 1)) throw Error("sign_guard: fraction must be in (0, 1]");
  const std::size_t n = updates.size();
  const Index dim = updates.deltas.front().size();

  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = updates.deltas[i].norm();
  const double med = median(norms);
  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < n; ++i)
    if (med == 0 || (norms[i] >= lo * med && norms[i] <= hi * med)) survivors.push_back(i);

  AggregateResult r;
  if (survivors.empty()) {
    r.delta = mean_delta(updates);
    r.fallback = true;
    return r;
  }

  // sign statistics on a random coordinate subsample
  std::vector<Index> coords(dim);
  std::iota(coords.begin(), coords.end(), Index{0});
  const auto m = std::clamp<Index>(std::lround(fraction * double(dim)), 1, dim);
  Engine rng = make_engine(derive_seed(seed, "sign-guard"));
  for (Index i = 0; i < m; ++i) {
    std::uniform_int_distribution<Index> pick(i, dim - 1);
    std::swap(coords[i], coords[pick(rng)]);
  }
  std::vector<Eigen::Vector3d> feat;
  for (auto i : survivors) {
    Eigen::Vector3d s = Eigen::Vector3d::Zero();
    for (Index k = 0; k < m; ++k) {
      const double x = updates.deltas[i](coords[k]);
      s(x > 0 ? 0 : (x < 0 ? 1 : 2)) += 1;
    }
    feat.push_back(s / double(m));
  }

  // two-means: first survivor and the point farthest from it
  const std::size_t s = survivors.size();
  std::vector<int> label(s, 0);
  std::size_t far = 0;
  for (std::size_t i = 1; i < s; ++i)
    if ((feat[i] - feat[0]).squaredNorm() > (feat[far] - feat[0]).squaredNorm()) far = i;
  Eigen::Vector3d c0 = feat[0], c1 = feat[far];
  if ((feat[far] - feat[0]).squaredNorm() > 0) {
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = false;
      for (std::size_t i = 0; i < s; ++i) {
        const int l = (feat[i] - c1).squaredNorm() < (feat[i] - c0).squaredNorm() ? 1 : 0;
        changed |= l != label[i];
        label[i] = l;
      }
      Eigen::Vector3d sum[2] = {Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()};
      int cnt[2] = {0, 0};
      for (std::size_t i = 0; i < s; ++i) {
        sum[label[i]] += feat[i];
        ++cnt[label[i]];
      }
      if (cnt[0]) c0 = sum[0] / cnt[0];
      if (cnt[1]) c1 = sum[1] / cnt[1];
      if (!changed && iter > 0) break;
    }
  }
  // clusters closer than the gap are one group
  if ((c1 - c0).norm() < kSignGap) std::fill(label.begin(), label.end(), 0);
  const auto n1 = static_cast<std::size_t>(std::count(label.begin(), label.end(), 1));
  const int keep_label = n1 > s - n1 ? 1 : 0;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < s; ++i)
    if (label[i] == keep_label) keep.push_back(survivors[i]);

  r.delta = mean_of(updates, keep);
  r.filtered = static_cast<int>(n - keep.size());
  return r;
}

AggregateResult rfout_aggregate(const UpdateSet& updates, double k) {
  updates.validate();
  if (!(k > 0)) throw Error("rfout: k must be > 0");
  const std::size_t n = updates.size();
  const Index dim = updates.deltas.front().size();

  Vec med(dim);
  std::vector<double> column(n);
  for (Index j = 0; j < dim; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = updates.deltas[i](j);
    med(j) = median(column);
  }
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = (updates.deltas[i] - med).norm();
  const double center = median(dist);
  std::vector<double> dev(n);
  for (std::size_t i = 0; i < n; ++i) dev[i] = std::abs(dist[i] - center);
  const double mad = 1.4826 * median(dev);
  const double cutoff = center + k * mad;

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (dist[i] <= cutoff) keep.push_back(i);
  AggregateResult r;
  if (keep.empty()) {
    r.delta = mean_delta(updates);
    r.fallback = true;
    return r;
  }
  r.delta = mean_of(updates, keep);
  r.filtered = static_cast<int>(n - keep.size());
  return r;
}

Aggregator make_aggregator(const DefenseConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case DefenseKind::none:
      return {};
    case DefenseKind::norm_thr:
      return [t = cfg.norm_threshold](const UpdateSet& u, std::uint64_t) {
        return norm_clip_aggregate(u, t);
      };
    case DefenseKind::dp:
      return [t = cfg.norm_threshold, s = cfg.dp_sigma](const UpdateSet& u, std::uint64_t seed) {
        return dp_aggregate(u, t, s, seed);
      };
    case DefenseKind::krum:
      return [f = cfg.krum_f](const UpdateSet& u, std::uint64_t) {
        if (static_cast<int>(u.size()) < 2 * f + 3) {
          AggregateResult r;
          r.delta = mean_delta(u);
          r.fallback = true;
          return r;
        }
        return krum_select(u, f);
      };
    case DefenseKind::clip_cluster:
      return [c = cfg.clip_cluster_c](const UpdateSet& u, std::uint64_t) {
        return clip_cluster_aggregate(u, c);
      };
    case DefenseKind::sign_guard:
      return [lo = cfg.sign_guard_lo, hi = cfg.sign_guard_hi, fr = cfg.sign_guard_fraction](
                 const UpdateSet& u, std::uint64_t seed) {
        return sign_guard_aggregate(u, lo, hi, fr, seed);
      };
    case DefenseKind::rfout:
      return [k = cfg.rfout_k](const UpdateSet& u, std::uint64_t) { return rfout_aggregate(u, k); };
  }
  return {};
}

PruneResult prune(PrototypeState proto, const Batch& clean, double rate) {
  if (!(rate >= 0 && rate <= 1)) throw Error("prune: rate must be in [0, 1]");
  if (clean.size() == 0) throw Error("prune: empty clean batch");
  auto& layers = proto.params.layers;
  if (layers.size() < 2) throw Error("prune: model has no hidden layer");
  const std::size_t last_hidden = layers.size() - 2;
  const Index h = layers[last_hidden].weight.rows();
  const auto count = static_cast<Index>(std::ceil(rate * double(h) - 1e-9));

  PruneResult out;
  if (count > 0) {
    const auto tr = forward_trace(proto.params, proto.arch, std::span(clean.inputs));
    const Vec mean_act = tr.acts[last_hidden + 1].rowwise().mean();
    std::vector<int> order(h);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return mean_act(a) < mean_act(b); });
    out.pruned_units.assign(order.begin(), order.begin() + count);
    std::sort(out.pruned_units.begin(), out.pruned_units.end());
    for (int u : out.pruned_units) {
      layers[last_hidden].weight.row(u).setZero();
      layers[last_hidden].bias(u) = 0;
      layers[last_hidden + 1].weight.col(u).setZero();
    }
  }
  out.proto = std::move(proto);
  return out;
}

PostTraining make_pruning_hook(double rate, int samples) {
  if (!(rate >= 0 && rate <= 1)) throw Error("pruning rate must be in [0, 1]");
  if (samples <= 0) throw Error("pruning sample count must be positive");
  return [rate, samples](FLState& s) {
    for (auto& proto : s.prototypes) {
      std::vector<std::pair<const Dataset*, std::size_t>> pool;
      for (const auto& c : s.clients) {
        if (c.prototype != proto.id) continue;
        for (std::size_t i = 0; i < c.data->size(); ++i)
          if (!c.data->poisoned[i]) pool.emplace_back(c.data.get(), i);
      }
      if (pool.empty()) continue;
      Engine rng = make_engine(derive_seed(s.cfg.seed, "prune", {std::uint64_t(proto.id)}));
      std::shuffle(pool.begin(), pool.end(), rng);
      if (pool.size() > static_cast<std::size_t>(samples)) pool.resize(samples);
      Batch batch;
      for (auto [d, i] : pool) {
        batch.inputs.push_back(d->inputs[i]);
        batch.labels.push_back(d->labels[i]);
      }
      proto = prune(std::move(proto), batch, rate).proto;
      for (auto& c : s.clients)
        if (c.prototype == proto.id) c.params = proto.params;
    }
  };
}

}  // namespace fmfl
