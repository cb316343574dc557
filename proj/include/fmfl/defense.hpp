#pragma once

// Robust aggregation rules that replace FedAvg within a prototype group, and
// the post-training pruning defense.
//
// ClipCluster, SignGuard and RFOUT are reconstructions from their names
// (clipping plus norm clustering, sign-statistics filtering, median/MAD
// outlier filtering); they are not ports of the original algorithms.

#include <cstdint>
#include <string>
#include <vector>

#include "fmfl/fl.hpp"

namespace fmfl {

enum class DefenseKind { none, norm_thr, dp, krum, clip_cluster, sign_guard, rfout };

std::string to_string(DefenseKind k);
DefenseKind parse_defense_kind(const std::string& s);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::none;
  double norm_threshold = 1.0;
  double dp_sigma = 0.001;
  int krum_f = 1;
  double clip_cluster_c = 2.0;
  double sign_guard_lo = 0.1;
  double sign_guard_hi = 3.0;
  double sign_guard_fraction = 0.1;
  double rfout_k = 3.0;
  bool pruning = false;
  double pruning_rate = 0.2;
  int pruning_samples = 256;

  void validate() const;
  /// "none", "krum", ... with "+pruning" appended when pruning is enabled.
  std::string name() const;
};

Vec mean_delta(const UpdateSet& updates);

/// Scales each delta by min(1, threshold / ||delta||) and averages.
AggregateResult norm_clip_aggregate(const UpdateSet& updates, double threshold);

/// norm_clip_aggregate plus N(0, sigma^2) noise on every coordinate.
AggregateResult dp_aggregate(const UpdateSet& updates, double threshold, double sigma,
                             std::uint64_t seed);

/// Selects the update with the smallest sum of squared distances to its
/// n - f - 2 nearest neighbours. Requires n >= 2f + 3.
AggregateResult krum_select(const UpdateSet& updates, int f);

/// Two-means on update norms; drops a high-norm cluster that is more than
/// c times the low cluster's mean norm when the low cluster holds at least
/// half the clients, then clips survivors to their median norm and averages.
AggregateResult clip_cluster_aggregate(const UpdateSet& updates, double c);

/// Norm-ratio filter against the median norm, then two-means on per-client
/// sign statistics over a random coordinate subsample; keeps the larger cluster
/// unless the two centroids lie within 0.1 of each other.
AggregateResult sign_guard_aggregate(const UpdateSet& updates, double lo, double hi,
                                     double fraction, std::uint64_t seed);

/// Drops clients whose distance to the coordinate-wise median exceeds
/// median(distance) + k * 1.4826 * MAD(distance).
AggregateResult rfout_aggregate(const UpdateSet& updates, double k);

/// Aggregator bound to a configuration. Krum groups too small for f fall
/// back to the plain mean (flagged).
Aggregator make_aggregator(const DefenseConfig& cfg);

struct PruneResult {
  PrototypeState proto;
  std::vector<int> pruned_units;
};

/// Zeroes the ceil(rate * H) last-hidden-layer units with the lowest mean
/// ReLU activation over `clean` (ties: lowest index): incoming weights,
/// bias, and outgoing weights.
PruneResult prune(PrototypeState proto, const Batch& clean, double rate);

/// Post-training hook: per prototype, pools up to `samples` clean examples
/// from its clients' local data, prunes, and redistributes.
PostTraining make_pruning_hook(double rate, int samples);

}  // namespace fmfl
