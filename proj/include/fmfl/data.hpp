#pragma once

// Simulated foundation-model data: class-conditional synthetic samplers,
// backdoor triggers, poisoned synthetic sets, client partitions and the
// clean/triggered evaluation sets.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <variant>
#include <vector>

#include "fmfl/nn.hpp"

namespace fmfl {

/// Per-class generator standing in for the foundation model.
struct SyntheticSource {
  InputMode mode = InputMode::vector;
  int num_classes = 0;
  // vector mode: x ~ N(means[k], diag(stddevs[k]^2))
  std::vector<Vec> means;
  std::vector<Vec> stddevs;
  // token mode: seq_len i.i.d. draws from token_weights[k]
  std::vector<Vec> token_weights;
  int seq_len = 0;
  int vocab_size = 0;

  int input_dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  void validate() const;
};

/// Class means are random unit vectors scaled by `separation`; unit variances.
SyntheticSource make_vector_source(int dim, int num_classes, double separation, std::uint64_t seed);

/// Each class favours its own contiguous block of the vocabulary by a factor
/// of `separation`.
SyntheticSource make_token_source(int vocab_size, int num_classes, int seq_len, double separation,
                                  std::uint64_t seed);

/// Draw `index` of class `label`; a pure function of its arguments.
Input sample_one(const SyntheticSource& src, int label, std::uint64_t seed, std::uint64_t index);

struct PatchTrigger {
  std::vector<int> positions;
  std::vector<double> values;
};

enum class InsertAt { front, back };

struct TokenTrigger {
  std::vector<int> tokens;
  InsertAt at = InsertAt::back;
};

struct TriggerSpec {
  std::variant<PatchTrigger, TokenTrigger> variant;
  int target = 0;
  double poison_ratio = 0.2;

  bool is_patch() const { return std::holds_alternative<PatchTrigger>(variant); }
  /// `extent` is the feature count (patch) or vocabulary size (token).
  void validate(int extent, int num_classes) const;
};

/// Struct-of-arrays example list so that inputs and labels can be handed to
/// the trainer without copying.
struct Dataset {
  InputMode mode = InputMode::vector;
  std::vector<Input> inputs;
  std::vector<int> labels;
  std::vector<bool> poisoned;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  void push_back(Input in, int label, bool is_poisoned = false);
  std::size_t poisoned_count() const;
  std::vector<std::size_t> label_counts(int num_classes) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset sample_clean(const SyntheticSource& src, int n_per_class, std::uint64_t seed);

Input embed_trigger(Input input, const TriggerSpec& trig);
bool has_trigger(const Input& input, const TriggerSpec& trig);

/// Appends, for every class k != target, floor(ratio * count(k)) trigger
/// embedded copies of uniformly chosen class-k samples, relabelled to the
/// target. Original samples are kept unchanged.
Dataset poison_dataset(const Dataset& clean, const TriggerSpec& trig, double ratio,
                       std::uint64_t seed);
inline Dataset poison_dataset(const Dataset& clean, const TriggerSpec& trig, std::uint64_t seed) {
  return poison_dataset(clean, trig, trig.poison_ratio, seed);
}

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> assignments;
  std::optional<double> beta;

  std::size_t num_clients() const { return assignments.size(); }
  /// Throws unless the assignments are a disjoint cover of [0, n) with every
  /// client nonempty.
  void validate(std::size_t n) const;
};

PartitionPlan partition_iid(const Dataset& data, int n_clients, std::uint64_t seed);
PartitionPlan partition_dirichlet(const Dataset& data, int n_clients, double beta,
                                  std::uint64_t seed);

struct EvalSets {
  Dataset clean;
  Dataset triggered;  // original labels kept; no target-class originals
};

EvalSets build_eval_sets(const SyntheticSource& src, const TriggerSpec& trig, int n_per_class,
                         std::uint64_t seed);

// Text export, one example per line after a header:
//   # fmfl-dataset v1: mode<TAB>label<TAB>poisoned<TAB>values
// values are comma-separated features (%.17g) or token ids.
void write_dataset(std::ostream& os, const Dataset& data);
Dataset read_dataset(std::istream& is);

}  // namespace fmfl
