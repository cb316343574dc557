#include "fmfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

namespace fmfl {

void SyntheticSource::validate() const {
  if (num_classes < 2) throw Error("source: need at least two classes");
  if (mode == InputMode::vector) {
    if (static_cast<int>(means.size()) != num_classes ||
        static_cast<int>(stddevs.size()) != num_classes)
      throw Error("source: one mean and stddev vector per class required");
    const Index d = means.front().size();
    if (d <= 0) throw Error("source: empty feature vectors");
    for (int k = 0; k < num_classes; ++k) {
      if (means[k].size() != d || stddevs[k].size() != d)
        throw Error("source: inconsistent feature dimension");
      if (!(stddevs[k].array() > 0).all()) throw Error("source: standard deviations must be > 0");
    }
  } else {
    if (static_cast<int>(token_weights.size()) != num_classes)
      throw Error("source: one token distribution per class required");
    if (seq_len <= 0 || vocab_size <= 0) throw Error("source: bad token source shape");
    for (const auto& w : token_weights) {
      if (w.size() != vocab_size || (w.array() < 0).any() || std::abs(w.sum() - 1.0) > 1e-9)
        throw Error("source: token weights must be nonnegative and normalized");
    }
  }
}

SyntheticSource make_vector_source(int dim, int num_classes, double separation,
                                   std::uint64_t seed) {
  if (dim <= 0) throw Error("source: dim must be positive");
  if (!(separation > 0)) throw Error("source: separation must be positive");
  SyntheticSource src;
  src.mode = InputMode::vector;
  src.num_classes = num_classes;
  Engine rng = make_engine(derive_seed(seed, "class-means"));
  std::normal_distribution<double> n01;
  for (int k = 0; k < num_classes; ++k) {
    Vec m(dim);
    do {
      for (auto& x : m) x = n01(rng);
    } while (m.norm() < 1e-8);
    src.means.push_back(separation * m.normalized());
    src.stddevs.push_back(Vec::Ones(dim));
  }
  src.validate();
  return src;
}

SyntheticSource make_token_source(int vocab_size, int num_classes, int seq_len,
                                  double separation, std::uint64_t seed) {
  if (vocab_size < num_classes) throw Error("source: vocabulary smaller than class count");
  if (!(separation > 0)) throw Error("source: separation must be positive");
  SyntheticSource src;
  src.mode = InputMode::token;
  src.num_classes = num_classes;
  src.seq_len = seq_len;
  src.vocab_size = vocab_size;
  Engine rng = make_engine(derive_seed(seed, "token-weights"));
  std::uniform_real_distribution<double> jitter(0.5, 1.5);
  const int block = vocab_size / num_classes;
  for (int k = 0; k < num_classes; ++k) {
    Vec w(vocab_size);
    for (int v = 0; v < vocab_size; ++v) {
      const bool own = v >= k * block && v < (k + 1) * block;
      w(v) = jitter(rng) * (own ? separation : 1.0);
    }
    src.token_weights.push_back(w / w.sum());
  }
  src.validate();
  return src;
}

Input sample_one(const SyntheticSource& src, int label, std::uint64_t seed, std::uint64_t index) {
  if (label < 0 || label >= src.num_classes) throw Error("sample: class out of range");
  Engine rng = make_engine(derive_seed(seed, "draw", {std::uint64_t(label), index}));
  Input in;
  if (src.mode == InputMode::vector) {
    std::normal_distribution<double> n01;
    in.features.resize(src.input_dim());
    for (Index j = 0; j < in.features.size(); ++j)
      in.features(j) = src.means[label](j) + src.stddevs[label](j) * n01(rng);
  } else {
    const auto& w = src.token_weights[label];
    std::discrete_distribution<int> pick(w.data(), w.data() + w.size());
    in.tokens.resize(src.seq_len);
    for (auto& t : in.tokens) t = pick(rng);
  }
  return in;
}

void TriggerSpec::validate(int extent, int num_classes) const {
  if (target < 0 || target >= num_classes) throw Error("trigger.target out of range");
  if (!(poison_ratio >= 0 && poison_ratio <= 1)) throw Error("trigger.poison_ratio must be in [0, 1]");
  if (const auto* p = std::get_if<PatchTrigger>(&variant)) {
    if (p->positions.size() != p->values.size())
      throw Error("trigger: positions and values differ in length");
    std::vector<int> sorted = p->positions;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw Error("trigger: duplicate patch position");
    for (int i : sorted)
      if (i < 0 || i >= extent) throw Error("trigger: patch position out of range");
  } else {
    const auto& t = std::get<TokenTrigger>(variant);
    if (t.tokens.empty()) throw Error("trigger: empty token trigger");
    for (int id : t.tokens)
      if (id < 0 || id >= extent) throw Error("trigger: token id outside vocabulary");
  }
}

void Dataset::push_back(Input in, int label, bool is_poisoned) {
  inputs.push_back(std::move(in));
  labels.push_back(label);
  poisoned.push_back(is_poisoned);
}

std::size_t Dataset::poisoned_count() const {
  return static_cast<std::size_t>(std::count(poisoned.begin(), poisoned.end(), true));
}

std::vector<std::size_t> Dataset::label_counts(int num_classes) const {
  std::vector<std::size_t> c(num_classes, 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw Error("dataset: label out of range");
    ++c[y];
  }
  return c;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.mode = mode;
  for (auto i : indices) out.push_back(inputs.at(i), labels.at(i), poisoned.at(i));
  return out;
}

Dataset sample_clean(const SyntheticSource& src, int n_per_class, std::uint64_t seed) {
  src.validate();
  if (n_per_class < 0) throw Error("sample_clean: n_per_class must be >= 0");
  Dataset d;
  d.mode = src.mode;
  for (int k = 0; k < src.num_classes; ++k)
    for (int i = 0; i < n_per_class; ++i) d.push_back(sample_one(src, k, seed, i), k);
  return d;
}

Input embed_trigger(Input input, const TriggerSpec& trig) {
  if (const auto* p = std::get_if<PatchTrigger>(&trig.variant)) {
    if (input.features.size() == 0) throw Error("embed_trigger: patch trigger needs features");
    for (std::size_t i = 0; i < p->positions.size(); ++i) {
      const int pos = p->positions[i];
      if (pos < 0 || pos >= input.features.size())
        throw Error("embed_trigger: patch position out of range");
      input.features(pos) = p->values[i];
    }
  } else {
    const auto& t = std::get<TokenTrigger>(trig.variant);
    if (input.features.size() != 0) throw Error("embed_trigger: token trigger needs tokens");
    auto where = t.at == InsertAt::front ? input.tokens.begin() : input.tokens.end();
    input.tokens.insert(where, t.tokens.begin(), t.tokens.end());
  }
  return input;
}

bool has_trigger(const Input& input, const TriggerSpec& trig) {
  if (const auto* p = std::get_if<PatchTrigger>(&trig.variant)) {
    for (std::size_t i = 0; i < p->positions.size(); ++i) {
      const int pos = p->positions[i];
      if (pos >= input.features.size() || input.features(pos) != p->values[i]) return false;
    }
    return true;
  }
  const auto& t = std::get<TokenTrigger>(trig.variant);
  const auto n = t.tokens.size();
  if (input.tokens.size() < n) return false;
  return t.at == InsertAt::front
             ? std::equal(t.tokens.begin(), t.tokens.end(), input.tokens.begin())
             : std::equal(t.tokens.begin(), t.tokens.end(), input.tokens.end() - n);
}

Dataset poison_dataset(const Dataset& clean, const TriggerSpec& trig, double ratio,
                       std::uint64_t seed) {
  if (!(ratio >= 0 && ratio <= 1)) throw Error("poison_dataset: ratio must be in [0, 1]");
  if (clean.poisoned_count() != 0) throw Error("poison_dataset: input already contains poison");
  Dataset out = clean;
  if (clean.empty()) return out;
  const int num_classes = *std::max_element(clean.labels.begin(), clean.labels.end()) + 1;
  for (int k = 0; k < num_classes; ++k) {
    if (k == trig.target) continue;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < clean.size(); ++i)
      if (clean.labels[i] == k) idx.push_back(i);
    const auto m = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(idx.size())));
    Engine rng = make_engine(derive_seed(seed, "poison", {std::uint64_t(k)}));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < m; ++j)
      out.push_back(embed_trigger(clean.inputs[idx[j]], trig), trig.target, true);
  }
  return out;
}

void PartitionPlan::validate(std::size_t n) const {
  std::vector<char> seen(n, 0);
  std::size_t total = 0;
  for (const auto& a : assignments) {
    if (a.empty()) throw Error("partition: empty client");
    for (auto i : a) {
      if (i >= n || seen[i]) throw Error("partition: not a disjoint cover");
      seen[i] = 1;
      ++total;
    }
  }
  if (total != n) throw Error("partition: not every index assigned");
}

PartitionPlan partition_iid(const Dataset& data, int n_clients, std::uint64_t seed) {
  if (n_clients <= 0) throw Error("partition_iid: n_clients must be positive");
  if (data.size() < static_cast<std::size_t>(n_clients))
    throw Error("partition_iid: fewer samples than clients");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Engine rng = make_engine(derive_seed(seed, "iid"));
  std::shuffle(order.begin(), order.end(), rng);
  PartitionPlan plan;
  plan.assignments.resize(n_clients);
  for (std::size_t k = 0; k < order.size(); ++k) plan.assignments[k % n_clients].push_back(order[k]);
  return plan;
}

PartitionPlan partition_dirichlet(const Dataset& data, int n_clients, double beta,
                                  std::uint64_t seed) {
  if (!(beta > 0)) throw Error("partition_dirichlet: beta must be positive");
  if (n_clients <= 0) throw Error("partition_dirichlet: n_clients must be positive");
  if (data.size() < static_cast<std::size_t>(n_clients))
    throw Error("partition_dirichlet: fewer samples than clients");
  const int num_classes = *std::max_element(data.labels.begin(), data.labels.end()) + 1;

  PartitionPlan plan;
  plan.beta = beta;
  plan.assignments.resize(n_clients);
  for (int k = 0; k < num_classes; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.labels[i] == k) idx.push_back(i);
    if (idx.empty()) throw Error("partition_dirichlet: class without samples");

    Engine rng = make_engine(derive_seed(seed, "dirichlet", {std::uint64_t(k)}));
    std::gamma_distribution<double> gamma(beta, 1.0);
    std::vector<double> prop(n_clients);
    double sum = 0;
    for (auto& p : prop) sum += (p = gamma(rng));
    if (!(sum > 0)) {
      // every gamma draw underflowed; give the class to one uniformly chosen client
      std::fill(prop.begin(), prop.end(), 0.0);
      prop[std::uniform_int_distribution<int>(0, n_clients - 1)(rng)] = 1.0;
      sum = 1.0;
    }

    // largest-remainder rounding of prop * |class|
    const double n = static_cast<double>(idx.size());
    std::vector<std::size_t> counts(n_clients);
    std::vector<std::pair<double, int>> rem(n_clients);
    std::size_t given = 0;
    for (int c = 0; c < n_clients; ++c) {
      const double q = prop[c] / sum * n;
      counts[c] = static_cast<std::size_t>(std::floor(q));
      rem[c] = {q - std::floor(q), c};
      given += counts[c];
    }
    std::stable_sort(rem.begin(), rem.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; given < idx.size(); ++r, ++given) ++counts[rem[r].second];

    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t off = 0;
    for (int c = 0; c < n_clients; ++c)
      for (std::size_t j = 0; j < counts[c]; ++j) plan.assignments[c].push_back(idx[off++]);
  }

  for (;;) {
    auto empty = std::find_if(plan.assignments.begin(), plan.assignments.end(),
                              [](const auto& a) { return a.empty(); });
    if (empty == plan.assignments.end()) break;
    auto largest = std::max_element(plan.assignments.begin(), plan.assignments.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    empty->push_back(largest->back());
    largest->pop_back();
  }
  return plan;
}

EvalSets build_eval_sets(const SyntheticSource& src, const TriggerSpec& trig, int n_per_class,
                         std::uint64_t seed) {
  EvalSets out;
  out.clean = sample_clean(src, n_per_class, derive_seed(seed, "eval-clean"));
  out.triggered.mode = src.mode;
  const auto trig_seed = derive_seed(seed, "eval-triggered");
  for (int k = 0; k < src.num_classes; ++k) {
    if (k == trig.target) continue;
    for (int i = 0; i < n_per_class; ++i)
      out.triggered.push_back(embed_trigger(sample_one(src, k, trig_seed, i), trig), k);
  }
  return out;
}

void write_dataset(std::ostream& os, const Dataset& data) {
  os << "# fmfl-dataset v1: mode\tlabel\tpoisoned\tvalues\n";
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << to_string(data.mode) << '\t' << data.labels[i] << '\t' << (data.poisoned[i] ? 1 : 0)
       << '\t';
    const auto& in = data.inputs[i];
    if (data.mode == InputMode::vector) {
      for (Index j = 0; j < in.features.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", in.features(j));
        os << (j ? "," : "") << buf;
      }
    } else {
      for (std::size_t j = 0; j < in.tokens.size(); ++j) os << (j ? "," : "") << in.tokens[j];
    }
    os << '\n';
  }
}

Dataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("# fmfl-dataset v1", 0) != 0)
    throw Error("dataset: missing header");
  Dataset d;
  bool mode_set = false;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw Error("dataset line " + std::to_string(lineno) + ": " + why);
    };
    std::istringstream ls(line);
    std::string mode, label, poisoned, values;
    if (!std::getline(ls, mode, '\t') || !std::getline(ls, label, '\t') ||
        !std::getline(ls, poisoned, '\t'))
      fail("expected 4 tab-separated fields");
    std::getline(ls, values);
    InputMode m;
    if (mode == "vector") m = InputMode::vector;
    else if (mode == "token") m = InputMode::token;
    else fail("unknown mode '" + mode + "'");
    if (!mode_set) {
      d.mode = m;
      mode_set = true;
    } else if (m != d.mode) {
      fail("mixed modes");
    }
    if (poisoned != "0" && poisoned != "1") fail("poisoned flag must be 0 or 1");
    Input in;
    std::vector<double> xs;
    std::istringstream vs(values);
    std::string tok;
    while (std::getline(vs, tok, ',')) {
      try {
        if (m == InputMode::vector) xs.push_back(std::stod(tok));
        else in.tokens.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        fail("bad value '" + tok + "'");
      }
    }
    if (m == InputMode::vector) in.features = Eigen::Map<const Vec>(xs.data(), Index(xs.size()));
    int y = 0;
    try {
      y = std::stoi(label);
    } catch (const std::exception&) {
      fail("bad label");
    }
    if (y < 0) fail("negative label");
    d.push_back(std::move(in), y, poisoned == "1");
  }
  return d;
}

}  // namespace fmfl
