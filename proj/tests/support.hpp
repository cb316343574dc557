#pragma once

// Hand-rolled generators for the property tests.

#include <random>
#include <vector>

#include "fmfl/nn.hpp"

namespace fmfl::testing {

struct Gen {
  Engine rng;
  explicit Gen(std::uint64_t seed) : rng(make_engine(seed)) {}

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  bool coin() { return integer(0, 1) == 1; }

  Vec vec(Index n, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    Vec v(n);
    for (auto& x : v) x = d(rng);
    return v;
  }

  ArchSpec arch(bool allow_token = true) {
    ArchSpec a;
    a.mode = allow_token && coin() ? InputMode::token : InputMode::vector;
    a.input_dim = integer(1, 6);
    a.num_classes = integer(2, 5);
    const int hidden = integer(0, 2);
    for (int i = 0; i < hidden; ++i) a.hidden_sizes.push_back(integer(1, 7));
    a.extra_pairs = integer(0, 3);
    a.extra_width = a.extra_pairs ? integer(1, 5) : 0;
    if (a.mode == InputMode::token) a.vocab_size = integer(2, 9);
    return a;
  }

  Input input(const ArchSpec& a) {
    Input in;
    if (a.mode == InputMode::vector) {
      in.features = vec(a.input_dim);
    } else {
      const int len = integer(1, 5);
      for (int i = 0; i < len; ++i) in.tokens.push_back(integer(0, a.vocab_size - 1));
    }
    return in;
  }

  Batch batch(const ArchSpec& a, int n) {
    Batch b;
    for (int i = 0; i < n; ++i) {
      b.inputs.push_back(input(a));
      b.labels.push_back(integer(0, a.num_classes - 1));
    }
    return b;
  }

  ParamSet params(const ArchSpec& a, double scale = 1.0) {
    ParamSet p = zero_params<double>(a);
    p.for_each_block([&](auto block) { block = vec(block.size(), scale); });
    return p;
  }
};

}  // namespace fmfl::testing
