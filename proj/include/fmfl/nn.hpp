#pragma once

// Dense ReLU network engine: forward pass, cross-entropy and ensemble
// distillation losses, backpropagation and plain mini-batch SGD.
//
// Everything is templated on the scalar type; the rest of the library uses
// the double aliases at the bottom of this file.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmfl/error.hpp"
#include "fmfl/rng.hpp"

namespace fmfl {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class InputMode { vector, token };

inline const char* to_string(InputMode m) { return m == InputMode::vector ? "vector" : "token"; }

/// Network shape. Layer widths are
/// input_dim -> hidden_sizes... -> extra_width x extra_pairs -> num_classes,
/// with ReLU after every layer except the last.
struct ArchSpec {
  int input_dim = 0;
  std::vector<int> hidden_sizes;
  int extra_pairs = 0;
  int extra_width = 0;
  int num_classes = 2;
  InputMode mode = InputMode::vector;
  int vocab_size = 0;  // token mode only

  std::vector<int> widths() const {
    std::vector<int> w{input_dim};
    w.insert(w.end(), hidden_sizes.begin(), hidden_sizes.end());
    for (int i = 0; i < extra_pairs; ++i) w.push_back(extra_width);
    w.push_back(num_classes);
    return w;
  }

  int num_layers() const { return static_cast<int>(hidden_sizes.size()) + extra_pairs + 1; }

  void validate() const {
    if (input_dim <= 0) throw Error("arch: input_dim must be positive");
    if (num_classes < 2) throw Error("arch: num_classes must be >= 2");
    for (int h : hidden_sizes)
      if (h <= 0) throw Error("arch: hidden sizes must be positive");
    if (extra_pairs < 0 || extra_pairs > 3) throw Error("arch: extra_pairs must be in [0, 3]");
    if (extra_pairs > 0 && extra_width <= 0) throw Error("arch: extra_width must be positive");
    if (mode == InputMode::token && vocab_size <= 0)
      throw Error("arch: token mode requires a positive vocab_size");
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

template <typename Scalar>
struct Dense {
  MatrixX<Scalar> weight;  // out x in
  VectorX<Scalar> bias;    // out
};

/// Model state. Flattened order: embedding (token mode), then per layer the
/// weight matrix in column-major order followed by the bias.
template <typename Scalar>
struct BasicParamSet {
  MatrixX<Scalar> embedding;  // vocab x input_dim, empty in vector mode
  std::vector<Dense<Scalar>> layers;

  Index size() const {
    Index n = embedding.size();
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool all_finite() const {
    if (!embedding.allFinite()) return false;
    return std::all_of(layers.begin(), layers.end(), [](const Dense<Scalar>& l) {
      return l.weight.allFinite() && l.bias.allFinite();
    });
  }

  template <typename F>
  void for_each_block(F&& f) {
    if (embedding.size()) f(embedding.reshaped());
    for (auto& l : layers) {
      f(l.weight.reshaped());
      f(l.bias.reshaped());
    }
  }
  template <typename F>
  void for_each_block(F&& f) const {
    if (embedding.size()) f(embedding.reshaped());
    for (const auto& l : layers) {
      f(l.weight.reshaped());
      f(l.bias.reshaped());
    }
  }

  friend bool operator==(const BasicParamSet& a, const BasicParamSet& b) {
    if (a.embedding.rows() != b.embedding.rows() || a.embedding.cols() != b.embedding.cols())
      return false;
    if (a.embedding != b.embedding || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto &x = a.layers[i], &y = b.layers[i];
      if (x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols()) return false;
      if (x.bias.size() != y.bias.size()) return false;
      if (x.weight != y.weight || x.bias != y.bias) return false;
    }
    return true;
  }
};

/// One model input: a feature vector (vector mode) or token ids (token mode).
template <typename Scalar>
struct BasicInput {
  VectorX<Scalar> features;
  std::vector<int> tokens;

  friend bool operator==(const BasicInput& a, const BasicInput& b) {
    return a.tokens == b.tokens && a.features.size() == b.features.size() &&
           a.features == b.features;
  }
};

template <typename Scalar>
struct BasicBatch {
  std::vector<BasicInput<Scalar>> inputs;
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(inputs.size()); }
};

enum class KlDirection { student_first, teacher_first };

/// alpha * CE + (1 - alpha) * tau^2 * KL. teacher_logits is num_classes x
/// batch and must be present iff alpha < 1.
template <typename Scalar>
struct BasicLossConfig {
  Scalar alpha = 1;
  Scalar tau = 1;
  KlDirection kl_direction = KlDirection::student_first;
  MatrixX<Scalar> teacher_logits;
};

// ---------------------------------------------------------------------------
// Shapes and initialization

template <typename Scalar>
BasicParamSet<Scalar> zero_params(const ArchSpec& arch) {
  arch.validate();
  BasicParamSet<Scalar> p;
  if (arch.mode == InputMode::token)
    p.embedding = MatrixX<Scalar>::Zero(arch.vocab_size, arch.input_dim);
  const auto w = arch.widths();
  for (std::size_t i = 0; i + 1 < w.size(); ++i)
    p.layers.push_back({MatrixX<Scalar>::Zero(w[i + 1], w[i]), VectorX<Scalar>::Zero(w[i + 1])});
  return p;
}

inline Index param_count(const ArchSpec& arch) {
  arch.validate();
  Index n = arch.mode == InputMode::token ? Index(arch.vocab_size) * arch.input_dim : 0;
  const auto w = arch.widths();
  for (std::size_t i = 0; i + 1 < w.size(); ++i) n += Index(w[i + 1]) * (w[i] + 1);
  return n;
}

template <typename Scalar>
bool matches(const BasicParamSet<Scalar>& p, const ArchSpec& arch) {
  const auto w = arch.widths();
  if (p.layers.size() + 1 != w.size()) return false;
  if (arch.mode == InputMode::token) {
    if (p.embedding.rows() != arch.vocab_size || p.embedding.cols() != arch.input_dim)
      return false;
  } else if (p.embedding.size() != 0) {
    return false;
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    if (l.weight.rows() != w[i + 1] || l.weight.cols() != w[i] || l.bias.size() != w[i + 1])
      return false;
  }
  return true;
}

/// Glorot-uniform weights, zero biases. The embedding table uses the same
/// rule with fan_in = 1 (each row is selected by a one-hot input).
template <typename Scalar = double>
BasicParamSet<Scalar> init_params(const ArchSpec& arch, std::uint64_t seed) {
  auto p = zero_params<Scalar>(arch);
  Engine rng = make_engine(seed);
  auto fill = [&rng](auto& m, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    for (Index j = 0; j < m.cols(); ++j)
      for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(u(rng));
  };
  if (p.embedding.size()) fill(p.embedding, 1.0, arch.input_dim);
  for (auto& l : p.layers) fill(l.weight, double(l.weight.cols()), double(l.weight.rows()));
  return p;
}

template <typename Scalar>
VectorX<Scalar> flatten(const BasicParamSet<Scalar>& p) {
  VectorX<Scalar> out(p.size());
  Index off = 0;
  p.for_each_block([&](const auto& block) {
    out.segment(off, block.size()) = block;
    off += block.size();
  });
  return out;
}

template <typename Scalar>
BasicParamSet<Scalar> unflatten(const ArchSpec& arch, const Eigen::Ref<const VectorX<Scalar>>& flat) {
  auto p = zero_params<Scalar>(arch);
  if (flat.size() != p.size())
    throw DimensionError("unflatten: expected " + std::to_string(p.size()) + " values, got " +
                         std::to_string(flat.size()));
  Index off = 0;
  p.for_each_block([&](auto block) {
    block = flat.segment(off, block.size());
    off += block.size();
  });
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Encodes inputs as columns of a matrix: raw features, or the mean of the
/// token embeddings.
template <typename Scalar>
MatrixX<Scalar> encode(const BasicParamSet<Scalar>& p, const ArchSpec& arch,
                       std::span<const BasicInput<Scalar>> inputs) {
  MatrixX<Scalar> x(arch.input_dim, static_cast<Index>(inputs.size()));
  for (Index b = 0; b < x.cols(); ++b) {
    const auto& in = inputs[b];
    if (arch.mode == InputMode::vector) {
      if (in.features.size() != arch.input_dim)
        throw DimensionError("forward: expected " + std::to_string(arch.input_dim) +
                             " features, got " + std::to_string(in.features.size()));
      x.col(b) = in.features;
    } else {
      if (in.tokens.empty()) throw DimensionError("forward: empty token sequence");
      x.col(b).setZero();
      for (int t : in.tokens) {
        if (t < 0 || t >= arch.vocab_size)
          throw DimensionError("forward: token id " + std::to_string(t) + " outside vocabulary");
        x.col(b) += p.embedding.row(t).transpose();
      }
      x.col(b) /= static_cast<Scalar>(in.tokens.size());
    }
  }
  return x;
}

/// Pre-activations of every layer plus the encoded input. acts[0] is the
/// encoded input, acts[i] (i >= 1) the post-ReLU output of hidden layer i,
/// pre[i] the pre-activation of layer i (pre.back() are the logits).
template <typename Scalar>
struct ForwardTrace {
  std::vector<MatrixX<Scalar>> acts;
  std::vector<MatrixX<Scalar>> pre;

  const MatrixX<Scalar>& logits() const { return pre.back(); }
};

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const BasicParamSet<Scalar>& p, const ArchSpec& arch,
                                   std::span<const BasicInput<Scalar>> inputs) {
  if (!matches(p, arch)) throw DimensionError("forward: parameters do not match architecture");
  ForwardTrace<Scalar> tr;
  tr.acts.push_back(encode(p, arch, inputs));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    MatrixX<Scalar> z = p.layers[l].weight * tr.acts.back();
    z.colwise() += p.layers[l].bias;
    if (l + 1 < p.layers.size()) tr.acts.push_back(z.cwiseMax(Scalar(0)));
    tr.pre.push_back(std::move(z));
  }
  if (!tr.logits().allFinite()) throw NonFiniteError("forward: non-finite logits");
  return tr;
}

template <typename Scalar>
MatrixX<Scalar> forward_batch(const BasicParamSet<Scalar>& p, const ArchSpec& arch,
                              std::span<const BasicInput<Scalar>> inputs) {
  return forward_trace(p, arch, inputs).pre.back();
}

template <typename Scalar>
VectorX<Scalar> forward(const BasicParamSet<Scalar>& p, const ArchSpec& arch,
                        const BasicInput<Scalar>& input) {
  return forward_batch(p, arch, std::span<const BasicInput<Scalar>>(&input, 1)).col(0);
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
int argmax(const Eigen::MatrixBase<Derived>& v) {
  int best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

// ---------------------------------------------------------------------------
// Losses

template <typename Derived>
auto softmax_t(const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0)) throw Error("softmax_t: temperature must be positive");
  VectorX<Scalar> s = logits / tau;
  s.array() -= s.maxCoeff();
  s = s.array().exp();
  return VectorX<Scalar>(s / s.sum());
}

template <typename Derived>
auto log_softmax_t(const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  VectorX<Scalar> s = logits / tau;
  const Scalar m = s.maxCoeff();
  const Scalar lse = m + std::log((s.array() - m).exp().sum());
  return VectorX<Scalar>(s.array() - lse);
}

template <typename Derived>
auto cross_entropy(const Eigen::MatrixBase<Derived>& logits, int label) {
  return -log_softmax_t(logits, typename Derived::Scalar(1))(label);
}

/// KL(p || q) between temperature softmaxes, in the requested argument order.
template <typename D1, typename D2>
auto kl_divergence_t(const Eigen::MatrixBase<D1>& student, const Eigen::MatrixBase<D2>& teacher,
                     typename D1::Scalar tau, KlDirection dir) {
  using Scalar = typename D1::Scalar;
  const VectorX<Scalar> ls = log_softmax_t(student, tau);
  const VectorX<Scalar> lt = log_softmax_t(teacher, tau);
  const VectorX<Scalar>& lp = dir == KlDirection::student_first ? ls : lt;
  const VectorX<Scalar>& lq = dir == KlDirection::student_first ? lt : ls;
  const Scalar kl = (lp.array().exp() * (lp - lq).array()).sum();
  return std::max(kl, Scalar(0));
}

template <typename Scalar>
void validate_loss_config(const BasicLossConfig<Scalar>& cfg, Index num_classes, Index batch) {
  if (!(cfg.alpha >= 0 && cfg.alpha <= 1)) throw Error("loss: alpha must lie in [0, 1]");
  if (!(cfg.tau > 0)) throw Error("loss: tau must be positive");
  if (cfg.alpha < 1) {
    if (cfg.teacher_logits.rows() != num_classes || cfg.teacher_logits.cols() != batch)
      throw Error("loss: teacher logits required (num_classes x batch) when alpha < 1");
  }
}

/// Per-sample ensemble distillation loss. `teacher` may be empty when alpha == 1.
template <typename Scalar>
Scalar distill_loss(const VectorX<Scalar>& student, int label, Scalar alpha, Scalar tau,
                    KlDirection dir, const VectorX<Scalar>* teacher) {
  if (label < 0 || label >= student.size()) throw Error("distill_loss: label out of range");
  if (!(tau > 0)) throw Error("distill_loss: tau must be positive");
  if (!(alpha >= 0 && alpha <= 1)) throw Error("distill_loss: alpha must lie in [0, 1]");
  Scalar loss = alpha > 0 ? alpha * cross_entropy(student, label) : Scalar(0);
  if (alpha < 1) {
    if (!teacher || teacher->size() != student.size())
      throw Error("distill_loss: teacher logits required when alpha < 1");
    loss += (1 - alpha) * tau * tau * kl_divergence_t(student, *teacher, tau, dir);
  }
  return loss;
}

template <typename Scalar>
Scalar distill_loss(const VectorX<Scalar>& student, int label, const BasicLossConfig<Scalar>& cfg,
                    Index column = 0) {
  if (cfg.alpha < 1) {
    const VectorX<Scalar> t = cfg.teacher_logits.col(column);
    return distill_loss(student, label, cfg.alpha, cfg.tau, cfg.kl_direction, &t);
  }
  return distill_loss<Scalar>(student, label, cfg.alpha, cfg.tau, cfg.kl_direction, nullptr);
}

/// Mean loss over a batch.
template <typename Scalar>
Scalar batch_loss(const BasicParamSet<Scalar>& p, const ArchSpec& arch,
                  const BasicBatch<Scalar>& batch, const BasicLossConfig<Scalar>& cfg) {
  if (batch.size() == 0 || batch.labels.size() != batch.inputs.size())
    throw Error("batch: inputs and labels must be nonempty and of equal length");
  validate_loss_config(cfg, arch.num_classes, batch.size());
  const MatrixX<Scalar> z = forward_batch(p, arch, std::span(batch.inputs));
  Scalar total = 0;
  for (Index b = 0; b < batch.size(); ++b)
    total += distill_loss<Scalar>(z.col(b), batch.labels[b], cfg, b);
  return total / static_cast<Scalar>(batch.size());
}

/// d loss / d logits for one sample.
template <typename Scalar>
VectorX<Scalar> loss_logit_grad(const VectorX<Scalar>& z, int label,
                                const BasicLossConfig<Scalar>& cfg, Index column) {
  VectorX<Scalar> g = VectorX<Scalar>::Zero(z.size());
  if (cfg.alpha > 0) {
    g = softmax_t(z, Scalar(1));
    g(label) -= 1;
    g *= cfg.alpha;
  }
  if (cfg.alpha < 1) {
    const VectorX<Scalar> t = cfg.teacher_logits.col(column);
    const VectorX<Scalar> ls = log_softmax_t(z, cfg.tau);
    const VectorX<Scalar> lt = log_softmax_t(t, cfg.tau);
    const VectorX<Scalar> ps = ls.array().exp();
    VectorX<Scalar> dkl_ds;
    if (cfg.kl_direction == KlDirection::student_first) {
      const VectorX<Scalar> l = ls - lt;
      const Scalar kl = ps.dot(l);
      dkl_ds = ps.array() * (l.array() - kl);
    } else {
      dkl_ds = ps - VectorX<Scalar>(lt.array().exp());
    }
    // ds/dz = 1/tau, so the tau^2 weight leaves a single factor of tau.
    g += (1 - cfg.alpha) * cfg.tau * dkl_ds;
  }
  return g;
}

/// Exact gradient of batch_loss with respect to every parameter.
template <typename Scalar>
BasicParamSet<Scalar> grad(const BasicParamSet<Scalar>& p, const ArchSpec& arch,
                           const BasicBatch<Scalar>& batch, const BasicLossConfig<Scalar>& cfg) {
  if (batch.size() == 0 || batch.labels.size() != batch.inputs.size())
    throw Error("batch: inputs and labels must be nonempty and of equal length");
  validate_loss_config(cfg, arch.num_classes, batch.size());
  for (int y : batch.labels)
    if (y < 0 || y >= arch.num_classes) throw Error("batch: label out of range");

  const auto tr = forward_trace(p, arch, std::span(batch.inputs));
  const Index n = batch.size();
  MatrixX<Scalar> dz(arch.num_classes, n);
  for (Index b = 0; b < n; ++b)
    dz.col(b) = loss_logit_grad<Scalar>(tr.logits().col(b), batch.labels[b], cfg, b);
  dz /= static_cast<Scalar>(n);

  BasicParamSet<Scalar> g = zero_params<Scalar>(arch);
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    g.layers[l].weight.noalias() = dz * tr.acts[l].transpose();
    g.layers[l].bias = dz.rowwise().sum();
    if (l == 0 && arch.mode == InputMode::vector) break;
    MatrixX<Scalar> da = p.layers[l].weight.transpose() * dz;
    if (l == 0) {
      for (Index b = 0; b < n; ++b) {
        const auto& toks = batch.inputs[b].tokens;
        const Scalar inv = Scalar(1) / static_cast<Scalar>(toks.size());
        for (int t : toks) g.embedding.row(t) += inv * da.col(b).transpose();
      }
      break;
    }
    dz = da.array() * (tr.pre[l - 1].array() > Scalar(0)).template cast<Scalar>();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training

template <typename Scalar>
void axpy(BasicParamSet<Scalar>& p, Scalar a, const BasicParamSet<Scalar>& x) {
  p.embedding += a * x.embedding;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    p.layers[l].weight += a * x.layers[l].weight;
    p.layers[l].bias += a * x.layers[l].bias;
  }
}

/// Supplies teacher logits (num_classes x batch) for a mini-batch.
template <typename Scalar>
using TeacherFn = std::function<MatrixX<Scalar>(const BasicBatch<Scalar>&)>;

struct SgdOptions {
  int epochs = 1;
  int batch_size = 32;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD over (inputs, labels). Each epoch visits the data in an
/// order that depends only on (seed, epoch). The last batch may be short.
template <typename Scalar>
BasicParamSet<Scalar> sgd_train(BasicParamSet<Scalar> params, const ArchSpec& arch,
                                std::span<const BasicInput<Scalar>> inputs,
                                std::span<const int> labels, const SgdOptions& opt,
                                BasicLossConfig<Scalar> cfg,
                                const TeacherFn<Scalar>& teacher = {}) {
  if (opt.epochs < 0) throw Error("sgd_train: epochs must be >= 0");
  if (opt.batch_size <= 0) throw Error("sgd_train: batch_size must be positive");
  if (!(opt.lr >= 0)) throw Error("sgd_train: learning rate must be >= 0");
  if (inputs.size() != labels.size()) throw Error("sgd_train: inputs and labels differ in length");
  if (opt.epochs == 0) return params;
  if (inputs.empty()) throw Error("sgd_train: empty dataset");
  if (cfg.alpha < 1 && !teacher) throw Error("sgd_train: alpha < 1 requires a teacher");

  std::vector<std::size_t> order(inputs.size());
  BasicBatch<Scalar> batch;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Engine rng = make_engine(derive_seed(opt.seed, "epoch", {std::uint64_t(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + std::size_t(opt.batch_size));
      batch.inputs.clear();
      batch.labels.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.inputs.push_back(inputs[order[k]]);
        batch.labels.push_back(labels[order[k]]);
      }
      if (cfg.alpha < 1) cfg.teacher_logits = teacher(batch);
      axpy(params, static_cast<Scalar>(-opt.lr), grad(params, arch, batch, cfg));
    }
    if (!params.all_finite()) throw NonFiniteError("sgd_train: parameters diverged");
  }
  return params;
}

using ParamSet = BasicParamSet<double>;
using Input = BasicInput<double>;
using Batch = BasicBatch<double>;
using LossConfig = BasicLossConfig<double>;
using Vec = VectorX<double>;
using Mat = MatrixX<double>;

}  // namespace fmfl
