#include "fmfl/metrics.hpp"

namespace fmfl {
namespace {

// Evaluates in chunks to bound the size of the activation matrices.
template <typename F>
void for_each_prediction(const ParamSet& params, const ArchSpec& arch, const Dataset& data, F&& f) {
  constexpr std::size_t kChunk = 512;
  const std::span<const Input> all(data.inputs);
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const auto chunk = all.subspan(start, std::min(kChunk, all.size() - start));
    const Mat z = forward_batch(params, arch, chunk);
    for (Index b = 0; b < z.cols(); ++b) f(start + b, argmax(z.col(b)));
  }
}

}  // namespace

double accuracy(const ParamSet& params, const ArchSpec& arch, const Dataset& data) {
  if (data.empty()) throw Error("accuracy: empty dataset");
  std::size_t hits = 0;
  for_each_prediction(params, arch, data, [&](std::size_t i, int pred) {
    hits += pred == data.labels[i];
  });
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

double asr(const ParamSet& params, const ArchSpec& arch, const Dataset& triggered, int target) {
  if (triggered.empty()) throw Error("asr: empty triggered set");
  std::size_t hits = 0;
  for_each_prediction(params, arch, triggered, [&](std::size_t i, int pred) {
    if (triggered.labels[i] == target) throw Error("asr: triggered set contains target-class originals");
    hits += pred == target;
  });
  return static_cast<double>(hits) / static_cast<double>(triggered.size());
}

ClientMetrics mean_client_metrics(std::span<const ModelView> models, const Dataset& clean_test,
                                  const Dataset& triggered_test, int target) {
  if (models.empty()) throw Error("mean_client_metrics: no clients");
  ClientMetrics m;
  for (const auto& v : models) {
    m.acc += accuracy(*v.params, *v.arch, clean_test);
    m.asr += asr(*v.params, *v.arch, triggered_test, target);
  }
  m.acc /= static_cast<double>(models.size());
  m.asr /= static_cast<double>(models.size());
  return m;
}

}  // namespace fmfl
