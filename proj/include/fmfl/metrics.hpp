#pragma once

#include <span>
#include <utility>

#include "fmfl/data.hpp"
#include "fmfl/nn.hpp"

namespace fmfl {

/// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
double accuracy(const ParamSet& params, const ArchSpec& arch, const Dataset& data);

/// Fraction of triggered samples predicted as `target`.
double asr(const ParamSet& params, const ArchSpec& arch, const Dataset& triggered, int target);

struct ModelView {
  const ParamSet* params;
  const ArchSpec* arch;
};

struct ClientMetrics {
  double acc = 0;
  double asr = 0;
};

/// Arithmetic mean of per-model ACC and ASR.
ClientMetrics mean_client_metrics(std::span<const ModelView> models, const Dataset& clean_test,
                                  const Dataset& triggered_test, int target);

}  // namespace fmfl
