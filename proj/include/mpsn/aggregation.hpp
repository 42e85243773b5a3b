#pragma once

// Shallow (additive) and deep (sigmoid-masked) fusion of the frame and motion
// streams, with closed-form derivatives of the deep fusion.
//
//   sfa:  h_fn + h_fdn
//   dfa:  alpha * h_bn * sigmoid(h_bdn) + beta * h_bdn
//
// The FeatureMap overloads are the element-wise reference; the Graph
// overloads compose differentiable ops and are what training runs.

#include <cmath>

#include "mpsn/autograd.hpp"
#include "mpsn/errors.hpp"
#include "mpsn/feature_map.hpp"

namespace mpsn {

struct AggregationParams {
  double alpha = 1.0;
  double beta = 1.0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

FeatureMap sfa(const FeatureMap& h_fn, const FeatureMap& h_fdn);
FeatureMap dfa(const FeatureMap& h_bn, const FeatureMap& h_bdn, const AggregationParams& p);
/// Aggregation used when both streams see raw frames: h_bn + h_bdn.
FeatureMap dfa_two_frames_degenerate(const FeatureMap& h_bn, const FeatureMap& h_bdn);

/// dfa with an arbitrary element-wise mask in place of the sigmoid.
template <typename Mask>
FeatureMap dfa_with_mask(const FeatureMap& h_bn, const FeatureMap& h_bdn,
                         const AggregationParams& p, Mask mask) {
  require_same_shape(h_bn.values, h_bdn.values, "dfa");
  FeatureMap out{Tensor(h_bn.values.shape()), h_bn.stride};
  const long n = static_cast<long>(out.values.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    out.values[i] = p.alpha * h_bn.values[i] * mask(h_bdn.values[i]) + p.beta * h_bdn.values[i];
  }
  return out;
}

/// dL/dh_bdn = upstream * (alpha * h_bn * s * (1 - s) + beta), s = sigmoid(h_bdn).
/// The beta path bypasses the sigmoid.
FeatureMap dfa_grad_hbdn(const FeatureMap& upstream, const FeatureMap& h_bn,
                         const FeatureMap& h_bdn, const AggregationParams& p);
/// dL/dh_bn = alpha * upstream * sigmoid(h_bdn).
FeatureMap dfa_grad_hbn(const FeatureMap& upstream, const FeatureMap& h_bdn,
                        const AggregationParams& p);

Var sfa(Graph& g, Var h_fn, Var h_fdn);
Var dfa(Graph& g, Var h_bn, Var h_bdn, const AggregationParams& p);
Var dfa_two_frames_degenerate(Graph& g, Var h_bn, Var h_bdn);

}  // namespace mpsn
