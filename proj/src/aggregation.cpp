#include "mpsn/aggregation.hpp"

namespace mpsn {

namespace {

void require_same_grid(const FeatureMap& a, const FeatureMap& b, const char* what) {
  require_same_shape(a.values, b.values, what);
  if (a.stride != b.stride) {
    throw ContractError(std::string(what) + ": stride mismatch " + std::to_string(a.stride) +
                        " vs " + std::to_string(b.stride));
  }
}

template <typename F>
FeatureMap zip(const FeatureMap& a, const FeatureMap& b, F f) {
  FeatureMap out{Tensor(a.values.shape()), a.stride};
  const long n = static_cast<long>(out.values.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out.values[i] = f(a.values[i], b.values[i]);
  return out;
}

}  // namespace

FeatureMap sfa(const FeatureMap& h_fn, const FeatureMap& h_fdn) {
  require_same_grid(h_fn, h_fdn, "sfa");
  return zip(h_fn, h_fdn, [](double a, double b) { return a + b; });
}

FeatureMap dfa(const FeatureMap& h_bn, const FeatureMap& h_bdn, const AggregationParams& p) {
  require_same_grid(h_bn, h_bdn, "dfa");
  return dfa_with_mask(h_bn, h_bdn, p, [](double v) { return sigmoid(v); });
}

FeatureMap dfa_two_frames_degenerate(const FeatureMap& h_bn, const FeatureMap& h_bdn) {
  require_same_grid(h_bn, h_bdn, "dfa_two_frames_degenerate");
  return zip(h_bn, h_bdn, [](double a, double b) { return a + b; });
}

FeatureMap dfa_grad_hbdn(const FeatureMap& upstream, const FeatureMap& h_bn,
                         const FeatureMap& h_bdn, const AggregationParams& p) {
  require_same_shape(upstream.values, h_bn.values, "dfa_grad_hbdn");
  require_same_shape(upstream.values, h_bdn.values, "dfa_grad_hbdn");
  FeatureMap out{Tensor(upstream.values.shape()), upstream.stride};
  const long n = static_cast<long>(out.values.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    const double s = sigmoid(h_bdn.values[i]);
    out.values[i] = upstream.values[i] * (p.alpha * h_bn.values[i] * s * (1.0 - s) + p.beta);
  }
  return out;
}

FeatureMap dfa_grad_hbn(const FeatureMap& upstream, const FeatureMap& h_bdn,
                        const AggregationParams& p) {
  require_same_shape(upstream.values, h_bdn.values, "dfa_grad_hbn");
  return zip(upstream, h_bdn,
             [&p](double up, double b) { return p.alpha * up * sigmoid(b); });
}

Var sfa(Graph& g, Var h_fn, Var h_fdn) { return ops::add(g, h_fn, h_fdn); }

Var dfa(Graph& g, Var h_bn, Var h_bdn, const AggregationParams& p) {
  const Var masked = ops::mul(g, h_bn, ops::sigmoid(g, h_bdn));
  return ops::add(g, ops::scale(g, masked, p.alpha), ops::scale(g, h_bdn, p.beta));
}

Var dfa_two_frames_degenerate(Graph& g, Var h_bn, Var h_bdn) { return ops::add(g, h_bn, h_bdn); }

}  // namespace mpsn
