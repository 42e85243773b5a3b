#include "mpsn/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "mpsn/errors.hpp"

namespace mpsn {

void Parameter::zero_grad() {
  if (grad.empty()) grad = Tensor(value.shape());
  grad.fill(0.0);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, {}});
  return Var{nodes_.size() - 1};
}

Var Graph::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, {}});
  return Var{nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
  nodes_.push_back(Node{{}, {}, &p, parameter_grads_, {}});
  return Var{nodes_.size() - 1};
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [this](Var p) { return nodes_[p.id].requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, nullptr, needs, needs ? std::move(backward) : nullptr});
  return Var{nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.param ? n.param->value : n.value;
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.param ? n.param->grad : n.grad;
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  Tensor& buf = n.param ? n.param->grad : n.grad;
  if (buf.empty()) buf = Tensor(value(v).shape());
  return buf;
}

void Graph::backward(Var root) {
  if (value(root).size() != 1) {
    throw ContractError("backward: root must be a scalar, got " + value(root).shape_string());
  }
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root)[0] += 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, Var{i});
  }
}

namespace ops {

namespace {

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* src = a.data();
  double* dst = out.data();
  const long n = static_cast<long>(a.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) dst[i] = f(src[i]);
  return out;
}

// grad_buffer(target) += go * f(i)
template <typename F>
void accumulate(Graph& g, Var target, const Tensor& go, F f) {
  if (!g.requires_grad(target)) return;
  Tensor& buf = g.grad_buffer(target);
  double* dst = buf.data();
  const double* src = go.data();
  const long n = static_cast<long>(go.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) dst[i] += src[i] * f(static_cast<std::size_t>(i));
}

}  // namespace

Var add(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same_shape(x, y, "add");
  Tensor out(x.shape());
  const long n = static_cast<long>(x.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out[i] = x[i] + y[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, Var self) {
    const Tensor& go = gr.grad(self);
    accumulate(gr, a, go, [](std::size_t) { return 1.0; });
    accumulate(gr, b, go, [](std::size_t) { return 1.0; });
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same_shape(x, y, "sub");
  Tensor out(x.shape());
  const long n = static_cast<long>(x.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out[i] = x[i] - y[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, Var self) {
    const Tensor& go = gr.grad(self);
    accumulate(gr, a, go, [](std::size_t) { return 1.0; });
    accumulate(gr, b, go, [](std::size_t) { return -1.0; });
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  const long n = static_cast<long>(x.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out[i] = x[i] * y[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, Var self) {
    const Tensor& go = gr.grad(self);
    const Tensor& xv = gr.value(a);
    const Tensor& yv = gr.value(b);
    accumulate(gr, a, go, [&yv](std::size_t i) { return yv[i]; });
    accumulate(gr, b, go, [&xv](std::size_t i) { return xv[i]; });
  });
}

Var scale(Graph& g, Var a, double s) {
  Tensor out = map_unary(g.value(a), [s](double v) { return s * v; });
  return g.record(std::move(out), {a}, [a, s](Graph& gr, Var self) {
    accumulate(gr, a, gr.grad(self), [s](std::size_t) { return s; });
  });
}

Var sigmoid(Graph& g, Var a) {
  Tensor out = map_unary(g.value(a), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return g.record(std::move(out), {a}, [a](Graph& gr, Var self) {
    const Tensor& y = gr.value(self);
    accumulate(gr, a, gr.grad(self), [&y](std::size_t i) { return y[i] * (1.0 - y[i]); });
  });
}

Var relu(Graph& g, Var a) {
  Tensor out = map_unary(g.value(a), [](double v) { return v > 0.0 ? v : 0.0; });
  return g.record(std::move(out), {a}, [a](Graph& gr, Var self) {
    const Tensor& x = gr.value(a);
    accumulate(gr, a, gr.grad(self), [&x](std::size_t i) { return x[i] > 0.0 ? 1.0 : 0.0; });
  });
}

Var relu6(Graph& g, Var a) {
  Tensor out = map_unary(g.value(a), [](double v) { return std::clamp(v, 0.0, 6.0); });
  return g.record(std::move(out), {a}, [a](Graph& gr, Var self) {
    const Tensor& x = gr.value(a);
    accumulate(gr, a, gr.grad(self),
               [&x](std::size_t i) { return (x[i] > 0.0 && x[i] < 6.0) ? 1.0 : 0.0; });
  });
}

Var abs(Graph& g, Var a) {
  Tensor out = map_unary(g.value(a), [](double v) { return std::fabs(v); });
  return g.record(std::move(out), {a}, [a](Graph& gr, Var self) {
    const Tensor& x = gr.value(a);
    accumulate(gr, a, gr.grad(self),
               [&x](std::size_t i) { return x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0); });
  });
}

namespace {

kernels::ConvShape conv_shape(const Tensor& x, const Tensor& w, const ConvParams& p) {
  if (x.rank() != 3 || w.rank() != 4) {
    throw DimensionError("conv2d: expected CHW input and OIHW weight, got " + x.shape_string() +
                         " and " + w.shape_string());
  }
  kernels::ConvShape s;
  s.in_channels = x.channels();
  s.in_h = x.height();
  s.in_w = x.width();
  s.out_channels = w.dim(0);
  s.kernel = w.dim(2);
  s.stride = p.stride;
  s.pad = p.pad;
  s.groups = p.groups;
  kernels::validate(s);
  if (w.dim(1) != s.in_per_group() || w.dim(2) != w.dim(3)) {
    throw DimensionError("conv2d: weight " + w.shape_string() + " incompatible with input " +
                         x.shape_string());
  }
  return s;
}

Var conv2d_impl(Graph& g, Var x, Var w, const Var* b, const ConvParams& p) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const kernels::ConvShape s = conv_shape(xv, wv, p);
  Tensor out = Tensor::chw(s.out_channels, s.out_h(), s.out_w());
  std::span<const double> bias;
  if (b) bias = g.value(*b).values();
  kernels::conv2d_forward(s, xv.values(), wv.values(), bias, out.values());

  std::vector<Var> parents{x, w};
  if (b) parents.push_back(*b);
  const bool has_bias = b != nullptr;
  const Var bv = b ? *b : Var{};
  return g.record(std::move(out), parents, [x, w, bv, has_bias, s](Graph& gr, Var self) {
    const Tensor& go = gr.grad(self);
    if (gr.requires_grad(x)) {
      kernels::conv2d_backward_input(s, go.values(), gr.value(w).values(),
                                     gr.grad_buffer(x).values());
    }
    const bool need_w = gr.requires_grad(w);
    const bool need_b = has_bias && gr.requires_grad(bv);
    if (need_w || need_b) {
      Tensor scratch_w;
      std::span<double> gw;
      if (need_w) {
        gw = gr.grad_buffer(w).values();
      } else {
        scratch_w = Tensor(gr.value(w).shape());
        gw = scratch_w.values();
      }
      std::span<double> gb;
      if (need_b) gb = gr.grad_buffer(bv).values();
      kernels::conv2d_backward_params(s, gr.value(x).values(), go.values(), gw, gb);
    }
  });
}

}  // namespace

Var conv2d(Graph& g, Var x, Var weight, Var bias, const ConvParams& p) {
  return conv2d_impl(g, x, weight, &bias, p);
}

Var conv2d(Graph& g, Var x, Var weight, const ConvParams& p) {
  return conv2d_impl(g, x, weight, nullptr, p);
}

Var max_pool(Graph& g, Var x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 3) throw DimensionError("max_pool: expected CHW, got " + xv.shape_string());
  kernels::PoolShape s{xv.channels(), xv.height(), xv.width(), kernel, stride, pad};
  if (xv.height() + 2 * pad < kernel || xv.width() + 2 * pad < kernel) {
    throw ContractError("max_pool: window larger than input " + xv.shape_string());
  }
  Tensor out = Tensor::chw(s.channels, s.out_h(), s.out_w());
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  kernels::maxpool_forward(s, xv.values(), out.values(), *argmax);
  return g.record(std::move(out), {x}, [x, s, argmax](Graph& gr, Var self) {
    kernels::maxpool_backward(s, gr.grad(self).values(), *argmax, gr.grad_buffer(x).values());
  });
}

Var pad_bottom_right(Graph& g, Var x, std::size_t height, std::size_t width) {
  const Tensor& xv = g.value(x);
  if (height < xv.height() || width < xv.width()) {
    throw ContractError("pad_bottom_right: target smaller than input " + xv.shape_string());
  }
  if (height == xv.height() && width == xv.width()) return x;
  const std::size_t c = xv.channels(), h = xv.height(), w = xv.width();
  Tensor out = Tensor::chw(c, height, width);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out.at(ch, y, xx) = xv.at(ch, y, xx);
  return g.record(std::move(out), {x}, [x, c, h, w](Graph& gr, Var self) {
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(x);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) gi.at(ch, y, xx) += go.at(ch, y, xx);
  });
}

Var normalize(Graph& g, Var x, Var gamma, Var beta, NormState& state) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 3) throw DimensionError("normalize: expected CHW, got " + xv.shape_string());
  const std::size_t c = xv.channels();
  const std::size_t n = xv.height() * xv.width();
  const Tensor& gv = g.value(gamma);
  const Tensor& bv = g.value(beta);
  if (gv.size() != c || bv.size() != c) {
    throw DimensionError("normalize: affine size mismatch for " + xv.shape_string());
  }
  if (state.running_mean.size() != c) {
    state.running_mean = Tensor({c}, 0.0);
    state.running_var = Tensor({c}, 1.0);
  }
  const bool sample_stats = state.kind == NormKind::instance || g.training();

  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  Tensor out(xv.shape());
#pragma omp parallel for schedule(static)
  for (long ch = 0; ch < static_cast<long>(c); ++ch) {
    const double* src = xv.data() + ch * n;
    double mean, var;
    if (sample_stats) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += src[i];
      mean = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) ss += (src[i] - mean) * (src[i] - mean);
      var = ss / static_cast<double>(n);
      if (state.kind == NormKind::batch && g.training()) {
        const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
        state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean;
        state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
      }
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    (*inv_std)[ch] = is;
    double* xh = xhat->data() + ch * n;
    double* dst = out.data() + ch * n;
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = (src[i] - mean) * is;
      dst[i] = gv[ch] * xh[i] + bv[ch];
    }
  }

  return g.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std, sample_stats, c, n](Graph& gr, Var self) {
    const Tensor& go = gr.grad(self);
    const Tensor& gv2 = gr.value(gamma);
    const bool need_x = gr.requires_grad(x);
    const bool need_g = gr.requires_grad(gamma);
    const bool need_b = gr.requires_grad(beta);
    Tensor* gx = need_x ? &gr.grad_buffer(x) : nullptr;
    Tensor* gg = need_g ? &gr.grad_buffer(gamma) : nullptr;
    Tensor* gb = need_b ? &gr.grad_buffer(beta) : nullptr;
#pragma omp parallel for schedule(static)
    for (long ch = 0; ch < static_cast<long>(c); ++ch) {
      const double* gop = go.data() + ch * n;
      const double* xh = xhat->data() + ch * n;
      double sum_go = 0.0, sum_go_xh = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sum_go += gop[i];
        sum_go_xh += gop[i] * xh[i];
      }
      if (gg) (*gg)[ch] += sum_go_xh;
      if (gb) (*gb)[ch] += sum_go;
      if (!gx) continue;
      double* dst = gx->data() + ch * n;
      const double k = gv2[ch] * (*inv_std)[ch];
      if (sample_stats) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          dst[i] += k * (gop[i] - inv_n * sum_go - xh[i] * inv_n * sum_go_xh);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) dst[i] += k * gop[i];
      }
    }
  });
}

}  // namespace ops
}  // namespace mpsn
