#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <vector>

#include "mpsn/kernels.hpp"

namespace mpsn::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap view(double* p, std::size_t rows, std::size_t cols) {
  return MutMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Unrolls the channels [c0, c0 + count) of `input` into a
// (count * k * k) x (oh * ow) matrix.
void im2col(const ConvShape& s, const double* input, std::size_t c0, std::size_t count,
            double* col) {
  const std::size_t oh = s.out_h(), ow = s.out_w(), k = s.kernel;
  const long rows = static_cast<long>(count * k * k);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const std::size_t c = c0 + static_cast<std::size_t>(r) / (k * k);
    const std::size_t ky = (static_cast<std::size_t>(r) / k) % k;
    const std::size_t kx = static_cast<std::size_t>(r) % k;
    double* dst = col + static_cast<std::size_t>(r) * oh * ow;
    const double* plane = input + c * s.in_h * s.in_w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
      double* row = dst + oy * ow;
      if (iy < 0 || iy >= static_cast<long>(s.in_h)) {
        std::fill(row, row + ow, 0.0);
        continue;
      }
      const double* src = plane + iy * s.in_w;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
        row[ox] = (ix < 0 || ix >= static_cast<long>(s.in_w)) ? 0.0 : src[ix];
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into `grad_input`.
// Each channel owns its rows, so channels are independent.
void col2im(const ConvShape& s, const double* col, std::size_t c0, std::size_t count,
            double* grad_input) {
  const std::size_t oh = s.out_h(), ow = s.out_w(), k = s.kernel;
#pragma omp parallel for schedule(static)
  for (long ci = 0; ci < static_cast<long>(count); ++ci) {
    double* plane = grad_input + (c0 + ci) * s.in_h * s.in_w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* src = col + ((ci * k + ky) * k + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
          if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
          double* dst = plane + iy * s.in_w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
            if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
            dst[ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvShape& s) { return s.kernel == 1 && s.stride == 1 && s.pad == 0; }

void depthwise_forward(const ConvShape& s, const double* input, const double* weight,
                       const double* bias, double* output) {
  const std::size_t oh = s.out_h(), ow = s.out_w(), k = s.kernel;
#pragma omp parallel for schedule(static)
  for (long c = 0; c < static_cast<long>(s.in_channels); ++c) {
    const double* plane = input + c * s.in_h * s.in_w;
    const double* w = weight + c * k * k;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = bias ? bias[c] : 0.0;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
          if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
            if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
            acc += w[ky * k + kx] * plane[iy * s.in_w + ix];
          }
        }
        output[(c * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

void depthwise_backward(const ConvShape& s, const double* input, const double* grad_output,
                        const double* weight, double* grad_input, double* grad_weight,
                        double* grad_bias) {
  const std::size_t oh = s.out_h(), ow = s.out_w(), k = s.kernel;
#pragma omp parallel for schedule(static)
  for (long c = 0; c < static_cast<long>(s.in_channels); ++c) {
    const std::size_t plane_off = c * s.in_h * s.in_w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double go = grad_output[(c * oh + oy) * ow + ox];
        if (grad_bias) grad_bias[c] += go;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
          if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
            if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
            const std::size_t idx = plane_off + iy * s.in_w + ix;
            if (grad_input) grad_input[idx] += go * weight[c * k * k + ky * k + kx];
            if (grad_weight) grad_weight[c * k * k + ky * k + kx] += go * input[idx];
          }
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvShape& s, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output) {
  if (s.depthwise()) {
    depthwise_forward(s, input.data(), weight.data(), bias.empty() ? nullptr : bias.data(),
                      output.data());
    return;
  }
  const std::size_t n = s.out_h() * s.out_w();
  const std::size_t icg = s.in_per_group(), ocg = s.out_per_group();
  const std::size_t kdim = icg * s.kernel * s.kernel;
  std::vector<double> col;
  if (!is_pointwise(s)) col.resize(kdim * n);

  for (std::size_t g = 0; g < s.groups; ++g) {
    const double* b_mat;
    if (is_pointwise(s)) {
      b_mat = input.data() + g * icg * n;
    } else {
      im2col(s, input.data(), g * icg, icg, col.data());
      b_mat = col.data();
    }
    double* out = output.data() + g * ocg * n;
    view(out, ocg, n).noalias() = view(weight.data() + g * ocg * kdim, ocg, kdim) * view(b_mat, kdim, n);
    if (!bias.empty()) {
#pragma omp parallel for schedule(static)
      for (long oc = 0; oc < static_cast<long>(ocg); ++oc) {
        const double b = bias[g * ocg + oc];
        double* row = out + oc * n;
        for (std::size_t i = 0; i < n; ++i) row[i] += b;
      }
    }
  }
}

void conv2d_backward_input(const ConvShape& s, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  if (s.depthwise()) {
    depthwise_backward(s, nullptr, grad_output.data(), weight.data(), grad_input.data(), nullptr,
                       nullptr);
    return;
  }
  const std::size_t n = s.out_h() * s.out_w();
  const std::size_t icg = s.in_per_group(), ocg = s.out_per_group();
  const std::size_t kdim = icg * s.kernel * s.kernel;
  for (std::size_t g = 0; g < s.groups; ++g) {
    const double* go = grad_output.data() + g * ocg * n;
    const double* w = weight.data() + g * ocg * kdim;
    if (is_pointwise(s)) {
      view(grad_input.data() + g * icg * n, kdim, n).noalias() +=
          view(w, ocg, kdim).transpose() * view(go, ocg, n);
      continue;
    }
    std::vector<double> col(kdim * n);
    view(col.data(), kdim, n).noalias() = view(w, ocg, kdim).transpose() * view(go, ocg, n);
    col2im(s, col.data(), g * icg, icg, grad_input.data());
  }
}

void conv2d_backward_params(const ConvShape& s, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  if (s.depthwise()) {
    depthwise_backward(s, input.data(), grad_output.data(), nullptr, nullptr, grad_weight.data(),
                       grad_bias.empty() ? nullptr : grad_bias.data());
    return;
  }
  const std::size_t n = s.out_h() * s.out_w();
  const std::size_t icg = s.in_per_group(), ocg = s.out_per_group();
  const std::size_t kdim = icg * s.kernel * s.kernel;
  std::vector<double> col;
  if (!is_pointwise(s)) col.resize(kdim * n);
  for (std::size_t g = 0; g < s.groups; ++g) {
    const double* b_mat;
    if (is_pointwise(s)) {
      b_mat = input.data() + g * icg * n;
    } else {
      im2col(s, input.data(), g * icg, icg, col.data());
      b_mat = col.data();
    }
    const double* go = grad_output.data() + g * ocg * n;
    view(grad_weight.data() + g * ocg * kdim, ocg, kdim).noalias() +=
        view(go, ocg, n) * view(b_mat, kdim, n).transpose();
    if (!grad_bias.empty()) {
#pragma omp parallel for schedule(static)
      for (long oc = 0; oc < static_cast<long>(ocg); ++oc) {
        const double* row = go + oc * n;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += row[i];
        grad_bias[g * ocg + oc] += acc;
      }
    }
  }
}

void maxpool_forward(const PoolShape& s, std::span<const double> input, std::span<double> output,
                     std::span<std::size_t> argmax) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
#pragma omp parallel for schedule(static)
  for (long c = 0; c < static_cast<long>(s.channels); ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < s.kernel; ++ky) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
          if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
          for (std::size_t kx = 0; kx < s.kernel; ++kx) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
            if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
            const std::size_t idx = (c * s.in_h + iy) * s.in_w + ix;
            if (input[idx] > best) {
              best = input[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (c * oh + oy) * ow + ox;
        output[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
}

void maxpool_backward(const PoolShape& s, std::span<const double> grad_output,
                      std::span<const std::size_t> argmax, std::span<double> grad_input) {
  const std::size_t per_channel = s.out_h() * s.out_w();
#pragma omp parallel for schedule(static)
  for (long c = 0; c < static_cast<long>(s.channels); ++c) {
    for (std::size_t i = c * per_channel; i < (c + 1) * per_channel; ++i) {
      grad_input[argmax[i]] += grad_output[i];
    }
  }
}

}  // namespace mpsn::kernels
