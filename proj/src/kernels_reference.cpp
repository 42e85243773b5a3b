#include <limits>

#include "mpsn/errors.hpp"
#include "mpsn/kernels.hpp"

namespace mpsn::kernels {

void validate(const ConvShape& s) {
  if (s.groups == 0 || s.in_channels % s.groups != 0 || s.out_channels % s.groups != 0) {
    throw ContractError("conv: groups must divide in/out channels");
  }
  if (s.kernel == 0 || s.stride == 0 || s.in_h + 2 * s.pad < s.kernel ||
      s.in_w + 2 * s.pad < s.kernel) {
    throw ContractError("conv: kernel does not fit padded input");
  }
}

namespace reference {

void conv2d_forward(const ConvShape& s, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  const std::size_t icg = s.in_per_group(), ocg = s.out_per_group();
  for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
    const std::size_t g = oc / ocg;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[oc];
        for (std::size_t i = 0; i < icg; ++i) {
          const std::size_t ic = g * icg + i;
          for (std::size_t ky = 0; ky < s.kernel; ++ky) {
            const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
            if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
            for (std::size_t kx = 0; kx < s.kernel; ++kx) {
              const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
              if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
              acc += weight[((oc * icg + i) * s.kernel + ky) * s.kernel + kx] *
                     input[(ic * s.in_h + iy) * s.in_w + ix];
            }
          }
        }
        output[(oc * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

void conv2d_backward_input(const ConvShape& s, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  const std::size_t icg = s.in_per_group(), ocg = s.out_per_group();
  for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
    const std::size_t g = oc / ocg;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double go = grad_output[(oc * oh + oy) * ow + ox];
        for (std::size_t i = 0; i < icg; ++i) {
          const std::size_t ic = g * icg + i;
          for (std::size_t ky = 0; ky < s.kernel; ++ky) {
            const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
            if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
            for (std::size_t kx = 0; kx < s.kernel; ++kx) {
              const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
              if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
              grad_input[(ic * s.in_h + iy) * s.in_w + ix] +=
                  go * weight[((oc * icg + i) * s.kernel + ky) * s.kernel + kx];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_params(const ConvShape& s, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  const std::size_t icg = s.in_per_group(), ocg = s.out_per_group();
  for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
    const std::size_t g = oc / ocg;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double go = grad_output[(oc * oh + oy) * ow + ox];
        if (!grad_bias.empty()) grad_bias[oc] += go;
        for (std::size_t i = 0; i < icg; ++i) {
          const std::size_t ic = g * icg + i;
          for (std::size_t ky = 0; ky < s.kernel; ++ky) {
            const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.pad);
            if (iy < 0 || iy >= static_cast<long>(s.in_h)) continue;
            for (std::size_t kx = 0; kx < s.kernel; ++kx) {
              const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.pad);
              if (ix < 0 || ix >= static_cast<long>(s.in_w)) continue;
              grad_weight[((oc * icg + i) * s.kernel + ky) * s.kernel + kx] +=
                  go * input[(ic * s.in_h + iy) * s.in_w + ix];
            }
          }
        }
      }
    }
  }
}

void maxpool_forward(const PoolShape& s, std::span<const double> input, std::span<double> output,
                     std::span<std::size_t> argmax) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  for (std::size_t c = 0; c < s.channels; ++c) {
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
  for (std::size_t o = 0; o < s.output_size(); ++o) grad_input[argmax[o]] += grad_output[o];
}

}  // namespace reference
}  // namespace mpsn::kernels
