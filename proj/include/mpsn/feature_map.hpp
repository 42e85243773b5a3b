#pragma once

#include <cstddef>

#include "mpsn/tensor.hpp"

namespace mpsn {

/// C x H' x W' feature grid; `stride` is the number of input pixels per cell.
struct FeatureMap {
  Tensor values;
  std::size_t stride = 1;
};

}  // namespace mpsn
