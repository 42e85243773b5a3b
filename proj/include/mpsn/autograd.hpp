#pragma once

// Tape-based reverse-mode differentiation over Tensors.
//
// A Graph records every op applied during a forward pass; backward() walks
// the tape in reverse and accumulates gradients. Parameters are referenced,
// not copied, and their gradients accumulate into Parameter::grad until the
// optimizer clears them.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mpsn/kernels.hpp"
#include "mpsn/tensor.hpp"

namespace mpsn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;

  void zero_grad();
};

struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  /// `training` selects batch statistics in normalization layers.
  /// `parameter_grads=false` treats parameters as constants (used by attacks).
  explicit Graph(bool training = false, bool parameter_grads = true)
      : training_(training), parameter_grads_(parameter_grads) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }

  Var constant(Tensor value);
  /// Leaf whose gradient is kept and readable after backward().
  Var input(Tensor value);
  Var parameter(Parameter& p);

  /// Appends an op result. The node requires grad when any parent does.
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient reached during backward(); an empty tensor if none arrived.
  const Tensor& grad(Var v) const;
  /// Zero-initialized on first use.
  Tensor& grad_buffer(Var v);

  /// Seeds d(root)/d(root) = 1. `root` must hold exactly one element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  bool training_;
  bool parameter_grads_;
};

namespace ops {

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
Var sigmoid(Graph& g, Var a);
Var relu(Graph& g, Var a);
Var relu6(Graph& g, Var a);
/// Subgradient 0 at the kink.
Var abs(Graph& g, Var a);

struct ConvParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

Var conv2d(Graph& g, Var x, Var weight, Var bias, const ConvParams& p);
Var conv2d(Graph& g, Var x, Var weight, const ConvParams& p);
Var max_pool(Graph& g, Var x, std::size_t kernel, std::size_t stride, std::size_t pad);

/// Zero-pads a CHW tensor on the bottom and right edges.
Var pad_bottom_right(Graph& g, Var x, std::size_t height, std::size_t width);

enum class NormKind { batch, instance };

struct NormState {
  NormKind kind = NormKind::batch;
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor running_mean;
  Tensor running_var;
};

/// Per-channel normalization over the spatial dims followed by an affine map.
/// Batch norm uses sample statistics while training (and updates the running
/// estimates) and the running estimates otherwise; instance norm always uses
/// sample statistics.
Var normalize(Graph& g, Var x, Var gamma, Var beta, NormState& state);

}  // namespace ops

}  // namespace mpsn
