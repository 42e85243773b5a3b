#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mpsn/autograd.hpp"

namespace mpsn {

using Rng = std::mt19937_64;

/// Named non-trainable state (normalization running statistics).
using BufferRef = std::pair<std::string, Tensor*>;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var forward(Graph& g, Var x) = 0;
  virtual void collect_parameters(std::vector<Parameter*>& out) = 0;
  virtual void collect_buffers(std::vector<BufferRef>&) {}
  /// Spatial downsampling factor of this layer.
  virtual std::size_t stride() const { return 1; }
};

class Conv2d : public Layer {
 public:
  Conv2d(const std::string& name, std::size_t in_channels, std::size_t out_channels,
         std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng,
         std::size_t groups = 1, bool bias = true);

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  std::size_t stride() const override { return params_.stride; }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
  ops::ConvParams params_;
  bool has_bias_;
};

class Norm : public Layer {
 public:
  Norm(const std::string& name, std::size_t channels, ops::NormKind kind);

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<BufferRef>& out) override;

 private:
  Parameter gamma_;
  Parameter beta_;
  ops::NormState state_;
  std::string name_;
};

class Activation : public Layer {
 public:
  enum class Kind { relu, relu6 };
  explicit Activation(Kind kind = Kind::relu) : kind_(kind) {}

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>&) override {}

 private:
  Kind kind_;
};

class MaxPool : public Layer {
 public:
  MaxPool(std::size_t kernel, std::size_t stride, std::size_t pad = 0)
      : kernel_(kernel), stride_(stride), pad_(pad) {}

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>&) override {}
  std::size_t stride() const override { return stride_; }

 private:
  std::size_t kernel_, stride_, pad_;
};

/// Ordered chain of layers; also used as a named backbone stage.
class Sequential : public Layer {
 public:
  explicit Sequential(std::string name = {}) : name_(std::move(name)) {}

  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<BufferRef>& out) override;
  std::size_t stride() const override;

  const std::string& name() const { return name_; }
  std::size_t layer_count() const { return layers_.size(); }

 private:
  std::string name_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// ResNet basic block: two 3x3 convolutions with a projected shortcut when
/// the shape changes. `final_activation=false` leaves the sum un-activated.
class BasicBlock : public Layer {
 public:
  BasicBlock(const std::string& name, std::size_t in_channels, std::size_t out_channels,
             std::size_t stride, ops::NormKind norm, Rng& rng, bool final_activation = true);

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<BufferRef>& out) override;
  std::size_t stride() const override { return stride_; }

 private:
  Sequential body_;
  std::unique_ptr<Sequential> shortcut_;
  std::size_t stride_;
  bool final_activation_;
};

/// MobileNetV2 inverted residual: 1x1 expand, 3x3 depthwise, linear 1x1 projection.
class InvertedResidual : public Layer {
 public:
  InvertedResidual(const std::string& name, std::size_t in_channels, std::size_t out_channels,
                   std::size_t stride, std::size_t expansion, ops::NormKind norm, Rng& rng);

  Var forward(Graph& g, Var x) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<BufferRef>& out) override;
  std::size_t stride() const override { return stride_; }

 private:
  Sequential body_;
  std::size_t stride_;
  bool residual_;
};

}  // namespace mpsn
