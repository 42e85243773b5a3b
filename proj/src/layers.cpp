#include "mpsn/layers.hpp"

#include <cmath>

namespace mpsn {

Conv2d::Conv2d(const std::string& name, std::size_t in_channels, std::size_t out_channels,
               std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng,
               std::size_t groups, bool bias)
    : params_{stride, pad, groups}, has_bias_(bias) {
  const std::size_t in_per_group = in_channels / groups;
  weight_.name = name + ".weight";
  weight_.value = Tensor({out_channels, in_per_group, kernel, kernel});
  // He-normal, fan-in.
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_per_group * kernel * kernel));
  std::normal_distribution<double> dist(0.0, std_dev);
  for (double& w : weight_.value.values()) w = dist(rng);
  if (has_bias_) {
    bias_.name = name + ".bias";
    bias_.value = Tensor({out_channels}, 0.0);
  }
}

Var Conv2d::forward(Graph& g, Var x) {
  const Var w = g.parameter(weight_);
  if (!has_bias_) return ops::conv2d(g, x, w, params_);
  return ops::conv2d(g, x, w, g.parameter(bias_), params_);
}

void Conv2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

Norm::Norm(const std::string& name, std::size_t channels, ops::NormKind kind) : name_(name) {
  gamma_.name = name + ".gamma";
  gamma_.value = Tensor({channels}, 1.0);
  beta_.name = name + ".beta";
  beta_.value = Tensor({channels}, 0.0);
  state_.kind = kind;
  state_.running_mean = Tensor({channels}, 0.0);
  state_.running_var = Tensor({channels}, 1.0);
}

Var Norm::forward(Graph& g, Var x) {
  return ops::normalize(g, x, g.parameter(gamma_), g.parameter(beta_), state_);
}

void Norm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void Norm::collect_buffers(std::vector<BufferRef>& out) {
  out.emplace_back(name_ + ".running_mean", &state_.running_mean);
  out.emplace_back(name_ + ".running_var", &state_.running_var);
}

Var Activation::forward(Graph& g, Var x) {
  return kind_ == Kind::relu ? ops::relu(g, x) : ops::relu6(g, x);
}

Var MaxPool::forward(Graph& g, Var x) { return ops::max_pool(g, x, kernel_, stride_, pad_); }

Var Sequential::forward(Graph& g, Var x) {
  for (auto& layer : layers_) x = layer->forward(g, x);
  return x;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect_parameters(out);
}

void Sequential::collect_buffers(std::vector<BufferRef>& out) {
  for (auto& layer : layers_) layer->collect_buffers(out);
}

std::size_t Sequential::stride() const {
  std::size_t s = 1;
  for (const auto& layer : layers_) s *= layer->stride();
  return s;
}

BasicBlock::BasicBlock(const std::string& name, std::size_t in_channels,
                       std::size_t out_channels, std::size_t stride, ops::NormKind norm,
                       Rng& rng, bool final_activation)
    : body_(name), stride_(stride), final_activation_(final_activation) {
  body_.emplace<Conv2d>(name + ".conv_a", in_channels, out_channels, 3, stride, 1, rng, 1, false);
  body_.emplace<Norm>(name + ".norm_a", out_channels, norm);
  body_.emplace<Activation>();
  body_.emplace<Conv2d>(name + ".conv_b", out_channels, out_channels, 3, 1, 1, rng, 1, false);
  body_.emplace<Norm>(name + ".norm_b", out_channels, norm);
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = std::make_unique<Sequential>(name + ".shortcut");
    shortcut_->emplace<Conv2d>(name + ".shortcut.conv", in_channels, out_channels, 1, stride, 0,
                               rng, 1, false);
    shortcut_->emplace<Norm>(name + ".shortcut.norm", out_channels, norm);
  }
}

Var BasicBlock::forward(Graph& g, Var x) {
  const Var branch = body_.forward(g, x);
  const Var skip = shortcut_ ? shortcut_->forward(g, x) : x;
  const Var sum = ops::add(g, branch, skip);
  return final_activation_ ? ops::relu(g, sum) : sum;
}

void BasicBlock::collect_parameters(std::vector<Parameter*>& out) {
  body_.collect_parameters(out);
  if (shortcut_) shortcut_->collect_parameters(out);
}

void BasicBlock::collect_buffers(std::vector<BufferRef>& out) {
  body_.collect_buffers(out);
  if (shortcut_) shortcut_->collect_buffers(out);
}

InvertedResidual::InvertedResidual(const std::string& name, std::size_t in_channels,
                                   std::size_t out_channels, std::size_t stride,
                                   std::size_t expansion, ops::NormKind norm, Rng& rng)
    : body_(name), stride_(stride), residual_(stride == 1 && in_channels == out_channels) {
  const std::size_t hidden = in_channels * expansion;
  if (expansion != 1) {
    body_.emplace<Conv2d>(name + ".expand", in_channels, hidden, 1, 1, 0, rng, 1, false);
    body_.emplace<Norm>(name + ".expand_norm", hidden, norm);
    body_.emplace<Activation>(Activation::Kind::relu6);
  }
  body_.emplace<Conv2d>(name + ".depthwise", hidden, hidden, 3, stride, 1, rng, hidden, false);
  body_.emplace<Norm>(name + ".depthwise_norm", hidden, norm);
  body_.emplace<Activation>(Activation::Kind::relu6);
  body_.emplace<Conv2d>(name + ".project", hidden, out_channels, 1, 1, 0, rng, 1, false);
  body_.emplace<Norm>(name + ".project_norm", out_channels, norm);
}

Var InvertedResidual::forward(Graph& g, Var x) {
  const Var y = body_.forward(g, x);
  return residual_ ? ops::add(g, y, x) : y;
}

void InvertedResidual::collect_parameters(std::vector<Parameter*>& out) {
  body_.collect_parameters(out);
}

void InvertedResidual::collect_buffers(std::vector<BufferRef>& out) {
  body_.collect_buffers(out);
}

}  // namespace mpsn
