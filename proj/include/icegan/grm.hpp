#pragma once

// Graph reasoning over channel graphs.
//
// Per encoder level: a stride-2 convolution forms supernodes, a scaled
// self-attention product over channels gives the similarity map M, a GCN
// with learnable adjacency updates it, and the result is projected back to
// the feature map and added residually.

#include <algorithm>
#include <cmath>
#include <string>

#include "icegan/conv.hpp"
#include "icegan/nn.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

/// f_hat [B, C, Ns] with Ns = (H/2)(W/2), plus the source geometry.
struct SupernodeFeatures {
  Tensor features;
  std::size_t channels = 0, height = 0, width = 0;

  std::size_t supernodes() const { return features.dim(2); }
};

enum class InverseProjection {
  project_deconv,     // reshape(M_hat . f_hat) then a k4/s2 transposed conv
  channel_attention,  // M_hat mixes the channels of f directly
};

struct GrmOptions {
  InverseProjection inverse = InverseProjection::project_deconv;
  // Divide M by sqrt(Ns).
  bool scale_attention = true;
  double adjacency_init_std = 0.01;
  // Average M_hat . f_hat over channels instead of summing; keeps the
  // branch O(|f|) at wide levels.
  bool mean_projection = true;
  // Start T^-1 at zero so the block begins as a plain skip connection.
  bool zero_init_inverse = true;
};

inline ConvSpec supernode_spec(std::size_t channels) { return {channels, channels, 3, 2, 1}; }
inline ConvSpec inverse_spec(std::size_t channels) { return {channels, channels, 4, 2, 1}; }

inline SupernodeFeatures supernode_transform(const Tensor& f, const Tensor& weight, const Tensor& bias) {
  if (f.rank() != 4) throw ShapeError("supernode_transform expects [B, C, H, W], got " + shape_str(f.shape()));
  const std::size_t c = f.dim(1), h = f.dim(2), w = f.dim(3);
  if (h < 2 || w < 2 || h % 2 || w % 2) {
    throw ShapeError("supernode_transform needs even spatial extents >= 2, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor y = conv2d(f, weight, bias, supernode_spec(c));
  return {reshape(y, {f.dim(0), c, (h / 2) * (w / 2)}), c, h, w};
}

/// M = phi(f_hat) . theta(f_hat)^T, optionally / sqrt(Ns). phi and theta are
/// [C, C] maps applied on the left. Result [B, C, C].
inline Tensor similarity_map(const SupernodeFeatures& fhat, const Tensor& phi, const Tensor& theta, bool scale = true) {
  Tensor m = matmul(matmul(phi, fhat.features), transpose(matmul(theta, fhat.features)));
  if (scale) m = icegan::scale(m, 1.0 / std::sqrt(static_cast<double>(fhat.supernodes())));
  return m;
}

/// M_hat = ReLU((A + I) . M . W).
inline Tensor gcn_update(const Tensor& m, const Tensor& adjacency, const Tensor& weight) {
  const std::size_t c = adjacency.dim(0);
  if (adjacency.shape() != Shape{c, c} || weight.shape() != Shape{c, c} || m.dim(m.rank() - 1) != c) {
    throw ShapeError("gcn_update: M " + shape_str(m.shape()) + ", A " + shape_str(adjacency.shape()) + ", W " +
                     shape_str(weight.shape()));
  }
  return relu(matmul(matmul(add(adjacency, identity_matrix(c)), m), weight));
}

/// g = f + T^-1(M_hat).
inline Tensor inverse_project_and_fuse(const Tensor& mhat, const SupernodeFeatures& fhat, const Tensor& f,
                                       const Tensor& deconv_weight, const Tensor& deconv_bias,
                                       InverseProjection mode = InverseProjection::project_deconv,
                                       bool mean_projection = false) {
  const std::size_t batch = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  if (fhat.channels != c || fhat.height != h || fhat.width != w) {
    throw ShapeError("inverse_project_and_fuse: supernodes come from " + std::to_string(fhat.channels) + "x" +
                     std::to_string(fhat.height) + "x" + std::to_string(fhat.width) + ", feature map is " +
                     shape_str(f.shape()));
  }
  Tensor back;
  if (mode == InverseProjection::project_deconv) {
    Tensor agg = matmul(mhat, fhat.features);
    if (mean_projection) agg = scale(agg, 1.0 / static_cast<double>(c));
    Tensor projected = reshape(agg, {batch, c, h / 2, w / 2});
    back = deconv2d(projected, deconv_weight, deconv_bias, inverse_spec(c));
  } else {
    back = reshape(scale(matmul(mhat, reshape(f, {batch, c, h * w})), 1.0 / static_cast<double>(c)), f.shape());
  }
  if (back.shape() != f.shape()) {
    throw ShapeError("inverse projection produced " + shape_str(back.shape()) + " for feature map " + shape_str(f.shape()));
  }
  return add(f, back);
}

/// Captured channel graphs of the last forward pass; filled when requested.
struct GrmTrace {
  Tensor similarity;
  Tensor updated;
};

/// Learnable state of one graph reasoning block.
struct GraphReasoning {
  std::size_t channels = 0;
  GrmOptions options;
  Tensor transform_weight, transform_bias;
  Tensor phi, theta;
  Tensor adjacency, weight;
  Tensor inverse_weight, inverse_bias;

  GraphReasoning() = default;
  GraphReasoning(ParamRegistry& reg, const std::string& name, std::size_t c, Rng& rng, GrmOptions opts = {})
      : channels(c), options(opts) {
    Conv2d transform(reg, name + ".transform", supernode_spec(c), rng);
    transform_weight = transform.weight;
    transform_bias = transform.bias;
    phi = reg.add(name + ".phi", identity_matrix(c));
    theta = reg.add(name + ".theta", identity_matrix(c));
    adjacency = reg.add(name + ".adjacency", normal_tensor({c, c}, opts.adjacency_init_std, rng));
    weight = reg.add(name + ".weight", identity_matrix(c));
    Deconv2d inverse(reg, name + ".inverse", inverse_spec(c), rng);
    inverse_weight = inverse.weight;
    inverse_bias = inverse.bias;
    if (opts.zero_init_inverse) {
      for (auto& v : inverse_weight.mutable_data()) v = 0.0;
      for (auto& v : inverse_bias.mutable_data()) v = 0.0;
    }
  }

  Tensor operator()(const Tensor& f, GrmTrace* trace = nullptr) const {
    SupernodeFeatures fhat = supernode_transform(f, transform_weight, transform_bias);
    Tensor m = similarity_map(fhat, phi, theta, options.scale_attention);
    Tensor mhat = gcn_update(m, adjacency, weight);
    if (trace) *trace = {m.detach(), mhat.detach()};
    return inverse_project_and_fuse(mhat, fhat, f, inverse_weight, inverse_bias, options.inverse, options.mean_projection);
  }
};

/// Squeeze-and-excitation channel gate: f * sigmoid(MLP(avgpool(f))).
struct SqueezeExcite {
  Linear reduce, expand;

  SqueezeExcite() = default;
  SqueezeExcite(ParamRegistry& reg, const std::string& name, std::size_t c, Rng& rng) {
    const std::size_t hidden = std::max<std::size_t>(4, c / 16);
    reduce = Linear(reg, name + ".reduce", c, hidden, rng);
    expand = Linear(reg, name + ".expand", hidden, c, rng);
  }

  Tensor operator()(const Tensor& f) const {
    Tensor gate = sigmoid(expand(relu(reduce(global_avg_pool(f)))));
    return mul(f, reshape(gate, {f.dim(0), f.dim(1), 1, 1}));
  }
};

}  // namespace icegan
