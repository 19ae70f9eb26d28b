#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "icegan/tensor.hpp"

namespace icegan {

class NonFiniteRouting : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// v = (|s|^2 / (1 + |s|^2)) * s / |s| over the last axis; squash(0) = 0.
inline Tensor squash(const Tensor& s) {
  const std::size_t d = s.dim(s.rank() - 1);
  const std::size_t rows = s.numel() / d;
  Buffer out(s.numel());
  std::vector<double> norms(rows);
  const auto x = s.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += x[r * d + i] * x[r * d + i];
    const double n = std::sqrt(sq);
    norms[r] = n;
    const double f = n / (1.0 + sq);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = f * x[r * d + i];
  }
  return make_op(s.shape(), std::move(out), "squash", {s}, [rows, d, norms = std::move(norms)](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    const auto& x = self.inputs[0]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = norms[r];
      if (n == 0.0) continue;
      const double sq = n * n;
      const double f = n / (1.0 + sq);
      const double df = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq));
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += self.grad[r * d + i] * x[r * d + i];
      const double k = df * dot / n;
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += f * self.grad[r * d + i] + k * x[r * d + i];
    }
  });
}

/// Prediction vectors u_hat[b, i, j] = W[i, j] . u[b, i].
/// u [B, Nin, din], W [Nin, Nout, dout, din] -> [B, Nin, Nout, dout].
inline Tensor capsule_predict(const Tensor& u, const Tensor& w) {
  if (u.rank() != 3 || w.rank() != 4 || u.dim(1) != w.dim(0) || u.dim(2) != w.dim(3)) {
    throw ShapeError("capsule_predict: poses " + shape_str(u.shape()) + " incompatible with transforms " +
                     shape_str(w.shape()));
  }
  const std::size_t batch = u.dim(0), nin = u.dim(1), din = u.dim(2);
  const std::size_t nout = w.dim(1), dout = w.dim(2);
  const std::size_t span = nout * dout;
  using Strided = Eigen::Map<detail::RowMatrix, 0, Eigen::OuterStride<>>;
  using ConstStrided = Eigen::Map<const detail::RowMatrix, 0, Eigen::OuterStride<>>;
  Buffer out(batch * nin * span);
  for (std::size_t i = 0; i < nin; ++i) {
    ConstStrided ui(u.data().data() + i * din, batch, din, Eigen::OuterStride<>(nin * din));
    detail::ConstMatMap wi(w.data().data() + i * span * din, span, din);
    Strided(out.data() + i * span, batch, span, Eigen::OuterStride<>(nin * span)).noalias() = ui * wi.transpose();
  }
  return make_op({batch, nin, nout, dout}, std::move(out), "capsule_predict", {u, w}, [=](detail::Node& self) {
    const bool gu = detail::wants_grad(self, 0);
    const bool gw = detail::wants_grad(self, 1);
    double* gup = gu ? detail::input_grad(self, 0).data() : nullptr;
    double* gwp = gw ? detail::input_grad(self, 1).data() : nullptr;
    const double* uv = self.inputs[0]->value.data();
    const double* wv = self.inputs[1]->value.data();
    for (std::size_t i = 0; i < nin; ++i) {
      ConstStrided g(self.grad.data() + i * span, batch, span, Eigen::OuterStride<>(nin * span));
      if (gu) {
        Strided(gup + i * din, batch, din, Eigen::OuterStride<>(nin * din)).noalias() +=
            g * detail::ConstMatMap(wv + i * span * din, span, din);
      }
      if (gw) {
        detail::MatMap(gwp + i * span * din, span, din).noalias() +=
            g.transpose() * ConstStrided(uv + i * din, batch, din, Eigen::OuterStride<>(nin * din));
      }
    }
  });
}

/// s_j = sum_i c_ij u_hat_ij with fixed couplings c [B * Nin * Nout];
/// differentiable in u_hat only. This is the tape rule of dynamic_route.
inline Tensor route_with_couplings(const Tensor& u_hat, std::vector<double> coupling) {
  if (u_hat.rank() != 4) throw ShapeError("route_with_couplings expects [B, Nin, Nout, d], got " + shape_str(u_hat.shape()));
  const std::size_t batch = u_hat.dim(0), nin = u_hat.dim(1), nout = u_hat.dim(2), d = u_hat.dim(3);
  if (coupling.size() != batch * nin * nout) throw ShapeError("route_with_couplings: coupling count mismatch");
  const auto uh = u_hat.data();
  Buffer s(batch * nout * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < nin; ++i)
      for (std::size_t j = 0; j < nout; ++j) {
        const double c = coupling[(b * nin + i) * nout + j];
        const double* p = uh.data() + ((b * nin + i) * nout + j) * d;
        double* sj = s.data() + (b * nout + j) * d;
        for (std::size_t k = 0; k < d; ++k) sj[k] += c * p[k];
      }
  return make_op({batch, nout, d}, std::move(s), "route", {u_hat}, [=, coupling = std::move(coupling)](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < nin; ++i)
        for (std::size_t j = 0; j < nout; ++j) {
          const double c = coupling[(b * nin + i) * nout + j];
          double* gp = g.data() + ((b * nin + i) * nout + j) * d;
          const double* gs = self.grad.data() + (b * nout + j) * d;
          for (std::size_t k = 0; k < d; ++k) gp[k] += c * gs[k];
        }
  });
}

/// Coupling coefficients observed while routing; couplings[t] is
/// [B * Nin * Nout] for iteration t.
struct RoutingTrace {
  std::size_t batch = 0, lower = 0, upper = 0;
  std::vector<std::vector<double>> couplings;
};

/// Routing by agreement over u_hat [B, Nin, Nout, dout]. Returns the
/// pre-squash upper capsule inputs s [B, Nout, dout] built with the final
/// coupling. Logits and couplings are constants on the tape: the gradient
/// of s with respect to u_hat is c_ij.
inline Tensor dynamic_route(const Tensor& u_hat, std::size_t iterations, RoutingTrace* trace = nullptr) {
  if (iterations < 1) throw std::invalid_argument("dynamic_route needs at least one iteration");
  if (u_hat.rank() != 4) throw ShapeError("dynamic_route expects [B, Nin, Nout, d], got " + shape_str(u_hat.shape()));
  const std::size_t batch = u_hat.dim(0), nin = u_hat.dim(1), nout = u_hat.dim(2), d = u_hat.dim(3);
  const auto uh = u_hat.data();
  std::vector<double> logits(batch * nin * nout, 0.0);
  std::vector<double> coupling(batch * nin * nout);
  Buffer s(batch * nout * d);
  Buffer v(batch * nout * d);
  if (trace) {
    *trace = RoutingTrace{batch, nin, nout, {}};
  }
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < nin; ++i) {
        const double* bl = logits.data() + (b * nin + i) * nout;
        double* cl = coupling.data() + (b * nin + i) * nout;
        double mx = bl[0];
        for (std::size_t j = 1; j < nout; ++j) mx = std::max(mx, bl[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < nout; ++j) z += (cl[j] = std::exp(bl[j] - mx));
        for (std::size_t j = 0; j < nout; ++j) cl[j] /= z;
      }
    }
    if (trace) trace->couplings.push_back(coupling);
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < nin; ++i)
        for (std::size_t j = 0; j < nout; ++j) {
          const double c = coupling[(b * nin + i) * nout + j];
          const double* p = uh.data() + ((b * nin + i) * nout + j) * d;
          double* sj = s.data() + (b * nout + j) * d;
          for (std::size_t k = 0; k < d; ++k) sj[k] += c * p[k];
        }
    if (it + 1 == iterations) break;
    for (std::size_t r = 0; r < batch * nout; ++r) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) sq += s[r * d + k] * s[r * d + k];
      const double f = std::sqrt(sq) / (1.0 + sq);
      for (std::size_t k = 0; k < d; ++k) v[r * d + k] = f * s[r * d + k];
    }
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < nin; ++i)
        for (std::size_t j = 0; j < nout; ++j) {
          const double* p = uh.data() + ((b * nin + i) * nout + j) * d;
          const double* vj = v.data() + (b * nout + j) * d;
          double agree = 0.0;
          for (std::size_t k = 0; k < d; ++k) agree += p[k] * vj[k];
          double& l = logits[(b * nin + i) * nout + j];
          l += agree;
          if (!std::isfinite(l)) {
            throw NonFiniteRouting("routing logit became non-finite at iteration " + std::to_string(it + 1) +
                                     " (sample " + std::to_string(b) + ", lower " + std::to_string(i) + ", upper " +
                                     std::to_string(j) + ")");
          }
        }
  }
  return route_with_couplings(u_hat, coupling);
}

}  // namespace icegan
