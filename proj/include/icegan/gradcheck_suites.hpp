#pragma once

// Registered finite-difference suites covering every differentiable layer
// and loss. Kinked ops are evaluated at points kept at least 1e-2 away from
// their kinks.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "icegan/capsule_ops.hpp"
#include "icegan/conv.hpp"
#include "icegan/discriminator.hpp"
#include "icegan/generator.hpp"
#include "icegan/gradcheck.hpp"
#include "icegan/grm.hpp"
#include "icegan/losses.hpp"
#include "icegan/nn.hpp"

namespace icegan {

struct SuiteResult {
  std::string name;
  GradcheckReport report;
  double seconds = 0.0;
};

struct GradcheckSuite {
  std::string name;
  std::function<GradcheckReport(bool inject_bug)> run;
};

namespace suites {

/// Identity on the forward pass whose backward scales the gradient by 1.5;
/// the negative control for the checker.
inline Tensor faulty_identity(const Tensor& x) {
  Buffer v(x.data().begin(), x.data().end());
  return make_op(x.shape(), std::move(v), "faulty_identity", {x}, [](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.5 * self.grad[i];
  });
}

/// Values drawn uniformly from +-[lo, hi] so kinks at 0 are avoided.
inline Tensor away_from_zero(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

/// Random fixed weights for projecting a tensor to a scalar, so the
/// upstream gradient is not uniform.
inline Tensor probe_like(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return uniform_tensor(t.shape(), -1.0, 1.0, rng);
}

inline Tensor probe_sum(const Tensor& t, const Tensor& probe) { return sum(mul(t, probe)); }

inline GradcheckReport check(std::function<Tensor()> f, std::vector<Tensor> inputs, std::vector<std::string> names,
                             bool inject, GradcheckOptions opts = {}) {
  auto fn = [f = std::move(f), inject](const std::vector<Tensor>&) {
    Tensor out = f();
    return inject ? faulty_identity(out) : out;
  };
  return gradcheck(fn, std::move(inputs), opts, std::move(names));
}

inline void append(GradcheckReport& into, const GradcheckReport& from, const std::string& prefix) {
  into.tolerance = from.tolerance;
  for (auto e : from.entries) {
    e.name = prefix + e.name;
    into.entries.push_back(std::move(e));
  }
}

inline std::vector<std::string> registry_names(const ParamRegistry& reg) {
  std::vector<std::string> n;
  for (const auto& e : reg.entries()) n.push_back(e.name);
  return n;
}
inline std::vector<Tensor> registry_tensors(const ParamRegistry& reg) {
  std::vector<Tensor> t;
  for (const auto& e : reg.entries()) t.push_back(e.value);
  return t;
}

inline GradcheckReport elementwise_suite(bool inject) {
  Rng rng(11);
  GradcheckReport r;
  Tensor a = away_from_zero({3, 4}, 0.05, 1.5, rng);
  Tensor b = away_from_zero({3, 4}, 0.05, 1.5, rng);
  Tensor row = away_from_zero({4}, 0.05, 1.5, rng);
  Tensor pos = uniform_tensor({3, 4}, 0.2, 2.0, rng);
  const Tensor probe = probe_like(a, 3);
  auto unary = [&](const std::string& name, std::function<Tensor(const Tensor&)> op, Tensor x) {
    append(r, check([=] { return probe_sum(op(x), probe); }, {x}, {"x"}, inject), name + ".");
  };
  unary("relu", [](const Tensor& x) { return relu(x); }, a);
  unary("leaky_relu", [](const Tensor& x) { return leaky_relu(x, 0.2); }, a);
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, a);
  unary("tanh", [](const Tensor& x) { return tanh(x); }, a);
  unary("square", [](const Tensor& x) { return square(x); }, a);
  unary("abs", [](const Tensor& x) { return abs(x); }, a);
  unary("log", [](const Tensor& x) { return log(x); }, pos);
  unary("exp", [](const Tensor& x) { return exp(x); }, a);
  unary("clamp", [](const Tensor& x) { return clamp(x, -0.6, 0.7); }, away_from_zero({3, 4}, 0.0, 0.55, rng));
  unary("scale", [](const Tensor& x) { return add_scalar(scale(x, -2.5), 0.3); }, a);
  append(r, check([=] { return probe_sum(add(a, b), probe); }, {a, b}, {"a", "b"}, inject), "add.");
  append(r, check([=] { return probe_sum(sub(a, b), probe); }, {a, b}, {"a", "b"}, inject), "sub.");
  append(r, check([=] { return probe_sum(mul(a, b), probe); }, {a, b}, {"a", "b"}, inject), "mul.");
  append(r, check([=] { return probe_sum(mul(a, row), probe); }, {a, row}, {"a", "row"}, inject), "mul_broadcast.");
  return r;
}

inline GradcheckReport tensor_ops_suite(bool inject) {
  Rng rng(12);
  GradcheckReport r;
  Tensor a = normal_tensor({5, 4}, 1.0, rng), b = normal_tensor({4, 3}, 1.0, rng);
  Tensor probe = probe_like(Tensor::zeros({5, 3}), 5);
  append(r, check([=] { return probe_sum(matmul(a, b), probe); }, {a, b}, {"a", "b"}, inject), "matmul.");
  Tensor ba = normal_tensor({2, 3, 4}, 1.0, rng), bb = normal_tensor({4, 2}, 1.0, rng);
  Tensor bprobe = probe_like(Tensor::zeros({2, 3, 2}), 6);
  append(r, check([=] { return probe_sum(matmul(ba, bb), bprobe); }, {ba, bb}, {"a", "b"}, inject), "matmul_batched.");
  Tensor x = normal_tensor({2, 3, 4}, 1.0, rng);
  Tensor y = normal_tensor({2, 2, 4}, 1.0, rng);
  append(r, check([=] { return probe_sum(transpose(x), probe_like(transpose(x), 7)); }, {x}, {"x"}, inject), "transpose.");
  append(r, check([=] { return probe_sum(sum_axis(x, 1), probe_like(sum_axis(x, 1), 8)); }, {x}, {"x"}, inject), "sum_axis.");
  append(r, check([=] { return probe_sum(mean_axis(x, 2), probe_like(mean_axis(x, 2), 9)); }, {x}, {"x"}, inject), "mean_axis.");
  append(r, check([=] { return probe_sum(concat({x, y}, 1), probe_like(concat({x, y}, 1), 10)); }, {x, y}, {"x", "y"}, inject), "concat.");
  append(r, check([=] { return probe_sum(slice(x, 2, 1, 3), probe_like(slice(x, 2, 1, 3), 11)); }, {x}, {"x"}, inject), "slice.");
  append(r, check([=] { return probe_sum(reshape(x, {6, 4}), probe_like(reshape(x, {6, 4}), 12)); }, {x}, {"x"}, inject), "reshape.");
  append(r, check([=] { return probe_sum(softmax(x), probe_like(x, 13)); }, {x}, {"x"}, inject), "softmax.");
  append(r, check([=] { return probe_sum(log_softmax(x), probe_like(x, 14)); }, {x}, {"x"}, inject), "log_softmax.");
  append(r, check([=] { return probe_sum(vector_norm(x), probe_like(vector_norm(x), 15)); }, {x}, {"x"}, inject), "vector_norm.");
  append(r, check([=] { return mean(square(x)); }, {x}, {"x"}, inject), "mean.");
  return r;
}

inline GradcheckReport conv_suite(bool inject) {
  Rng rng(13);
  GradcheckReport r;
  const ConvSpec spec{2, 3, 3, 2, 1};
  Tensor x = normal_tensor({2, 2, 6, 6}, 1.0, rng), w = normal_tensor({3, 2, 3, 3}, 0.5, rng), bias = normal_tensor({3}, 0.5, rng);
  Tensor probe = probe_like(conv2d(x, w, bias, spec), 21);
  append(r, check([=] { return probe_sum(conv2d(x, w, bias, spec), probe); }, {x, w, bias}, {"x", "weight", "bias"}, inject),
         "conv2d.");
  const ConvSpec k4{2, 3, 4, 2, 1};
  Tensor w4 = normal_tensor({3, 2, 4, 4}, 0.5, rng);
  Tensor probe4 = probe_like(conv2d(x, w4, bias, k4), 22);
  append(r, check([=] { return probe_sum(conv2d(x, w4, bias, k4), probe4); }, {x, w4, bias}, {"x", "weight", "bias"}, inject),
         "conv2d_k4s2.");
  // conv -> relu -> sum chain
  Tensor xc = normal_tensor({1, 2, 5, 5}, 1.0, rng), wc = normal_tensor({2, 2, 3, 3}, 0.5, rng);
  append(r, check([=] { return sum(relu(conv2d(xc, wc, Tensor(), {2, 2, 3, 1, 1}))); }, {xc, wc}, {"x", "weight"}, inject),
         "conv_relu_sum.");
  return r;
}

inline GradcheckReport deconv_suite(bool inject) {
  Rng rng(14);
  GradcheckReport r;
  const ConvSpec spec{2, 3, 4, 2, 1};
  Tensor x = normal_tensor({2, 2, 3, 3}, 1.0, rng), w = normal_tensor({2, 3, 4, 4}, 0.5, rng), bias = normal_tensor({3}, 0.5, rng);
  Tensor probe = probe_like(deconv2d(x, w, bias, spec), 23);
  append(r, check([=] { return probe_sum(deconv2d(x, w, bias, spec), probe); }, {x, w, bias}, {"x", "weight", "bias"}, inject),
         "deconv2d.");
  const ConvSpec s1{2, 2, 3, 1, 0};
  Tensor w1 = normal_tensor({2, 2, 3, 3}, 0.5, rng);
  Tensor probe1 = probe_like(deconv2d(x, w1, Tensor(), s1), 24);
  append(r, check([=] { return probe_sum(deconv2d(x, w1, Tensor(), s1), probe1); }, {x, w1}, {"x", "weight"}, inject),
         "deconv2d_k3s1.");
  return r;
}

inline GradcheckReport linear_suite(bool inject) {
  Rng rng(15);
  GradcheckReport r;
  Tensor x = normal_tensor({3, 5}, 1.0, rng), w = normal_tensor({4, 5}, 0.5, rng), b = normal_tensor({4}, 0.5, rng);
  Tensor probe = probe_like(linear(x, w, b), 25);
  append(r, check([=] { return probe_sum(linear(x, w, b), probe); }, {x, w, b}, {"x", "weight", "bias"}, inject), "linear.");
  Tensor f = normal_tensor({2, 3, 4, 4}, 1.0, rng);
  Tensor pprobe = probe_like(global_avg_pool(f), 26);
  append(r, check([=] { return probe_sum(global_avg_pool(f), pprobe); }, {f}, {"x"}, inject), "global_avg_pool.");
  return r;
}

inline GradcheckReport grm_suite(bool inject) {
  GradcheckReport r;
  for (auto mode : {InverseProjection::project_deconv, InverseProjection::channel_attention}) {
    Rng rng(16);
    ParamRegistry reg;
    GrmOptions opts;
    opts.inverse = mode;
    opts.adjacency_init_std = 0.3;
    GraphReasoning grm(reg, "grm", 3, rng, opts);
    // Move away from the identity initialisation so every parameter matters.
    for (auto& e : reg.entries()) {
      auto v = e.value.mutable_data();
      for (auto& x : v) x += rng.normal(0.0, 0.2);
    }
    Tensor f = normal_tensor({2, 3, 8, 8}, 1.0, rng);
    Tensor probe = probe_like(f, 27);
    auto inputs = registry_tensors(reg);
    auto names = registry_names(reg);
    inputs.insert(inputs.begin(), f);
    names.insert(names.begin(), "f");
    const std::string tag = mode == InverseProjection::project_deconv ? "grm." : "grm_channel_attention.";
    append(r, check([=] { return probe_sum(grm(f), probe); }, inputs, names, inject), tag);
  }
  Rng rng(17);
  ParamRegistry reg;
  SqueezeExcite se(reg, "se", 8, rng);
  Tensor f = normal_tensor({2, 8, 4, 4}, 1.0, rng);
  Tensor probe = probe_like(f, 28);
  auto inputs = registry_tensors(reg);
  auto names = registry_names(reg);
  inputs.insert(inputs.begin(), f);
  names.insert(names.begin(), "f");
  append(r, check([=] { return probe_sum(se(f), probe); }, inputs, names, inject), "se.");
  return r;
}

inline GradcheckReport capsule_suite(bool inject) {
  Rng rng(18);
  GradcheckReport r;
  Tensor s = normal_tensor({4, 5}, 1.0, rng);
  append(r, check([=] { return probe_sum(squash(s), probe_like(s, 29)); }, {s}, {"s"}, inject), "squash.");
  Tensor u = normal_tensor({2, 6, 4}, 0.5, rng), w = normal_tensor({6, 3, 5, 4}, 0.4, rng);
  Tensor pprobe = probe_like(capsule_predict(u, w), 30);
  append(r, check([=] { return probe_sum(capsule_predict(u, w), pprobe); }, {u, w}, {"u", "W"}, inject), "capsule_predict.");
  auto path = [](const Tensor& u_, const Tensor& w_, std::size_t iters) {
    return sum(vector_norm(squash(dynamic_route(capsule_predict(squash(u_), w_), iters))));
  };
  append(r, check([=] { return path(u, w, 1); }, {u, w}, {"u", "W"}, inject), "route_r1.");
  Tensor w1 = normal_tensor({6, 1, 5, 4}, 0.4, rng);
  append(r, check([=] { return path(u, w1, 3); }, {u, w1}, {"u", "W"}, inject), "route_single_upper_r3.");
  // r = 3 with couplings fixed at the base point: the gradient the tape defines.
  RoutingTrace trace;
  {
    NoGradScope ng;
    dynamic_route(capsule_predict(squash(u), w), 3, &trace);
  }
  auto frozen = trace.couplings.back();
  append(r,
         check([=] { return sum(vector_norm(squash(route_with_couplings(capsule_predict(squash(u), w), frozen)))); }, {u, w},
               {"u", "W"}, inject),
         "route_r3_fixed_coupling.");
  return r;
}

inline GradcheckReport encoder_suite(bool inject) {
  Rng rng(19);
  ParamRegistry reg;
  GeneratorConfig cfg = GeneratorConfig{}.thinned(4);
  Generator g(cfg, reg, rng);
  Tensor x = uniform_tensor({1, 1, 128, 128}, -1.0, 1.0, rng);
  Tensor probe_e = probe_like(g.encode(x).embedding, 31);
  GradcheckOptions opts;
  opts.max_coords = 8;
  std::vector<Tensor> inputs{x};
  std::vector<std::string> names{"x_on"};
  for (const auto& e : reg.entries())
    if (e.name.find(".enc") != std::string::npos || e.name.find(".bottleneck") != std::string::npos) {
      inputs.push_back(e.value);
      names.push_back(e.name);
    }
  GradcheckReport r;
  append(r, check([=] { return probe_sum(g.encode(x).embedding, probe_e); }, inputs, names, inject, opts), "encoder/4.");
  return r;
}

inline GradcheckReport generator_suite(bool inject) {
  Rng rng(20);
  ParamRegistry reg;
  GeneratorConfig cfg = GeneratorConfig{}.thinned(4);
  Generator g(cfg, reg, rng);
  // Inverse projections start at zero; give them weight so the GRM path is exercised.
  for (auto& e : reg.entries())
    if (e.name.find(".inverse.") != std::string::npos)
      for (auto& v : e.value.mutable_data()) v = rng.normal(0.0, 0.05);
  PerceptualNet per(7);
  Tensor x_on = uniform_tensor({1, 1, 128, 128}, -0.9, 0.9, rng);
  Tensor x_apex = uniform_tensor({1, 1, 128, 128}, -0.9, 0.9, rng);
  Tensor z = normal_tensor({1, cfg.noise_dim}, 1.0, rng);
  // Keep every L1 residual clear of zero. The head bias moves all pixels at
  // once, so otherwise some residual always crosses its kink and the bias
  // would never be checked.
  {
    NoGradScope ng;
    Tensor syn0 = g.forward(x_on, {1}, z);
    auto target = x_apex.mutable_data();
    for (std::size_t i = 0; i < target.size(); ++i)
      if (std::abs(target[i] - syn0[i]) < 0.05) target[i] = syn0[i] + (target[i] >= syn0[i] ? 0.05 : -0.05);
  }
  auto all_inputs = registry_tensors(reg);
  auto all_names = registry_names(reg);
  // The head shifts the whole image, which touches many perceptual ReLUs at
  // once; a smaller step keeps its probes clear of them. Its gradients are
  // large enough for that step, the deeper ones are not.
  std::vector<Tensor> head, body;
  std::vector<std::string> head_names, body_names;
  for (std::size_t i = 0; i < all_inputs.size(); ++i) {
    const bool is_head = all_names[i].find(".head.") != std::string::npos;
    (is_head ? head : body).push_back(all_inputs[i]);
    (is_head ? head_names : body_names).push_back(all_names[i]);
  }
  auto loss = [=, &per] {
    Tensor syn = g.forward(x_on, {1}, z);
    return add(l_pixel(syn, x_apex), scale(l_perceptual(x_on, syn, per), 0.1));
  };
  GradcheckOptions opts;
  opts.max_coords = 4;
  GradcheckReport r;
  append(r, check(loss, body, body_names, inject, opts), "generator_l_ip/4.");
  opts.step = 1e-6;
  append(r, check(loss, head, head_names, inject, opts), "generator_l_ip/4.");
  return r;
}

inline GradcheckReport discriminator_suite(bool inject) {
  Rng rng(21);
  ParamRegistry reg;
  DiscriminatorConfig cfg = DiscriminatorConfig{}.thinned(8);
  cfg.routing_iterations = 1;
  Discriminator d(cfg, reg, rng);
  Tensor x = uniform_tensor({1, 1, 128, 128}, -1.0, 1.0, rng);
  GradcheckOptions opts;
  opts.max_coords = 6;
  std::vector<Tensor> inputs{x};
  std::vector<std::string> names{"x"};
  for (const auto& e : reg.entries())
    if (e.name.find(".recon") == std::string::npos) {
      inputs.push_back(e.value);
      names.push_back(e.name);
    }
  GradcheckReport r;
  append(r,
         check([=] {
           auto out = d.forward(x);
           return add(scale(sum(out.adv), 0.7), l_margin(out.exp_scores, {2}));
         }, inputs, names, inject, opts),
         "capsule_discriminator/8.");
  return r;
}

inline GradcheckReport loss_suite(bool inject) {
  Rng rng(22);
  GradcheckReport r;
  // L_pixel: keep |a - b| >= 0.05 so no pixel sits on the abs kink.
  Tensor a = uniform_tensor({1, 1, 6, 6}, -1.0, 1.0, rng);
  Tensor diff = away_from_zero({1, 1, 6, 6}, 0.05, 0.5, rng);
  Tensor b = Tensor(a.shape(), std::vector<double>(a.numel()));
  {
    auto bv = b.mutable_data();
    for (std::size_t i = 0; i < bv.size(); ++i) bv[i] = a[i] + diff[i];
  }
  append(r, check([=] { return l_pixel(a, b); }, {a, b}, {"synthetic", "target"}, inject), "l_pixel.");

  PerceptualNet per(7);
  Tensor on = uniform_tensor({1, 1, 32, 32}, -1.0, 1.0, rng);
  Tensor syn = uniform_tensor({1, 1, 32, 32}, -1.0, 1.0, rng);
  GradcheckOptions per_opts;
  per_opts.max_coords = 64;
  append(r, check([=, &per] { return l_perceptual(on, syn, per); }, {syn}, {"synthetic"}, inject, per_opts), "l_perceptual.");

  // Lengths placed away from the m+ / m- hinges.
  Tensor lengths({3, 3}, {0.5, 0.05, 0.3, 0.2, 0.95, 0.7, 0.6, 0.45, 0.02});
  append(r, check([=] { return l_margin(lengths, {0, 1, 2}); }, {lengths}, {"lengths"}, inject), "l_margin.");

  ParamRegistry reg;
  DiscriminatorConfig dc = DiscriminatorConfig{}.thinned(32);
  Discriminator d(dc, reg, rng);
  Tensor poses = normal_tensor({2, dc.num_classes, dc.exp_dim}, 0.3, rng);
  Tensor target = uniform_tensor({2, 1, 128, 128}, 0.0, 1.0, rng);
  Tensor margin_len = uniform_tensor({2, 3}, 0.15, 0.85, rng);
  std::vector<Tensor> inputs{poses, margin_len};
  std::vector<std::string> names{"exp_poses", "lengths"};
  for (const auto& e : reg.entries())
    if (e.name.find(".recon") != std::string::npos) {
      inputs.push_back(e.value);
      names.push_back(e.name);
    }
  GradcheckOptions cls_opts;
  cls_opts.max_coords = 16;
  append(r,
         check([=] { return l_cls(l_margin(margin_len, {2, 0}), d.reconstruct(poses, {2, 0}), target, 0.3); }, inputs, names,
               inject, cls_opts),
         "l_cls.");

  Tensor real = uniform_tensor({4}, 0.1, 0.9, rng), fake = uniform_tensor({4}, 0.1, 0.9, rng);
  append(r, check([=] { return l_gan(real, fake).d_term; }, {real, fake}, {"d_real", "d_fake"}, inject), "l_gan_d.");
  append(r, check([=] { return l_gan(Tensor(), fake).g_term; }, {fake}, {"d_fake"}, inject), "l_gan_g.");
  Tensor logits = normal_tensor({3, 3}, 1.0, rng);
  append(r, check([=] { return cross_entropy(logits, {0, 2, 1}); }, {logits}, {"logits"}, inject), "cross_entropy.");
  return r;
}

}  // namespace suites

inline std::vector<GradcheckSuite> gradcheck_suites() {
  return {{"elementwise", suites::elementwise_suite}, {"tensor_ops", suites::tensor_ops_suite},
          {"conv2d", suites::conv_suite},             {"deconv2d", suites::deconv_suite},
          {"linear", suites::linear_suite},           {"graph_reasoning", suites::grm_suite},
          {"capsule_routing", suites::capsule_suite}, {"losses", suites::loss_suite},
          {"encoder", suites::encoder_suite},         {"generator", suites::generator_suite},
          {"discriminator", suites::discriminator_suite}};
}

/// Runs the suites whose name contains `filter` (all when empty).
inline std::vector<SuiteResult> run_gradcheck_suites(bool inject_bug = false, const std::string& filter = "") {
  std::vector<SuiteResult> out;
  for (const auto& s : gradcheck_suites()) {
    if (!filter.empty() && s.name.find(filter) == std::string::npos) continue;
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r{s.name, s.run(inject_bug), 0.0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace icegan
