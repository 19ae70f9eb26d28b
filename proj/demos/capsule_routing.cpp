// Routing-by-agreement on a hand-made instance: most lower capsules agree on
// upper capsule 0, so its coupling grows and the coupling entropy falls.

#include <cmath>
#include <iomanip>
#include <iostream>

#include "icegan/icegan.hpp"

using namespace icegan;

int main() {
  const std::size_t nin = 6, nout = 3, d = 4;
  const double agree[d] = {0.6, -0.4, 0.5, 0.3};
  std::vector<double> u(nin * nout * d);
  for (std::size_t i = 0; i < nin; ++i)
    for (std::size_t j = 0; j < nout; ++j)
      for (std::size_t k = 0; k < d; ++k)
        u[(i * nout + j) * d + k] = (j == 0 && i < 5) ? agree[k] : 0.2 * std::cos(1.7 * static_cast<double>(i + 3 * j + 5 * k));

  RoutingTrace trace;
  Tensor s = dynamic_route(Tensor({1, nin, nout, d}, u), 5, &trace);
  std::cout << std::fixed << std::setprecision(4);
  for (std::size_t t = 0; t < trace.couplings.size(); ++t) {
    const auto& c = trace.couplings[t];
    double h = 0.0, c0 = 0.0;
    for (std::size_t i = 0; i < nin; ++i) {
      c0 += c[i * nout] / static_cast<double>(nin);
      for (std::size_t j = 0; j < nout; ++j) h -= c[i * nout + j] * std::log(c[i * nout + j]);
    }
    std::cout << "iteration " << t + 1 << "  mean c_i0 " << c0 << "  entropy " << h << "\n";
  }
  Tensor len = vector_norm(squash(s));
  std::cout << "upper capsule lengths";
  for (std::size_t j = 0; j < nout; ++j) std::cout << " " << len[j];
  std::cout << "\n";
}
