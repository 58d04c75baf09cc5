#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vtlm/params.hpp"
#include "vtlm/rng.hpp"

namespace vtlm::testing {

struct CoordCheck {
  std::string param;
  Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

/// Central differences on sampled coordinates of several parameter tensors.
/// `loss` must rebuild the graph from `params` on every call. Coordinates
/// are drawn uniformly among those whose analytic gradient magnitude is at
/// least `min_grad` (a zero gradient has no meaningful relative error).
inline std::vector<CoordCheck> check_param_gradients(ParamStore<double>& params, const std::function<Tensor<double>()>& loss,
                                                     const std::vector<std::string>& names, int per_tensor, double h,
                                                     std::uint64_t seed, double min_grad = 1e-6) {
  params.zero_grad();
  auto l = loss();
  l.backward();
  Pcg32 rng = Pcg32::for_consumer(seed, "gradcheck");
  std::vector<CoordCheck> out;
  for (const auto& name : names) {
    auto& p = params.at(name);
    std::vector<Index> candidates;
    if (p.has_grad()) {
      for (Index i = 0; i < p.numel(); ++i) {
        if (std::abs(p.grad()[static_cast<std::size_t>(i)]) >= min_grad) candidates.push_back(i);
      }
    }
    shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(per_tensor)));
    for (Index i : candidates) {
      CoordCheck c{name, i, p.grad()[static_cast<std::size_t>(i)], 0, 0};
      const double orig = p.at(i);
      NoGradGuard ng;
      p.at(i) = orig + h;
      const double fp = loss().item();
      p.at(i) = orig - h;
      const double fm = loss().item();
      p.at(i) = orig;
      c.numeric = (fp - fm) / (2 * h);
      c.rel_error = std::abs(c.analytic - c.numeric) / std::max(std::abs(c.analytic), std::abs(c.numeric));
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace vtlm::testing
