#pragma once

#include <functional>
#include <string>
#include <vector>

#include "feddva/autodiff.hpp"

namespace feddva {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param p[i]: analytic a vs numeric n"
};

// Central differences on every entry of every leaf in `params`. `loss`
// must rebuild the graph from the leaves on each call and be deterministic.
// Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult check_gradients(const std::function<ad::Tensor()>& loss, std::vector<ad::Tensor> params,
                                double h = 1e-4, double floor = 1e-3);

}  // namespace feddva
