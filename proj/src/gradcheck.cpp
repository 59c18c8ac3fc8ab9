#include "feddva/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace feddva {

GradCheckResult check_gradients(const std::function<ad::Tensor()>& loss, std::vector<ad::Tensor> params,
                                double h, double floor) {
  for (auto& p : params) p.zero_grad();
  ad::backward(loss());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    if (p.has_grad()) analytic.emplace_back(p.grad().begin(), p.grad().end());
    else analytic.emplace_back(p.size(), 0.0);
  }

  GradCheckResult out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (out.checked == 1 || rel > out.max_rel_error) {
        out.max_rel_error = rel;
        std::ostringstream os;
        os << "param " << p << "[" << i << "]: analytic " << a << " vs numeric " << numeric;
        out.worst = os.str();
      }
    }
  }
  return out;
}

}  // namespace feddva
