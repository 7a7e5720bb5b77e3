#include "limit/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace limit {

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps) {
  for (auto& p : params) p.zero_grad();
  Tape::current().clear();
  backward(f());
  Tape::current().clear();

  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    analytic.push_back(p.grad());
    p.zero_grad();
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& value = params[k].mutable_value();
    for (Index i = 0; i < value.size(); ++i) {
      double& slot = value.data()[i];
      const double saved = slot;
      slot = saved + eps;
      const double up = f().item();
      slot = saved - eps;
      const double down = f().item();
      slot = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k].data()[i];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
  }
  return worst;
}

}  // namespace limit
