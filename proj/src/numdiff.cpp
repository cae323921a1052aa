#include "domadapt/numdiff.hpp"

#include <cmath>
#include <string>

#include "domadapt/errors.hpp"

namespace domadapt {

std::vector<double> finite_diff_grad(const ScalarFn& f,
                                     const std::vector<double>& x, double h) {
  if (!(h > 0.0)) {
    throw ParameterError("finite_diff_grad: h must be > 0");
  }
  std::vector<double> grad(x.size());
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite f at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace domadapt
