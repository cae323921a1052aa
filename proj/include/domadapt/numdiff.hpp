#pragma once

#include <functional>
#include <vector>

namespace domadapt {

using ScalarFn = std::function<double(const std::vector<double>&)>;

// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / (2h).
// Throws ParameterError for h <= 0 and NumericError if f returns a
// non-finite value at any probe point.
std::vector<double> finite_diff_grad(const ScalarFn& f,
                                     const std::vector<double>& x, double h);

}  // namespace domadapt
