#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dana/tensor/tensor.hpp"

namespace dana {

struct GradCheckEntry {
  std::string name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;
  std::string failure;  // first failing location, empty when pass
};

struct GradCheckOptions {
  double h = 1e-3;
  double rtol = 1e-4;
  double atol = 1e-7;
};

/// Scalar-valued function of tensors. Inputs are handed over as tape leaves
/// when checking analytically and as plain tensors when differencing.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central-difference check of backward() against f at `inputs`.
/// Entry i passes iff |analytic - numeric| <= atol + rtol*max(|analytic|,|numeric|).
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& opts = {},
                           const std::vector<std::string>& names = {});

/// Single-input convenience overload.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h, double rtol, double atol);

}  // namespace dana
