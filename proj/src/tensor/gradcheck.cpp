#include "dana/tensor/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dana {

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& opts, const std::vector<std::string>& names) {
  GradCheckReport report;
  auto fail = [&report](const std::string& msg) {
    report.pass = false;
    if (report.failure.empty()) report.failure = msg;
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
    Tensor y = f(leaves);
    if (!std::isfinite(y.item())) {
      fail("non-finite f at the base point");
      return report;
    }
    if (!y.tracked()) {
      for (const auto& in : inputs) analytic.emplace_back(in.shape(), 0.0);
    } else {
      auto grads = tape.backward(y);
      for (const auto& leaf : leaves) analytic.push_back(grads.of(leaf));
    }
  }

  std::vector<Tensor> work(inputs.begin(), inputs.end());
  for (auto& w : work) w = w.detach();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    GradCheckEntry entry;
    entry.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    const Tensor base = inputs[k].detach();
    for (std::size_t i = 0; i < base.numel(); ++i) {
      Tensor plus = base;
      plus.mutable_data()[i] += opts.h;
      Tensor minus = base;
      minus.mutable_data()[i] -= opts.h;
      work[k] = plus;
      const double fp = f(work).item();
      work[k] = minus;
      const double fm = f(work).item();
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        entry.pass = false;
        fail(entry.name + "[" + std::to_string(i) + "]: non-finite f evaluation");
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double an = analytic[k][i];
      const double abs_err = std::abs(an - numeric);
      const double mag = std::max(std::abs(an), std::abs(numeric));
      const double rel_err = mag > 0 ? abs_err / mag : 0.0;
      if (abs_err > entry.max_abs_err) {
        entry.max_abs_err = abs_err;
        entry.worst_index = i;
      }
      entry.max_rel_err = std::max(entry.max_rel_err, rel_err);
      if (abs_err > opts.atol + opts.rtol * mag) {
        if (entry.pass) {
          std::ostringstream os;
          os << entry.name << "[" << i << "]: analytic " << an << " vs numeric " << numeric;
          fail(os.str());
        }
        entry.pass = false;
      }
    }
    work[k] = base;
    report.entries.push_back(entry);
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h, double rtol, double atol) {
  return grad_check([&f](const std::vector<Tensor>& in) { return f(in[0]); }, {x},
                    GradCheckOptions{h, rtol, atol});
}

}  // namespace dana
