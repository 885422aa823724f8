#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/tensor.hpp"

namespace panopix {

// Finite-difference validation of analytic gradients. Always runs in double:
// float-precision programs should be instantiated at double for checking.

struct GradCheckOptions {
  double h = 1e-5;
  int64_t samples_per_param = 32;  // all elements when a parameter has fewer
  uint64_t seed = 0x9e3779b97f4a7c15ull;
};

struct GradCheckResult {
  bool deterministic = true;
  int64_t checked = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tol) const { return deterministic && max_rel_err <= tol; }

  std::string summary() const {
    std::ostringstream os;
    if (!deterministic) {
      os << "FORWARD NOT DETERMINISTIC: two identical evaluations disagreed";
      return os.str();
    }
    os << "checked " << checked << " elements, max rel err " << max_rel_err;
    if (worst_index >= 0)
      os << " at " << worst_param << "[" << worst_index << "] (analytic " << worst_analytic
         << ", numeric " << worst_numeric << ")";
    return os.str();
  }
};

struct GradCheckParam {
  std::string name;
  Tensor<double> value;
};

// eval(params, grads): returns the scalar loss; when grads is non-null it must
// be filled with dloss/dparam, one tensor per parameter, same order.
using GradCheckEval =
    std::function<double(const std::vector<Tensor<double>>&, std::vector<Tensor<double>>*)>;

inline GradCheckResult check_gradients(std::vector<GradCheckParam> params,
                                       const GradCheckEval& eval,
                                       const GradCheckOptions& opt = {}) {
  std::vector<Tensor<double>> values;
  values.reserve(params.size());
  for (const auto& p : params) values.push_back(p.value);

  std::vector<Tensor<double>> analytic;
  const double loss0 = eval(values, &analytic);
  if (analytic.size() != params.size())
    throw ShapeError("check_gradients: eval returned " + std::to_string(analytic.size()) +
                     " gradients for " + std::to_string(params.size()) + " parameters");
  const double loss_again = eval(values, nullptr);

  GradCheckResult r;
  if (std::memcmp(&loss0, &loss_again, sizeof(double)) != 0) {
    r.deterministic = false;
    return r;
  }

  Rng rng(opt.seed);
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& v = values[p];
    if (!analytic[p].same_shape(v))
      throw ShapeError("check_gradients: gradient shape mismatch for " + params[p].name);
    const int64_t n = v.numel();
    std::vector<int64_t> idx;
    if (n <= opt.samples_per_param) {
      idx.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    } else {
      // Sample without replacement so no element is double-counted.
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all);
      idx.assign(all.begin(), all.begin() + static_cast<size_t>(opt.samples_per_param));
    }
    for (int64_t i : idx) {
      const double keep = v[i];
      v[i] = keep + opt.h;
      const double fp = eval(values, nullptr);
      v[i] = keep - opt.h;
      const double fm = eval(values, nullptr);
      v[i] = keep;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[p][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++r.checked;
      if (rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst_param = params[p].name;
        r.worst_index = i;
        r.worst_analytic = a;
        r.worst_numeric = numeric;
      }
    }
  }
  return r;
}

}  // namespace panopix
