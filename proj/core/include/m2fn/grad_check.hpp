#pragma once

#include <functional>
#include <string>
#include <vector>

#include "m2fn/tensor.hpp"

namespace m2fn {

inline constexpr double kGradCheckTolerance = 1e-4;

// Compares the reverse-mode gradient of the scalar `fn` with respect to every
// element of `inputs` against central finite differences and returns
//   max |a - n| / max(|a|, |n|, 1e-8).
// `fn` must rebuild its graph from the (shared) input tensors on every call.
// Throws ContractError if `fn` is not scalar-valued.
double grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                  double eps = 1e-5);

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  bool passed() const { return max_relative_error < kGradCheckTolerance; }
};

}  // namespace m2fn
