#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mit/tensor.h"

namespace mit {

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Denominator floor of the relative error; gradients below it are compared
  // absolutely at tol * abs_floor.
  double abs_floor = 1e-8;
  // 0 checks every entry; otherwise at most this many entries per tensor,
  // drawn without replacement from a fixed-seed stream.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct ParamGradCheck {
  std::string name;
  bool frozen = false;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  double max_abs_analytic = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  std::vector<ParamGradCheck> per_param;
  bool passed() const;
};

class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(const std::string& param, std::size_t index, const std::string& what);
  const std::string& param() const { return param_; }
  std::size_t index() const { return index_; }

 private:
  std::string param_;
  std::size_t index_;
};

// |a - f| / max(|a|, |f|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-8);

// Compares the reverse-mode gradient of `loss_fn` against central
// differences for every parameter. `loss_fn` must rebuild its graph on each
// call and be deterministic. Frozen parameters (requires_grad=false) are
// reported with analytic gradient exactly 0 and are not perturbed.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<const NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace mit
