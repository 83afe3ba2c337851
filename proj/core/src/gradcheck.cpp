#include "mit/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mit/rng.h"

namespace mit {

bool GradCheckReport::passed() const {
  return std::all_of(per_param.begin(), per_param.end(), [](const ParamGradCheck& p) { return p.passed; });
}

GradCheckError::GradCheckError(const std::string& param, std::size_t index, const std::string& what)
    : std::runtime_error("grad_check: " + what + " while perturbing " + param + "[" + std::to_string(index) + "]"),
      param_(param),
      index_(index) {}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<const NamedTensor> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  if (!(options.abs_floor > 0.0)) throw std::invalid_argument("grad_check: abs_floor must be positive");

  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  const Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw GradCheckError("<unperturbed>", 0, "non-finite loss");
  loss.backward();

  GradCheckReport report;
  report.tol = options.tol;
  SplitMix64 rng(options.seed);
  for (const auto& p : params) {
    ParamGradCheck entry;
    entry.name = p.name;
    Tensor t = p.tensor;
    const std::size_t n = t.numel();
    if (!t.requires_grad()) {
      entry.frozen = true;
      // Nothing may have flowed into a frozen tensor.
      entry.passed = !t.has_grad();
      report.per_param.push_back(entry);
      continue;
    }
    std::vector<double> analytic(n, 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> indices(n);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_entries_per_tensor != 0 && n > options.max_entries_per_tensor) {
      rng.shuffle(indices);
      indices.resize(options.max_entries_per_tensor);
      std::sort(indices.begin(), indices.end());
    }

    auto data = t.mutable_data();
    for (std::size_t idx : indices) {
      const double original = data[idx];
      data[idx] = original + options.step;
      const double up = loss_fn().item();
      data[idx] = original - options.step;
      const double down = loss_fn().item();
      data[idx] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) throw GradCheckError(p.name, idx, "non-finite loss");
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = relative_error(analytic[idx], numeric, options.abs_floor);
      entry.max_rel_err = std::max(entry.max_rel_err, err);
      entry.max_abs_analytic = std::max(entry.max_abs_analytic, std::abs(analytic[idx]));
      ++entry.checked;
    }
    entry.passed = entry.max_rel_err <= options.tol;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(entry);
  }
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  return report;
}

}  // namespace mit
