#include "hsf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hsf {

GradcheckReport gradcheck(const std::function<DiffTensor<double>()>& build_loss,
                          std::span<const DiffTensor<double>> params, double tolerance, double h) {
  for (const auto& p : params) {
    p.node()->requires_grad = true;
    p.node()->grad.clear();
  }
  double loss_value = 0.0;
  {
    Tape<double> tape;
    auto loss = build_loss();
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw NumericsError("gradcheck: non-finite loss");
    tape.backward(loss);
  }
  const double floor = 1e-3 * std::max(1.0, std::abs(loss_value));

  auto eval = [&] {
    NoGradGuard<double> guard;
    const double v = build_loss().item();
    if (!std::isfinite(v)) throw NumericsError("gradcheck: non-finite loss under perturbation");
    return v;
  };

  GradcheckReport report;
  report.tolerance = tolerance;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    const std::vector<double> analytic = p.has_grad()
                                             ? std::vector<double>(p.grad().begin(), p.grad().end())
                                             : std::vector<double>(p.data().size(), 0.0);
    auto values = p.data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      auto at = [&](double offset) {
        values[j] = saved + offset;
        return eval();
      };
      const double d1 = at(h) - at(-h), d2 = at(2.0 * h) - at(-2.0 * h);
      values[j] = saved;
      const double numeric = (8.0 * d1 - d2) / (12.0 * h);
      const double a = analytic[j];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (!std::isfinite(rel)) throw NumericsError("gradcheck: non-finite gradient");
      if (rel > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) report.worst = std::to_string(pi) + "#" + std::to_string(j);
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace hsf
