#include "neft/gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "neft/autograd.hpp"

namespace neft {

namespace {

double evaluate(const std::function<TensorD()>& f) {
  TensorD y = f();
  if (!y.defined() || y.size() != 1) {
    throw ContractError("grad_check: function must return a scalar, got shape " +
                        (y.defined() ? shape_string(y.shape()) : std::string("<undefined>")));
  }
  const double v = y.item();
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: function produced a non-finite value (" + std::to_string(v) + ")");
  }
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<TensorD()>& f, std::vector<TensorD> wrt,
                           const GradCheckOptions& options) {
  if (!(options.step >= 1e-7 && options.step <= 1e-3)) {
    throw ContractError("grad_check: step must lie in [1e-7, 1e-3]");
  }
  auto& tape = Tape<double>::active();
  tape.clear();
  std::vector<bool> previous;
  for (auto& t : wrt) {
    previous.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }

  TensorD loss = f();
  const double base = loss.defined() && loss.size() == 1 ? loss.item() : 0.0;
  if (loss.defined() && loss.size() == 1 && !std::isfinite(base)) {
    tape.clear();
    throw NumericError("grad_check: function produced a non-finite value at the base point");
  }
  backward(loss);
  std::vector<Vector<double>> analytic;
  for (auto& t : wrt) {
    analytic.push_back(t.has_grad() ? t.grad() : Vector<double>::Zero(t.size()));
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  double total = 0.0;
  {
    NoGradGuard no_grad;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
      Vector<double>& values = wrt[ti].values();
      for (Index i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + options.step;
        const double plus = evaluate(f);
        values[i] = saved - options.step;
        const double minus = evaluate(f);
        values[i] = saved;
        const double numeric = (plus - minus) / (2.0 * options.step);
        const double a = analytic[ti][i];
        const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
        const double rel = std::abs(a - numeric) / denom;
        total += rel;
        ++report.checked;
        if (rel > report.max_rel_error || report.worst_element < 0) {
          report.max_rel_error = rel;
          report.worst_tensor = static_cast<Index>(ti);
          report.worst_element = i;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.mean_rel_error = report.checked ? total / double(report.checked) : 0.0;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    wrt[ti].zero_grad();
    wrt[ti].set_requires_grad(previous[ti]);
  }
  return report;
}

GradCheckReport grad_check(const std::function<TensorD(const TensorD&)>& f, TensorD x,
                           double step, double tolerance) {
  GradCheckOptions options;
  options.step = step;
  options.tolerance = tolerance;
  return grad_check([&f, &x]() { return f(x); }, {x}, options);
}

}  // namespace neft
