#pragma once

// Central finite-difference gradient checking, always in double precision.
// The function under test rebuilds its graph from scratch on every
// evaluation, so the harness stays independent of any cached state.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dndt/tensor.hpp"

namespace dndt::ad {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_leaf = -1;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool finite = true;  // false if any evaluation produced non-finite values

  bool pass(double tol) const { return finite && max_rel_err < tol; }
};

struct GradCheckInput {
  Shape shape;
  std::vector<double> data;
};

// f builds a scalar on the given tape from the leaf tensors (one per
// GradCheckInput, in order). eps is the central-difference step.
// analytic_scale is a sensitivity hook: scaling the analytic side by -1
// simulates a sign-flipped backward rule, which a sound check must flag.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(Tape<double>&,
                                       const std::vector<Tensor<double>>&)>& f,
    std::vector<GradCheckInput> inputs, double eps = 1e-5,
    double analytic_scale = 1.0) {
  GradCheckReport report;

  auto eval = [&](const std::vector<GradCheckInput>& pts) -> double {
    Tape<double> tape;
    std::vector<Tensor<double>> leaves;
    leaves.reserve(pts.size());
    for (const auto& p : pts) leaves.push_back(tape.leaf(p.shape, p.data, false));
    Tensor<double> y = f(tape, leaves);
    return y.value()[0];
  };

  // Analytic gradients from one reverse pass.
  Tape<double> tape;
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& p : inputs) leaves.push_back(tape.leaf(p.shape, p.data, true));
  Tensor<double> y = f(tape, leaves);
  if (!std::isfinite(y.value()[0])) {
    report.finite = false;
    return report;
  }
  tape.backward(y);

  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) {
    analytic.emplace_back(l.grad().begin(), l.grad().end());
    if (analytic_scale != 1.0)
      for (auto& a : analytic.back()) a *= analytic_scale;
  }

  std::vector<std::vector<double>> numeric(analytic.size());
  double grad_scale = 0.0;
  for (std::size_t li = 0; li < inputs.size(); ++li) {
    numeric[li].resize(inputs[li].data.size());
    for (std::size_t i = 0; i < inputs[li].data.size(); ++i) {
      const double saved = inputs[li].data[i];
      inputs[li].data[i] = saved + eps;
      const double fp = eval(inputs);
      inputs[li].data[i] = saved - eps;
      const double fm = eval(inputs);
      inputs[li].data[i] = saved;
      const double num = (fp - fm) / (2.0 * eps);
      numeric[li][i] = num;
      const double ana = analytic[li][i];
      if (!std::isfinite(num) || !std::isfinite(ana)) {
        report.finite = false;
        continue;
      }
      grad_scale = std::max({grad_scale, std::fabs(ana), std::fabs(num)});
    }
  }

  // Relative error with a data-driven denominator floor. Components far below
  // the overall gradient scale carry only finite-difference rounding noise
  // (e.g. parameters made inert by a downstream normalization), so they are
  // compared against the problem's scale rather than against themselves.
  const double floor = std::max(1e-3 * grad_scale, 1e-5);
  for (std::size_t li = 0; li < inputs.size(); ++li) {
    for (std::size_t i = 0; i < inputs[li].data.size(); ++i) {
      const double ana = analytic[li][i];
      const double num = numeric[li][i];
      if (!std::isfinite(num) || !std::isfinite(ana)) continue;
      const double denom = std::max({std::fabs(ana), std::fabs(num), floor});
      const double rel = std::fabs(ana - num) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_leaf = static_cast<int>(li);
        report.worst_index = i;
        report.worst_analytic = ana;
        report.worst_numeric = num;
      }
    }
  }
  return report;
}

// Convenience for a single-input function.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
    Shape shape, std::vector<double> data, double eps = 1e-5) {
  return grad_check(
      [&f](Tape<double>& t, const std::vector<Tensor<double>>& xs) {
        return f(t, xs[0]);
      },
      {GradCheckInput{std::move(shape), std::move(data)}}, eps);
}

}  // namespace dndt::ad
