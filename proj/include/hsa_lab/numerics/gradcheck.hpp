#pragma once

// Central finite-difference checker used by the test suites.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hsa_lab/numerics/tensor.hpp"

namespace hsa_lab {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
};

struct GradCheckOptions {
  double step = 1e-5;
  double floor = 1e-8;
  // 0 = every element; otherwise a seeded random subset per input.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 0;
};

/// Relative error with denominator max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double den = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / den;
}

/// `loss` must rebuild the graph from the current contents of `inputs` and
/// return a scalar.
inline GradCheckReport gradcheck(const std::function<Tensor<double>()>& loss,
                                 std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                 const GradCheckOptions& opt = {}) {
  for (auto& [name, t] : inputs) t.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.size(), 0.0);
    }
  }
  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& [name, t] = inputs[k];
    GradCheckEntry entry{name};
    std::vector<std::size_t> order(t.size());
    std::iota(order.begin(), order.end(), 0);
    if (opt.max_elements_per_input && order.size() > opt.max_elements_per_input) {
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(opt.max_elements_per_input);
    }
    auto data = t.mutable_data();
    for (std::size_t i : order) {
      const double orig = data[i];
      data[i] = orig + opt.step;
      const double fp = loss().item();
      data[i] = orig - opt.step;
      const double fm = loss().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double err = relative_error(analytic[k][i], numeric, opt.floor);
      if (err > entry.max_rel_err || entry.checked == 0) {
        entry.max_rel_err = std::max(entry.max_rel_err, err);
        entry.worst_index = i;
        entry.worst_analytic = analytic[k][i];
        entry.worst_numeric = numeric;
      }
      ++entry.checked;
    }
    report.entries.push_back(entry);
  }
  for (auto& [name, t] : inputs) t.zero_grad();
  return report;
}

}  // namespace hsa_lab
