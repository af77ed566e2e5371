#ifndef DYNGEST_TEST_UTIL_HPP
#define DYNGEST_TEST_UTIL_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "dyngest/config.hpp"
#include "dyngest/rng.hpp"
#include "dyngest/tensor.hpp"

namespace dyngest::testutil {

inline std::vector<double> random_values(std::size_t n, Xoshiro256& rng,
                                         double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + rng.next_double() * (hi - lo);
  return v;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// Central finite differences against the analytic gradient of a scalar
// function of `x`. Checks up to `max_checks` evenly spaced entries.
// `f` must be a pure function of the current contents of x.
inline double max_grad_rel_err(std::vector<double>& x,
                               const std::vector<double>& analytic,
                               const std::function<double()>& f,
                               double h = 1e-4, std::size_t max_checks = 64) {
  const std::size_t n = x.size();
  const std::size_t step = std::max<std::size_t>(1, n / max_checks);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; i += step) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f();
    x[i] = orig - h;
    const double fm = f();
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, rel_err(analytic[i], numeric));
  }
  return worst;
}

// Small architecture for fast end-to-end tests: 8x16x16 input, 8x8 features,
// 2x2 grid, 4 classes.
inline NetworkConfig tiny_config(std::size_t num_classes = 4, std::size_t m = 2,
                                 std::size_t n = 2) {
  NetworkConfig cfg;
  cfg.input_dims = {8, 1, 16, 16};
  cfg.feature_dims = {4, 4, 8, 8};
  cfg.grid = {m, n};
  cfg.num_classes = num_classes;
  cfg.lambda = 2.0;
  cfg.extractor_spec = {{4, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}};
  cfg.selector_spec = {2, 2};
  cfg.classifier_spec = {{8, {2, 2, 2}}};
  cfg.seed = 7;
  cfg.validate();
  return cfg;
}

}  // namespace dyngest::testutil

#endif  // DYNGEST_TEST_UTIL_HPP
