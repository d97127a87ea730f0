#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cellsearch/rng.hpp"
#include "cellsearch/tensor.hpp"

namespace cstest {

using cellsearch::RngStream;
using cellsearch::Tensor;

// Central finite-difference gradient check. loss_fn must rebuild the graph
// from the given leaves on every call. Checks up to max_coords sampled
// coordinates per leaf and returns the worst relative error
// |analytic - fd| / (|fd| + 1e-8), with h = 1e-5.
inline double fd_max_rel_error(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                               RngStream& coord_rng, int max_coords = 30) {
  const double h = 1e-5;
  for (Tensor& t : leaves) t.zero_grad();
  Tensor loss = loss_fn();
  cellsearch::backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (Tensor& t : leaves) analytic.push_back(t.grad());

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& t = leaves[li];
    const std::size_t n = t.size();
    std::vector<std::size_t> coords;
    if (n <= static_cast<std::size_t>(max_coords)) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords; ++i) coords.push_back(coord_rng.uniform_int(n));
    }
    for (std::size_t c : coords) {
      const double orig = t.data()[c];
      t.data()[c] = orig + h;
      const double lp = loss_fn().item();
      t.data()[c] = orig - h;
      const double lm = loss_fn().item();
      t.data()[c] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double rel = std::fabs(analytic[li][c] - fd) / (std::fabs(fd) + 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline Tensor random_tensor(cellsearch::Shape shape, RngStream& rng, double lo = -1.0,
                            double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(cellsearch::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

}  // namespace cstest
