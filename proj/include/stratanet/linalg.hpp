#pragma once

// Dense symmetric positive-definite helpers used by the Mahalanobis scoring
// path. Quadratic forms go through the Cholesky factor; no explicit inverse.

#include <vector>

namespace stratanet {

class Cholesky {
 public:
  // A is n x n row-major symmetric; throws when not positive definite.
  static Cholesky factor(const std::vector<double>& a, int n);

  // x = A^-1 b
  std::vector<double> solve(const std::vector<double>& b) const;

  // d^T A^-1 d
  double quad_form(const std::vector<double>& d) const;

  int dim() const { return n_; }
  const std::vector<double>& lower() const { return l_; }

 private:
  int n_ = 0;
  std::vector<double> l_;  // lower-triangular factor, row-major
};

}  // namespace stratanet
