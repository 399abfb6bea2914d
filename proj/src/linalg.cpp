#include "stratanet/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace stratanet {

Cholesky Cholesky::factor(const std::vector<double>& a, int n) {
  if (static_cast<int>(a.size()) != n * n)
    throw std::invalid_argument("Cholesky: size mismatch");
  Cholesky c;
  c.n_ = n;
  c.l_.assign(a.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<std::size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        s -= c.l_[static_cast<std::size_t>(i) * n + k] * c.l_[static_cast<std::size_t>(j) * n + k];
      if (i == j) {
        if (s <= 0.0) throw std::runtime_error("Cholesky: matrix not positive definite");
        c.l_[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
      } else {
        c.l_[static_cast<std::size_t>(i) * n + j] = s / c.l_[static_cast<std::size_t>(j) * n + j];
      }
    }
  }
  return c;
}

std::vector<double> Cholesky::solve(const std::vector<double>& b) const {
  if (static_cast<int>(b.size()) != n_) throw std::invalid_argument("Cholesky::solve: size mismatch");
  std::vector<double> y(b.size());
  for (int i = 0; i < n_; ++i) {
    double s = b[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) s -= l_[static_cast<std::size_t>(i) * n_ + k] * y[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] = s / l_[static_cast<std::size_t>(i) * n_ + i];
  }
  std::vector<double> x(b.size());
  for (int i = n_ - 1; i >= 0; --i) {
    double s = y[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < n_; ++k) s -= l_[static_cast<std::size_t>(k) * n_ + i] * x[static_cast<std::size_t>(k)];
    x[static_cast<std::size_t>(i)] = s / l_[static_cast<std::size_t>(i) * n_ + i];
  }
  return x;
}

double Cholesky::quad_form(const std::vector<double>& d) const {
  if (static_cast<int>(d.size()) != n_)
    throw std::invalid_argument("Cholesky::quad_form: size mismatch");
  // solve L y = d, then d^T A^-1 d = ||y||^2
  std::vector<double> y(d.size());
  double q = 0.0;
  for (int i = 0; i < n_; ++i) {
    double s = d[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) s -= l_[static_cast<std::size_t>(i) * n_ + k] * y[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] = s / l_[static_cast<std::size_t>(i) * n_ + i];
    q += y[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(i)];
  }
  return q;
}

}  // namespace stratanet
