#pragma once

// Central finite differences against the tape's reverse-mode gradients.

#include <algorithm>
#include <functional>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/rng.hpp"

namespace dnpg::testing {

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline double relative_error(const Matrix& a, const Matrix& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / denom;
}

// f maps leaf variables to a 1x1 loss. Returns the worst relative error of
// the analytic gradient over all inputs.
using LossFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline double gradient_error(const LossFn& f, const std::vector<Matrix>& inputs, double h = 1e-6) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
  tape.backward(f(tape, leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix analytic = tape.grad(leaves[k]);
    Matrix numeric(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < numeric.size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Matrix> shifted = inputs;
        shifted[k](i) += delta;
        ad::Tape t;
        std::vector<ad::Var> v;
        for (const auto& m : shifted) v.push_back(t.constant(m));
        return f(t, v).scalar();
      };
      numeric(i) = (eval(h) - eval(-h)) / (2 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Same check for parameters bound by storage address: f builds the loss on a
// fresh tape and the entries of each parameter matrix are perturbed in place.
inline double parameter_gradient_error(const std::function<ad::Var(ad::Tape&)>& f, const std::vector<Matrix*>& params,
                                       double h = 1e-6) {
  ad::Tape tape;
  tape.backward(f(tape));
  double worst = 0.0;
  for (Matrix* p : params) {
    const Matrix analytic = tape.gradient(*p);
    Matrix numeric(p->rows(), p->cols());
    for (Eigen::Index i = 0; i < p->size(); ++i) {
      const double keep = (*p)(i);
      (*p)(i) = keep + h;
      ad::Tape tp;
      const double up = f(tp).scalar();
      (*p)(i) = keep - h;
      ad::Tape tm;
      const double down = f(tm).scalar();
      (*p)(i) = keep;
      numeric(i) = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

// Projects a matrix-valued op to a scalar with fixed random weights so every
// entry of its Jacobian is exercised.
inline ad::Var probe(ad::Var out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::weighted_sum(out, random_matrix(out.rows(), out.cols(), rng));
}

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kCompositeTolerance = 1e-3;

}  // namespace dnpg::testing
