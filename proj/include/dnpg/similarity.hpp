#pragma once

#include <cmath>

#include "dnpg/autodiff.hpp"
#include "dnpg/error.hpp"

namespace dnpg {

// Cosine scoring with separate temperatures for the known-class branch (sim1)
// and the negative-prototype branch (sim2), plus a trainable sim2 offset.
// The sim2 temperature is stored as log(1/tau2) so it stays positive under SGD.
struct SimilarityHead {
  double tau1 = 0.1;
  Matrix log_inv_tau2 = Matrix::Constant(1, 1, std::log(10.0));
  Matrix bias = Matrix::Zero(1, 1);

  static SimilarityHead make(double tau1, double tau2, double bias = 0.0) {
    if (!(tau1 > 0.0) || !(tau2 > 0.0)) throw ParameterError("SimilarityHead: temperatures must be positive");
    SimilarityHead h;
    h.tau1 = tau1;
    h.log_inv_tau2(0, 0) = -std::log(tau2);
    h.bias(0, 0) = bias;
    return h;
  }

  [[nodiscard]] double tau2() const { return std::exp(-log_inv_tau2(0, 0)); }

  template <class F>
  void for_each_param(F&& f) {
    f("log_inv_tau2", log_inv_tau2), f("bias", bias);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("log_inv_tau2", log_inv_tau2), f("bias", bias);
  }
};

// s1(q, c) = cos(q, P_c) / tau1 for every query row and prototype row.
inline ad::Var known_logits(ad::Var queries, ad::Var prototypes, const SimilarityHead& head) {
  return ad::scale(ad::cosine(queries, prototypes), 1.0 / head.tau1);
}

// s2(q, k) = cos(q, p_k) / tau2 + b for every query row and NP row.
inline ad::Var np_logits(ad::Tape& tape, ad::Var queries, ad::Var nps, const SimilarityHead& head) {
  ad::Var inv_tau2 = ad::exp(tape.parameter(head.log_inv_tau2));
  return ad::add_scalar(ad::mul_scalar(ad::cosine(queries, nps), inv_tau2), tape.parameter(head.bias));
}

}  // namespace dnpg
