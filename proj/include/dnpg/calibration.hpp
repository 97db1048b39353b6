#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/checkpoint.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/error.hpp"
#include "dnpg/rng.hpp"

namespace dnpg {

// Per-class mean of support embeddings. `support` holds ways * shots rows,
// grouped by way in roster order.
inline ad::Var raw_prototypes(ad::Var support, int ways, int shots) {
  if (ways < 1 || shots < 1) throw ContractError("raw_prototypes: every class needs at least one embedding");
  if (support.rows() != static_cast<Eigen::Index>(ways) * shots) throw ShapeError("raw_prototypes: support size != ways * shots");
  // Averaging matrix M (ways x ways*shots) with M(c, c*shots + i) = 1/shots.
  Matrix avg = Matrix::Zero(ways, static_cast<Eigen::Index>(ways) * shots);
  for (int c = 0; c < ways; ++c) avg.block(c, static_cast<Eigen::Index>(c) * shots, 1, shots).setConstant(1.0 / shots);
  return ad::matmul(support.tape()->constant(std::move(avg)), support);
}

// Variable-size groups; rows of the result follow the group order.
inline Matrix compute_raw_prototypes(std::span<const Matrix> groups) {
  if (groups.empty()) throw ContractError("compute_raw_prototypes: no classes");
  Matrix out(static_cast<Eigen::Index>(groups.size()), groups.front().cols());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].rows() == 0) throw ContractError("compute_raw_prototypes: class " + std::to_string(c) + " has no embeddings");
    if (groups[c].cols() != out.cols()) throw ShapeError("compute_raw_prototypes: embedding dimension mismatch");
    out.row(static_cast<Eigen::Index>(c)) = groups[c].colwise().mean();
  }
  return out;
}

// Attention projections of the prototype calibration step.
struct CalibrationParams {
  Matrix wq, wk, wv;  // d x d

  // W^q and W^k small Gaussian around identity_scale * I, W^v zero so
  // calibration starts as the identity. With identity_scale = s the initial
  // scores are s^2 cos(p, P*_j) / sqrt(d) for normalized inputs.
  static CalibrationParams init(Eigen::Index d, Rng& rng, double stddev = 0.1, double identity_scale = 0.0) {
    Matrix eye = identity_scale * Matrix::Identity(d, d);
    return {eye + detail::gaussian(d, d, stddev, rng), eye + detail::gaussian(d, d, stddev, rng), Matrix::Zero(d, d)};
  }

  template <class F>
  void for_each_param(F&& f) {
    f("wq", wq), f("wk", wk), f("wv", wv);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("wq", wq), f("wk", wk), f("wv", wv);
  }
};

struct AttentionMap {
  Matrix scores;   // N x |C_B|
  Matrix weights;  // row softmax of scores
};

namespace detail {

inline void check_calibration_shapes(Eigen::Index proto_dim, Eigen::Index base_dim, const CalibrationParams& p) {
  const Eigen::Index d = proto_dim;
  if (base_dim != d) throw ShapeError("calibration: prototypes and base weights differ in dimension");
  for (const Matrix* m : {&p.wq, &p.wk, &p.wv}) {
    if (m->rows() != d || m->cols() != d) throw ShapeError("calibration: projections must be d x d");
  }
}

}  // namespace detail

// A = (P^r W^q)(P* W^k)^T / sqrt(d).
inline ad::Var attention_scores(ad::Tape& tape, ad::Var prototypes, ad::Var base, const CalibrationParams& p) {
  detail::check_calibration_shapes(prototypes.cols(), base.cols(), p);
  ad::Var q = ad::matmul(prototypes, tape.parameter(p.wq));
  ad::Var k = ad::matmul(base, tape.parameter(p.wk));
  return ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(prototypes.cols())));
}

// P = P^r + softmax(A) (P* W^v).
inline ad::Var calibrate(ad::Tape& tape, ad::Var raw, ad::Var attention_weights, ad::Var base, const CalibrationParams& p) {
  detail::check_calibration_shapes(raw.cols(), base.cols(), p);
  if (attention_weights.rows() != raw.rows() || attention_weights.cols() != base.rows()) {
    throw ShapeError("calibrate: attention map must be N x |C_B|");
  }
  return ad::add(raw, ad::matmul(attention_weights, ad::matmul(base, tape.parameter(p.wv))));
}

inline AttentionMap attention_scores(const Matrix& prototypes, const Matrix& base, const CalibrationParams& p) {
  ad::Tape tape;
  ad::Var a = attention_scores(tape, tape.constant(prototypes), tape.constant(base), p);
  ad::Var s = ad::row_softmax(a);
  return {a.value(), s.value()};
}

// Attention and residual update computed from the same inputs.
inline Matrix calibrate(const Matrix& raw, const Matrix& base, const CalibrationParams& p) {
  ad::Tape tape;
  ad::Var r = tape.constant(raw);
  ad::Var b = tape.constant(base);
  ad::Var s = ad::row_softmax(attention_scores(tape, r, b, p));
  return calibrate(tape, r, s, b, p).value();
}

}  // namespace dnpg
