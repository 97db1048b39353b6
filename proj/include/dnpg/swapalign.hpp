#pragma once

#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/error.hpp"
#include "dnpg/npgen.hpp"
#include "dnpg/rng.hpp"

namespace dnpg {

// One graph-convolution layer over the nodes [prototypes; task NPs]:
//   out = act(Adj X W_g)
// on a fully connected graph whose normalized adjacency gives each node a
// fixed share `self_weight` of its own features and spreads the rest evenly
// over all nodes:  Adj = self_weight I + (1 - self_weight) 11^T / n.
// Adj is symmetric with unit row sums. self_weight = 0 is the plain
// renormalized complete graph, which maps every node to the same output.
struct GraphPropagator {
  Matrix wg;
  double self_weight = 0.5;
  Activation activation = Activation::kTanh;

  static GraphPropagator init(Eigen::Index d, Rng& rng, double self_weight = 0.5, double noise = 0.01) {
    if (self_weight < 0.0 || self_weight > 1.0) throw ParameterError("GraphPropagator: self_weight must lie in [0, 1]");
    return {Matrix::Identity(d, d) + detail::gaussian(d, d, noise, rng), self_weight, Activation::kTanh};
  }

  [[nodiscard]] Matrix adjacency(Eigen::Index nodes) const {
    Matrix a = Matrix::Constant(nodes, nodes, (1.0 - self_weight) / static_cast<double>(nodes));
    a.diagonal().array() += self_weight;
    return a;
  }

  template <class F>
  void for_each_param(F&& f) {
    f("wg", wg);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("wg", wg);
  }
};

struct AlignedVars {
  ad::Var prototypes;  // N x d
  ad::Var nps;         // N_g x d
};

inline AlignedVars propagate(ad::Tape& tape, ad::Var prototypes, ad::Var nps, const GraphPropagator& g) {
  if (prototypes.cols() != nps.cols() || g.wg.rows() != prototypes.cols() || g.wg.cols() != prototypes.cols()) {
    throw ShapeError("propagate: inconsistent feature dimension");
  }
  const Eigen::Index n = prototypes.rows() + nps.rows();
  ad::Var nodes = ad::vstack(prototypes, nps);
  ad::Var mixed = ad::matmul(tape.constant(g.adjacency(n)), nodes);
  ad::Var out = activate(ad::matmul(mixed, tape.parameter(g.wg)), g.activation);
  return {ad::slice_rows(out, 0, prototypes.rows()), ad::slice_rows(out, prototypes.rows(), nps.rows())};
}

struct AlignedSets {
  Matrix prototypes;
  Matrix nps;
};

inline AlignedSets propagate(const Matrix& prototypes, const Matrix& nps, const GraphPropagator& g) {
  ad::Tape tape;
  auto out = propagate(tape, tape.constant(prototypes), tape.constant(nps), g);
  return {out.prototypes.value(), out.nps.value()};
}

// Alignment of one task's NPs with the conjugate task's prototypes:
//   L = - sum_i max_j cos(np_i, proto_j) - sum_j max_i cos(proto_j, np_i)
// The first sum pulls every NP towards some opposite-task prototype, the
// second requires every opposite-task prototype to be covered by some NP.
inline ad::Var alignment_loss(ad::Var own_nps, ad::Var other_prototypes) {
  if (own_nps.cols() != other_prototypes.cols()) throw ShapeError("alignment_loss: dimension mismatch");
  ad::Var c = ad::cosine(own_nps, other_prototypes);
  ad::Var np_side = ad::sum(ad::row_max(c));
  ad::Var proto_side = ad::sum(ad::row_max(ad::transpose(c)));
  return ad::scale(ad::add(np_side, proto_side), -1.0);
}

inline double alignment_loss(const Matrix& own_nps, const Matrix& other_prototypes) {
  ad::Tape tape;
  return alignment_loss(tape.constant(own_nps), tape.constant(other_prototypes)).scalar();
}

struct NpUtilization {
  std::vector<long long> counts;  // per NP: queries on which it was the best match
  int utilized = 0;               // NPs with count >= 1
};

// `best_np` holds, per query, the index of the NP with the highest s2 score
// (lowest index on ties).
inline NpUtilization np_utilization(const std::vector<int>& best_np, int num_nps) {
  if (num_nps < 1) throw ParameterError("np_utilization: need at least one NP");
  NpUtilization u;
  u.counts.assign(static_cast<std::size_t>(num_nps), 0);
  for (int k : best_np) {
    if (k < 0 || k >= num_nps) throw ShapeError("np_utilization: NP index out of range");
    ++u.counts[static_cast<std::size_t>(k)];
  }
  for (long long c : u.counts) u.utilized += c > 0 ? 1 : 0;
  return u;
}

}  // namespace dnpg
