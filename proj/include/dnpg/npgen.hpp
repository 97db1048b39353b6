#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/error.hpp"
#include "dnpg/openweights.hpp"
#include "dnpg/rng.hpp"
#include "dnpg/similarity.hpp"

namespace dnpg {

enum class Activation { kIdentity, kTanh };

inline ad::Var activate(ad::Var x, Activation act) { return act == Activation::kTanh ? ad::tanh(x) : x; }

// f(x) = act(x W1 + b1) W2 + b2, row-vector convention.
struct Generator {
  Matrix w1, b1, w2, b2;

  static Generator init(Eigen::Index d, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    return {detail::gaussian(d, d, s, rng), Matrix::Zero(1, d), detail::gaussian(d, d, s, rng), Matrix::Zero(1, d)};
  }

  static Generator identity(Eigen::Index d) {
    return {Matrix::Identity(d, d), Matrix::Zero(1, d), Matrix::Identity(d, d), Matrix::Zero(1, d)};
  }

  template <class F>
  void for_each_param(F&& f) {
    f("w1", w1), f("b1", b1), f("w2", w2), f("b2", b2);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("w1", w1), f("b1", b1), f("w2", w2), f("b2", b2);
  }
};

// Independent generator heads, one per task-level negative prototype.
struct NpGeneratorBank {
  std::vector<Generator> generators;
  Activation activation = Activation::kTanh;

  static NpGeneratorBank init(int count, Eigen::Index d, Rng& rng) {
    if (count < 1) throw ParameterError("NpGeneratorBank: need at least one generator");
    NpGeneratorBank bank;
    for (int k = 0; k < count; ++k) {
      Rng r = rng.split(static_cast<std::uint64_t>(k));
      bank.generators.push_back(Generator::init(d, r));
    }
    return bank;
  }

  [[nodiscard]] int size() const { return static_cast<int>(generators.size()); }

  template <class F>
  void for_each_param(F&& f) {
    for (std::size_t k = 0; k < generators.size(); ++k) {
      generators[k].for_each_param([&](const char* name, Matrix& m) { f("gen" + std::to_string(k) + "/" + name, m); });
    }
  }
  template <class F>
  void for_each_param(F&& f) const {
    for (std::size_t k = 0; k < generators.size(); ++k) {
      generators[k].for_each_param([&](const char* name, const Matrix& m) { f("gen" + std::to_string(k) + "/" + name, m); });
    }
  }
};

inline ad::Var apply_generator(ad::Tape& tape, const Generator& g, ad::Var x, Activation act) {
  ad::Var h = activate(ad::add_row(ad::matmul(x, tape.parameter(g.w1)), tape.parameter(g.b1)), act);
  return ad::add_row(ad::matmul(h, tape.parameter(g.w2)), tape.parameter(g.b2));
}

// P^- = softmax(A) (O V_o): each known class borrows the open weights of the
// base classes it attends to. The only dependence on the support set is
// through the attention weights.
inline ad::Var generate_class_nps(ad::Tape& tape, ad::Var attention_weights, const OpenWeightBank& bank, const Matrix& vo) {
  if (!bank.trained) throw ContractError("generate_class_nps: open weights are untrained");
  if (attention_weights.cols() != bank.weights.rows()) throw ShapeError("generate_class_nps: attention columns != base classes");
  if (vo.rows() != bank.weights.cols() || vo.cols() != bank.weights.cols()) throw ShapeError("generate_class_nps: V_o must be d x d");
  return ad::matmul(attention_weights, ad::matmul(tape.parameter(bank.weights), tape.parameter(vo)));
}

inline Matrix generate_class_nps(const Matrix& attention_weights, const OpenWeightBank& bank, const Matrix& vo) {
  ad::Tape tape;
  return generate_class_nps(tape, tape.constant(attention_weights), bank, vo).value();
}

struct TaskNpVars {
  ad::Var average;  // 1 x d
  ad::Var nps;      // N_g x d
};

// p_avg = mean of the source rows; p_k = f_k(p_avg).
inline TaskNpVars generate_task_nps(ad::Tape& tape, ad::Var sources, const NpGeneratorBank& bank) {
  if (bank.generators.empty()) throw ParameterError("generate_task_nps: empty generator bank");
  for (const auto& g : bank.generators) {
    if (g.w1.rows() != sources.cols() || g.w2.cols() != sources.cols()) throw ShapeError("generate_task_nps: generator dimension mismatch");
  }
  ad::Var avg = ad::mean_rows(sources);
  ad::Var nps = apply_generator(tape, bank.generators[0], avg, bank.activation);
  for (std::size_t k = 1; k < bank.generators.size(); ++k) {
    nps = ad::vstack(nps, apply_generator(tape, bank.generators[k], avg, bank.activation));
  }
  return {avg, nps};
}

struct TaskNegatives {
  Matrix nps;
  RowVector average;
};

inline TaskNegatives generate_task_nps(const Matrix& class_nps, const NpGeneratorBank& bank) {
  ad::Tape tape;
  auto out = generate_task_nps(tape, tape.constant(class_nps), bank);
  return {out.nps.value(), out.average.value()};
}

// Binary cross-entropy on the per-class negatives: for class j the NP should
// score low (target 0) on class-j known queries and high (target 1) on the
// pseudo-unknown queries. The probability is sigmoid(s2(q, P_j^-)).
//
//   L = sum_j [ mean_{q in Q_k^j} softplus(z_qj) + mean_{q in Q_u} softplus(-z_qj) ]
inline ad::Var negative_bce_loss(ad::Tape& tape, ad::Var class_nps, ad::Var known_queries, const std::vector<int>& known_ways,
                                 ad::Var unknown_queries, const SimilarityHead& head) {
  const Eigen::Index n = class_nps.rows();
  if (known_queries.rows() == 0 || unknown_queries.rows() == 0) throw ContractError("negative_bce_loss: empty query set");
  if (static_cast<Eigen::Index>(known_ways.size()) != known_queries.rows()) throw ShapeError("negative_bce_loss: one way label per known query");
  std::vector<int> per_class(static_cast<std::size_t>(n), 0);
  for (int w : known_ways) {
    if (w < 0 || w >= n) throw ShapeError("negative_bce_loss: way label out of range");
    ++per_class[static_cast<std::size_t>(w)];
  }
  for (int c : per_class) {
    if (c == 0) throw ContractError("negative_bce_loss: a class has no known queries");
  }
  Matrix known_weights(known_queries.rows(), 1);
  for (Eigen::Index i = 0; i < known_queries.rows(); ++i) {
    known_weights(i, 0) = 1.0 / per_class[static_cast<std::size_t>(known_ways[static_cast<std::size_t>(i)])];
  }
  ad::Var z_known = ad::pick(np_logits(tape, known_queries, class_nps, head), known_ways);
  ad::Var known_term = ad::weighted_sum(ad::softplus(z_known), known_weights);
  ad::Var z_unknown = np_logits(tape, unknown_queries, class_nps, head);
  ad::Var unknown_term = ad::scale(ad::sum(ad::softplus(ad::scale(z_unknown, -1.0))),
                                   1.0 / static_cast<double>(unknown_queries.rows()));
  return ad::add(known_term, unknown_term);
}

}  // namespace dnpg
