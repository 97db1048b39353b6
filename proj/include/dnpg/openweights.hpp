#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/datagen.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/error.hpp"
#include "dnpg/rng.hpp"

namespace dnpg {

// One open weight (reciprocal point) per base class: an anchor for the region
// of embedding space outside that class.
struct OpenWeightBank {
  Matrix weights;  // base classes x d
  bool trained = false;
};

inline OpenWeightBank init_open_weights(Eigen::Index classes, Eigen::Index dim, Rng& rng, double stddev = 0.01) {
  return {detail::gaussian(classes, dim, stddev, rng), false};
}

// Reverse-classification logits: the Euclidean distance to every open weight.
inline ad::Var rpl_logits(ad::Var embeddings, ad::Var open_weights) {
  return ad::sqrt(ad::sq_distances(embeddings, open_weights));
}

// Probability over base classes, proportional to exp(distance to O_j).
inline RowVector rpl_probability(const RowVector& embedding, const OpenWeightBank& bank) {
  if (!embedding.allFinite()) throw NumericError("rpl_probability: non-finite embedding");
  if (bank.weights.rows() == 0) throw ContractError("rpl_probability: empty open-weight bank");
  if (embedding.size() != bank.weights.cols()) throw ShapeError("rpl_probability: dimension mismatch");
  RowVector logits = (bank.weights.rowwise() - embedding).rowwise().norm().transpose();
  const double m = logits.maxCoeff();
  RowVector p = (logits.array() - m).exp();
  return p / p.sum();
}

// Mean cross-entropy of the reverse classifier against the true base label.
inline ad::Var rpl_loss(ad::Tape& tape, const Matrix& embeddings, const OpenWeightBank& bank, const std::vector<int>& labels) {
  ad::Var logits = rpl_logits(tape.constant(embeddings), tape.parameter(bank.weights));
  return ad::scale(ad::mean(ad::pick(ad::row_log_softmax(logits), labels)), -1.0);
}

struct OpenWeightConfig {
  int epochs = 20;
  double lr = 0.5;
  int batch_size = 128;
  double init_stddev = 0.01;
};

// Learns the open weights with the encoder frozen. Only the bank is updated;
// the encoder is taken by const reference and only used to embed once.
inline OpenWeightBank train_open_weights(const Encoder& encoder, const Dataset& data, std::span<const int> base_classes,
                                         const OpenWeightConfig& cfg, Rng& rng) {
  if (base_classes.empty()) throw ParameterError("train_open_weights: no base classes");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ParameterError("train_open_weights: invalid schedule");
  const auto ids = data.all_samples(base_classes);
  const Matrix embeddings = embed(encoder, data.inputs(ids));
  std::vector<int> labels;
  labels.reserve(ids.size());
  for (const auto& id : ids) {
    labels.push_back(static_cast<int>(std::find(base_classes.begin(), base_classes.end(), id.class_id) - base_classes.begin()));
  }
  Rng init_rng = rng.split(0);
  OpenWeightBank bank = init_open_weights(static_cast<Eigen::Index>(base_classes.size()), encoder.embed_dim(), init_rng,
                                          cfg.init_stddev);
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = rng.split(1000 + static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Matrix batch(static_cast<Eigen::Index>(end - start), embeddings.cols());
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.row(static_cast<Eigen::Index>(i - start)) = embeddings.row(static_cast<Eigen::Index>(order[i]));
        batch_labels.push_back(labels[order[i]]);
      }
      ad::Tape tape;
      ad::Var loss = rpl_loss(tape, batch, bank, batch_labels);
      if (!std::isfinite(loss.scalar())) {
        throw TrainingError("train_open_weights: loss became non-finite at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      bank.weights -= cfg.lr * tape.gradient(bank.weights);
    }
  }
  bank.trained = true;
  return bank;
}

inline Matrix row_cosine_matrix(const Matrix& rows) {
  Eigen::VectorXd norms = rows.rowwise().norm().cwiseMax(ad::kNormEpsilon);
  Matrix n = rows.array().colwise() / norms.array();
  return n * n.transpose();
}

struct SimilarityHeatmaps {
  Matrix base_weight_cosine;   // among P* rows
  Matrix open_weight_cosine;   // among O rows
};

inline SimilarityHeatmaps open_weight_similarity_heatmaps(const OpenWeightBank& bank, const Matrix& base_weights) {
  if (bank.weights.rows() != base_weights.rows() || bank.weights.cols() != base_weights.cols()) {
    throw ShapeError("open_weight_similarity_heatmaps: bank and base weights differ in shape");
  }
  return {row_cosine_matrix(base_weights), row_cosine_matrix(bank.weights)};
}

// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: need two equal-length samples of size >= 2");
  auto ra = average_ranks(a);
  auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Spearman correlation between the strict upper triangles of two square matrices.
inline double upper_triangle_spearman(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || a.rows() != b.rows() || b.rows() != b.cols()) throw ShapeError("upper_triangle_spearman: shape mismatch");
  std::vector<double> va, vb;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
      va.push_back(a(i, j));
      vb.push_back(b(i, j));
    }
  }
  return spearman(va, vb);
}

}  // namespace dnpg
