#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/checkpoint.hpp"
#include "dnpg/datagen.hpp"
#include "dnpg/error.hpp"
#include "dnpg/rng.hpp"

namespace dnpg {

struct EncoderConfig {
  int input_dim = 16;
  int hidden_dim = 64;
  int embed_dim = 64;
};

namespace detail {

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * rng.normal();
  }
  return m;
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite entries");
}

}  // namespace detail

// Two tanh hidden layers and a bias-free linear output layer:
//   embed(x) = tanh(tanh(x W0 + b0) W1 + b1) W2
struct Encoder {
  Matrix w0, b0, w1, b1, w2;

  static Encoder init(const EncoderConfig& cfg, Rng& rng) {
    if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.embed_dim < 1) throw ParameterError("Encoder: sizes must be positive");
    Encoder e;
    e.w0 = detail::gaussian(cfg.input_dim, cfg.hidden_dim, 1.0 / std::sqrt(cfg.input_dim), rng);
    e.b0 = Matrix::Zero(1, cfg.hidden_dim);
    e.w1 = detail::gaussian(cfg.hidden_dim, cfg.hidden_dim, 1.0 / std::sqrt(cfg.hidden_dim), rng);
    e.b1 = Matrix::Zero(1, cfg.hidden_dim);
    e.w2 = detail::gaussian(cfg.hidden_dim, cfg.embed_dim, 1.0 / std::sqrt(cfg.hidden_dim), rng);
    return e;
  }

  [[nodiscard]] Eigen::Index input_dim() const { return w0.rows(); }
  [[nodiscard]] Eigen::Index embed_dim() const { return w2.cols(); }

  template <class F>
  void for_each_param(F&& f) {
    f("w0", w0), f("b0", b0), f("w1", w1), f("b1", b1), f("w2", w2);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("w0", w0), f("b0", b0), f("w1", w1), f("b1", b1), f("w2", w2);
  }

  void export_to(TensorMap& out, const std::string& prefix = "encoder/") const {
    for_each_param([&](const char* name, const Matrix& m) { out[prefix + name] = m; });
  }
  static Encoder import_from(const Checkpoint& ck, const std::string& prefix = "encoder/") {
    Encoder e;
    e.for_each_param([&](const char* name, Matrix& m) { m = ck.at(prefix + name); });
    return e;
  }

  bool operator==(const Encoder& o) const {
    return w0 == o.w0 && b0 == o.b0 && w1 == o.w1 && b1 == o.b1 && w2 == o.w2;
  }
};

inline ad::Var encode(ad::Tape& tape, const Encoder& enc, ad::Var inputs) {
  if (inputs.cols() != enc.input_dim()) {
    throw ShapeError("embed: input dimension " + std::to_string(inputs.cols()) + ", encoder expects " +
                     std::to_string(enc.input_dim()));
  }
  ad::Var h = ad::tanh(ad::add_row(ad::matmul(inputs, tape.parameter(enc.w0)), tape.parameter(enc.b0)));
  h = ad::tanh(ad::add_row(ad::matmul(h, tape.parameter(enc.w1)), tape.parameter(enc.b1)));
  return ad::matmul(h, tape.parameter(enc.w2));
}

// Batch embedding with no gradient bookkeeping; row order preserved.
inline Matrix embed(const Encoder& enc, const Matrix& inputs) {
  if (inputs.cols() != enc.input_dim()) {
    throw ShapeError("embed: input dimension " + std::to_string(inputs.cols()) + ", encoder expects " +
                     std::to_string(enc.input_dim()));
  }
  detail::require_finite(inputs, "embed");
  Matrix h = ((inputs * enc.w0).rowwise() + enc.b0.row(0)).array().tanh();
  h = ((h * enc.w1).rowwise() + enc.b1.row(0)).array().tanh();
  return h * enc.w2;
}

// Linear classifier over embeddings; its weight rows become the base weights P*.
struct LinearHead {
  Matrix weight;  // classes x d
  Matrix bias;    // 1 x classes
};

struct PretrainConfig {
  int epochs = 20;
  double lr = 0.1;
  int batch_size = 64;
  // Learning rate is multiplied by lr_decay at decay_epoch (no decay if < 0).
  int decay_epoch = -1;
  double lr_decay = 0.1;
};

struct PretrainResult {
  Encoder encoder;
  Matrix base_weights;
  std::vector<double> epoch_losses;
  double train_accuracy = 0.0;
};

// Mean cross-entropy of the linear head over a batch.
inline ad::Var pretrain_loss(ad::Tape& tape, const Encoder& enc, const LinearHead& head, const Matrix& inputs,
                             const std::vector<int>& labels) {
  ad::Var v = encode(tape, enc, tape.constant(inputs));
  ad::Var logits = ad::add_row(ad::matmul(v, ad::transpose(tape.parameter(head.weight))), tape.parameter(head.bias));
  return ad::scale(ad::mean(ad::pick(ad::row_log_softmax(logits), labels)), -1.0);
}

inline double head_accuracy(const Encoder& enc, const LinearHead& head, const Matrix& inputs, const std::vector<int>& labels) {
  Matrix logits = (embed(enc, inputs) * head.weight.transpose()).rowwise() + head.bias.row(0);
  auto pred = ad::row_argmax(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Supervised pretraining of encoder + linear head on the base classes with
// mini-batch SGD. Base class k of the result corresponds to base_classes[k].
inline PretrainResult pretrain(Encoder encoder, const Dataset& data, std::span<const int> base_classes,
                               const PretrainConfig& cfg, Rng& rng) {
  if (base_classes.size() < 2) throw ParameterError("pretrain: need at least 2 base classes");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ParameterError("pretrain: invalid schedule");
  const auto ids = data.all_samples(base_classes);
  const Matrix inputs = data.inputs(ids);
  std::vector<int> labels;
  labels.reserve(ids.size());
  for (const auto& id : ids) {
    labels.push_back(static_cast<int>(std::find(base_classes.begin(), base_classes.end(), id.class_id) - base_classes.begin()));
  }
  Rng init_rng = rng.split(0);
  LinearHead head{detail::gaussian(static_cast<Eigen::Index>(base_classes.size()), encoder.embed_dim(),
                                   1.0 / std::sqrt(static_cast<double>(encoder.embed_dim())), init_rng),
                  Matrix::Zero(1, static_cast<Eigen::Index>(base_classes.size()))};
  PretrainResult result;
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  double lr = cfg.lr;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch == cfg.decay_epoch) lr *= cfg.lr_decay;
    Rng epoch_rng = rng.split(1000 + static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Matrix batch(static_cast<Eigen::Index>(end - start), inputs.cols());
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.row(static_cast<Eigen::Index>(i - start)) = inputs.row(static_cast<Eigen::Index>(order[i]));
        batch_labels.push_back(labels[order[i]]);
      }
      ad::Tape tape;
      ad::Var loss = pretrain_loss(tape, encoder, head, batch, batch_labels);
      if (!std::isfinite(loss.scalar())) {
        throw TrainingError("pretrain: loss became non-finite at epoch " + std::to_string(epoch) + " (lr=" +
                            std::to_string(lr) + ")");
      }
      tape.backward(loss);
      encoder.for_each_param([&](const char*, Matrix& m) { m -= lr * tape.gradient(m); });
      head.weight -= lr * tape.gradient(head.weight);
      head.bias -= lr * tape.gradient(head.bias);
      total += loss.scalar();
      ++batches;
    }
    result.epoch_losses.push_back(total / static_cast<double>(batches));
  }
  result.train_accuracy = head_accuracy(encoder, head, inputs, labels);
  result.encoder = std::move(encoder);
  result.base_weights = head.weight;
  return result;
}

}  // namespace dnpg
