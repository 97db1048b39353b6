#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/calibration.hpp"
#include "dnpg/checkpoint.hpp"
#include "dnpg/datagen.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/error.hpp"
#include "dnpg/npgen.hpp"
#include "dnpg/openweights.hpp"
#include "dnpg/rng.hpp"
#include "dnpg/similarity.hpp"
#include "dnpg/swapalign.hpp"

namespace dnpg {

// Which components are active. Valid combinations are the ablation ladder
//   baseline -> +rpc -> +mng -> +ct -> +sa
// with the equipartition regularizer optionally added once mng is on.
struct AblationFlags {
  bool rpc = true;
  bool mng = true;
  bool ct = true;
  bool sa = true;
  bool ec = false;

  bool operator==(const AblationFlags&) const = default;
};

// Name of the ablation row the flags describe; throws ConfigError for
// combinations outside the ladder.
inline std::string ablation_row(const AblationFlags& f) {
  std::string name;
  if (!f.rpc && !f.mng && !f.ct && !f.sa) {
    name = "baseline";
  } else if (f.rpc && !f.mng && !f.ct && !f.sa) {
    name = "baseline+rpc";
  } else if (f.rpc && f.mng && !f.ct && !f.sa) {
    name = "baseline+rpc+mng";
  } else if (f.rpc && f.mng && f.ct && !f.sa) {
    name = "baseline+rpc+mng+ct";
  } else if (f.rpc && f.mng && f.ct && f.sa) {
    name = "dnpg";
  } else {
    throw ConfigError("ablation flags do not form a valid configuration (need rpc <= mng <= ct <= sa)");
  }
  if (f.ec) {
    if (!f.mng) throw ConfigError("ablation flags: ec requires mng");
    name += "+ec";
  }
  return name;
}

struct ModelConfig {
  int num_generators = 5;
  double tau1 = 0.1;
  double tau2 = 0.1;
  double gcn_self_weight = 0.5;
  double rpc_init_stddev = 0.1;
  // W^q and W^k start near this multiple of I; see CalibrationParams::init.
  double rpc_identity_scale = 9.0;
};

struct DnpgModel {
  Encoder encoder;
  Matrix base_weights;  // P*, one row per base class
  OpenWeightBank open_weights;
  CalibrationParams rpc;
  Matrix vo;  // value projection of the NP branch
  NpGeneratorBank generators;
  GraphPropagator propagator;
  SimilarityHead head;
  AblationFlags flags;

  static DnpgModel assemble(Encoder encoder, Matrix base_weights, OpenWeightBank open_weights, const ModelConfig& cfg,
                            const AblationFlags& flags, Rng& rng) {
    ablation_row(flags);
    const Eigen::Index d = encoder.embed_dim();
    if (base_weights.cols() != d || open_weights.weights.cols() != d || base_weights.rows() != open_weights.weights.rows()) {
      throw ShapeError("DnpgModel: base weights, open weights and encoder disagree on shape");
    }
    DnpgModel m;
    m.encoder = std::move(encoder);
    m.base_weights = std::move(base_weights);
    m.open_weights = std::move(open_weights);
    Rng r_rpc = rng.split(1), r_gen = rng.split(2), r_sa = rng.split(3);
    m.rpc = CalibrationParams::init(d, r_rpc, cfg.rpc_init_stddev, cfg.rpc_identity_scale);
    m.vo = Matrix::Identity(d, d);
    m.generators = NpGeneratorBank::init(cfg.num_generators, d, r_gen);
    m.propagator = GraphPropagator::init(d, r_sa, cfg.gcn_self_weight);
    m.head = SimilarityHead::make(cfg.tau1, cfg.tau2);
    m.flags = flags;
    return m;
  }

  // Parameters updated by meta-training at the module learning rate.
  template <class F>
  void for_each_meta_param(F&& f) {
    if (flags.rpc) rpc.for_each_param([&](const auto& n, Matrix& m) { f(std::string("rpc/") + n, m); });
    if (flags.mng) f(std::string("mng/vo"), vo);
    generators.for_each_param([&](const std::string& n, Matrix& m) { f("mng/" + n, m); });
    if (flags.sa) propagator.for_each_param([&](const auto& n, Matrix& m) { f(std::string("sa/") + n, m); });
    head.for_each_param([&](const auto& n, Matrix& m) { f(std::string("head/") + n, m); });
  }

  void export_to(TensorMap& out) const {
    encoder.export_to(out, "encoder/");
    out["base_weights"] = base_weights;
    out["open_weights"] = open_weights.weights;
    rpc.for_each_param([&](const auto& n, const Matrix& m) { out[std::string("rpc/") + n] = m; });
    out["mng/vo"] = vo;
    generators.for_each_param([&](const std::string& n, const Matrix& m) { out["mng/" + n] = m; });
    propagator.for_each_param([&](const auto& n, const Matrix& m) { out[std::string("sa/") + n] = m; });
    head.for_each_param([&](const auto& n, const Matrix& m) { out[std::string("head/") + n] = m; });
  }

  // Inverse of export_to; shapes and settings not stored as tensors
  // (flags, generator count, graph weight, tau1) come from the caller.
  static DnpgModel import_from(const Checkpoint& ck, const ModelConfig& cfg, const AblationFlags& flags) {
    DnpgModel m;
    m.encoder = Encoder::import_from(ck, "encoder/");
    m.base_weights = ck.at("base_weights");
    m.open_weights = {ck.at("open_weights"), true};
    m.rpc.for_each_param([&](const auto& n, Matrix& x) { x = ck.at(std::string("rpc/") + n); });
    m.vo = ck.at("mng/vo");
    m.generators.generators.resize(static_cast<std::size_t>(cfg.num_generators));
    m.generators.for_each_param([&](const std::string& n, Matrix& x) { x = ck.at("mng/" + n); });
    m.propagator.self_weight = cfg.gcn_self_weight;
    m.propagator.for_each_param([&](const auto& n, Matrix& x) { x = ck.at(std::string("sa/") + n); });
    m.head.tau1 = cfg.tau1;
    m.head.for_each_param([&](const auto& n, Matrix& x) { x = ck.at(std::string("head/") + n); });
    m.flags = flags;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Scores and losses of one task.

// Mean (N+1)-way cross-entropy; label N is the unknown slot.
inline ad::Var episode_cross_entropy(ad::Var logits, const std::vector<int>& labels) {
  if (!logits.value().allFinite()) throw NumericError("episode_cross_entropy: non-finite logits");
  for (int l : labels) {
    if (l < 0 || l >= logits.cols()) throw ShapeError("episode_cross_entropy: label out of range");
  }
  return ad::scale(ad::mean(ad::pick(ad::row_log_softmax(logits), labels)), -1.0);
}

// KL between the batch-mean soft NP assignment and the uniform distribution.
inline ad::Var equipartition_regularizer(ad::Var assignment_scores) {
  if (assignment_scores.cols() < 2) throw ParameterError("equipartition_regularizer: needs at least 2 NPs");
  return ad::kl_to_uniform(ad::mean_rows(ad::row_softmax(assignment_scores)));
}

// s1 scores of one query against every prototype.
inline RowVector known_scores(const RowVector& query, const Matrix& prototypes, const SimilarityHead& head) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  return known_logits(tape.constant(query), tape.constant(prototypes), head).value();
}

struct UnknownScore {
  double score = 0.0;
  int best_np = 0;
};

// max_k s2(q, p_k); the arg max is kept for utilization accounting.
inline UnknownScore unknown_score(const RowVector& query, const Matrix& nps, const SimilarityHead& head) {
  if (nps.rows() < 1) throw ParameterError("unknown_score: need at least one NP");
  ad::Tape tape;
  tape.set_grad_enabled(false);
  Matrix s = np_logits(tape, tape.constant(query), tape.constant(nps), head).value();
  const int k = static_cast<int>(ad::row_argmax(s)[0]);
  return {s(0, k), k};
}

struct TaskVars {
  ad::Var raw_prototypes;
  ad::Var prototypes;  // calibrated when rpc is on
  ad::Var attention;  // row softmax; invalid when rpc is off
  ad::Var class_nps;  // invalid when mng is off
  ad::Var task_nps;
  ad::Var np_scores;  // (known + unknown queries) x N_g, s2 values
  ad::Var logits;     // (known + unknown queries) x (N + 1)
  std::vector<int> labels;
  ad::Var ce;
  ad::Var neg;
  ad::Var ec;
};

// Forward pass of one task given its embedded support and query rows.
// `base` is the row-normalized P*.
inline TaskVars forward_task(ad::Tape& tape, const DnpgModel& model, ad::Var base, ad::Var support, ad::Var known,
                             ad::Var unknown, int ways, int shots, const std::vector<int>& known_ways) {
  const AblationFlags& f = model.flags;
  TaskVars t;
  t.raw_prototypes = raw_prototypes(support, ways, shots);
  t.prototypes = t.raw_prototypes;
  if (f.rpc) {
    ad::Var a = attention_scores(tape, ad::normalize_rows(t.raw_prototypes), base, model.rpc);
    t.attention = ad::row_softmax(a);
    t.prototypes = calibrate(tape, t.raw_prototypes, t.attention, base, model.rpc);
  }
  ad::Var sources = t.raw_prototypes;
  if (f.mng) {
    t.class_nps = generate_class_nps(tape, t.attention, model.open_weights, model.vo);
    sources = t.class_nps;
  }
  t.task_nps = generate_task_nps(tape, sources, model.generators).nps;

  ad::Var queries = ad::vstack(known, unknown);
  t.np_scores = np_logits(tape, queries, t.task_nps, model.head);
  t.logits = ad::hstack(known_logits(queries, t.prototypes, model.head), ad::row_max(t.np_scores));
  t.labels = known_ways;
  t.labels.insert(t.labels.end(), static_cast<std::size_t>(unknown.rows()), ways);
  t.ce = episode_cross_entropy(t.logits, t.labels);
  t.neg = f.mng ? negative_bce_loss(tape, t.class_nps, known, known_ways, unknown, model.head) : tape.constant(Matrix::Zero(1, 1));
  if (f.ec && model.generators.size() >= 2) {
    t.ec = equipartition_regularizer(ad::slice_rows(t.np_scores, known.rows(), unknown.rows()));
  } else {
    t.ec = tape.constant(Matrix::Zero(1, 1));
  }
  return t;
}

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;  // equipartition weight, used only when ec is on
};

// Loss terms summed over the tasks of one training step, and
//   total = l_ce + alpha l_neg + beta l_align + gamma l_ec.
struct LossBundle {
  double l_ce = 0.0;
  double l_neg = 0.0;
  double l_align = 0.0;
  double l_ec = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  double total = 0.0;

  [[nodiscard]] double recomputed_total() const { return l_ce + alpha * l_neg + beta * l_align + gamma * l_ec; }
};

struct StepVars {
  ad::Var total;
  ad::Var l_ce, l_neg, l_align, l_ec;
  std::vector<TaskVars> tasks;
  LossBundle bundle;
};

namespace detail {

inline StepVars combine(ad::Tape& tape, std::vector<TaskVars> tasks, ad::Var l_align, const LossWeights& w, bool ec_on) {
  StepVars s;
  s.l_ce = tasks[0].ce;
  s.l_neg = tasks[0].neg;
  s.l_ec = tasks[0].ec;
  for (std::size_t i = 1; i < tasks.size(); ++i) {
    s.l_ce = ad::add(s.l_ce, tasks[i].ce);
    s.l_neg = ad::add(s.l_neg, tasks[i].neg);
    s.l_ec = ad::add(s.l_ec, tasks[i].ec);
  }
  s.l_align = l_align.valid() ? l_align : tape.constant(Matrix::Zero(1, 1));
  const double gamma = ec_on ? w.gamma : 0.0;
  s.total = ad::add(ad::add(ad::add(s.l_ce, ad::scale(s.l_neg, w.alpha)), ad::scale(s.l_align, w.beta)),
                    ad::scale(s.l_ec, gamma));
  s.bundle = {s.l_ce.scalar(), s.l_neg.scalar(), s.l_align.scalar(), s.l_ec.scalar(), w.alpha, w.beta, gamma, s.total.scalar()};
  s.tasks = std::move(tasks);
  return s;
}

inline void bind_encoder(ad::Tape& tape, const DnpgModel& model, bool train_encoder) {
  if (!train_encoder) model.encoder.for_each_param([&](const char*, const Matrix& m) { tape.freeze(m); });
  tape.freeze(model.base_weights);
  tape.freeze(model.open_weights.weights);
}

inline ad::Var normalized_base(ad::Tape& tape, const DnpgModel& model) {
  Eigen::VectorXd norms = model.base_weights.rowwise().norm().cwiseMax(ad::kNormEpsilon);
  return tape.constant(model.base_weights.array().colwise() / norms.array());
}

}  // namespace detail

// Loss of a single task (training without conjugate pairs).
inline StepVars episode_loss(ad::Tape& tape, const DnpgModel& model, const Dataset& data, const Episode& ep,
                             const LossWeights& w, bool train_encoder) {
  detail::bind_encoder(tape, model, train_encoder);
  std::vector<SampleId> ids = ep.support;
  ids.insert(ids.end(), ep.known_queries.begin(), ep.known_queries.end());
  ids.insert(ids.end(), ep.unknown_queries.begin(), ep.unknown_queries.end());
  ad::Var v = encode(tape, model.encoder, tape.constant(data.inputs(ids)));
  const auto ns = static_cast<Eigen::Index>(ep.support.size());
  const auto nk = static_cast<Eigen::Index>(ep.known_queries.size());
  const auto nu = static_cast<Eigen::Index>(ep.unknown_queries.size());
  ad::Var base = detail::normalized_base(tape, model);
  std::vector<TaskVars> tasks;
  tasks.push_back(forward_task(tape, model, base, ad::slice_rows(v, 0, ns), ad::slice_rows(v, ns, nk),
                               ad::slice_rows(v, ns + nk, nu), ep.ways, ep.shots, ep.known_query_ways()));
  return detail::combine(tape, std::move(tasks), ad::Var{}, w, model.flags.ec);
}

// L = L_T1 + L_T2 over a conjugate pair; each task's known queries are the
// other's pseudo-unknown queries. With sa on, each task adds the alignment of
// its NPs with the other task's prototypes after graph propagation.
inline StepVars pair_loss(ad::Tape& tape, const DnpgModel& model, const Dataset& data, const ConjugatePair& pair,
                          const LossWeights& w, bool train_encoder) {
  detail::bind_encoder(tape, model, train_encoder);
  const Episode& t1 = pair.task1;
  const Episode& t2 = pair.task2;
  std::vector<SampleId> ids = t1.support;
  ids.insert(ids.end(), t2.support.begin(), t2.support.end());
  ids.insert(ids.end(), t1.known_queries.begin(), t1.known_queries.end());
  ids.insert(ids.end(), t2.known_queries.begin(), t2.known_queries.end());
  ad::Var v = encode(tape, model.encoder, tape.constant(data.inputs(ids)));
  const auto ns = static_cast<Eigen::Index>(t1.support.size());
  const auto nq = static_cast<Eigen::Index>(t1.known_queries.size());
  ad::Var s1 = ad::slice_rows(v, 0, ns), s2 = ad::slice_rows(v, ns, ns);
  ad::Var q1 = ad::slice_rows(v, 2 * ns, nq), q2 = ad::slice_rows(v, 2 * ns + nq, nq);
  ad::Var base = detail::normalized_base(tape, model);
  std::vector<TaskVars> tasks;
  tasks.push_back(forward_task(tape, model, base, s1, q1, q2, t1.ways, t1.shots, t1.known_query_ways()));
  tasks.push_back(forward_task(tape, model, base, s2, q2, q1, t2.ways, t2.shots, t2.known_query_ways()));
  ad::Var align;
  if (model.flags.sa) {
    // Each task's prototypes and NPs go through the graph layer together and
    // the alignment pairs one task's propagated NPs with the other's propagated
    // prototypes. Scoring keeps the unpropagated sets.
    auto a1 = propagate(tape, ad::normalize_rows(tasks[0].prototypes), ad::normalize_rows(tasks[0].task_nps), model.propagator);
    auto a2 = propagate(tape, ad::normalize_rows(tasks[1].prototypes), ad::normalize_rows(tasks[1].task_nps), model.propagator);
    align = ad::add(alignment_loss(a1.nps, a2.prototypes), alignment_loss(a2.nps, a1.prototypes));
  }
  return detail::combine(tape, std::move(tasks), align, w, model.flags.ec);
}

// ---------------------------------------------------------------------------
// Meta-training.

struct MetaTrainConfig {
  int steps = 3000;
  double lr = 0.05;
  // Encoder learning rate as a fraction of lr; 0 keeps the encoder frozen.
  double encoder_lr_ratio = 0.002;
  LossWeights weights;
  int ways = 5;
  int shots = 1;
  int queries = 15;
};

struct LossTraceRow {
  int step = 0;
  LossBundle losses;
};

struct MetaTrainResult {
  DnpgModel model;
  std::vector<LossTraceRow> trace;
};

// One SGD step per training unit: a conjugate pair when ct is on, otherwise a
// single task with N known and N pseudo-unknown base classes.
inline MetaTrainResult meta_train(DnpgModel model, const Dataset& data, const ClassSplit& split, const MetaTrainConfig& cfg,
                                  Rng& rng) {
  if (!model.open_weights.trained && model.flags.mng) throw ContractError("meta_train: open weights must be trained first");
  if (cfg.steps < 0 || !(cfg.lr >= 0.0) || !(cfg.encoder_lr_ratio >= 0.0)) throw ParameterError("meta_train: invalid schedule");
  if (cfg.weights.alpha < 0.0 || cfg.weights.beta < 0.0) throw ParameterError("meta_train: alpha and beta must be >= 0");
  const bool train_encoder = cfg.encoder_lr_ratio > 0.0;
  MetaTrainResult result;
  result.trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    Rng step_rng = rng.split(static_cast<std::uint64_t>(step));
    ad::Tape tape;
    StepVars s;
    if (model.flags.ct) {
      auto pair = sample_conjugate_pair(data, split, cfg.ways, cfg.shots, cfg.queries, step_rng);
      s = pair_loss(tape, model, data, pair, cfg.weights, train_encoder);
    } else {
      auto ep = sample_episode(data, split, EpisodeMode::kMetaTrain, cfg.ways, cfg.shots, cfg.queries, step_rng);
      s = episode_loss(tape, model, data, ep, cfg.weights, train_encoder);
    }
    if (!std::isfinite(s.bundle.total)) {
      throw TrainingError("meta_train: non-finite loss at step " + std::to_string(step) + " (ce=" +
                          std::to_string(s.bundle.l_ce) + ", neg=" + std::to_string(s.bundle.l_neg) +
                          ", align=" + std::to_string(s.bundle.l_align) + ")");
    }
    tape.backward(s.total);
    model.for_each_meta_param([&](const std::string&, Matrix& m) { m -= cfg.lr * tape.gradient(m); });
    if (train_encoder) {
      const double enc_lr = cfg.lr * cfg.encoder_lr_ratio;
      model.encoder.for_each_param([&](const char*, Matrix& m) { m -= enc_lr * tape.gradient(m); });
    }
    result.trace.push_back({step, s.bundle});
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Inference on one task from precomputed embeddings.

struct EpisodeLogits {
  Matrix known;                // queries x N, s1
  Eigen::VectorXd unknown;     // max_k s2
  std::vector<int> best_np;    // arg max_k s2
  Eigen::VectorXd max_np_cosine;
  Matrix task_nps;
  Matrix prototypes;
  Eigen::Index num_known = 0;  // first num_known rows are known queries
};

inline EpisodeLogits score_task(const DnpgModel& model, const Matrix& support, const Matrix& known, const Matrix& unknown,
                                int ways, int shots, const std::vector<int>& known_ways) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  ad::Var base = detail::normalized_base(tape, model);
  TaskVars t = forward_task(tape, model, base, tape.constant(support), tape.constant(known), tape.constant(unknown), ways,
                            shots, known_ways);
  EpisodeLogits out;
  const Matrix& logits = t.logits.value();
  out.known = logits.leftCols(ways);
  out.unknown = logits.col(ways);
  for (auto k : ad::row_argmax(t.np_scores.value())) out.best_np.push_back(static_cast<int>(k));
  Matrix queries(known.rows() + unknown.rows(), known.cols());
  queries << known, unknown;
  out.max_np_cosine = ad::cosine(tape.constant(std::move(queries)), t.task_nps).value().rowwise().maxCoeff();
  out.task_nps = t.task_nps.value();
  out.prototypes = t.prototypes.value();
  out.num_known = known.rows();
  return out;
}

}  // namespace dnpg
