#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "dnpg/datagen.hpp"
#include "dnpg/diagnostics.hpp"
#include "dnpg/engine.hpp"
#include "dnpg/error.hpp"
#include "dnpg/rng.hpp"

namespace dnpg {

// Fraction of known queries whose arg max over the N known-class scores is
// their true way. The unknown slot does not take part.
inline double closed_set_accuracy(const Matrix& known_scores, std::span<const int> labels) {
  if (labels.empty() || known_scores.rows() == 0) throw ContractError("closed_set_accuracy: no known queries");
  if (static_cast<Eigen::Index>(labels.size()) != known_scores.rows()) throw ShapeError("closed_set_accuracy: one label per row required");
  auto pred = ad::row_argmax(known_scores);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// P(unknown-query score > known-query score) + 0.5 P(tie), computed from
// mid-ranks of the pooled scores (Mann-Whitney U). Unknown queries are the
// positive class.
inline double auroc(std::span<const double> known_scores, std::span<const double> unknown_scores) {
  if (known_scores.empty() || unknown_scores.empty()) throw ContractError("auroc: both score sets must be non-empty");
  std::vector<double> pooled(known_scores.begin(), known_scores.end());
  pooled.insert(pooled.end(), unknown_scores.begin(), unknown_scores.end());
  auto ranks = average_ranks(pooled);
  double rank_sum = 0.0;
  for (std::size_t i = known_scores.size(); i < pooled.size(); ++i) rank_sum += ranks[i];
  const double np = static_cast<double>(unknown_scores.size());
  const double nn = static_cast<double>(known_scores.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Probability of the unknown slot under the (N+1)-way softmax of each row.
inline Eigen::VectorXd unknown_probability(const Matrix& known_scores, const Eigen::VectorXd& unknown_scores) {
  if (known_scores.rows() != unknown_scores.size()) throw ShapeError("unknown_probability: one unknown score per row");
  Eigen::VectorXd p(unknown_scores.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double m = std::max(known_scores.row(i).maxCoeff(), unknown_scores(i));
    const double u = std::exp(unknown_scores(i) - m);
    p(i) = u / ((known_scores.row(i).array() - m).exp().sum() + u);
  }
  return p;
}

struct EpisodeRecord {
  int episode = 0;
  double acc = 0.0;    // fraction
  double auroc = 0.0;  // fraction, scored by the max-over-NPs unknown logit
  double softmax_auroc = 0.0;  // fraction, scored by the unknown-slot probability
  int effective_nps = 0;
  std::vector<long long> np_counts;
};

struct MetricsReport {
  double acc_mean = 0.0;  // percent
  std::optional<double> acc_halfwidth;
  double auroc_mean = 0.0;  // percent
  std::optional<double> auroc_halfwidth;
  double softmax_auroc_mean = 0.0;  // percent
  std::optional<double> softmax_auroc_halfwidth;
  int episodes = 0;
  std::vector<long long> np_utilization;
  int utilized_nps = 0;
  SimilaritySummary unknown_np_similarity;
};

// Mean and 95% normal-approximation half-width, both in percent. The
// half-width is absent for a single episode.
inline std::pair<double, std::optional<double>> mean_and_halfwidth(std::span<const double> fractions) {
  const double n = static_cast<double>(fractions.size());
  const double mean = std::accumulate(fractions.begin(), fractions.end(), 0.0) / n;
  if (fractions.size() < 2) return {100.0 * mean, std::nullopt};
  double ss = 0.0;
  for (double v : fractions) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {100.0 * mean, 100.0 * 1.96 * sd / std::sqrt(n)};
}

// Deterministic fold of per-episode records into a report.
inline MetricsReport aggregate(std::span<const EpisodeRecord> records, std::span<const double> unknown_max_cosines) {
  if (records.empty()) throw ContractError("aggregate: no episodes");
  MetricsReport r;
  r.episodes = static_cast<int>(records.size());
  std::vector<double> accs, aurocs, soft;
  r.np_utilization.assign(records.front().np_counts.size(), 0);
  for (const auto& rec : records) {
    accs.push_back(rec.acc);
    aurocs.push_back(rec.auroc);
    soft.push_back(rec.softmax_auroc);
    if (rec.np_counts.size() != r.np_utilization.size()) throw ShapeError("aggregate: inconsistent NP count");
    for (std::size_t k = 0; k < rec.np_counts.size(); ++k) r.np_utilization[k] += rec.np_counts[k];
  }
  std::tie(r.acc_mean, r.acc_halfwidth) = mean_and_halfwidth(accs);
  std::tie(r.auroc_mean, r.auroc_halfwidth) = mean_and_halfwidth(aurocs);
  std::tie(r.softmax_auroc_mean, r.softmax_auroc_halfwidth) = mean_and_halfwidth(soft);
  for (long long c : r.np_utilization) r.utilized_nps += c > 0 ? 1 : 0;
  r.unknown_np_similarity = unknown_similarity_distribution(unknown_max_cosines);
  return r;
}

struct EvalConfig {
  int episodes = 600;
  int ways = 5;
  int shots = 1;
  int queries = 15;
  int workers = 1;
};

struct Evaluation {
  MetricsReport report;
  std::vector<EpisodeRecord> records;
  std::vector<std::vector<double>> unknown_max_cosines;  // per episode
};

// Scores `episodes` test tasks with real unknown classes from the held-out
// pool. Episode e draws from rng.split(e), so the result does not depend on
// the number of workers.
inline Evaluation evaluate(const DnpgModel& model, const Dataset& data, const ClassSplit& split, const EvalConfig& cfg,
                           const Rng& rng, double collapse_threshold = 0.99) {
  if (cfg.episodes < 1) throw ParameterError("evaluate: need at least one episode");
  if (split.novel_classes.size() < static_cast<std::size_t>(cfg.ways) ||
      split.unknown_pool.size() < static_cast<std::size_t>(cfg.ways)) {
    throw SamplingError("evaluate: novel or unknown pool smaller than ways");
  }
  // The encoder is fixed at test time: embed every test sample once.
  std::vector<int> test_classes = split.novel_classes;
  test_classes.insert(test_classes.end(), split.unknown_pool.begin(), split.unknown_pool.end());
  const auto ids = data.all_samples(test_classes);
  const Matrix embedded = embed(model.encoder, data.inputs(ids));
  std::map<SampleId, Eigen::Index> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of.emplace(ids[i], static_cast<Eigen::Index>(i));
  auto gather = [&](const std::vector<SampleId>& s) {
    Matrix m(static_cast<Eigen::Index>(s.size()), embedded.cols());
    for (std::size_t i = 0; i < s.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = embedded.row(row_of.at(s[i]));
    return m;
  };

  Evaluation ev;
  ev.records.resize(static_cast<std::size_t>(cfg.episodes));
  ev.unknown_max_cosines.resize(static_cast<std::size_t>(cfg.episodes));
  const int num_nps = model.generators.size();
  auto run = [&](int e) {
    Rng ep_rng = rng.split(static_cast<std::uint64_t>(e));
    Episode ep = sample_episode(data, split, EpisodeMode::kTest, cfg.ways, cfg.shots, cfg.queries, ep_rng);
    const auto ways = ep.known_query_ways();
    EpisodeLogits lg = score_task(model, gather(ep.support), gather(ep.known_queries), gather(ep.unknown_queries), ep.ways,
                                  ep.shots, ways);
    EpisodeRecord rec;
    rec.episode = e;
    rec.acc = closed_set_accuracy(lg.known.topRows(lg.num_known), ways);
    std::vector<double> ks(lg.unknown.data(), lg.unknown.data() + lg.num_known);
    std::vector<double> us(lg.unknown.data() + lg.num_known, lg.unknown.data() + lg.unknown.size());
    rec.auroc = auroc(ks, us);
    const Eigen::VectorXd p = unknown_probability(lg.known, lg.unknown);
    std::vector<double> pk(p.data(), p.data() + lg.num_known);
    std::vector<double> pu(p.data() + lg.num_known, p.data() + p.size());
    rec.softmax_auroc = auroc(pk, pu);
    rec.np_counts = np_utilization(lg.best_np, num_nps).counts;
    auto& cos = ev.unknown_max_cosines[static_cast<std::size_t>(e)];
    cos.assign(lg.max_np_cosine.data() + lg.num_known, lg.max_np_cosine.data() + lg.max_np_cosine.size());
    rec.effective_nps = collapse_report(lg.task_nps, collapse_threshold).effective_count;
    ev.records[static_cast<std::size_t>(e)] = std::move(rec);
  };
  const int workers = std::max(1, std::min(cfg.workers, cfg.episodes));
  if (workers == 1) {
    for (int e = 0; e < cfg.episodes; ++e) run(e);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    {
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (int e = w; e < cfg.episodes; e += workers) run(e);
          } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
          }
        });
      }
    }
    for (auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }
  std::vector<double> all_cos;
  for (const auto& c : ev.unknown_max_cosines) all_cos.insert(all_cos.end(), c.begin(), c.end());
  ev.report = aggregate(ev.records, all_cos);
  return ev;
}

}  // namespace dnpg
