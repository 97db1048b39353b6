#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dnpg/checkpoint.hpp"
#include "dnpg/config.hpp"
#include "dnpg/datagen.hpp"
#include "dnpg/diagnostics.hpp"
#include "dnpg/encoder.hpp"
#include "dnpg/engine.hpp"
#include "dnpg/error.hpp"
#include "dnpg/eval.hpp"
#include "dnpg/openweights.hpp"

namespace dnpg {

enum class Stage { kPretrain, kOpenWeights, kMetaTrain, kEvaluate, kAll };

inline Stage parse_stage(const std::string& name) {
  if (name == "pretrain") return Stage::kPretrain;
  if (name == "openweights") return Stage::kOpenWeights;
  if (name == "metatrain") return Stage::kMetaTrain;
  if (name == "evaluate") return Stage::kEvaluate;
  if (name == "all") return Stage::kAll;
  throw ConfigError("unknown stage '" + name + "'");
}

// Sub-streams of the run seed, one per stage.
namespace streams {
inline constexpr std::uint64_t kEncoderInit = 0;
inline constexpr std::uint64_t kPretrain = 1;
inline constexpr std::uint64_t kOpenWeights = 2;
inline constexpr std::uint64_t kModelInit = 3;
inline constexpr std::uint64_t kMetaTrain = 4;
inline constexpr std::uint64_t kEvaluate = 5;
}  // namespace streams

// Where each stage reads and writes. Upstream stages can be shared between
// runs (the N_g sweep reuses one pretrain/openweights pair).
struct RunPaths {
  std::filesystem::path dataset, pretrain, openweights, metatrain, evaluate;

  static RunPaths under(const std::filesystem::path& root) {
    return {root / "dataset", root / "pretrain", root / "openweights", root / "metatrain", root / "evaluate"};
  }
};

// Hash of the settings a stage's output depends on, including upstream
// stages. A downstream stage refuses a checkpoint whose hash differs.
inline std::string stage_hash(const RunConfig& c, Stage stage) {
  const nlohmann::json all = canonical_json(c);
  nlohmann::json j;
  j["dataset"] = all["dataset"];
  j["encoder"] = all["encoder"];
  j["pretrain"] = all["pretrain"];
  j["seed"] = all["run"]["seed"];
  if (stage != Stage::kPretrain) j["openweights"] = all["openweights"];
  if (stage == Stage::kMetaTrain || stage == Stage::kEvaluate || stage == Stage::kAll) {
    for (const char* k : {"episode", "model", "ablation", "loss", "metatrain"}) j[k] = all[k];
  }
  if (stage == Stage::kEvaluate || stage == Stage::kAll) j["evaluate"] = all["evaluate"];
  return hex64(fnv1a64(j.dump()));
}

namespace detail {

inline void prepare_output(const std::filesystem::path& dir, bool force) {
  if (std::filesystem::exists(dir)) {
    if (!force) throw ArtifactError(dir.string() + " already exists (pass --force to overwrite)");
    std::filesystem::remove_all(dir);
  }
  std::filesystem::create_directories(dir);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << fmt(m(r, c));
    out << '\n';
  }
}

inline Checkpoint load_stage(const std::filesystem::path& dir, const std::string& expected_hash, const char* stage) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw ArtifactError(std::string("missing ") + stage + " checkpoint in " + dir.string() + " (run that stage first)");
  }
  Checkpoint ck = load_checkpoint(dir);
  if (ck.config_hash != expected_hash) {
    throw ArtifactError(std::string(stage) + " checkpoint in " + dir.string() + " was produced by a different configuration");
  }
  return ck;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace detail

inline Dataset make_dataset(const RunConfig& c) {
  const auto& d = c.dataset;
  return make_synthetic_dataset(d.num_classes, d.dim, d.samples_per_class, d.sigma, d.seed);
}

// The dataset bundle is regenerated from its seed when absent and reused
// otherwise, after checking it matches the configured shape.
inline Dataset ensure_dataset(const RunConfig& c, const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "manifest.json")) {
    Dataset data = load_dataset(dir);
    const auto fresh = detail::read_json_file(dir / "manifest.json");
    if (data.dim() != c.dataset.dim || data.num_classes() != c.dataset.num_classes ||
        fresh.value("seed", std::uint64_t{0}) != c.dataset.seed || fresh.value("sigma", 0.0) != c.dataset.sigma) {
      throw ArtifactError("dataset in " + dir.string() + " does not match the configured dataset");
    }
    return data;
  }
  Dataset data = make_dataset(c);
  save_dataset(data, dir);
  auto manifest = detail::read_json_file(dir / "manifest.json");
  manifest["seed"] = c.dataset.seed;
  manifest["sigma"] = c.dataset.sigma;
  detail::write_json(dir / "manifest.json", manifest);
  return load_dataset(dir);
}

using Log = std::function<void(const std::string&)>;

inline void run_pretrain(const RunConfig& c, const RunPaths& p, bool force, const Log& log) {
  const Dataset data = ensure_dataset(c, p.dataset);
  detail::prepare_output(p.pretrain, force);
  const Rng root(c.seed);
  Rng init_rng = root.split(streams::kEncoderInit);
  Rng train_rng = root.split(streams::kPretrain);
  const ClassSplit split = c.split();
  auto result = pretrain(Encoder::init(c.encoder, init_rng), data, split.base_classes, c.pretrain, train_rng);
  TensorMap t;
  result.encoder.export_to(t, "encoder/");
  t["base_weights"] = result.base_weights;
  save_checkpoint(p.pretrain, t, stage_hash(c, Stage::kPretrain));
  std::ofstream losses(p.pretrain / "losses.csv");
  losses << "epoch,loss\n";
  for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) losses << e << ',' << detail::fmt(result.epoch_losses[e]) << '\n';
  detail::write_json(p.pretrain / "summary.json", {{"config_hash", config_hash(c)}, {"train_accuracy", result.train_accuracy}});
  log("pretrain: train accuracy " + std::to_string(result.train_accuracy));
}

inline void run_openweights(const RunConfig& c, const RunPaths& p, bool force, const Log& log) {
  const Dataset data = load_dataset(p.dataset);
  const Checkpoint pre = detail::load_stage(p.pretrain, stage_hash(c, Stage::kPretrain), "pretrain");
  detail::prepare_output(p.openweights, force);
  Rng rng = Rng(c.seed).split(streams::kOpenWeights);
  const ClassSplit split = c.split();
  const Encoder encoder = Encoder::import_from(pre, "encoder/");
  const OpenWeightBank bank = train_open_weights(encoder, data, split.base_classes, c.openweights, rng);
  save_checkpoint(p.openweights, {{"open_weights", bank.weights}}, stage_hash(c, Stage::kOpenWeights));
  // Heatmaps use the stored (float32) values, as every later reader does.
  const Checkpoint saved = load_checkpoint(p.openweights);
  const auto maps = open_weight_similarity_heatmaps({saved.at("open_weights"), true}, pre.at("base_weights"));
  detail::write_matrix_csv(p.openweights / "heatmap_base_weights.csv", maps.base_weight_cosine);
  detail::write_matrix_csv(p.openweights / "heatmap_open_weights.csv", maps.open_weight_cosine);
  const double rho = upper_triangle_spearman(maps.base_weight_cosine, maps.open_weight_cosine);
  detail::write_json(p.openweights / "summary.json", {{"config_hash", config_hash(c)}, {"spearman", rho}});
  log("openweights: spearman(P*, O) " + std::to_string(rho));
}

inline DnpgModel load_upstream_model(const RunConfig& c, const RunPaths& p, Rng& init_rng) {
  const Checkpoint pre = detail::load_stage(p.pretrain, stage_hash(c, Stage::kPretrain), "pretrain");
  const Checkpoint ow = detail::load_stage(p.openweights, stage_hash(c, Stage::kOpenWeights), "openweights");
  return DnpgModel::assemble(Encoder::import_from(pre, "encoder/"), pre.at("base_weights"), {ow.at("open_weights"), true},
                             c.model, c.flags, init_rng);
}

inline void run_metatrain(const RunConfig& c, const RunPaths& p, bool force, const Log& log) {
  const Dataset data = load_dataset(p.dataset);
  const Rng root(c.seed);
  Rng init_rng = root.split(streams::kModelInit);
  DnpgModel model = load_upstream_model(c, p, init_rng);
  detail::prepare_output(p.metatrain, force);
  Rng rng = root.split(streams::kMetaTrain);
  auto result = meta_train(std::move(model), data, c.split(), c.meta_config(), rng);
  TensorMap t;
  result.model.export_to(t);
  save_checkpoint(p.metatrain, t, stage_hash(c, Stage::kMetaTrain));
  std::ofstream trace(p.metatrain / "loss_trace.csv");
  trace << "step,l_ce,l_neg,l_align,l_ec,total\n";
  for (const auto& row : result.trace) {
    const auto& l = row.losses;
    trace << row.step << ',' << detail::fmt(l.l_ce) << ',' << detail::fmt(l.l_neg) << ',' << detail::fmt(l.l_align) << ','
          << detail::fmt(l.l_ec) << ',' << detail::fmt(l.total) << '\n';
  }
  nlohmann::json state = {{"config_hash", config_hash(c)},
                          {"ablation_row", ablation_row(c.flags)},
                          {"steps", c.metatrain.steps},
                          {"tau2", result.model.head.tau2()},
                          {"bias", result.model.head.bias(0, 0)}};
  if (!result.trace.empty()) state["final_total"] = result.trace.back().losses.total;
  detail::write_json(p.metatrain / "training_state.json", state);
  log("metatrain: " + ablation_row(c.flags) + ", " + std::to_string(c.metatrain.steps) + " steps");
}

inline nlohmann::json report_json(const MetricsReport& r) {
  const auto& s = r.unknown_np_similarity;
  nlohmann::json q = nlohmann::json::object();
  for (std::size_t i = 0; i < s.quantile_levels.size() && i < s.quantiles.size(); ++i) {
    std::ostringstream k;
    k << "q" << std::setw(2) << std::setfill('0') << static_cast<int>(std::lround(100 * s.quantile_levels[i]));
    q[k.str()] = s.quantiles[i];
  }
  return {{"acc_mean", r.acc_mean},
          {"acc_halfwidth", detail::optional_json(r.acc_halfwidth)},
          {"auroc_mean", r.auroc_mean},
          {"auroc_halfwidth", detail::optional_json(r.auroc_halfwidth)},
          {"softmax_auroc_mean", r.softmax_auroc_mean},
          {"softmax_auroc_halfwidth", detail::optional_json(r.softmax_auroc_halfwidth)},
          {"episodes", r.episodes},
          {"np_utilization", r.np_utilization},
          {"utilized_nps", r.utilized_nps},
          {"unknown_np_similarity",
           {{"count", s.count}, {"mean", s.mean}, {"quantiles", q}, {"bin_low", s.bin_low}, {"bin_high", s.bin_high}, {"bins", s.bins}}}};
}

inline int median_effective_nps(const std::vector<EpisodeRecord>& records) {
  std::vector<int> v;
  for (const auto& r : records) v.push_back(r.effective_nps);
  if (v.empty()) return 0;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

inline void write_episode_records(const std::filesystem::path& path, const std::vector<EpisodeRecord>& records) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << "episode,acc,auroc,softmax_auroc,effective_nps";
  const std::size_t k = records.empty() ? 0 : records.front().np_counts.size();
  for (std::size_t i = 0; i < k; ++i) out << ",np" << i;
  out << '\n';
  for (const auto& r : records) {
    out << r.episode << ',' << detail::fmt(r.acc) << ',' << detail::fmt(r.auroc) << ',' << detail::fmt(r.softmax_auroc) << ','
        << r.effective_nps;
    for (long long c : r.np_counts) out << ',' << c;
    out << '\n';
  }
}

inline Evaluation run_evaluate(const RunConfig& c, const RunPaths& p, bool force, const Log& log) {
  const Dataset data = load_dataset(p.dataset);
  const Checkpoint ck = detail::load_stage(p.metatrain, stage_hash(c, Stage::kMetaTrain), "metatrain");
  const DnpgModel model = DnpgModel::import_from(ck, c.model, c.flags);
  detail::prepare_output(p.evaluate, force);
  const Evaluation ev = evaluate(model, data, c.split(), c.eval_config(), Rng(c.seed).split(streams::kEvaluate),
                                 c.collapse_threshold);
  write_episode_records(p.evaluate / "episodes.csv", ev.records);
  {
    std::ofstream out(p.evaluate / "unknown_similarity.csv");
    out << "episode,query,max_np_cosine\n";
    for (std::size_t e = 0; e < ev.unknown_max_cosines.size(); ++e) {
      for (std::size_t q = 0; q < ev.unknown_max_cosines[e].size(); ++q) {
        out << e << ',' << q << ',' << detail::fmt(ev.unknown_max_cosines[e][q]) << '\n';
      }
    }
  }
  {
    const auto& s = ev.report.unknown_np_similarity;
    std::ofstream out(p.evaluate / "unknown_similarity_hist.csv");
    out << "bin_low,bin_high,count\n";
    const double w = (s.bin_high - s.bin_low) / static_cast<double>(s.bins.size());
    for (std::size_t b = 0; b < s.bins.size(); ++b) {
      out << detail::fmt(s.bin_low + w * b) << ',' << detail::fmt(s.bin_low + w * (b + 1)) << ',' << s.bins[b] << '\n';
    }
  }
  {
    std::ofstream out(p.evaluate / "np_utilization.csv");
    out << "np,count\n";
    for (std::size_t k = 0; k < ev.report.np_utilization.size(); ++k) out << k << ',' << ev.report.np_utilization[k] << '\n';
  }
  nlohmann::json report = report_json(ev.report);
  report["config_hash"] = config_hash(c);
  report["config"] = canonical_json(c);
  report["ablation_row"] = ablation_row(c.flags);
  report["median_effective_nps"] = median_effective_nps(ev.records);
  detail::write_json(p.evaluate / "report.json", report);
  std::ostringstream msg;
  msg << std::fixed << std::setprecision(2) << "evaluate: ACC " << ev.report.acc_mean << ", AUROC " << ev.report.auroc_mean
      << ", utilized NPs " << ev.report.utilized_nps << "/" << ev.report.np_utilization.size();
  log(msg.str());
  return ev;
}

inline void run_stage(const RunConfig& c, const RunPaths& p, Stage stage, bool force, const Log& log) {
  switch (stage) {
    case Stage::kPretrain: return run_pretrain(c, p, force, log);
    case Stage::kOpenWeights: return run_openweights(c, p, force, log);
    case Stage::kMetaTrain: return run_metatrain(c, p, force, log);
    case Stage::kEvaluate: run_evaluate(c, p, force, log); return;
    case Stage::kAll:
      run_pretrain(c, p, force, log);
      run_openweights(c, p, force, log);
      run_metatrain(c, p, force, log);
      run_evaluate(c, p, force, log);
      return;
  }
}

// Re-reads episodes.csv and unknown_similarity.csv and folds them into a
// report, exactly as the evaluate stage does.
inline MetricsReport reaggregate(const std::filesystem::path& eval_dir) {
  std::ifstream in(eval_dir / "episodes.csv");
  if (!in) throw ArtifactError("missing " + (eval_dir / "episodes.csv").string());
  std::string line;
  std::getline(in, line);
  std::vector<EpisodeRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() < 6) throw ArtifactError("episodes.csv: short row");
    EpisodeRecord r;
    r.episode = std::stoi(cells[0]);
    r.acc = std::stod(cells[1]);
    r.auroc = std::stod(cells[2]);
    r.softmax_auroc = std::stod(cells[3]);
    r.effective_nps = std::stoi(cells[4]);
    for (std::size_t i = 5; i < cells.size(); ++i) r.np_counts.push_back(std::stoll(cells[i]));
    records.push_back(std::move(r));
  }
  std::ifstream sim(eval_dir / "unknown_similarity.csv");
  if (!sim) throw ArtifactError("missing " + (eval_dir / "unknown_similarity.csv").string());
  std::getline(sim, line);
  std::vector<double> cosines;
  while (std::getline(sim, line)) {
    if (line.empty()) continue;
    cosines.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  }
  return aggregate(records, cosines);
}

struct SweepRow {
  int num_generators = 0;
  MetricsReport report;
  int median_effective_nps = 0;
};

// Meta-trains and evaluates one model per N_g on a shared pretrain and
// open-weight stage (trained first if absent). Writes sweep_npg.csv.
inline std::vector<SweepRow> sweep_npg(const RunConfig& c, const std::filesystem::path& root, const std::vector<int>& counts,
                                       bool force, const Log& log) {
  if (counts.empty()) throw ConfigError("sweep-npg: empty N_g list");
  RunPaths shared = RunPaths::under(root);
  if (!std::filesystem::exists(shared.pretrain / "manifest.json")) run_pretrain(c, shared, force, log);
  if (!std::filesystem::exists(shared.openweights / "manifest.json")) run_openweights(c, shared, force, log);
  std::vector<SweepRow> rows;
  for (int k : counts) {
    RunConfig ck = c;
    ck.model.num_generators = k;
    if (ck.flags.ec && k < 2) ck.flags.ec = false;
    validate(ck);
    RunPaths p = shared;
    p.metatrain = root / "sweep" / ("ng" + std::to_string(k)) / "metatrain";
    p.evaluate = root / "sweep" / ("ng" + std::to_string(k)) / "evaluate";
    run_metatrain(ck, p, force, log);
    Evaluation ev = run_evaluate(ck, p, force, log);
    rows.push_back({k, ev.report, median_effective_nps(ev.records)});
  }
  std::ofstream out(root / "sweep_npg.csv");
  out << "num_generators,acc_mean,auroc_mean,softmax_auroc_mean,utilized_nps,median_effective_nps\n";
  for (const auto& r : rows) {
    out << r.num_generators << ',' << detail::fmt(r.report.acc_mean) << ',' << detail::fmt(r.report.auroc_mean) << ','
        << detail::fmt(r.report.softmax_auroc_mean) << ',' << r.report.utilized_nps << ',' << r.median_effective_nps << '\n';
  }
  return rows;
}

}  // namespace dnpg
