#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/error.hpp"
#include "dnpg/rng.hpp"

namespace dnpg {

// Identity of one sample inside a Dataset.
struct SampleId {
  int class_id = 0;
  int index = 0;

  auto operator<=>(const SampleId&) const = default;
};

struct LabeledSample {
  Eigen::VectorXd input;
  int class_id = 0;
};

// Class-conditional samples stored as one row-major float32 block per class,
// the same layout as the on-disk bundle.
class Dataset {
 public:
  Dataset() = default;
  Dataset(int dim, std::vector<std::vector<float>> classes) : dim_(dim), classes_(std::move(classes)) {
    if (dim_ < 1) throw ParameterError("Dataset: dim must be positive");
    for (const auto& c : classes_) {
      if (c.size() % static_cast<std::size_t>(dim_) != 0) throw ShapeError("Dataset: class block not a multiple of dim");
    }
  }

  [[nodiscard]] int dim() const { return dim_; }
  [[nodiscard]] int num_classes() const { return static_cast<int>(classes_.size()); }
  [[nodiscard]] int samples_in(int class_id) const {
    check_class(class_id);
    return static_cast<int>(classes_[static_cast<std::size_t>(class_id)].size() / static_cast<std::size_t>(dim_));
  }
  [[nodiscard]] std::span<const float> block(int class_id) const {
    check_class(class_id);
    return classes_[static_cast<std::size_t>(class_id)];
  }

  [[nodiscard]] std::span<const float> row(SampleId id) const {
    if (id.index < 0 || id.index >= samples_in(id.class_id)) throw SamplingError("Dataset: sample index out of range");
    return block(id.class_id).subspan(static_cast<std::size_t>(id.index) * static_cast<std::size_t>(dim_),
                                      static_cast<std::size_t>(dim_));
  }

  [[nodiscard]] LabeledSample sample(SampleId id) const {
    auto r = row(id);
    Eigen::VectorXd v(dim_);
    for (int k = 0; k < dim_; ++k) v(k) = r[static_cast<std::size_t>(k)];
    return {std::move(v), id.class_id};
  }

  // Inputs of the given samples stacked as rows.
  [[nodiscard]] Matrix inputs(std::span<const SampleId> ids) const {
    Matrix m(static_cast<Eigen::Index>(ids.size()), dim_);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto r = row(ids[i]);
      for (int k = 0; k < dim_; ++k) m(static_cast<Eigen::Index>(i), k) = r[static_cast<std::size_t>(k)];
    }
    return m;
  }

  // Every sample of the listed classes, in class order.
  [[nodiscard]] std::vector<SampleId> all_samples(std::span<const int> class_ids) const {
    std::vector<SampleId> ids;
    for (int c : class_ids) {
      for (int i = 0; i < samples_in(c); ++i) ids.push_back({c, i});
    }
    return ids;
  }

  bool operator==(const Dataset&) const = default;

 private:
  void check_class(int class_id) const {
    if (class_id < 0 || class_id >= num_classes()) throw SamplingError("Dataset: class id out of range");
  }

  int dim_ = 0;
  std::vector<std::vector<float>> classes_;
};

// Class means drawn uniformly on the unit sphere, samples isotropic Gaussian
// around their class mean.
inline Dataset make_synthetic_dataset(int num_classes, int dim, int samples_per_class, double intra_class_sigma,
                                      std::uint64_t seed) {
  if (num_classes < 4) throw ParameterError("make_synthetic_dataset: num_classes must be >= 4");
  if (dim < 2) throw ParameterError("make_synthetic_dataset: dim must be >= 2");
  if (samples_per_class < 1) throw ParameterError("make_synthetic_dataset: samples_per_class must be >= 1");
  if (!(intra_class_sigma > 0.0) || !std::isfinite(intra_class_sigma)) {
    throw ParameterError("make_synthetic_dataset: intra_class_sigma must be positive");
  }
  Rng root(seed);
  std::vector<std::vector<float>> classes(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    Eigen::VectorXd mean(dim);
    do {
      for (int k = 0; k < dim; ++k) mean(k) = rng.normal();
    } while (mean.norm() < 1e-8);
    mean.normalize();
    auto& block = classes[static_cast<std::size_t>(c)];
    block.resize(static_cast<std::size_t>(samples_per_class) * static_cast<std::size_t>(dim));
    for (int s = 0; s < samples_per_class; ++s) {
      for (int k = 0; k < dim; ++k) {
        block[static_cast<std::size_t>(s) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)] =
            static_cast<float>(mean(k) + intra_class_sigma * rng.normal());
      }
    }
  }
  return Dataset(dim, std::move(classes));
}

// True class means of a synthetic dataset (recomputed from the generator's
// stream, for tests and diagnostics).
inline Matrix synthetic_class_means(int num_classes, int dim, std::uint64_t seed) {
  Rng root(seed);
  Matrix means(num_classes, dim);
  for (int c = 0; c < num_classes; ++c) {
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    Eigen::VectorXd mean(dim);
    do {
      for (int k = 0; k < dim; ++k) mean(k) = rng.normal();
    } while (mean.norm() < 1e-8);
    means.row(c) = mean.normalized().transpose();
  }
  return means;
}

struct ClassSplit {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  std::vector<int> unknown_pool;

  // Throws ParameterError if the three sets overlap or contain duplicates.
  void validate(int total_classes) const {
    std::set<int> seen;
    for (const auto* set : {&base_classes, &novel_classes, &unknown_pool}) {
      for (int c : *set) {
        if (c < 0 || c >= total_classes) throw ParameterError("ClassSplit: class id out of range");
        if (!seen.insert(c).second) throw ParameterError("ClassSplit: class sets must be pairwise disjoint");
      }
    }
  }
};

// Consecutive split: [0, base) | [base, base + novel) | [base + novel, base + novel + unknown).
inline ClassSplit make_contiguous_split(int base, int novel, int unknown) {
  ClassSplit s;
  for (int c = 0; c < base; ++c) s.base_classes.push_back(c);
  for (int c = base; c < base + novel; ++c) s.novel_classes.push_back(c);
  for (int c = base + novel; c < base + novel + unknown; ++c) s.unknown_pool.push_back(c);
  return s;
}

// One few-shot open-set task. Support and known queries are grouped by way in
// roster order; unknown queries are grouped by unknown class.
struct Episode {
  std::vector<int> known_classes;
  std::vector<int> unknown_classes;
  std::vector<SampleId> support;
  std::vector<SampleId> known_queries;
  std::vector<SampleId> unknown_queries;
  int ways = 0;
  int shots = 0;
  int queries_per_class = 0;

  // Way index of every known query.
  [[nodiscard]] std::vector<int> known_query_ways() const {
    std::vector<int> labels;
    labels.reserve(known_queries.size());
    for (const auto& q : known_queries) {
      auto it = std::find(known_classes.begin(), known_classes.end(), q.class_id);
      labels.push_back(static_cast<int>(it - known_classes.begin()));
    }
    return labels;
  }

  bool operator==(const Episode&) const = default;
};

// Describes the first violated Episode invariant, or nullopt.
inline std::optional<std::string> episode_violation(const Episode& ep) {
  const auto n = static_cast<std::size_t>(ep.ways);
  const auto k = static_cast<std::size_t>(ep.shots);
  const auto q = static_cast<std::size_t>(ep.queries_per_class);
  if (ep.known_classes.size() != n) return "known roster size != ways";
  if (ep.unknown_classes.size() != n) return "unknown roster size != ways";
  std::set<int> known(ep.known_classes.begin(), ep.known_classes.end());
  std::set<int> unknown(ep.unknown_classes.begin(), ep.unknown_classes.end());
  if (known.size() != n || unknown.size() != n) return "duplicate class in roster";
  for (int c : unknown) {
    if (known.contains(c)) return "support and unknown class sets intersect";
  }
  if (ep.support.size() != n * k) return "support size != ways * shots";
  if (ep.known_queries.size() != n * q) return "known query count != ways * queries";
  if (ep.unknown_queries.size() != n * q) return "unknown query count != ways * queries";
  std::set<SampleId> identities;
  for (std::size_t w = 0; w < n; ++w) {
    for (std::size_t i = 0; i < k; ++i) {
      if (ep.support[w * k + i].class_id != ep.known_classes[w]) return "support sample in wrong way";
    }
    for (std::size_t i = 0; i < q; ++i) {
      if (ep.known_queries[w * q + i].class_id != ep.known_classes[w]) return "known query in wrong way";
      if (ep.unknown_queries[w * q + i].class_id != ep.unknown_classes[w]) return "unknown query in wrong group";
    }
  }
  for (const auto* list : {&ep.support, &ep.known_queries, &ep.unknown_queries}) {
    for (const auto& s : *list) {
      if (!identities.insert(s).second) return "sample drawn twice";
    }
  }
  return std::nullopt;
}

enum class EpisodeMode {
  // Known and pseudo-unknown classes both drawn from the base classes.
  kMetaTrain,
  // Known classes from the novel set, unknown classes from the held-out pool.
  kTest,
};

namespace detail {

inline std::vector<int> draw_indices(const Dataset& data, int class_id, int count, Rng& rng) {
  const int available = data.samples_in(class_id);
  if (count > available) {
    throw SamplingError("class " + std::to_string(class_id) + " has " + std::to_string(available) +
                        " samples, episode needs " + std::to_string(count));
  }
  std::vector<int> all(static_cast<std::size_t>(available));
  for (int i = 0; i < available; ++i) all[static_cast<std::size_t>(i)] = i;
  return rng.choose<int>(all, static_cast<std::size_t>(count));
}

inline void check_episode_shape(int ways, int shots, int queries) {
  if (ways < 1 || shots < 1 || queries < 1) throw SamplingError("episode: ways, shots and queries must be >= 1");
}

}  // namespace detail

inline Episode sample_episode(const Dataset& data, const ClassSplit& split, EpisodeMode mode, int ways, int shots,
                              int queries_per_class, Rng& rng) {
  detail::check_episode_shape(ways, shots, queries_per_class);
  const auto n = static_cast<std::size_t>(ways);
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries_per_class = queries_per_class;
  if (mode == EpisodeMode::kMetaTrain) {
    if (split.base_classes.size() < 2 * n) throw SamplingError("sample_episode: base pool has fewer than 2*ways classes");
    auto classes = rng.choose<int>(split.base_classes, 2 * n);
    ep.known_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(n));
    ep.unknown_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(n), classes.end());
  } else {
    if (split.novel_classes.size() < n) throw SamplingError("sample_episode: novel pool has fewer than ways classes");
    if (split.unknown_pool.size() < n) throw SamplingError("sample_episode: unknown pool has fewer than ways classes");
    ep.known_classes = rng.choose<int>(split.novel_classes, n);
    ep.unknown_classes = rng.choose<int>(split.unknown_pool, n);
  }
  for (int c : ep.known_classes) {
    auto idx = detail::draw_indices(data, c, shots + queries_per_class, rng);
    for (int i = 0; i < shots; ++i) ep.support.push_back({c, idx[static_cast<std::size_t>(i)]});
    for (int i = shots; i < shots + queries_per_class; ++i) ep.known_queries.push_back({c, idx[static_cast<std::size_t>(i)]});
  }
  for (int c : ep.unknown_classes) {
    auto idx = detail::draw_indices(data, c, queries_per_class, rng);
    for (int i : idx) ep.unknown_queries.push_back({c, i});
  }
  return ep;
}

// Two tasks over the same 2N classes with known and unknown roles swapped.
struct ConjugatePair {
  Episode task1;
  Episode task2;
};

inline std::optional<std::string> conjugate_violation(const ConjugatePair& pair) {
  if (auto v = episode_violation(pair.task1)) return "task1: " + *v;
  if (auto v = episode_violation(pair.task2)) return "task2: " + *v;
  if (pair.task1.known_queries != pair.task2.unknown_queries) return "task1 known queries != task2 unknown queries";
  if (pair.task1.unknown_queries != pair.task2.known_queries) return "task1 unknown queries != task2 known queries";
  std::set<int> support_classes;
  for (const auto& s : pair.task1.support) support_classes.insert(s.class_id);
  for (const auto& s : pair.task2.support) support_classes.insert(s.class_id);
  if (support_classes.size() != 2 * static_cast<std::size_t>(pair.task1.ways)) return "support union is not 2N classes";
  return std::nullopt;
}

inline ConjugatePair sample_conjugate_pair(const Dataset& data, const ClassSplit& split, int ways, int shots,
                                           int queries_per_class, Rng& rng) {
  detail::check_episode_shape(ways, shots, queries_per_class);
  const auto n = static_cast<std::size_t>(ways);
  if (split.base_classes.size() < 2 * n) throw SamplingError("sample_conjugate_pair: base pool has fewer than 2*ways classes");
  auto classes = rng.choose<int>(split.base_classes, 2 * n);
  std::vector<std::vector<SampleId>> support(2 * n), queries(2 * n);
  for (std::size_t g = 0; g < 2 * n; ++g) {
    const int c = classes[g];
    auto idx = detail::draw_indices(data, c, shots + queries_per_class, rng);
    for (int i = 0; i < shots; ++i) support[g].push_back({c, idx[static_cast<std::size_t>(i)]});
    for (int i = shots; i < shots + queries_per_class; ++i) queries[g].push_back({c, idx[static_cast<std::size_t>(i)]});
  }
  auto make_task = [&](std::size_t known_begin, std::size_t unknown_begin) {
    Episode ep;
    ep.ways = ways;
    ep.shots = shots;
    ep.queries_per_class = queries_per_class;
    for (std::size_t w = 0; w < n; ++w) {
      ep.known_classes.push_back(classes[known_begin + w]);
      ep.unknown_classes.push_back(classes[unknown_begin + w]);
      ep.support.insert(ep.support.end(), support[known_begin + w].begin(), support[known_begin + w].end());
      ep.known_queries.insert(ep.known_queries.end(), queries[known_begin + w].begin(), queries[known_begin + w].end());
      ep.unknown_queries.insert(ep.unknown_queries.end(), queries[unknown_begin + w].begin(),
                                queries[unknown_begin + w].end());
    }
    return ep;
  };
  return {make_task(0, n), make_task(n, 0)};
}

// ---------------------------------------------------------------------------
// Dataset bundle: manifest.json + one little-endian float32 file per class.

namespace detail {

inline void write_f32_file(const std::filesystem::path& path, std::span<const float> data) {
  static_assert(std::endian::native == std::endian::little, "bundle I/O assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  if (!out) throw ArtifactError("short write to " + path.string());
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path, std::size_t expected_count) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw ArtifactError("missing array file " + path.string());
  if (bytes != expected_count * sizeof(float)) {
    throw ArtifactError(path.string() + ": size " + std::to_string(bytes) + " bytes, manifest implies " +
                        std::to_string(expected_count * sizeof(float)));
  }
  std::vector<float> data(expected_count);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw ArtifactError("short read from " + path.string());
  return data;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("missing " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["num_classes"] = data.num_classes();
  manifest["dim"] = data.dim();
  manifest["dtype"] = "float32";
  manifest["endianness"] = "little";
  manifest["layout"] = "row-major";
  auto& files = manifest["classes"] = nlohmann::json::array();
  for (int c = 0; c < data.num_classes(); ++c) {
    const std::string name = "class_" + std::to_string(c) + ".f32";
    files.push_back({{"file", name}, {"samples", data.samples_in(c)}});
    detail::write_f32_file(dir / name, data.block(c));
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = detail::read_json_file(dir / "manifest.json");
  try {
    if (manifest.at("dtype") != "float32" || manifest.at("endianness") != "little" ||
        manifest.at("layout") != "row-major") {
      throw ArtifactError("dataset manifest: unsupported dtype/endianness/layout");
    }
    const int dim = manifest.at("dim").get<int>();
    const int num_classes = manifest.at("num_classes").get<int>();
    const auto& files = manifest.at("classes");
    if (dim < 1 || num_classes < 1 || static_cast<int>(files.size()) != num_classes) {
      throw ArtifactError("dataset manifest: class count mismatch");
    }
    std::vector<std::vector<float>> classes;
    for (const auto& f : files) {
      const auto samples = f.at("samples").get<std::size_t>();
      classes.push_back(detail::read_f32_file(dir / f.at("file").get<std::string>(), samples * static_cast<std::size_t>(dim)));
    }
    return Dataset(dim, std::move(classes));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("dataset manifest: ") + e.what());
  }
}

}  // namespace dnpg
