#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dnpg/autodiff.hpp"
#include "dnpg/datagen.hpp"
#include "dnpg/error.hpp"

namespace dnpg {

// 64-bit FNV-1a, used for config hashes embedded in artifacts.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

// Named parameter tensors. Keys may contain '/' to group parameters
// ("rpc/wq", "mng/gen0/w1"); groups become subdirectories on disk.
using TensorMap = std::map<std::string, Matrix>;

// Rounds every entry through float32 so in-memory values match a reload.
inline void round_to_f32(Matrix& m) {
  m = m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

// Writes manifest.json (shapes, dtype, config hash) plus one flat
// little-endian float32 array per tensor, row-major.
inline void save_checkpoint(const std::filesystem::path& dir, const TensorMap& tensors, std::string_view config_hash) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["dtype"] = "float32";
  manifest["endianness"] = "little";
  manifest["layout"] = "row-major";
  manifest["config_hash"] = std::string(config_hash);
  auto& list = manifest["tensors"] = nlohmann::json::object();
  for (const auto& [name, m] : tensors) {
    if (name.empty() || name.find("..") != std::string::npos || name.front() == '/') {
      throw ArtifactError("checkpoint: invalid tensor name '" + name + "'");
    }
    const std::string file = name + ".f32";
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
      }
    }
    std::filesystem::create_directories((dir / file).parent_path());
    detail::write_f32_file(dir / file, data);
    list[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"file", file}};
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

struct Checkpoint {
  TensorMap tensors;
  std::string config_hash;

  [[nodiscard]] const Matrix& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArtifactError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = detail::read_json_file(dir / "manifest.json");
  Checkpoint ck;
  try {
    if (manifest.at("dtype") != "float32" || manifest.at("endianness") != "little") {
      throw ArtifactError("checkpoint manifest: unsupported dtype or endianness");
    }
    ck.config_hash = manifest.at("config_hash").get<std::string>();
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
      const auto rows = entry.at("rows").get<Eigen::Index>();
      const auto cols = entry.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw ArtifactError("checkpoint: negative shape for " + name);
      auto data = detail::read_f32_file(dir / entry.at("file").get<std::string>(),
                                        static_cast<std::size_t>(rows * cols));
      Matrix m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
      }
      ck.tensors.emplace(name, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("checkpoint manifest: ") + e.what());
  }
  return ck;
}

}  // namespace dnpg
