#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "defectforge/matchfilter.hpp"

namespace defectforge {

// Paths are relative to the directory holding manifest.json.
struct ManifestEntry {
  std::string id;
  std::string image;
  std::string image_sha256;
  std::string mask;  // empty when the sample has no mask
  std::string mask_sha256;
  std::string source;  // clean normal the image derives from; empty for normals
  std::string source_sha256;
  std::string provenance;  // "normal", "rule:<engine>#<hash>", "gen:<prompt>"
  std::uint64_t seed = 0;
  std::string label;     // "normal" | "anomalous" on evaluation sets
  std::string category;  // product kind
  std::optional<FilterReport> filter;
  nlohmann::json meta = nlohmann::json::object();
};

struct Manifest {
  static constexpr int kVersion = 1;
  static constexpr const char* kFileName = "manifest.json";

  std::string dataset_id;
  std::string kind;  // normals | eval | rule | gen
  std::string config_hash;
  std::vector<ManifestEntry> entries;
  nlohmann::json stats = nlohmann::json::object();

  // Directory the relative paths resolve against. Not serialized.
  std::filesystem::path root;

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

  // Fills in the hash fields from the files on disk.
  void hash_files();
  // Throws ManifestInvalid on a missing file, hash mismatch, duplicate id or a
  // gen entry whose decision is not Desired.
  void validate() const;

  // Writes <dir>/manifest.json and sets root = dir.
  void save(const std::filesystem::path& dir);
  // Accepts either the directory or the manifest file itself.
  static Manifest load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);
void to_json(nlohmann::json& j, const Manifest& m);
void from_json(const nlohmann::json& j, Manifest& m);

// Relative path from `base` to `target`, with forward slashes.
std::string relative_path(const std::filesystem::path& target, const std::filesystem::path& base);

// Writes `text` to `path`, creating parent directories. Throws IoFailure.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace defectforge
