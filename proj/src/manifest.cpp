#include "defectforge/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "defectforge/encoding.hpp"
#include "defectforge/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defectforge {

void to_json(json& j, const ManifestEntry& e) {
  j = json{{"id", e.id}, {"image", e.image}, {"image_sha256", e.image_sha256}, {"provenance", e.provenance},
           {"seed", e.seed}};
  if (!e.mask.empty()) {
    j["mask"] = e.mask;
    j["mask_sha256"] = e.mask_sha256;
  }
  if (!e.source.empty()) {
    j["source"] = e.source;
    j["source_sha256"] = e.source_sha256;
  }
  if (!e.label.empty()) j["label"] = e.label;
  if (!e.category.empty()) j["category"] = e.category;
  if (e.filter) j["filter"] = *e.filter;
  if (!e.meta.empty()) j["meta"] = e.meta;
}

void from_json(const json& j, ManifestEntry& e) {
  e = ManifestEntry{};
  j.at("id").get_to(e.id);
  j.at("image").get_to(e.image);
  e.image_sha256 = j.value("image_sha256", "");
  e.mask = j.value("mask", "");
  e.mask_sha256 = j.value("mask_sha256", "");
  e.source = j.value("source", "");
  e.source_sha256 = j.value("source_sha256", "");
  e.provenance = j.value("provenance", "");
  e.seed = j.value("seed", std::uint64_t{0});
  e.label = j.value("label", "");
  e.category = j.value("category", "");
  if (j.contains("filter")) e.filter = j.at("filter").get<FilterReport>();
  e.meta = j.value("meta", json::object());
}

void to_json(json& j, const Manifest& m) {
  j = json{{"version", Manifest::kVersion}, {"dataset_id", m.dataset_id}, {"kind", m.kind},
           {"config_hash", m.config_hash}, {"entries", m.entries}, {"stats", m.stats}};
}

void from_json(const json& j, Manifest& m) {
  if (j.value("version", 0) != Manifest::kVersion) {
    throw Error(ErrorCode::ManifestInvalid, "unsupported manifest version");
  }
  j.at("dataset_id").get_to(m.dataset_id);
  j.at("kind").get_to(m.kind);
  m.config_hash = j.value("config_hash", "");
  j.at("entries").get_to(m.entries);
  m.stats = j.value("stats", json::object());
}

std::string relative_path(const fs::path& target, const fs::path& base) {
  return fs::relative(fs::absolute(target).lexically_normal(), fs::absolute(base).lexically_normal())
      .generic_string();
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open for writing", path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "write failed", path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "cannot open file", path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void Manifest::hash_files() {
  for (auto& e : entries) {
    e.image_sha256 = sha256_file(resolve(e.image));
    if (!e.mask.empty()) e.mask_sha256 = sha256_file(resolve(e.mask));
    if (!e.source.empty()) e.source_sha256 = sha256_file(resolve(e.source));
  }
}

void Manifest::validate() const {
  std::set<std::string> ids;
  auto check = [&](const ManifestEntry& e, const std::string& rel, const std::string& expected) {
    const fs::path p = resolve(rel);
    if (!fs::is_regular_file(p)) throw Error(ErrorCode::ManifestInvalid, "referenced file is missing", p.string());
    if (sha256_file(p) != expected) {
      throw Error(ErrorCode::ManifestInvalid, "content hash mismatch for " + e.id, p.string());
    }
  };
  for (const auto& e : entries) {
    if (e.id.empty()) throw Error(ErrorCode::ManifestInvalid, "entry without id", dataset_id);
    if (!ids.insert(e.id).second) throw Error(ErrorCode::ManifestInvalid, "duplicate entry id", e.id);
    check(e, e.image, e.image_sha256);
    if (!e.mask.empty()) check(e, e.mask, e.mask_sha256);
    if (!e.source.empty()) check(e, e.source, e.source_sha256);
    if (e.provenance.rfind("gen:", 0) == 0) {
      if (!e.filter || e.filter->decision != Decision::Desired) {
        throw Error(ErrorCode::ManifestInvalid, "generated entry was not accepted by the filter", e.id);
      }
    }
  }
}

void Manifest::save(const fs::path& dir) {
  root = dir;
  write_text(dir / kFileName, json(*this).dump(2) + "\n");
}

Manifest Manifest::load(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kFileName : path;
  if (!fs::exists(file)) throw Error(ErrorCode::NotFound, "manifest not found", file.string());
  Manifest m;
  try {
    m = json::parse(read_text(file)).get<Manifest>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ManifestInvalid, std::string("malformed manifest: ") + e.what(), file.string());
  }
  m.root = file.parent_path();
  return m;
}

}  // namespace defectforge
