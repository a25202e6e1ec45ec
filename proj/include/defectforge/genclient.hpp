#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "defectforge/image.hpp"
#include "defectforge/rng.hpp"

namespace defectforge {

// ---- Prompts ----------------------------------------------------------------

struct Prompt {
  std::string category;
  std::string defect_type;
  std::string template_id;
  std::string rendered;

  // Stable id used in provenance tags: "<template_id>/<defect_type>".
  std::string id() const { return template_id + "/" + defect_type; }
};

// Templates use the placeholders {category} and {defect_type}.
class PromptRegistry {
 public:
  PromptRegistry();

  void add_template(const std::string& id, const std::string& text);
  void assign(const std::string& category, const std::string& template_id);
  void set_vocabulary(std::set<std::string> words, bool strict = true);

  const std::set<std::string>& vocabulary() const noexcept { return vocabulary_; }
  bool strict() const noexcept { return strict_; }
  const std::string& template_for(const std::string& category) const;
  const std::string& text(const std::string& template_id) const;

  static PromptRegistry from_json(const nlohmann::json& j);

 private:
  std::map<std::string, std::string> templates_;
  std::map<std::string, std::string> by_category_;
  std::set<std::string> vocabulary_;
  bool strict_ = true;
};

// Throws UnknownDefectType when the registry is strict and defect_type is not
// in its vocabulary.
Prompt build_prompt(const std::string& category, const std::string& defect_type, const PromptRegistry& registry);

// ---- Wire types -------------------------------------------------------------

struct GenerationRequest {
  std::string request_id;
  ImageBuffer image;
  std::string prompt;
  nlohmann::json guidance = nlohmann::json::object();  // passed through untouched
};

struct GenerationResponse {
  std::string request_id;
  ImageBuffer image;
  double latency_ms = 0.0;
  int attempts = 1;
  nlohmann::json meta = nlohmann::json::object();  // service-specific extras
};

nlohmann::json encode_request(const GenerationRequest& req);
GenerationRequest decode_request(const nlohmann::json& j);

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{50};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{2000};
  std::chrono::seconds timeout{30};
};

// Anything that turns a request into a candidate image.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual GenerationResponse generate(const GenerationRequest& req) = 0;
};

// HTTP client for POST <endpoint>/generate. Retries connection failures and
// 5xx/429 answers with exponential backoff; throws ServiceUnavailable after
// max_retries + 1 attempts, MalformedResponse on undecodable payloads, and
// DimensionMismatch when the candidate's size differs from the input.
class GenClient : public Generator {
 public:
  explicit GenClient(std::string endpoint, RetryPolicy policy = {});

  GenerationResponse generate(const GenerationRequest& req) override;

  const std::string& endpoint() const noexcept { return endpoint_; }
  // Total HTTP attempts issued by this client, including failed ones.
  int attempts_made() const noexcept { return attempts_.load(); }

 private:
  std::string endpoint_;
  RetryPolicy policy_;
  std::atomic<int> attempts_{0};
};

inline GenerationResponse request_generation(const std::string& endpoint, const GenerationRequest& req,
                                             const RetryPolicy& policy = {}) {
  return GenClient(endpoint, policy).generate(req);
}

// DEFECTFORGE_SERVICE_URL when set, otherwise `configured`.
std::string resolve_endpoint(const std::string& configured);

// ---- Mock service -----------------------------------------------------------

enum class MockMode { Identity, LocalEdit, Scramble, Flaky, Mixed };
std::string to_string(MockMode m);
MockMode mock_mode_from_string(const std::string& s);

struct MockConfig {
  MockMode mode = MockMode::LocalEdit;
  std::uint64_t seed = 0;
  int flaky_failures = 2;
  // Edited ellipse area as a fraction of the image.
  double min_area = 0.10;
  double max_area = 0.20;
  // Peak bump magnitude in intensity units; the sign is drawn per edit.
  double min_amplitude = 140.0;
  double max_amplitude = 180.0;
  int scramble_block = 8;
};

// Smooth intensity bump a * (1 - rho^2)^2 inside an ellipse, zero outside.
struct LocalEdit {
  double cx = 0, cy = 0, rx = 1, ry = 1;
  double amplitude = 0;

  double area_fraction(int width, int height) const;
  DefectMask mask(int width, int height) const;
};

LocalEdit draw_local_edit(int width, int height, Rng& rng, const MockConfig& cfg);
ImageBuffer apply_local_edit(const ImageBuffer& img, const LocalEdit& edit);
// Permutes square blocks; trailing partial blocks stay in place.
ImageBuffer scramble_blocks(const ImageBuffer& img, Rng& rng, int block);

// The deterministic transform behind the mock: a pure function of
// (config, request_id, image). `applied` receives the mode actually used
// ("identity" | "local-edit" | "scramble").
ImageBuffer mock_transform(const MockConfig& cfg, const GenerationRequest& req, std::string* applied = nullptr,
                           LocalEdit* edit = nullptr);

// In-process generator with the same behaviour as the HTTP mock, flaky mode
// included (it throws ServiceUnavailable for the first k calls).
class InProcessMock : public Generator {
 public:
  explicit InProcessMock(MockConfig cfg) : cfg_(cfg) {}
  GenerationResponse generate(const GenerationRequest& req) override;

 private:
  MockConfig cfg_;
  std::mutex mu_;
  int calls_ = 0;
};

// HTTP mock on 127.0.0.1. Port 0 picks a free port. Throws PortInUse when the
// port cannot be bound.
class MockServer {
 public:
  MockServer(MockConfig cfg, int port = 0);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const noexcept { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests_served() const;
  // Blocks until stop() is called from another thread (or a signal handler).
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

inline std::unique_ptr<MockServer> serve_mock(MockConfig cfg, int port = 0) {
  return std::make_unique<MockServer>(cfg, port);
}

}  // namespace defectforge
