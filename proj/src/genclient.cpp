#include "defectforge/genclient.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <numeric>

#include "defectforge/encoding.hpp"
#include "defectforge/error.hpp"

namespace defectforge {

using nlohmann::json;

// ---- Prompts ----------------------------------------------------------------

namespace {
constexpr const char* kDefaultTemplate = "default";

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}
}  // namespace

PromptRegistry::PromptRegistry() {
  templates_[kDefaultTemplate] = "add a {defect_type} defect to the {category}";
  vocabulary_ = {"scratch", "dent", "stain", "crack", "hole", "contamination"};
}

void PromptRegistry::add_template(const std::string& id, const std::string& text) { templates_[id] = text; }

void PromptRegistry::assign(const std::string& category, const std::string& template_id) {
  if (!templates_.count(template_id)) throw Error(ErrorCode::InvalidArgument, "unknown prompt template", template_id);
  by_category_[category] = template_id;
}

void PromptRegistry::set_vocabulary(std::set<std::string> words, bool strict) {
  vocabulary_ = std::move(words);
  strict_ = strict;
}

const std::string& PromptRegistry::template_for(const std::string& category) const {
  const auto it = by_category_.find(category);
  static const std::string fallback = kDefaultTemplate;
  return it == by_category_.end() ? fallback : it->second;
}

const std::string& PromptRegistry::text(const std::string& template_id) const {
  const auto it = templates_.find(template_id);
  if (it == templates_.end()) throw Error(ErrorCode::InvalidArgument, "unknown prompt template", template_id);
  return it->second;
}

PromptRegistry PromptRegistry::from_json(const json& j) {
  PromptRegistry reg;
  if (j.contains("templates")) {
    for (const auto& [id, text] : j.at("templates").items()) reg.add_template(id, text.get<std::string>());
  }
  if (j.contains("categories")) {
    for (const auto& [cat, id] : j.at("categories").items()) reg.assign(cat, id.get<std::string>());
  }
  if (j.contains("vocabulary")) {
    reg.set_vocabulary(j.at("vocabulary").get<std::set<std::string>>(), j.value("strict", true));
  }
  return reg;
}

Prompt build_prompt(const std::string& category, const std::string& defect_type, const PromptRegistry& registry) {
  if (registry.strict() && !registry.vocabulary().count(defect_type)) {
    throw Error(ErrorCode::UnknownDefectType, "defect type not in vocabulary", defect_type);
  }
  Prompt p;
  p.category = category;
  p.defect_type = defect_type;
  p.template_id = registry.template_for(category);
  p.rendered = replace_all(replace_all(registry.text(p.template_id), "{category}", category), "{defect_type}",
                           defect_type);
  return p;
}

// ---- Wire -------------------------------------------------------------------

json encode_request(const GenerationRequest& req) {
  return json{{"request_id", req.request_id},
              {"prompt", req.prompt},
              {"image_b64", base64_encode(encode_png(req.image))},
              {"guidance", req.guidance}};
}

GenerationRequest decode_request(const json& j) {
  GenerationRequest req;
  req.request_id = j.at("request_id").get<std::string>();
  req.prompt = j.value("prompt", "");
  const auto bytes = base64_decode(j.at("image_b64").get<std::string>());
  req.image = decode_png(bytes, "request " + req.request_id);
  if (j.contains("guidance")) req.guidance = j.at("guidance");
  return req;
}

// ---- Client -----------------------------------------------------------------

GenClient::GenClient(std::string endpoint, RetryPolicy policy) : endpoint_(std::move(endpoint)), policy_(policy) {
  while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
}

GenerationResponse GenClient::generate(const GenerationRequest& req) {
  const std::string body = encode_request(req).dump();
  httplib::Client cli(endpoint_);
  if (!cli.is_valid()) throw Error(ErrorCode::ServiceUnavailable, "invalid service endpoint", endpoint_);
  cli.set_connection_timeout(policy_.timeout);
  cli.set_read_timeout(policy_.timeout);
  cli.set_write_timeout(policy_.timeout);

  auto backoff = policy_.initial_backoff;
  std::string last_failure = "no attempt made";
  for (int attempt = 0; attempt <= policy_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff = std::min(policy_.max_backoff, std::chrono::milliseconds(static_cast<long long>(
                                                  static_cast<double>(backoff.count()) * policy_.multiplier)));
    }
    ++attempts_;
    const auto t0 = std::chrono::steady_clock::now();
    auto res = cli.Post("/generate", body, "application/json");
    const auto t1 = std::chrono::steady_clock::now();
    if (!res) {
      last_failure = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500 || res->status == 429) {
      last_failure = "service answered HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw Error(ErrorCode::MalformedResponse, "service answered HTTP " + std::to_string(res->status), endpoint_);
    }

    GenerationResponse out;
    try {
      const json j = json::parse(res->body);
      out.request_id = j.at("request_id").get<std::string>();
      out.image = decode_png(base64_decode(j.at("image_b64").get<std::string>()), "response " + out.request_id);
      if (j.contains("meta")) out.meta = j.at("meta");
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedResponse, std::string("bad response body: ") + e.what(), endpoint_);
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedResponse, e.what(), endpoint_);
    }
    if (out.request_id != req.request_id) {
      throw Error(ErrorCode::MalformedResponse, "response request_id does not echo request", out.request_id);
    }
    if (out.image.width() != req.image.width() || out.image.height() != req.image.height()) {
      throw Error(ErrorCode::DimensionMismatch, "candidate dimensions differ from input", req.request_id);
    }
    out.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.attempts = attempt + 1;
    return out;
  }
  throw Error(ErrorCode::ServiceUnavailable,
              "gave up after " + std::to_string(policy_.max_retries + 1) + " attempts (" + last_failure + ")",
              endpoint_);
}

std::string resolve_endpoint(const std::string& configured) {
  if (const char* env = std::getenv("DEFECTFORGE_SERVICE_URL"); env && *env) return env;
  return configured;
}

// ---- Mock transforms --------------------------------------------------------

std::string to_string(MockMode m) {
  switch (m) {
    case MockMode::Identity: return "identity";
    case MockMode::LocalEdit: return "local-edit";
    case MockMode::Scramble: return "scramble";
    case MockMode::Flaky: return "flaky";
    case MockMode::Mixed: return "mixed";
  }
  return "identity";
}

MockMode mock_mode_from_string(const std::string& s) {
  if (s == "identity") return MockMode::Identity;
  if (s == "local-edit") return MockMode::LocalEdit;
  if (s == "scramble") return MockMode::Scramble;
  if (s == "flaky") return MockMode::Flaky;
  if (s == "mixed") return MockMode::Mixed;
  throw Error(ErrorCode::InvalidArgument, "unknown mock mode", s);
}

double LocalEdit::area_fraction(int width, int height) const {
  return std::numbers::pi * rx * ry / (static_cast<double>(width) * height);
}

DefectMask LocalEdit::mask(int width, int height) const {
  DefectMask m(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      if (dx * dx + dy * dy < 1.0) m.set(x, y, true);
    }
  return m;
}

LocalEdit draw_local_edit(int width, int height, Rng& rng, const MockConfig& cfg) {
  LocalEdit e;
  const double area = rng.uniform(cfg.min_area, cfg.max_area) * width * height;
  const double aspect = rng.uniform(0.6, 1.6);
  e.ry = std::sqrt(area / (std::numbers::pi * aspect));
  e.rx = e.ry * aspect;
  e.cx = rng.uniform(0.3, 0.7) * width;
  e.cy = rng.uniform(0.3, 0.7) * height;
  const double magnitude = rng.uniform(cfg.min_amplitude, cfg.max_amplitude);
  e.amplitude = rng.uniform() < 0.5 ? -magnitude : magnitude;
  return e;
}

ImageBuffer apply_local_edit(const ImageBuffer& img, const LocalEdit& e) {
  std::vector<std::uint8_t> out = img.data();
  const int c = img.channels();
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double dx = (x - e.cx) / e.rx, dy = (y - e.cy) / e.ry;
      const double rho2 = dx * dx + dy * dy;
      if (rho2 >= 1.0) continue;
      const double bump = e.amplitude * (1.0 - rho2) * (1.0 - rho2);
      for (int ch = 0; ch < c; ++ch) {
        const auto i = (static_cast<std::size_t>(y) * img.width() + x) * c + ch;
        out[i] = clamp_to_u8(out[i] + bump);
      }
    }
  return ImageBuffer(img.width(), img.height(), c, std::move(out));
}

ImageBuffer scramble_blocks(const ImageBuffer& img, Rng& rng, int block) {
  const int bx = img.width() / block, by = img.height() / block;
  const int n = bx * by;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);

  std::vector<std::uint8_t> out = img.data();
  const int c = img.channels();
  for (int b = 0; b < n; ++b) {
    const int src = perm[b];
    const int sx = (src % bx) * block, sy = (src / bx) * block;
    const int dx = (b % bx) * block, dy = (b / bx) * block;
    for (int y = 0; y < block; ++y)
      for (int x = 0; x < block; ++x)
        for (int ch = 0; ch < c; ++ch)
          out[(static_cast<std::size_t>(dy + y) * img.width() + dx + x) * c + ch] = img.at(sx + x, sy + y, ch);
  }
  return ImageBuffer(img.width(), img.height(), c, std::move(out));
}

ImageBuffer mock_transform(const MockConfig& cfg, const GenerationRequest& req, std::string* applied,
                           LocalEdit* edit) {
  Rng rng = Rng::substream(cfg.seed, hash_label(req.request_id.c_str()));
  MockMode mode = cfg.mode;
  if (mode == MockMode::Flaky) mode = MockMode::LocalEdit;
  if (mode == MockMode::Mixed) {
    Rng coin = rng.split(hash_label("mixed"));
    mode = coin.uniform() < 0.5 ? MockMode::LocalEdit : MockMode::Scramble;
  }
  if (applied) *applied = to_string(mode);
  switch (mode) {
    case MockMode::LocalEdit: {
      Rng r = rng.split(hash_label("local-edit"));
      const LocalEdit e = draw_local_edit(req.image.width(), req.image.height(), r, cfg);
      if (edit) *edit = e;
      return apply_local_edit(req.image, e);
    }
    case MockMode::Scramble: {
      Rng r = rng.split(hash_label("scramble"));
      return scramble_blocks(req.image, r, cfg.scramble_block);
    }
    default:
      return req.image;
  }
}

GenerationResponse InProcessMock::generate(const GenerationRequest& req) {
  if (cfg_.mode == MockMode::Flaky) {
    std::lock_guard lock(mu_);
    if (calls_++ < cfg_.flaky_failures) {
      throw Error(ErrorCode::ServiceUnavailable, "mock is flaky", req.request_id);
    }
  }
  GenerationResponse r;
  r.request_id = req.request_id;
  std::string applied;
  r.image = mock_transform(cfg_, req, &applied);
  r.meta = json{{"mock_mode", applied}};
  return r;
}

// ---- Mock server ------------------------------------------------------------

struct MockServer::Impl {
  MockConfig cfg;
  httplib::Server server;
  std::thread thread;
  std::mutex mu;
  std::mutex join_mu;
  int served = 0;
  int failures_left = 0;
};

MockServer::MockServer(MockConfig cfg, int port) : impl_(std::make_unique<Impl>()) {
  impl_->cfg = cfg;
  impl_->failures_left = cfg.mode == MockMode::Flaky ? cfg.flaky_failures : 0;
  Impl* impl = impl_.get();

  impl->server.Post("/generate", [impl](const httplib::Request& hreq, httplib::Response& hres) {
    {
      std::lock_guard lock(impl->mu);
      ++impl->served;
      if (impl->failures_left > 0) {
        --impl->failures_left;
        hres.status = 503;
        hres.set_content(R"({"error":"ServiceUnavailable","message":"mock is flaky"})", "application/json");
        return;
      }
    }
    GenerationRequest req;
    try {
      req = decode_request(json::parse(hreq.body));
    } catch (const std::exception& e) {
      hres.status = 400;
      hres.set_content(json{{"error", "MalformedRequest"}, {"message", e.what()}}.dump(), "application/json");
      return;
    }
    std::string applied;
    const ImageBuffer out = mock_transform(impl->cfg, req, &applied);
    const json body{{"request_id", req.request_id},
                    {"image_b64", base64_encode(encode_png(out))},
                    {"meta", {{"mock_mode", applied}}}};
    hres.set_content(body.dump(), "application/json");
  });
  impl->server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"status":"ok"})", "application/json");
  });

  // SO_REUSEADDR only: the library default also sets SO_REUSEPORT, which would
  // let a second server share a busy port silently.
  impl->server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  if (port == 0) {
    port_ = impl->server.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw Error(ErrorCode::PortInUse, "could not bind any port");
  } else {
    if (!impl->server.bind_to_port("127.0.0.1", port)) {
      throw Error(ErrorCode::PortInUse, "port already in use", std::to_string(port));
    }
    port_ = port;
  }
  impl->thread = std::thread([impl] { impl->server.listen_after_bind(); });
  impl->server.wait_until_ready();
}

MockServer::~MockServer() { stop(); }

int MockServer::requests_served() const {
  std::lock_guard lock(impl_->mu);
  return impl_->served;
}

void MockServer::wait() {
  while (impl_->server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  stop();
}

void MockServer::stop() {
  impl_->server.stop();
  std::lock_guard lock(impl_->join_mu);
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace defectforge
