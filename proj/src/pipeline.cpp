#include "defectforge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <memory>
#include <mutex>
#include <thread>

#include "defectforge/encoding.hpp"
#include "defectforge/error.hpp"
#include "defectforge/toybench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defectforge {

namespace {

std::string numbered(const char* prefix, int i, int width = 5) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%0*d", prefix, width, i);
  return buf;
}

template <class T>
void read_opt(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::InvalidArgument, what);
}

// Fans `fn(i)` out over the available cores. Results land by index, so the
// outcome never depends on scheduling.
template <class Fn>
void parallel_for(int n, Fn fn) {
  const int workers = std::max(1, std::min<int>(n, static_cast<int>(std::thread::hardware_concurrency())));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

ImageBuffer load_gray(const fs::path& p) { return to_grayscale(load_image(p)); }

MockConfig eval_edit_config(const PipelineConfig& cfg) {
  MockConfig m = cfg.genclient.mock;
  m.mode = MockMode::LocalEdit;
  return m;
}

}  // namespace

// ---- Configuration ----------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  read_opt(j, "seed", c.seed);
  if (j.contains("images")) {
    const json& s = j.at("images");
    read_opt(s, "size", c.images.size);
    read_opt(s, "train_normals", c.images.train_normals);
    read_opt(s, "eval_normals", c.images.eval_normals);
    read_opt(s, "eval_anomalies", c.images.eval_anomalies);
  }
  if (j.contains("rulegen")) {
    const json& s = j.at("rulegen");
    read_opt(s, "n", c.rulegen.n);
    if (s.contains("weights")) {
      const json& w = s.at("weights");
      read_opt(w, "perlin", c.rulegen.perlin);
      read_opt(w, "cutpaste", c.rulegen.cutpaste);
      read_opt(w, "gaussian", c.rulegen.gaussian);
      read_opt(w, "poisson", c.rulegen.poisson);
    }
    if (s.contains("perlin")) {
      const json& p = s.at("perlin");
      auto& pp = c.rulegen.perlin_params;
      read_opt(p, "cell_size", pp.cell_size);
      read_opt(p, "octaves", pp.octaves);
      read_opt(p, "persistence", pp.persistence);
      read_opt(p, "threshold", pp.threshold);
      read_opt(p, "beta_min", pp.beta_min);
      read_opt(p, "beta_max", pp.beta_max);
    }
    read_opt(s, "cutpaste_frac", c.rulegen.cutpaste_frac);
    read_opt(s, "gaussian_sigma", c.rulegen.gaussian_sigma);
    read_opt(s, "poisson_tol", c.rulegen.poisson_tol);
  }
  if (j.contains("genclient")) {
    const json& s = j.at("genclient");
    read_opt(s, "endpoint", c.genclient.endpoint);
    read_opt(s, "n_accept", c.genclient.n_accept);
    read_opt(s, "attempts_per_accept", c.genclient.attempts_per_accept);
    read_opt(s, "prompts", c.genclient.prompts);
    read_opt(s, "guidance", c.genclient.guidance);
    if (s.contains("retry")) {
      const json& r = s.at("retry");
      auto& rp = c.genclient.retry;
      rp.max_retries = r.value("max_retries", rp.max_retries);
      rp.initial_backoff = std::chrono::milliseconds(r.value("initial_backoff_ms", rp.initial_backoff.count()));
      rp.multiplier = r.value("multiplier", rp.multiplier);
      rp.max_backoff = std::chrono::milliseconds(r.value("max_backoff_ms", rp.max_backoff.count()));
      rp.timeout = std::chrono::seconds(r.value("timeout_s", rp.timeout.count()));
    }
    if (s.contains("mock")) {
      const json& m = s.at("mock");
      auto& mc = c.genclient.mock;
      if (m.contains("mode")) mc.mode = mock_mode_from_string(m.at("mode").get<std::string>());
      read_opt(m, "seed", mc.seed);
      read_opt(m, "flaky_failures", mc.flaky_failures);
      read_opt(m, "min_area", mc.min_area);
      read_opt(m, "max_area", mc.max_area);
      read_opt(m, "min_amplitude", mc.min_amplitude);
      read_opt(m, "max_amplitude", mc.max_amplitude);
      read_opt(m, "scramble_block", mc.scramble_block);
    }
  }
  if (j.contains("filter")) {
    const json& s = j.at("filter");
    read_opt(s, "tau_low", c.filter.thresholds.low);
    read_opt(s, "tau_high", c.filter.thresholds.high);
    read_opt(s, "min_keypoints", c.filter.min_keypoints);
    read_opt(s, "harris_k", c.filter.harris.k);
    read_opt(s, "window", c.filter.harris.window);
    read_opt(s, "sigma", c.filter.harris.sigma);
    read_opt(s, "nms_radius", c.filter.harris.nms_radius);
    read_opt(s, "max_kp", c.filter.harris.max_kp);
    read_opt(s, "response_threshold", c.filter.harris.threshold);
    read_opt(s, "lowe_ratio", c.filter.match.ratio);
    read_opt(s, "max_hamming", c.filter.match.max_dist);
    read_opt(s, "pattern_seed", c.filter.pattern_seed);
  }
  if (j.contains("detector")) {
    const json& s = j.at("detector");
    read_opt(s, "patch", c.detector.patch);
    read_opt(s, "stride", c.detector.stride);
    read_opt(s, "hidden", c.detector.hidden);
  }
  if (j.contains("strategies")) {
    const json& s = j.at("strategies");
    if (s.contains("schedule")) {
      TrainSchedule base = c.strategies.base;
      json merged = base;
      merged.update(s.at("schedule"));
      c.strategies.base = merged.get<TrainSchedule>();
    }
    read_opt(s, "finetune_lr_fraction", c.strategies.finetune_lr_fraction);
    read_opt(s, "finetune_step_fraction", c.strategies.finetune_step_fraction);
  }

  require(c.images.size >= 32, "images.size must be >= 32");
  require(c.images.train_normals >= 1, "images.train_normals must be >= 1");
  require(c.images.eval_normals >= 1 && c.images.eval_anomalies >= 1, "evaluation set needs both classes");
  require(c.rulegen.n >= 1, "rulegen.n must be >= 1");
  require(c.rulegen.perlin >= 0 && c.rulegen.cutpaste >= 0 && c.rulegen.gaussian >= 0 && c.rulegen.poisson >= 0,
          "engine weights must be >= 0");
  require(c.rulegen.perlin + c.rulegen.cutpaste + c.rulegen.gaussian + c.rulegen.poisson > 0,
          "at least one engine weight must be positive");
  c.rulegen.perlin_params.validate();
  require(c.genclient.n_accept >= 1, "genclient.n_accept must be >= 1");
  require(c.genclient.attempts_per_accept >= 1, "genclient.attempts_per_accept must be >= 1");
  require(c.filter.thresholds.low < c.filter.thresholds.high, "tau_low must be below tau_high");
  require(c.detector.patch >= 1 && c.detector.stride >= 1, "detector patch and stride must be >= 1");
  require(c.strategies.finetune_lr_fraction > 0 && c.strategies.finetune_step_fraction > 0,
          "fine-tune fractions must be > 0");
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  try {
    return from_json(json::parse(read_text(path)));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed config: ") + e.what(), path.string());
  }
}

json PipelineConfig::to_json() const {
  const auto& pp = rulegen.perlin_params;
  const auto& rp = genclient.retry;
  const auto& mc = genclient.mock;
  return json{
      {"seed", seed},
      {"images",
       {{"size", images.size},
        {"train_normals", images.train_normals},
        {"eval_normals", images.eval_normals},
        {"eval_anomalies", images.eval_anomalies}}},
      {"rulegen",
       {{"n", rulegen.n},
        {"weights",
         {{"perlin", rulegen.perlin},
          {"cutpaste", rulegen.cutpaste},
          {"gaussian", rulegen.gaussian},
          {"poisson", rulegen.poisson}}},
        {"perlin",
         {{"cell_size", pp.cell_size},
          {"octaves", pp.octaves},
          {"persistence", pp.persistence},
          {"threshold", pp.threshold},
          {"beta_min", pp.beta_min},
          {"beta_max", pp.beta_max}}},
        {"cutpaste_frac", rulegen.cutpaste_frac},
        {"gaussian_sigma", rulegen.gaussian_sigma},
        {"poisson_tol", rulegen.poisson_tol}}},
      {"genclient",
       {{"endpoint", genclient.endpoint},
        {"n_accept", genclient.n_accept},
        {"attempts_per_accept", genclient.attempts_per_accept},
        {"prompts", genclient.prompts},
        {"guidance", genclient.guidance},
        {"retry",
         {{"max_retries", rp.max_retries},
          {"initial_backoff_ms", rp.initial_backoff.count()},
          {"multiplier", rp.multiplier},
          {"max_backoff_ms", rp.max_backoff.count()},
          {"timeout_s", rp.timeout.count()}}},
        {"mock",
         {{"mode", defectforge::to_string(mc.mode)},
          {"seed", mc.seed},
          {"flaky_failures", mc.flaky_failures},
          {"min_area", mc.min_area},
          {"max_area", mc.max_area},
          {"min_amplitude", mc.min_amplitude},
          {"max_amplitude", mc.max_amplitude},
          {"scramble_block", mc.scramble_block}}}}},
      {"filter",
       {{"tau_low", filter.thresholds.low},
        {"tau_high", filter.thresholds.high},
        {"min_keypoints", filter.min_keypoints},
        {"harris_k", filter.harris.k},
        {"window", filter.harris.window},
        {"sigma", filter.harris.sigma},
        {"nms_radius", filter.harris.nms_radius},
        {"max_kp", filter.harris.max_kp},
        {"response_threshold", filter.harris.threshold},
        {"lowe_ratio", filter.match.ratio},
        {"max_hamming", filter.match.max_dist},
        {"pattern_seed", filter.pattern_seed}}},
      {"detector", {{"patch", detector.patch}, {"stride", detector.stride}, {"hidden", detector.hidden}}},
      {"strategies",
       {{"schedule", strategies.base},
        {"finetune_lr_fraction", strategies.finetune_lr_fraction},
        {"finetune_step_fraction", strategies.finetune_step_fraction}}},
  };
}

std::string PipelineConfig::hash() const { return sha256_hex(to_json().dump()).substr(0, 16); }

// ---- Toy benchmark ----------------------------------------------------------

ToyBenchmark build_toy_benchmark(const fs::path& out, const PipelineConfig& cfg) {
  const Rng root(cfg.seed);
  const int size = cfg.images.size;
  ToyBenchmark bench;

  const fs::path ndir = out / "normals";
  bench.normals.dataset_id = "toy-normals-" + std::to_string(cfg.seed);
  bench.normals.kind = "normals";
  bench.normals.config_hash = cfg.hash();
  bench.normals.root = ndir;
  for (int i = 0; i < cfg.images.train_normals; ++i) {
    Rng r = root.split({hash_label("bench/train"), static_cast<std::uint64_t>(i)});
    const ProductKind kind = product_from_index(i);
    const ImageBuffer img = render_product(kind, r, size);
    ManifestEntry e;
    e.id = numbered("normal", i);
    e.image = "images/" + e.id + ".png";
    e.provenance = "normal";
    e.seed = r.key();
    e.category = to_string(kind);
    save_image(img, ndir / e.image);
    bench.normals.entries.push_back(std::move(e));
  }
  bench.normals.hash_files();
  bench.normals.save(ndir);

  // Eval items alternate normal / anomalous until one class is exhausted.
  const fs::path edir = out / "eval";
  bench.eval.dataset_id = "toy-eval-" + std::to_string(cfg.seed);
  bench.eval.kind = "eval";
  bench.eval.config_hash = bench.normals.config_hash;
  bench.eval.root = edir;
  const MockConfig edit_cfg = eval_edit_config(cfg);
  int normals_left = cfg.images.eval_normals, anomalies_left = cfg.images.eval_anomalies;
  for (int i = 0; normals_left + anomalies_left > 0; ++i) {
    const bool anomalous = anomalies_left > 0 && (i % 2 == 1 || normals_left == 0);
    Rng r = root.split({hash_label("bench/eval"), static_cast<std::uint64_t>(i)});
    const ProductKind kind = product_from_index(i);
    const ImageBuffer img = render_product(kind, r, size);
    ManifestEntry e;
    e.id = numbered("eval", i);
    e.image = "images/" + e.id + ".png";
    e.seed = r.key();
    e.category = to_string(kind);
    if (!anomalous) {
      --normals_left;
      e.provenance = "normal";
      e.label = "normal";
      save_image(img, edir / e.image);
    } else {
      --anomalies_left;
      Rng er = root.split({hash_label("bench/eval-edit"), static_cast<std::uint64_t>(i)});
      const LocalEdit edit = draw_local_edit(size, size, er, edit_cfg);
      const ImageBuffer cand = apply_local_edit(img, edit);
      e.provenance = "mock:local-edit";
      e.label = "anomalous";
      e.source = "sources/" + e.id + ".png";
      e.mask = "masks/" + e.id + ".png";
      e.meta = json{{"ellipse",
                     {{"cx", edit.cx}, {"cy", edit.cy}, {"rx", edit.rx}, {"ry", edit.ry}, {"amplitude", edit.amplitude}}}};
      save_image(cand, edir / e.image);
      save_image(img, edir / e.source);
      save_image(edit.mask(size, size).to_image(), edir / e.mask);
    }
    bench.eval.entries.push_back(std::move(e));
  }
  bench.eval.hash_files();
  bench.eval.save(edir);
  return bench;
}

// ---- Rule-based dataset -----------------------------------------------------

bool mask_local(const ImageBuffer& normal, const ImageBuffer& sample, const DefectMask& mask) {
  if (!normal.same_shape(sample) || !mask.matches(normal)) return false;
  for (int y = 0; y < normal.height(); ++y)
    for (int x = 0; x < normal.width(); ++x) {
      if (mask.at(x, y)) continue;
      for (int c = 0; c < normal.channels(); ++c)
        if (normal.at(x, y, c) != sample.at(x, y, c)) return false;
    }
  return true;
}

Manifest generate_rule_dataset(const Manifest& normals, const PipelineConfig& cfg, const fs::path& out, int n) {
  if (n < 0) n = cfg.rulegen.n;
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "rule dataset size must be >= 1");
  if (normals.entries.empty()) throw Error(ErrorCode::InvalidArgument, "no normal images", normals.dataset_id);

  std::vector<ImageBuffer> pool;
  pool.reserve(normals.entries.size());
  for (const auto& e : normals.entries) pool.push_back(load_image(normals.resolve(e.image)));

  const RuleGenConfig& rc = cfg.rulegen;
  const double weights[] = {rc.perlin, rc.cutpaste, rc.gaussian, rc.poisson};
  const double total = weights[0] + weights[1] + weights[2] + weights[3];
  const Rng root = Rng(cfg.seed).split(hash_label("rule"));

  struct Item {
    SyntheticSample sample;
    std::size_t normal = 0;
    std::string error;
  };
  std::vector<Item> items(static_cast<std::size_t>(n));

  parallel_for(n, [&](int i) {
    Item& item = items[static_cast<std::size_t>(i)];
    const Rng r = root.split(static_cast<std::uint64_t>(i));
    try {
      Rng pick = r.split(hash_label("pick"));
      item.normal = static_cast<std::size_t>(pick.below(pool.size()));
      const ImageBuffer& normal = pool[item.normal];
      const int w = normal.width(), h = normal.height();
      double u = pick.uniform() * total;
      int engine = 0;
      while (engine < 3 && (u >= weights[engine] || weights[engine] == 0.0)) u -= weights[engine++];

      Rng er = r.split(hash_label("engine"));
      switch (engine) {
        case 0: {
          const auto kind = static_cast<TextureKind>(er.below(4));
          const ImageBuffer tex = procedural_texture(kind, w, h, normal.channels(), er);
          item.sample = perlin_synthesize(normal, tex, rc.perlin_params, er.split(1));
          break;
        }
        case 1: {
          const ImageBuffer& donor = pool[static_cast<std::size_t>(er.below(pool.size()))];
          item.sample = cut_paste(normal, er, rc.cutpaste_frac, &donor);
          break;
        }
        case 2: {
          const DefectMask mask = perlin_mask(w, h, rc.perlin_params, er.split(1));
          item.sample = gaussian_corrupt(normal, mask, rc.gaussian_sigma, er);
          break;
        }
        default: {
          DefectMask mask = perlin_mask(w, h, rc.perlin_params, er.split(1));
          for (int x = 0; x < w; ++x) mask.set(x, 0, false), mask.set(x, h - 1, false);
          for (int y = 0; y < h; ++y) mask.set(0, y, false), mask.set(w - 1, y, false);
          const ImageBuffer tex = procedural_texture(TextureKind::Clouds, w, h, normal.channels(), er);
          item.sample = poisson_blend(normal, tex, mask, rc.poisson_tol);
          break;
        }
      }
      item.sample.seed = r.key();
      if (!mask_local(normal, item.sample.image, item.sample.mask)) {
        throw Error(ErrorCode::EngineFailure, "sample changed pixels outside its mask");
      }
    } catch (const std::exception& ex) {
      item.error = ex.what();
    }
  });

  std::string failures;
  int failed = 0;
  for (int i = 0; i < n; ++i) {
    const Item& item = items[static_cast<std::size_t>(i)];
    if (item.error.empty()) continue;
    if (failed++ < 20) failures += (failures.empty() ? "" : "; ") + numbered("rule", i) + ": " + item.error;
  }
  if (failed) {
    throw Error(ErrorCode::EngineFailure, std::to_string(failed) + " rule samples failed: " + failures, out.string());
  }

  Manifest m;
  m.dataset_id = "rule-" + std::to_string(cfg.seed) + "-" + std::to_string(n);
  m.kind = "rule";
  m.config_hash = cfg.hash();
  m.root = out;
  std::map<std::string, int> engines;
  for (int i = 0; i < n; ++i) {
    const Item& item = items[static_cast<std::size_t>(i)];
    ManifestEntry e;
    e.id = numbered("rule", i);
    e.image = "images/" + e.id + ".png";
    e.mask = "masks/" + e.id + ".png";
    e.source = relative_path(normals.resolve(normals.entries[item.normal].image), out);
    e.provenance = item.sample.provenance.str();
    e.seed = item.sample.seed;
    e.category = normals.entries[item.normal].category;
    save_image(item.sample.image, out / e.image);
    save_image(item.sample.mask.to_image(), out / e.mask);
    ++engines[item.sample.provenance.tag];
    m.entries.push_back(std::move(e));
  }
  m.stats = json{{"engines", engines}};
  m.hash_files();
  m.save(out);
  return m;
}

// ---- Generative dataset -----------------------------------------------------

GenRun generate_gen_dataset(const Manifest& normals, const PipelineConfig& cfg, Generator& generator,
                            const fs::path& out, int n_accept, int max_attempts) {
  if (n_accept < 0) n_accept = cfg.genclient.n_accept;
  if (n_accept < 1) throw Error(ErrorCode::InvalidArgument, "n_accept must be >= 1");
  if (max_attempts <= 0) max_attempts = cfg.genclient.attempts_per_accept * n_accept;
  if (normals.entries.empty()) throw Error(ErrorCode::InvalidArgument, "no normal images", normals.dataset_id);

  const PromptRegistry registry = PromptRegistry::from_json(cfg.genclient.prompts);
  const std::vector<std::string> vocabulary(registry.vocabulary().begin(), registry.vocabulary().end());
  if (vocabulary.empty()) throw Error(ErrorCode::InvalidArgument, "prompt vocabulary is empty");
  const MatchFilter filter(cfg.filter);
  const Rng root = Rng(cfg.seed).split(hash_label("gen"));

  fs::create_directories(out);
  const fs::path log_path = out / "filter_reports.jsonl";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw Error(ErrorCode::IoFailure, "cannot open filter log", log_path.string());

  GenRun run;
  run.manifest.dataset_id = "gen-" + std::to_string(cfg.seed) + "-" + std::to_string(n_accept);
  run.manifest.kind = "gen";
  run.manifest.config_hash = cfg.hash();
  run.manifest.root = out;
  for (const char* d : {"NoAnomaly", "Desired", "Irrelevant", "Degenerate"}) run.decisions[d] = 0;

  struct Attempt {
    std::size_t normal = 0;
    ImageBuffer source;
    GenerationResponse response;
    Prompt prompt;
    std::string request_id;
    std::uint64_t key = 0;
    std::optional<FilterReport> report;
    std::optional<FilterReport> degenerate;
    std::optional<Error> error;
  };
  auto attempt = [&](int k) {
    Attempt a;
    try {
      Rng r = root.split(static_cast<std::uint64_t>(k));
      a.key = r.key();
      a.normal = static_cast<std::size_t>(r.below(normals.entries.size()));
      const ManifestEntry& src = normals.entries[a.normal];
      a.source = load_image(normals.resolve(src.image));
      const std::string category = src.category.empty() ? "product" : src.category;
      a.prompt = build_prompt(category, vocabulary[r.below(vocabulary.size())], registry);
      GenerationRequest req;
      req.request_id = a.request_id = "s" + std::to_string(cfg.seed) + "-" + numbered("attempt", k);
      req.image = a.source;
      req.prompt = a.prompt.rendered;
      req.guidance = cfg.genclient.guidance;
      a.response = generator.generate(req);
      try {
        a.report = filter.evaluate(a.source, a.response.image);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateImage) throw;
        a.degenerate = filter.analyze(a.source, a.response.image).report;
      }
    } catch (const Error& e) {
      a.error = e;
    } catch (const std::exception& e) {
      a.error = Error(ErrorCode::EngineFailure, e.what(), "attempt-" + std::to_string(k));
    }
    return a;
  };

  // Attempts run concurrently in batches and are committed in attempt order,
  // so the result does not depend on scheduling.
  const int batch = std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  while (run.accepted < n_accept && run.attempts < max_attempts) {
    const int first = run.attempts;
    const int count = std::min(batch, max_attempts - first);
    std::vector<Attempt> results(static_cast<std::size_t>(count));
    parallel_for(count, [&](int i) { results[static_cast<std::size_t>(i)] = attempt(first + i); });

    for (int i = 0; i < count && run.accepted < n_accept; ++i) {
      Attempt& a = results[static_cast<std::size_t>(i)];
      if (a.error) throw *a.error;
      const int k = run.attempts++;
      const ManifestEntry& src = normals.entries[a.normal];
      const std::string normal_rel = relative_path(normals.resolve(src.image), out);
      json line{{"attempt", k}, {"request_id", a.request_id}, {"prompt", a.prompt.rendered}, {"normal", normal_rel}};
      if (!a.response.meta.empty()) line["meta"] = a.response.meta;

      std::string rel;
      if (a.report && a.report->decision == Decision::Desired) {
        ManifestEntry e;
        e.id = numbered("gen", run.accepted);
        e.image = "images/" + e.id + ".png";
        e.source = normal_rel;
        e.provenance = "gen:" + a.prompt.id();
        e.seed = a.key;
        e.category = src.category;
        e.filter = a.report;
        e.meta = json{{"request_id", a.request_id}, {"prompt", a.prompt.rendered}};
        if (!a.response.meta.empty()) e.meta["service"] = a.response.meta;
        save_image(a.response.image, out / e.image);
        rel = e.image;
        run.manifest.entries.push_back(std::move(e));
        ++run.accepted;
      } else {
        rel = "rejected/" + a.request_id + ".png";
        save_image(a.response.image, out / rel);
      }
      const std::string decision = a.report ? to_string(a.report->decision) : "Degenerate";
      ++run.decisions[decision];
      line["candidate"] = rel;
      line["decision"] = decision;
      if (a.report) line["filter"] = *a.report;
      if (a.degenerate) line["filter"] = *a.degenerate;
      log << line.dump() << '\n';
    }
  }
  log.close();

  run.manifest.stats = json{{"attempts", run.attempts},
                            {"accepted", run.accepted},
                            {"acceptance_rate", run.acceptance_rate()},
                            {"decisions", run.decisions}};
  run.manifest.hash_files();
  run.manifest.save(out);
  if (run.accepted < n_accept) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "accepted %d of %d after %d attempts (acceptance rate %.3f)", run.accepted,
                  n_accept, run.attempts, run.acceptance_rate());
    throw Error(ErrorCode::AcceptanceExhausted, buf, out.string());
  }
  return run;
}

std::vector<TrainPair> load_pairs(const std::vector<Manifest>& manifests) {
  std::map<std::string, ImageBuffer> sources;
  std::vector<TrainPair> pairs;
  for (const auto& m : manifests) {
    for (const auto& e : m.entries) {
      const fs::path ip = m.resolve(e.image);
      if (e.source.empty()) {
        ImageBuffer img = load_gray(ip);
        pairs.push_back({img, img});
        continue;
      }
      const std::string key = fs::absolute(m.resolve(e.source)).lexically_normal().string();
      auto it = sources.find(key);
      if (it == sources.end()) it = sources.emplace(key, load_gray(key)).first;
      pairs.push_back({load_gray(ip), it->second});
    }
  }
  return pairs;
}

// ---- Strategies -------------------------------------------------------------

char strategy_letter(Strategy s) { return static_cast<char>('a' + static_cast<int>(s)); }

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::SimOnly: return "sim-only";
    case Strategy::GenOnly: return "gen-only";
    case Strategy::Mixed: return "mixed";
    case Strategy::GenThenSim: return "gen-then-sim";
    case Strategy::SimThenGen: return "sim-then-gen";
  }
  return "sim-then-gen";
}

Strategy strategy_from_string(const std::string& s) {
  for (Strategy k : kAllStrategies)
    if (s == std::string(1, strategy_letter(k)) || s == strategy_name(k)) return k;
  throw Error(ErrorCode::InvalidArgument, "unknown strategy", s);
}

void to_json(json& j, const StrategyPlan& p) {
  json stages = json::array();
  for (const auto& s : p.stages) stages.push_back({{"datasets", s.datasets}, {"schedule", s.schedule}});
  j = json{{"strategy", std::string(1, strategy_letter(p.strategy))},
           {"name", strategy_name(p.strategy)},
           {"stages", stages},
           {"eval", p.eval},
           {"seed", p.seed},
           {"detector", {{"patch", p.detector.patch}, {"stride", p.detector.stride}, {"hidden", p.detector.hidden}}}};
}

void from_json(const json& j, StrategyPlan& p) {
  p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  p.stages.clear();
  for (const auto& s : j.at("stages")) {
    PlanStage st;
    s.at("datasets").get_to(st.datasets);
    s.at("schedule").get_to(st.schedule);
    p.stages.push_back(std::move(st));
  }
  j.at("eval").get_to(p.eval);
  p.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("detector")) {
    const json& d = j.at("detector");
    read_opt(d, "patch", p.detector.patch);
    read_opt(d, "stride", p.detector.stride);
    read_opt(d, "hidden", p.detector.hidden);
  }
}

StrategyPlan make_plan(Strategy s, const PipelineConfig& cfg, const std::string& rule_manifest,
                       const std::string& gen_manifest, const std::string& eval_manifest) {
  StrategyPlan plan;
  plan.strategy = s;
  plan.eval = eval_manifest;
  plan.seed = cfg.seed;
  plan.detector = cfg.detector;

  const TrainSchedule& base = cfg.strategies.base;
  auto schedule = [&](const char* stage, int index) {
    TrainSchedule t = base;
    t.stage = stage;
    t.seed = Rng(cfg.seed).split({hash_label("schedule"), static_cast<std::uint64_t>(index)}).next_u64();
    return t;
  };
  // Second stage sized in optimizer steps relative to the first.
  auto finetune = [&](std::size_t first_size, std::size_t second_size) {
    TrainSchedule t = schedule("finetune", 1);
    t.learning_rate = base.learning_rate * cfg.strategies.finetune_lr_fraction;
    const double epochs = cfg.strategies.finetune_step_fraction * base.epochs * static_cast<double>(first_size) /
                          static_cast<double>(std::max<std::size_t>(1, second_size));
    t.epochs = std::max(1, static_cast<int>(std::lround(epochs)));
    return t;
  };
  auto size_of = [](const std::string& path) { return Manifest::load(path).entries.size(); };

  switch (s) {
    case Strategy::SimOnly:
      plan.stages.push_back({{rule_manifest}, schedule("single", 0)});
      break;
    case Strategy::GenOnly:
      plan.stages.push_back({{gen_manifest}, schedule("single", 0)});
      break;
    case Strategy::Mixed:
      plan.stages.push_back({{rule_manifest, gen_manifest}, schedule("single", 0)});
      break;
    case Strategy::GenThenSim:
      plan.stages.push_back({{gen_manifest}, schedule("pretrain", 0)});
      plan.stages.push_back({{rule_manifest}, finetune(size_of(gen_manifest), size_of(rule_manifest))});
      break;
    case Strategy::SimThenGen:
      plan.stages.push_back({{rule_manifest}, schedule("pretrain", 0)});
      plan.stages.push_back({{gen_manifest}, finetune(size_of(rule_manifest), size_of(gen_manifest))});
      break;
  }
  return plan;
}

json StrategyResult::to_json(bool with_timing) const {
  json stages_j = json::array();
  for (const auto& s : stages) {
    json sj{{"samples", s.samples}, {"steps", s.steps}, {"loss", s.loss}};
    if (with_timing) sj["seconds"] = s.seconds;
    stages_j.push_back(sj);
  }
  return json{{"plan", plan},
              {"stages", stages_j},
              {"auroc", auroc},
              {"pooled_auroc", pooled_auroc},
              {"category_auroc", category_auroc},
              {"model_sha256", model_sha256}};
}

StrategyResult StrategyResult::from_json(const json& j) {
  StrategyResult r;
  j.at("plan").get_to(r.plan);
  for (const auto& s : j.at("stages")) {
    StageResult st;
    st.samples = s.value("samples", std::size_t{0});
    st.steps = s.value("steps", std::size_t{0});
    s.at("loss").get_to(st.loss);
    st.seconds = s.value("seconds", 0.0);
    r.stages.push_back(std::move(st));
  }
  r.auroc = j.at("auroc").get<double>();
  r.pooled_auroc = j.value("pooled_auroc", r.auroc);
  r.category_auroc = j.value("category_auroc", std::map<std::string, double>{});
  r.model_sha256 = j.value("model_sha256", "");
  return r;
}

double category_mean_auroc(const std::vector<ScoreRecord>& records, const std::vector<std::string>& categories,
                           std::map<std::string, double>* per_category) {
  if (records.size() != categories.size()) {
    throw Error(ErrorCode::DimensionMismatch, "one category per score record required");
  }
  std::map<std::string, std::vector<ScoreRecord>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[categories[i]].push_back(records[i]);
  double sum = 0.0;
  int counted = 0;
  for (const auto& [cat, recs] : groups) {
    const bool has_n = std::any_of(recs.begin(), recs.end(), [](auto& r) { return r.label == Label::Normal; });
    const bool has_a = std::any_of(recs.begin(), recs.end(), [](auto& r) { return r.label == Label::Anomalous; });
    if (!has_n || !has_a) continue;
    const double a = compute_auroc(recs);
    if (per_category) (*per_category)[cat] = a;
    sum += a;
    ++counted;
  }
  if (!counted) throw Error(ErrorCode::OneClassOnly, "no category has both normal and anomalous records");
  return sum / counted;
}

std::vector<ScoreRecord> score_manifest(const AutoencoderModel& model, const Manifest& eval,
                                        std::vector<std::string>* categories) {
  std::vector<ScoreRecord> out(eval.entries.size());
  parallel_for(static_cast<int>(eval.entries.size()), [&](int i) {
    const auto& e = eval.entries[static_cast<std::size_t>(i)];
    const Label label = e.label == "anomalous" ? Label::Anomalous : Label::Normal;
    out[static_cast<std::size_t>(i)] = anomaly_score(model, load_gray(eval.resolve(e.image)), e.id, label);
  });
  if (categories) {
    categories->clear();
    for (const auto& e : eval.entries) categories->push_back(e.category);
  }
  return out;
}

StrategyResult run_strategy(const StrategyPlan& plan, const std::optional<fs::path>& out) {
  const std::size_t expected = (plan.strategy == Strategy::GenThenSim || plan.strategy == Strategy::SimThenGen) ? 2 : 1;
  if (plan.stages.size() != expected) {
    throw Error(ErrorCode::InvalidArgument, "strategy " + std::string(1, strategy_letter(plan.strategy)) +
                                                " needs " + std::to_string(expected) + " stage(s)");
  }
  const Manifest eval = Manifest::load(plan.resolve(plan.eval));
  eval.validate();

  std::vector<int> sizes{plan.detector.patch * plan.detector.patch};
  sizes.insert(sizes.end(), plan.detector.hidden.begin(), plan.detector.hidden.end());
  sizes.push_back(sizes.front());
  Rng init = Rng(plan.seed).split(hash_label("model-init"));
  AutoencoderModel model = AutoencoderModel::create(sizes, init, plan.detector.patch, plan.detector.stride);

  StrategyResult result;
  result.plan = plan;
  for (const auto& stage : plan.stages) {
    std::vector<Manifest> sets;
    for (const auto& path : stage.datasets) {
      sets.push_back(Manifest::load(plan.resolve(path)));
      sets.back().validate();
    }
    const std::vector<TrainPair> pairs = load_pairs(sets);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult tr = train(model, pairs, stage.schedule);
    StageResult sr;
    sr.samples = pairs.size();
    sr.steps = tr.steps;
    sr.loss = tr.epoch_loss;
    sr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.stages.push_back(std::move(sr));
  }

  std::vector<std::string> categories;
  const std::vector<ScoreRecord> scores = score_manifest(model, eval, &categories);
  result.pooled_auroc = compute_auroc(scores);
  result.auroc = category_mean_auroc(scores, categories, &result.category_auroc);
  const std::vector<std::uint8_t> blob = model.serialize();
  result.model_sha256 = sha256_hex(blob);

  if (out) {
    fs::create_directories(*out);
    write_text(*out / "result.json", result.to_json().dump(2) + "\n");
    json timing = json::array();
    for (const auto& s : result.stages) timing.push_back(s.seconds);
    write_text(*out / "timing.json", json{{"stage_seconds", timing}}.dump(2) + "\n");
    write_text(*out / "scores.json", json(scores).dump() + "\n");
    model.save(*out / "model.dfae");
  }
  return result;
}

// ---- Whole experiment -------------------------------------------------------

fs::path StrategyPlan::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() || base_dir.empty() ? path : (base_dir / path).lexically_normal();
}

ExperimentOutcome run_toy_experiment(const PipelineConfig& cfg, const fs::path& out, Generator* generator) {
  ExperimentOutcome o;
  o.bench = build_toy_benchmark(out / "bench", cfg);
  o.rule = generate_rule_dataset(o.bench.normals, cfg, out / "rule");
  std::unique_ptr<Generator> fallback;
  if (!generator) {
    fallback = std::make_unique<InProcessMock>(cfg.genclient.mock);
    generator = fallback.get();
  }
  o.gen = generate_gen_dataset(o.bench.normals, cfg, *generator, out / "gen");

  const std::string rule_m = (out / "rule" / Manifest::kFileName).string();
  const std::string gen_m = (out / "gen" / Manifest::kFileName).string();
  const std::string eval_m = (out / "bench" / "eval" / Manifest::kFileName).string();
  for (Strategy s : kAllStrategies) {
    // Paths relative to the result directory keep result.json independent of
    // where the experiment lives.
    const fs::path dir = out / "strategies" / std::string(1, strategy_letter(s));
    StrategyPlan plan = make_plan(s, cfg, rule_m, gen_m, eval_m);
    plan.base_dir = dir;
    plan.eval = relative_path(plan.eval, dir);
    for (auto& stage : plan.stages)
      for (auto& d : stage.datasets) d = relative_path(d, dir);
    o.results.push_back(run_strategy(plan, dir));
  }
  ReportOptions ro;
  ro.gen_dir = out / "gen";
  emit_report(o.results, out / "report", ro);
  return o;
}

}  // namespace defectforge
