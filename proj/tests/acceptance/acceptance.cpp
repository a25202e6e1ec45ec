// One line per acceptance criterion: "PASS <n> <name>: <evidence>" or FAIL.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "defectforge/error.hpp"
#include "defectforge/pipeline.hpp"
#include "defectforge/toybench.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace defectforge;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string evidence;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Shared by criteria 1, 3 and 6 so the full experiment runs twice, not three times.
struct Runs {
  fs::path work;
  std::optional<ExperimentOutcome> first;
  double first_seconds = 0;
};

Verdict strategy_ordering(Runs& runs) {
  const auto t0 = Clock::now();
  runs.first = run_toy_experiment(PipelineConfig{}, runs.work / "run1");
  runs.first_seconds = seconds_since(t0);
  std::map<char, double> auc;
  for (const auto& r : runs.first->results) auc[strategy_letter(r.plan.strategy)] = r.auroc;
  const double a = auc['a'], b = auc['b'], c = auc['c'], d = auc['d'], e = auc['e'];
  const bool ok = e > a && e > b && d < e && e - b >= 0.03 && e - d >= 0.03 && runs.first_seconds <= 600;
  return {ok, fmt("a=%.4f b=%.4f c=%.4f d=%.4f e=%.4f e-b=%.4f e-d=%.4f acceptance=%.3f in %.0fs", a, b, c, d, e,
                  e - b, e - d, runs.first->gen.acceptance_rate(), runs.first_seconds)};
}

Verdict filter_gate(Runs&) {
  const auto t0 = Clock::now();
  const PipelineConfig cfg;
  const MatchFilter filter(cfg.filter);
  const Rng root = Rng(cfg.seed).split(hash_label("fixture"));
  int identity = 0, scramble = 0, local = 0, max_area_ok = 1;
  constexpr int kFixtures = 60;
  for (int i = 0; i < kFixtures; ++i) {
    Rng r = root.split(static_cast<std::uint64_t>(i));
    GenerationRequest req;
    req.request_id = fmt("fixture-%02d", i);
    req.image = render_product(product_from_index(i), r);
    auto decide = [&](MockMode mode) {
      MockConfig mc = cfg.genclient.mock;
      mc.mode = mode;
      LocalEdit edit;
      const ImageBuffer cand = mock_transform(mc, req, nullptr, &edit);
      if (mode == MockMode::LocalEdit && edit.area_fraction(64, 64) > 0.20 + 1e-12) max_area_ok = 0;
      try {
        return filter.evaluate(req.image, cand).decision;
      } catch (const Error&) {
        return static_cast<Decision>(-1);  // ungateable counts against every class
      }
    };
    identity += decide(MockMode::Identity) == Decision::NoAnomaly;
    scramble += decide(MockMode::Scramble) == Decision::Irrelevant;
    local += decide(MockMode::LocalEdit) == Decision::Desired;
  }
  const double secs = seconds_since(t0);
  const bool ok = identity == kFixtures && scramble >= 0.95 * kFixtures && local >= 0.90 * kFixtures &&
                  max_area_ok && secs <= 30;
  return {ok, fmt("identity NoAnomaly %d/60, scramble Irrelevant %d/60, local-edit Desired %d/60 in %.1fs", identity,
                  scramble, local, secs)};
}

Verdict gen_run(Runs& runs) {
  PipelineConfig cfg;
  Manifest normals = runs.first ? runs.first->bench.normals
                                : build_toy_benchmark(runs.work / "bench-only", cfg).normals;
  MockServer server(MockConfig{});
  GenClient client(server.url(), cfg.genclient.retry);
  const auto t0 = Clock::now();
  const GenRun run = generate_gen_dataset(normals, cfg, client, runs.work / "gen300", 300);
  const double secs = seconds_since(t0);
  bool valid = true;
  try {
    Manifest::load(runs.work / "gen300").validate();
  } catch (const Error&) {
    valid = false;
  }
  const bool reported = run.manifest.stats.contains("acceptance_rate");
  const bool ok = run.accepted == 300 && run.manifest.entries.size() == 300 && reported && valid && secs <= 120;
  return {ok, fmt("accepted %d of %d attempts (rate %.3f), manifest %s, %.1fs", run.accepted, run.attempts,
                  run.acceptance_rate(), valid ? "valid" : "INVALID", secs)};
}

Eigen::MatrixXd random_matrix(int rows, int cols, Rng& r) {
  Eigen::MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = r.uniform();
  return m;
}

Verdict numerical_oracles(Runs&) {
  // Backprop against central differences.
  double worst_grad = 0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    Rng r = Rng::substream(k, hash_label("fd-model"));
    const int d = r.between(2, 9), h = r.between(2, 6);
    std::vector<int> sizes{d, h, d};
    if (r.uniform() < 0.5) sizes = {d, h, r.between(1, 4), h, d};
    AutoencoderModel m = AutoencoderModel::create(sizes, r, 1, 1);
    // Nonzero biases keep pre-activations clear of the rectifier kink, where
    // central differences straddle two slopes.
    for (auto& b : m.biases)
      for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = r.uniform(-0.5, 0.5);
    const Eigen::MatrixXd in = random_matrix(d, r.between(1, 6), r);
    const Eigen::MatrixXd tgt = random_matrix(d, static_cast<int>(in.cols()), r);
    const Gradients g = compute_gradients(m, in, tgt);
    const auto num = oracle::finite_differences(m, in, tgt, 1e-4);
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); };
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
      for (Eigen::Index i = 0; i < g.weights[l].size(); ++i) {
        double rr = rel(g.weights[l].data()[i], num.weights[l][static_cast<std::size_t>(i)]);
        worst_grad = std::max(worst_grad, rr);
      }
      for (Eigen::Index i = 0; i < g.biases[l].size(); ++i) {
        double rr = rel(g.biases[l](i), num.biases[l][static_cast<std::size_t>(i)]);
        worst_grad = std::max(worst_grad, rr);
      }
    }
  }

  // Rank AUROC against pair counting; integer scores force ties.
  int auroc_equal = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    Rng r = Rng::substream(k, hash_label("auroc-set"));
    std::vector<double> neg(static_cast<std::size_t>(r.between(1, 40))), pos(static_cast<std::size_t>(r.between(1, 40)));
    const bool coarse = k % 2 == 0;
    auto draw = [&] { return coarse ? static_cast<double>(r.between(0, 9)) : r.uniform(); };
    std::vector<ScoreRecord> recs;
    for (auto& v : neg) recs.push_back({"", Label::Normal, v = draw(), {}});
    for (auto& v : pos) recs.push_back({"", Label::Anomalous, v = draw(), {}});
    auroc_equal += compute_auroc(recs) == oracle::brute_force_auroc(neg, pos);
  }

  // Gauss-Seidel against a dense solve, interiors up to 8x8.
  double worst_poisson = 0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    Rng r = Rng::substream(k, hash_label("poisson-case"));
    const int w = r.between(3, 10), h = r.between(3, 10);
    std::vector<std::uint8_t> tp(static_cast<std::size_t>(w * h)), sp(tp.size());
    for (auto& v : tp) v = static_cast<std::uint8_t>(r.below(256));
    for (auto& v : sp) v = static_cast<std::uint8_t>(r.below(256));
    DefectMask m(w, h);
    for (int y = 1; y < h - 1; ++y)
      for (int x = 1; x < w - 1; ++x)
        if (r.uniform() < 0.8) m.set(x, y, true);
    if (m.empty()) m.set(1, 1, true);
    const ImageBuffer t(w, h, 1, tp), s(w, h, 1, sp);
    const auto fast = poisson_solve(t, s, m);
    const auto exact = oracle::dense_poisson(t, s, m);
    for (std::size_t i = 0; i < exact.size(); ++i) worst_poisson = std::max(worst_poisson, std::abs(fast.field[i] - exact[i]));
  }
  DefectMask one(3, 3);
  one.set(1, 1, true);
  const auto hand = poisson_solve(ImageBuffer(3, 3, 1, std::vector<std::uint8_t>(9, 10)),
                                  ImageBuffer(3, 3, 1, {0, 4, 0, 4, 5, 4, 0, 4, 0}), one);
  const int hand_value = hand.sample.image.at(1, 1);

  const bool ok = worst_grad < 1e-4 && auroc_equal == 100 && worst_poisson <= 0.5 && hand_value == 11 &&
                  std::abs(hand.field[4] - 11.0) < 1e-9;
  return {ok, fmt("fd max rel err %.2e over 20 models, auroc exact %d/100, poisson max dev %.3g, hand case %d",
                  worst_grad, auroc_equal, worst_poisson, hand_value)};
}

Verdict synthesis_invariants(Runs& runs) {
  PipelineConfig cfg;
  const Manifest normals = runs.first ? runs.first->bench.normals
                                      : build_toy_benchmark(runs.work / "bench-only", cfg).normals;
  const Manifest rule = generate_rule_dataset(normals, cfg, runs.work / "rule1000", 1000);
  long outside_changes = 0;
  for (const auto& e : rule.entries) {
    const ImageBuffer img = load_image(rule.resolve(e.image)), src = load_image(rule.resolve(e.source));
    const DefectMask mask = DefectMask::from_image(load_image(rule.resolve(e.mask)));
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        if (!mask.at(x, y))
          for (int c = 0; c < img.channels(); ++c) outside_changes += img.at(x, y, c) != src.at(x, y, c);
  }

  double peak = 0;
  for (std::uint64_t k = 0; k < 200; ++k) {
    Rng r = Rng::substream(k, hash_label("perlin-field"));
    PerlinParams p;
    p.cell_size = r.between(2, 32);
    p.octaves = r.between(1, 6);
    p.persistence = r.uniform(0.1, 1.0);
    const ScalarField f = fractal_perlin(64, 64, p, r);
    for (double v : f.values) peak = std::max(peak, std::abs(v));
  }

  const double f0 = perlin_fade(0.0), f1 = perlin_fade(1.0), fq = perlin_fade(0.25);
  const bool ok = rule.entries.size() == 1000 && outside_changes == 0 && peak <= 1.0 && f0 == 0.0 && f1 == 1.0 &&
                  std::abs(fq - 0.103516) <= 1e-6;
  return {ok, fmt("%zu samples, %ld changed pixels outside masks, max |perlin| %.4f over 200 fields, "
                  "fade(0)=%g fade(1)=%g fade(0.25)=%.6f",
                  rule.entries.size(), outside_changes, peak, f0, f1, fq)};
}

Verdict determinism(Runs& runs) {
  if (!runs.first) runs.first = run_toy_experiment(PipelineConfig{}, runs.work / "run1");
  run_toy_experiment(PipelineConfig{}, runs.work / "run2");
  const fs::path a = runs.work / "run1", b = runs.work / "run2";
  std::vector<std::string> fa, fb;
  for (const auto& f : oracle::list_files(a))
    if (fs::path(f).filename() != "timing.json") fa.push_back(f);
  for (const auto& f : oracle::list_files(b))
    if (fs::path(f).filename() != "timing.json") fb.push_back(f);
  int differing = 0, results = 0;
  std::string first_diff;
  if (fa == fb) {
    for (const auto& f : fa) {
      results += fs::path(f).filename() == "result.json";
      if (!oracle::same_bytes(a / f, b / f)) {
        if (!differing) first_diff = f;
        ++differing;
      }
    }
  }
  const bool ok = fa == fb && differing == 0 && results == 5 && !fa.empty();
  return {ok, fmt("%zu files compared (timing.json excluded), %d StrategyResult files, %d differ%s%s", fa.size(),
                  results, fa == fb ? differing : -1, first_diff.empty() ? "" : ", first: ",
                  first_diff.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  Runs runs;
  runs.work = fs::temp_directory_path() / "defectforge-acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--work") && i + 1 < argc) runs.work = argv[++i];
    else if (!std::strcmp(argv[i], "--only") && i + 1 < argc) only.insert(std::atoi(argv[++i]));
  }
  fs::remove_all(runs.work);
  fs::create_directories(runs.work);

  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict(Runs&)> check;
  };
  const std::vector<Criterion> criteria{
      {1, "strategy ordering, seed 7", strategy_ordering},
      {2, "filter gate on the 60-image fixture", filter_gate},
      {3, "300-sample generation run", gen_run},
      {4, "numerical oracles", numerical_oracles},
      {5, "synthesis invariants", synthesis_invariants},
      {6, "same-seed determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Verdict v;
    try {
      v = c.check(runs);
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %d %s: %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.evidence.c_str());
    std::fflush(stdout);
  }
  return failed;
}
