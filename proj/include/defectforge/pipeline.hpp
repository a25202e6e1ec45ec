#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "defectforge/detector.hpp"
#include "defectforge/genclient.hpp"
#include "defectforge/manifest.hpp"
#include "defectforge/matchfilter.hpp"
#include "defectforge/rulegen.hpp"

namespace defectforge {

// ---- Configuration ----------------------------------------------------------

struct ImagesConfig {
  int size = 64;
  int train_normals = 200;
  int eval_normals = 100;
  int eval_anomalies = 100;
};

struct RuleGenConfig {
  int n = 2000;
  // Relative engine weights; zero disables an engine.
  double perlin = 0.4;
  double cutpaste = 0.2;
  double gaussian = 0.1;
  double poisson = 0.3;
  PerlinParams perlin_params;
  double cutpaste_frac = 0.3;
  double gaussian_sigma = 40.0;
  double poisson_tol = 1e-3;
};

struct GenConfig {
  std::string endpoint = "http://127.0.0.1:8765";
  int n_accept = 60;
  int attempts_per_accept = 4;
  nlohmann::json prompts = nlohmann::json::object();  // PromptRegistry::from_json; empty = defaults
  nlohmann::json guidance = nlohmann::json::object();
  RetryPolicy retry;
  // Used by the in-process mock and for the evaluation anomalies.
  MockConfig mock;
};

struct DetectorConfig {
  int patch = 16;
  int stride = 8;
  std::vector<int> hidden{128, 32, 128};
};

struct StrategyConfig {
  // Schedule of one-stage runs and of the first stage of two-stage runs.
  TrainSchedule base{"pretrain", 10, 64, 0.3, 1.0, 0};
  // Second stage: lr * finetune_lr_fraction for finetune_step_fraction of the
  // optimizer steps the first stage took (at least one epoch).
  double finetune_lr_fraction = 0.1;
  double finetune_step_fraction = 0.4;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  ImagesConfig images;
  RuleGenConfig rulegen;
  GenConfig genclient;
  FilterParams filter;
  DetectorConfig detector;
  StrategyConfig strategies;

  // Missing keys keep their defaults. Throws InvalidArgument on bad values.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // First 16 hex chars of sha256 over the canonical JSON form.
  std::string hash() const;
};

// ---- Datasets ---------------------------------------------------------------

struct ToyBenchmark {
  Manifest normals;
  Manifest eval;
};

// <out>/normals and <out>/eval. Eval anomalies are local edits of eval-only
// renders; their ellipses are recorded in the entry meta.
ToyBenchmark build_toy_benchmark(const std::filesystem::path& out, const PipelineConfig& cfg);

// Throws EngineFailure listing every failed sample id.
Manifest generate_rule_dataset(const Manifest& normals, const PipelineConfig& cfg, const std::filesystem::path& out,
                               int n = -1);

// A rule sample must equal its normal outside the mask.
bool mask_local(const ImageBuffer& normal, const ImageBuffer& sample, const DefectMask& mask);

struct GenRun {
  Manifest manifest;
  int attempts = 0;
  int accepted = 0;
  std::map<std::string, int> decisions;
  double acceptance_rate() const { return attempts ? static_cast<double>(accepted) / attempts : 0.0; }
};

// Request -> filter -> persist loop. Every attempt is logged to
// <out>/filter_reports.jsonl; rejected candidates go to <out>/rejected. Throws
// AcceptanceExhausted when max_attempts runs out first (max_attempts <= 0
// means attempts_per_accept * n_accept).
GenRun generate_gen_dataset(const Manifest& normals, const PipelineConfig& cfg, Generator& generator,
                            const std::filesystem::path& out, int n_accept = -1, int max_attempts = -1);

// Training pairs (image -> source normal) from one or more manifests.
std::vector<TrainPair> load_pairs(const std::vector<Manifest>& manifests);

// ---- Strategies -------------------------------------------------------------

enum class Strategy { SimOnly, GenOnly, Mixed, GenThenSim, SimThenGen };
inline constexpr Strategy kAllStrategies[] = {Strategy::SimOnly, Strategy::GenOnly, Strategy::Mixed,
                                              Strategy::GenThenSim, Strategy::SimThenGen};

char strategy_letter(Strategy s);
std::string strategy_name(Strategy s);
// Accepts the letter or the name ("a", "sim-only", ...).
Strategy strategy_from_string(const std::string& s);

struct PlanStage {
  std::vector<std::string> datasets;  // manifest paths
  TrainSchedule schedule;
};

struct StrategyPlan {
  Strategy strategy = Strategy::SimThenGen;
  std::vector<PlanStage> stages;
  std::string eval;
  std::uint64_t seed = 0;
  DetectorConfig detector;
  // Relative manifest paths resolve against this directory (the working
  // directory when empty). Not serialized.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const;
};

void to_json(nlohmann::json& j, const StrategyPlan& p);
void from_json(const nlohmann::json& j, StrategyPlan& p);

StrategyPlan make_plan(Strategy s, const PipelineConfig& cfg, const std::string& rule_manifest,
                       const std::string& gen_manifest, const std::string& eval_manifest);

struct StageResult {
  std::size_t samples = 0;
  std::size_t steps = 0;
  std::vector<double> loss;
  double seconds = 0.0;
};

struct StrategyResult {
  StrategyPlan plan;
  std::vector<StageResult> stages;
  double auroc = 0.0;  // mean of the per-category values
  double pooled_auroc = 0.0;
  std::map<std::string, double> category_auroc;
  std::string model_sha256;

  // Wall-clock times are left out unless asked for, so the default form is
  // reproducible byte for byte.
  nlohmann::json to_json(bool with_timing = false) const;
  static StrategyResult from_json(const nlohmann::json& j);
};

// Mean over categories of the per-category AUROC; categories with a single
// class are skipped. Throws OneClassOnly when none qualifies.
double category_mean_auroc(const std::vector<ScoreRecord>& records, const std::vector<std::string>& categories,
                           std::map<std::string, double>* per_category = nullptr);

std::vector<ScoreRecord> score_manifest(const AutoencoderModel& model, const Manifest& eval,
                                        std::vector<std::string>* categories = nullptr);

// Runs the stages on one model. With `out`, writes result.json, timing.json,
// scores.json and model.dfae there.
StrategyResult run_strategy(const StrategyPlan& plan, const std::optional<std::filesystem::path>& out = {});

// ---- Report -----------------------------------------------------------------

struct ReportOptions {
  std::optional<std::filesystem::path> gen_dir;  // source of filter montages
  int montages_per_decision = 2;
};

// report.txt, report.json, loss_curves/<letter>.json and montages/*.png.
void emit_report(const std::vector<StrategyResult>& results, const std::filesystem::path& out,
                 const ReportOptions& options = {});

// normal | candidate | difference, with the decision name drawn underneath.
ImageBuffer render_montage(const ImageBuffer& normal, const ImageBuffer& candidate, const std::string& caption);

// ---- Whole experiment -------------------------------------------------------

struct ExperimentOutcome {
  ToyBenchmark bench;
  Manifest rule;
  GenRun gen;
  std::vector<StrategyResult> results;
};

// bench -> rule set -> gen set -> strategies a..e -> report, all under `out`.
// Without a generator the in-process mock in cfg.genclient.mock is used.
ExperimentOutcome run_toy_experiment(const PipelineConfig& cfg, const std::filesystem::path& out,
                                     Generator* generator = nullptr);

}  // namespace defectforge
