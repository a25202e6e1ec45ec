#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "defectforge/error.hpp"
#include "defectforge/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace defectforge;

namespace {

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;

  PipelineConfig load() const {
    PipelineConfig cfg = config.empty() ? PipelineConfig{} : PipelineConfig::load(config);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file");
  app->add_option("--seed", c.seed, "global seed (overrides the config)");
}

std::unique_ptr<Generator> make_generator(const std::string& kind, const std::string& endpoint,
                                          const PipelineConfig& cfg) {
  if (kind == "mock") return std::make_unique<InProcessMock>(cfg.genclient.mock);
  return std::make_unique<GenClient>(resolve_endpoint(endpoint.empty() ? cfg.genclient.endpoint : endpoint),
                                     cfg.genclient.retry);
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

json summary(const StrategyResult& r) {
  return json{{"strategy", std::string(1, strategy_letter(r.plan.strategy))},
              {"auroc", r.auroc},
              {"pooled_auroc", r.pooled_auroc},
              {"category_auroc", r.category_auroc}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defectforge: defect synthesis, filtering and staged detector training"};
  app.require_subcommand(1);

  // toy-bench
  Common tb_c;
  std::string tb_out, tb_generator = "mock", tb_endpoint;
  bool tb_experiment = false;
  auto* tb = app.add_subcommand("toy-bench", "render the toy benchmark; --experiment runs strategies a-e on it");
  add_common(tb, tb_c);
  tb->add_option("--out", tb_out, "output directory")->required();
  tb->add_flag("--experiment", tb_experiment, "also build both training sets, run a-e and write the report");
  tb->add_option("--generator", tb_generator, "mock (in-process) or http")->check(CLI::IsMember({"mock", "http"}));
  tb->add_option("--endpoint", tb_endpoint, "service URL for --generator http");

  // synth-rule
  Common sr_c;
  std::string sr_normals, sr_out;
  int sr_n = -1;
  auto* sr = app.add_subcommand("synth-rule", "rule-based defect dataset from a normals manifest");
  add_common(sr, sr_c);
  sr->add_option("--normals", sr_normals, "normals manifest")->required();
  sr->add_option("--out", sr_out, "output directory")->required();
  sr->add_option("--n", sr_n, "sample count (default: rulegen.n)");

  // synth-gen
  Common sg_c;
  std::string sg_normals, sg_out, sg_generator = "http", sg_endpoint;
  int sg_n = -1, sg_max = -1;
  auto* sg = app.add_subcommand("synth-gen", "generate -> filter -> persist loop against the generation service");
  add_common(sg, sg_c);
  sg->add_option("--normals", sg_normals, "normals manifest")->required();
  sg->add_option("--out", sg_out, "output directory")->required();
  sg->add_option("--n-accept", sg_n, "accepted samples wanted (default: genclient.n_accept)");
  sg->add_option("--max-attempts", sg_max, "attempt budget (default: attempts_per_accept * n_accept)");
  sg->add_option("--generator", sg_generator, "http or mock (in-process)")->check(CLI::IsMember({"mock", "http"}));
  sg->add_option("--endpoint", sg_endpoint, "service URL (DEFECTFORGE_SERVICE_URL wins)");

  // filter
  Common fl_c;
  std::string fl_normal, fl_out;
  std::vector<std::string> fl_candidates;
  auto* fl = app.add_subcommand("filter", "match-ratio gate; one FilterReport JSON line per candidate");
  add_common(fl, fl_c);
  fl->add_option("--normal", fl_normal, "normal image")->required()->check(CLI::ExistingFile);
  fl->add_option("--candidate", fl_candidates, "candidate image(s)")->required()->check(CLI::ExistingFile);
  fl->add_option("--out", fl_out, "append reports to this JSON-lines file instead of stdout");

  // train
  Common tr_c;
  std::vector<std::string> tr_data;
  std::string tr_out, tr_init, tr_stage = "single";
  std::optional<int> tr_epochs, tr_batch;
  std::optional<double> tr_lr;
  auto* tr = app.add_subcommand("train", "train the autoencoder on one or more manifests");
  add_common(tr, tr_c);
  tr->add_option("--data", tr_data, "training manifest(s)")->required();
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--init", tr_init, "start from this checkpoint");
  tr->add_option("--stage", tr_stage, "schedule label")->check(CLI::IsMember({"single", "pretrain", "finetune"}));
  tr->add_option("--epochs", tr_epochs);
  tr->add_option("--batch-size", tr_batch);
  tr->add_option("--lr", tr_lr);

  // eval
  std::string ev_model, ev_eval, ev_scores;
  auto* ev = app.add_subcommand("eval", "image-level AUROC of a checkpoint on an eval manifest");
  ev->add_option("--model", ev_model, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--eval", ev_eval, "eval manifest")->required();
  ev->add_option("--scores", ev_scores, "write per-image scores here");

  // strategy
  Common st_c;
  std::string st_which = "e", st_rule, st_gen, st_eval, st_plan, st_out;
  auto* st = app.add_subcommand("strategy", "run one training strategy (a-e) end to end");
  add_common(st, st_c);
  st->add_option("--strategy", st_which, "a..e or sim-only, gen-only, mixed, gen-then-sim, sim-then-gen");
  st->add_option("--rule", st_rule, "rule dataset manifest");
  st->add_option("--gen", st_gen, "generative dataset manifest");
  st->add_option("--eval", st_eval, "eval manifest");
  st->add_option("--plan", st_plan, "StrategyPlan or result.json (replaces the flags above); relative paths resolve against its directory");
  st->add_option("--out", st_out, "result directory")->required();

  // report
  std::vector<std::string> rp_results;
  std::string rp_out, rp_gen;
  int rp_montages = 2;
  auto* rp = app.add_subcommand("report", "comparison table, loss curves and filter montages");
  rp->add_option("--results", rp_results, "result.json files or their directories")->required();
  rp->add_option("--out", rp_out, "report directory")->required();
  rp->add_option("--gen-dir", rp_gen, "generative dataset directory for montages");
  rp->add_option("--montages", rp_montages, "montages per decision");

  // serve-mock
  std::string sm_mode = "local-edit";
  std::uint64_t sm_seed = 0;
  int sm_port = 8765;
  auto* sm = app.add_subcommand("serve-mock", "deterministic mock of the generation service");
  sm->add_option("--mode", sm_mode)->check(CLI::IsMember({"identity", "local-edit", "scramble", "flaky", "mixed"}));
  sm->add_option("--seed", sm_seed);
  sm->add_option("--port", sm_port, "0 picks a free port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << Error(ErrorCode::InvalidArgument, e.what()).to_json() << std::endl;
    return 2;
  }

  try {
    if (*tb) {
      const PipelineConfig cfg = tb_c.load();
      if (!tb_experiment) {
        const ToyBenchmark b = build_toy_benchmark(tb_out, cfg);
        print({{"normals", (fs::path(tb_out) / "normals" / Manifest::kFileName).string()},
               {"eval", (fs::path(tb_out) / "eval" / Manifest::kFileName).string()},
               {"train_normals", b.normals.entries.size()},
               {"eval_items", b.eval.entries.size()}});
      } else {
        auto gen = make_generator(tb_generator, tb_endpoint, cfg);
        const ExperimentOutcome o = run_toy_experiment(cfg, tb_out, gen.get());
        json rows = json::array();
        for (const auto& r : o.results) rows.push_back(summary(r));
        print({{"acceptance_rate", o.gen.acceptance_rate()}, {"results", rows},
               {"report", (fs::path(tb_out) / "report" / "report.txt").string()}});
      }
    } else if (*sr) {
      const PipelineConfig cfg = sr_c.load();
      const Manifest m = generate_rule_dataset(Manifest::load(sr_normals), cfg, sr_out, sr_n);
      print({{"manifest", (fs::path(sr_out) / Manifest::kFileName).string()}, {"entries", m.entries.size()},
             {"stats", m.stats}});
    } else if (*sg) {
      const PipelineConfig cfg = sg_c.load();
      auto gen = make_generator(sg_generator, sg_endpoint, cfg);
      const GenRun run = generate_gen_dataset(Manifest::load(sg_normals), cfg, *gen, sg_out, sg_n, sg_max);
      print({{"manifest", (fs::path(sg_out) / Manifest::kFileName).string()}, {"stats", run.manifest.stats}});
    } else if (*fl) {
      const PipelineConfig cfg = fl_c.load();
      const MatchFilter filter(cfg.filter);
      const ImageBuffer normal = load_image(fl_normal);
      std::ofstream file;
      if (!fl_out.empty()) {
        file.open(fl_out, std::ios::app);
        if (!file) throw Error(ErrorCode::IoFailure, "cannot open report file", fl_out);
      }
      std::ostream& os = fl_out.empty() ? std::cout : file;
      for (const auto& c : fl_candidates) {
        json line = filter.evaluate(normal, load_image(c));
        line["candidate"] = c;
        os << line.dump() << '\n';
      }
    } else if (*tr) {
      const PipelineConfig cfg = tr_c.load();
      TrainSchedule s = cfg.strategies.base;
      s.stage = tr_stage;
      if (tr_epochs) s.epochs = *tr_epochs;
      if (tr_batch) s.batch_size = *tr_batch;
      if (tr_lr) s.learning_rate = *tr_lr;
      s.seed = Rng(cfg.seed).split(hash_label("train-cli")).next_u64();
      AutoencoderModel model;
      if (!tr_init.empty()) {
        model = AutoencoderModel::load(tr_init);
      } else {
        std::vector<int> sizes{cfg.detector.patch * cfg.detector.patch};
        sizes.insert(sizes.end(), cfg.detector.hidden.begin(), cfg.detector.hidden.end());
        sizes.push_back(sizes.front());
        Rng init = Rng(cfg.seed).split(hash_label("model-init"));
        model = AutoencoderModel::create(sizes, init, cfg.detector.patch, cfg.detector.stride);
      }
      std::vector<Manifest> sets;
      for (const auto& d : tr_data) {
        sets.push_back(Manifest::load(d));
        sets.back().validate();
      }
      const TrainResult r = train(model, load_pairs(sets), s);
      model.save(tr_out);
      print({{"checkpoint", tr_out}, {"steps", r.steps}, {"epoch_loss", r.epoch_loss}, {"schedule", s}});
    } else if (*ev) {
      const AutoencoderModel model = AutoencoderModel::load(ev_model);
      const Manifest eval = Manifest::load(ev_eval);
      eval.validate();
      std::vector<std::string> categories;
      const auto scores = score_manifest(model, eval, &categories);
      std::map<std::string, double> per;
      const double mean = category_mean_auroc(scores, categories, &per);
      if (!ev_scores.empty()) write_text(ev_scores, json(scores).dump() + "\n");
      print({{"auroc", mean}, {"pooled_auroc", compute_auroc(scores)}, {"category_auroc", per}});
    } else if (*st) {
      StrategyPlan plan;
      if (!st_plan.empty()) {
        try {
          const json j = json::parse(read_text(st_plan));
          // A result.json carries its plan under "plan".
          plan = (j.contains("plan") ? j.at("plan") : j).get<StrategyPlan>();
          plan.base_dir = fs::absolute(st_plan).parent_path();
        } catch (const json::exception& e) {
          throw Error(ErrorCode::InvalidArgument, std::string("malformed plan: ") + e.what(), st_plan);
        }
      } else {
        if (st_rule.empty() || st_gen.empty() || st_eval.empty()) {
          throw Error(ErrorCode::InvalidArgument, "--rule, --gen and --eval are required without --plan");
        }
        plan = make_plan(strategy_from_string(st_which), st_c.load(), st_rule, st_gen, st_eval);
      }
      const StrategyResult r = run_strategy(plan, fs::path(st_out));
      print(summary(r));
    } else if (*rp) {
      std::vector<StrategyResult> results;
      for (const auto& p : rp_results) {
        const fs::path file = fs::is_directory(p) ? fs::path(p) / "result.json" : fs::path(p);
        try {
          results.push_back(StrategyResult::from_json(json::parse(read_text(file))));
        } catch (const json::exception& e) {
          throw Error(ErrorCode::InvalidArgument, std::string("malformed result: ") + e.what(), file.string());
        }
      }
      std::sort(results.begin(), results.end(),
                [](const auto& a, const auto& b) { return a.plan.strategy < b.plan.strategy; });
      ReportOptions opts;
      if (!rp_gen.empty()) opts.gen_dir = fs::path(rp_gen);
      opts.montages_per_decision = rp_montages;
      emit_report(results, rp_out, opts);
      std::cout << read_text(fs::path(rp_out) / "report.txt");
    } else if (*sm) {
      MockConfig mc;
      mc.mode = mock_mode_from_string(sm_mode);
      mc.seed = sm_seed;
      MockServer server(mc, sm_port);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << json{{"url", server.url()}, {"port", server.port()}, {"mode", sm_mode}}.dump() << std::endl;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
      server.stop();
    }
  } catch (const Error& e) {
    std::cerr << e.to_json() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "Internal"}, {"message", e.what()}, {"subject", ""}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
