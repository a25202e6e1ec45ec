#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include <nlohmann/json.hpp>

#include "defectforge/genclient.hpp"
#include "defectforge/manifest.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace defectforge;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

const fs::path& work() {
  static const fs::path w = oracle::scratch_dir("cli");
  return w;
}

Run run(const std::string& args, const std::string& env = {}) {
  const fs::path out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd =
      env + " '" + std::string(DEFECTFORGE_CLI) + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(out);
  r.err = read_text(err);
  return r;
}

std::string error_code(const Run& r) {
  const json j = json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(j.contains("message"));
  return j.at("error").get<std::string>();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// A config small enough for the whole flow to finish in seconds.
fs::path config() {
  const fs::path p = work() / "config.json";
  if (!fs::exists(p)) {
    write_text(p, json{{"seed", 5},
                       {"images", {{"train_normals", 9}, {"eval_normals", 6}, {"eval_anomalies", 6}}},
                       {"rulegen", {{"n", 12}}},
                       {"genclient",
                        {{"n_accept", 4},
                         {"endpoint", "http://127.0.0.1:1"},
                         {"retry", {{"max_retries", 1}, {"initial_backoff_ms", 1}, {"timeout_s", 2}}}}},
                       {"strategies", {{"schedule", {{"epochs", 1}}}}}}
                      .dump());
  }
  return p;
}

}  // namespace

TEST_CASE("argument errors exit 2 with error json") {
  const Run r = run("synth-rule --out x");
  CHECK(r.code == 2);
  CHECK(error_code(r) == "InvalidArgument");
  const Run bad = run("serve-mock --mode sideways");
  CHECK(bad.code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("library errors exit 1 with the error code") {
  const Run r = run("synth-rule --normals " + q(work() / "none" / "manifest.json") + " --out " + q(work() / "r0"));
  CHECK(r.code == 1);
  CHECK(error_code(r) == "NotFound");

  std::ofstream(work() / "bad.dfae") << "garbage!";
  const Run e = run("eval --model " + q(work() / "bad.dfae") + " --eval " + q(work() / "x"));
  CHECK(e.code == 1);
  CHECK(error_code(e) == "UnsupportedFormat");
}

TEST_CASE("toy experiment and replay of a stored result") {
  const fs::path d = work() / "exp";
  Run r = run("toy-bench --experiment --out " + q(d) + " --config " + q(config()));
  REQUIRE(r.code == 0);
  const json summary = json::parse(r.out);
  CHECK(summary["results"].size() == 5);
  CHECK(fs::exists(d / "report" / "report.txt"));
  r = run("strategy --plan " + q(d / "strategies" / "d" / "result.json") + " --out " + q(work() / "replay"));
  REQUIRE(r.code == 0);
  CHECK(oracle::same_bytes(d / "strategies" / "d" / "result.json", work() / "replay" / "result.json"));
}

TEST_CASE("end to end through the subcommands") {
  const fs::path d = work() / "flow";
  const std::string cfg = " --config " + q(config());

  Run r = run("toy-bench --out " + q(d / "bench") + cfg);
  REQUIRE(r.code == 0);
  const json bench = json::parse(r.out);
  CHECK(bench["train_normals"] == 9);
  const std::string normals = bench["normals"], eval = bench["eval"];

  r = run("synth-rule --normals " + q(normals) + " --out " + q(d / "rule") + cfg);
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["entries"] == 12);

  SUBCASE("synth-gen honours the endpoint override and reports the acceptance rate") {
    MockServer server(MockConfig{});
    r = run("synth-gen --normals " + q(normals) + " --out " + q(d / "gen") + cfg,
            "DEFECTFORGE_SERVICE_URL=" + server.url());
    REQUIRE(r.code == 0);
    const json stats = json::parse(r.out)["stats"];
    CHECK(stats["accepted"] == 4);
    CHECK(stats["acceptance_rate"].get<double>() > 0.0);
    Manifest::load(d / "gen").validate();

    r = run("strategy --strategy e --rule " + q(d / "rule" / "manifest.json") + " --gen " +
                q(d / "gen" / "manifest.json") + " --eval " + q(eval) + " --out " + q(d / "e") + cfg);
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out).contains("auroc"));
    write_text(d / "plan.json", json::parse(read_text(d / "e" / "result.json"))["plan"].dump());
    r = run("strategy --plan " + q(d / "plan.json") + " --out " + q(d / "e2"));
    REQUIRE(r.code == 0);
    CHECK(oracle::same_bytes(d / "e" / "result.json", d / "e2" / "result.json"));
    write_text(d / "broken-plan.json", "{\"strategy\": 3");
    r = run("strategy --plan " + q(d / "broken-plan.json") + " --out " + q(d / "e3"));
    CHECK(r.code == 1);
    CHECK(error_code(r) == "InvalidArgument");
    r = run("report --results " + q(d / "e") + " --out " + q(d / "report") + " --gen-dir " + q(d / "gen"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("sim-then-gen") != std::string::npos);
    CHECK(fs::exists(d / "report" / "report.json"));
  }

  SUBCASE("unreachable service") {
    r = run("synth-gen --normals " + q(normals) + " --out " + q(d / "gen-dead") + cfg,
            "DEFECTFORGE_SERVICE_URL=http://127.0.0.1:1");
    CHECK(r.code == 1);
    CHECK(error_code(r) == "ServiceUnavailable");
  }

  SUBCASE("filter, train and eval") {
    const Manifest m = Manifest::load(normals);
    const std::string img = m.resolve(m.entries[0].image).string();
    r = run("filter --normal " + q(img) + " --candidate " + q(img) + cfg);
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out)["decision"] == "NoAnomaly");

    r = run("train --data " + q(d / "rule") + " --out " + q(d / "m.dfae") + " --epochs 1" + cfg);
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out)["epoch_loss"].size() == 1);
    r = run("eval --model " + q(d / "m.dfae") + " --eval " + q(eval) + " --scores " + q(d / "scores.json"));
    REQUIRE(r.code == 0);
    const double auc = json::parse(r.out)["auroc"];
    CHECK((auc >= 0.0 && auc <= 1.0));
    CHECK(json::parse(read_text(d / "scores.json")).size() == 12);
  }
}
