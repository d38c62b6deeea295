#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>

#include "dipt/error.hpp"
#include "dipt/hash.hpp"
#include "dipt/workspace.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace dipt;
using namespace dipt::workspace;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_config_json() {
  return json::parse(R"({
    "seed": 3,
    "dataset": {"num_domains": 4, "samples_per_class_per_domain": 4, "image_size": 16},
    "teacher": {
      "model": {"dim": 16, "heads": 4, "mlp_dim": 32, "image_size": 16, "conv_channels": [4, 8]},
      "pretrain": {"epochs": 1, "batch_size": 8}
    },
    "stage1": {"steps": 3, "batch_size": 4, "sweep_k": [2, 3, 4], "sweep_learning_rates": [5e-6, 5e-5]},
    "stage2": {"base": {"epochs": 1, "batch_size": 8, "student": {"conv_channels": [4]}}, "include_vit": false},
    "eval": {"validation_domain": 3, "charts": false}
  })");
}

ExperimentConfig tiny_config(const fs::path& ws) {
  auto j = tiny_config_json();
  j["paths"]["workspace"] = ws.string();
  return ExperimentConfig::from_json(j);
}

// Relative path -> sha256 for every regular file under a directory.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = sha256_file(e.path());
  return out;
}

std::map<std::string, std::string> snapshot_prefix(const fs::path& dir, const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : snapshot(dir))
    if (k.rfind(prefix, 0) == 0) out[k] = v;
  return out;
}

int count_lines(const fs::path& p) {
  const std::string s = testing::read_file(p);
  return static_cast<int>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_CASE("default configuration") {
  auto c = ExperimentConfig::from_json(json::object());
  CHECK(c.roster().size() == 8);
  CHECK(c.validation_domain == 2);
  CHECK(c.dataset.seed == derive_seed(0, "dataset"));
  CHECK(c.pretrain.seed == derive_seed(0, "teacher"));
  CHECK(c.stage1.seed == derive_seed(0, "stage1"));
  CHECK(c.stage2.seed == derive_seed(0, "stage2"));
  auto again = ExperimentConfig::from_json(c.to_json());
  CHECK(again.to_json() == c.to_json());
}

TEST_CASE("explicit stage seeds win over the global seed") {
  auto j = tiny_config_json();
  j["stage2"]["seed"] = 99;
  auto c = ExperimentConfig::from_json(j);
  CHECK(c.effective_stage2_seed() == 99);
  CHECK(c.effective_stage1_seed() == derive_seed(3, "stage1"));
  CHECK(ExperimentConfig::from_json(c.to_json()).effective_stage2_seed() == 99);
}

TEST_CASE("configuration errors name the field") {
  auto j = tiny_config_json();
  j["stage1"]["kk"] = 2;
  try {
    ExperimentConfig::from_json(j);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("stage1.kk") != std::string::npos);
  }
  j = tiny_config_json();
  j["stage1"]["sweep_k"] = json::array();
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ValidationError);
  j = tiny_config_json();
  j["eval"]["validation_domain"] = 7;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ValidationError);
  j = tiny_config_json();
  j["teacher"]["model"]["image_size"] = 32;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ValidationError);
  j = tiny_config_json();
  j["stage1"]["steps"] = "many";
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ValidationError);
}

TEST_CASE("overrides") {
  json j = json::object();
  apply_override(j, "stage1.k=3");
  apply_override(j, "stage1.sweep_learning_rates=[1e-3, 1e-2]");
  apply_override(j, "stage2.base.student.arch=vit");
  apply_override(j, "eval.charts=false");
  CHECK(j["stage1"]["k"] == 3);
  CHECK(j["stage1"]["sweep_learning_rates"].size() == 2);
  CHECK(j["stage2"]["base"]["student"]["arch"] == "vit");
  CHECK(j["eval"]["charts"] == false);
  CHECK_THROWS_AS(apply_override(j, "novalue"), ValidationError);
  CHECK_THROWS_AS(apply_override(j, "=3"), ValidationError);
  CHECK_THROWS_AS(apply_override(j, "a..b=3"), ValidationError);
}

TEST_CASE("load_config: seed, workspace and environment") {
  auto dir = testing::scratch_dir("ws_load");
  std::ofstream(dir / "c.json") << tiny_config_json().dump();
  setenv("DIPT_WORKSPACE", (dir / "env").c_str(), 1);
  auto c = load_config(dir / "c.json", {"stage1.k=4"}, 11, std::nullopt);
  CHECK(c.workspace == dir / "env");
  CHECK(c.seed == 11);
  CHECK(c.stage1.k == 4);
  CHECK(c.stage1.seed == derive_seed(11, "stage1"));
  auto w = load_config(dir / "c.json", {}, std::nullopt, dir / "flag");
  CHECK(w.workspace == dir / "flag");
  unsetenv("DIPT_WORKSPACE");
  CHECK_THROWS_AS(load_config(dir / "c.json", {}, std::nullopt, std::nullopt), ValidationError);
  CHECK_THROWS_AS(load_config(dir / "missing.json", {}, std::nullopt, dir), LoadError);
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir / "bad.json", {}, std::nullopt, dir), ValidationError);
}

TEST_CASE("sweep winner") {
  CHECK_THROWS_AS(select_sweep_winner({}), ValidationError);
  SweepRow only{0, 3, 5e-5, 0.4, 0.9};
  CHECK(select_sweep_winner({only}).k == 3);
  std::vector<SweepRow> tie{{0, 3, 5e-6, 0.2, 0.9}, {0, 2, 5e-5, 0.2, 0.8}, {0, 2, 5e-6, 0.2, 0.7},
                            {0, 4, 5e-6, 0.3, 1.0}};
  auto w = select_sweep_winner(tie);
  CHECK(w.k == 2);
  CHECK(w.learning_rate == 5e-6);
  std::vector<SweepRow> clear{{0, 4, 5e-5, 0.1, 0.9}, {0, 2, 5e-6, 0.2, 0.9}};
  CHECK(select_sweep_winner(clear).k == 4);
}

TEST_CASE("pipeline: order, idempotence and tamper detection") {
  auto ws = testing::scratch_dir("ws_pipeline");
  auto cfg = tiny_config(ws);
  std::vector<std::string> log;
  Options opt;
  opt.log = [&](const std::string& m) { log.push_back(m); };

  try {
    tune_prompts(cfg, opt);
    FAIL("expected MissingArtifactError");
  } catch (const MissingArtifactError& e) {
    CHECK(std::string(e.what()).find("run pretrain-teacher first") != std::string::npos);
  }
  CHECK_THROWS_AS(evaluate(cfg, opt), MissingArtifactError);

  CHECK(gen_data(cfg, opt) == Outcome::ran);
  CHECK(pretrain_teacher(cfg, opt) == Outcome::ran);
  CHECK(sweep(cfg, opt) == Outcome::ran);
  CHECK(count_lines(ws / "prompts" / "sweep.csv") == 1 + 3 * 6);
  auto selection = json::parse(testing::read_file(ws / "prompts" / "selection.json"));
  CHECK(selection.size() == 3);
  CHECK_FALSE(selection.contains("3"));

  run_all(cfg, opt);
  CHECK(fs::exists(ws / "reports" / "summary.csv"));
  CHECK(count_lines(ws / "reports" / "summary.csv") == 1 + 6);
  CHECK(count_lines(ws / "reports" / "detail.csv") == 1 + 6 * 3);
  auto tune = read_tune_records(ws);
  CHECK(tune.size() == 3);
  for (const auto& r : tune) CHECK(selection[std::to_string(r.domain)]["k"] == r.k);
  CHECK(read_results(ws).size() == 6);
  CHECK_NOTHROW(verify_chain(ws));

  const auto before = snapshot(ws);
  log.clear();
  CHECK(evaluate(cfg, opt) == Outcome::skipped);
  REQUIRE(!log.empty());
  CHECK(log.back() == "evaluate: skipped (up to date)");
  run_all(cfg, opt);
  CHECK(snapshot(ws) == before);

  SUBCASE("tampered store breaks the chain") {
    {
      auto j = json::parse(testing::read_file(ws / "stores" / "domain_0.json"));
      j["matrix"][0][0] = 0.5;
      std::ofstream(ws / "stores" / "domain_0.json") << j.dump(2);
    }
    try {
      evaluate(cfg, opt);
      FAIL("expected ProvenanceError");
    } catch (const ProvenanceError& e) {
      CHECK(std::string(e.what()).find("stores/domain_0.json") != std::string::npos);
    }
    CHECK_THROWS_AS(verify_chain(ws), ProvenanceError);
  }
  SUBCASE("changed configuration needs --force") {
    auto j = tiny_config_json();
    j["paths"]["workspace"] = ws.string();
    j["stage1"]["steps"] = 4;
    auto changed = ExperimentConfig::from_json(j);
    CHECK_THROWS_AS(tune_prompts(changed, opt), ProvenanceError);
    Options forced = opt;
    forced.force = true;
    CHECK(tune_prompts(changed, forced) == Outcome::ran);
    CHECK_THROWS_AS(aggregate(changed, opt), ProvenanceError);
    CHECK(aggregate(changed, forced) == Outcome::ran);
  }
  SUBCASE("deleted artifact") {
    fs::remove(ws / "teacher" / "teacher.ckpt");
    CHECK_THROWS_AS(tune_prompts(cfg, opt), ProvenanceError);
  }
}

TEST_CASE("changing only the stage-2 seed leaves stage-1 artifacts untouched") {
  auto a = testing::scratch_dir("ws_seed_a");
  auto b = testing::scratch_dir("ws_seed_b");
  auto ca = tiny_config(a);
  auto jb = tiny_config_json();
  jb["paths"]["workspace"] = b.string();
  jb["stage2"]["seed"] = 12345;
  auto cb = ExperimentConfig::from_json(jb);
  run_all(ca);
  run_all(cb);
  for (const char* prefix : {"data/", "teacher/", "prompts/", "stores/"})
    CHECK(snapshot_prefix(a, prefix) == snapshot_prefix(b, prefix));
  CHECK(snapshot_prefix(a, "students/") != snapshot_prefix(b, "students/"));
}

TEST_CASE("pipeline runs are reproducible") {
  auto a = testing::scratch_dir("ws_repeat_a");
  auto b = testing::scratch_dir("ws_repeat_b");
  run_all(tiny_config(a));
  run_all(tiny_config(b));
  auto sa = snapshot(a), sb = snapshot(b);
  CHECK(sa == sb);
}

TEST_CASE("access audit: held-out domains stay unread until evaluation") {
  auto ws = testing::scratch_dir("ws_audit");
  auto cfg = tiny_config(ws);
  testing::LoggingLoader loader;
  Options opt;
  opt.loader = &loader;
  run_all(cfg, opt);
  REQUIRE(!loader.log.empty());
  int evaluate_reads = 0;
  for (const auto& a : loader.log) {
    switch (a.ctx.stage) {
      case data::Stage::tune:
        CHECK(a.domain == a.ctx.owner_domain);
        CHECK(a.domain != cfg.validation_domain);
        break;
      case data::Stage::sweep:
        CHECK(a.domain == cfg.validation_domain);
        break;
      case data::Stage::distill:
        CHECK(a.domain != a.ctx.rotation_test);
        CHECK(a.domain != cfg.validation_domain);
        break;
      case data::Stage::evaluate:
        CHECK(a.domain == a.ctx.rotation_test);
        ++evaluate_reads;
        break;
      case data::Stage::pretrain:
        break;
      default:
        FAIL("unexpected stage " << data::to_string(a.ctx.stage));
    }
  }
  CHECK(evaluate_reads == 3 * 8);
}
