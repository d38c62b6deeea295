#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "dipt/error.hpp"
#include "dipt/eval.hpp"
#include "dipt/prompts.hpp"
#include "dipt/stage1.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace dipt;
using namespace dipt::eval;

namespace {

RotationResult from_scores(const std::string& name, std::vector<std::pair<double, double>> acc_f1) {
  RotationResult r;
  r.method = name;
  int d = 0;
  for (auto [a, f] : acc_f1) {
    RotationEntry e;
    e.test_domain = d++;
    e.metrics.accuracy = a;
    e.metrics.macro_f1 = f;
    e.metrics.per_class_f1 = {f, f};
    e.metrics.confusion = {{5, 1}, {2, 4}};
    r.rotations.push_back(e);
  }
  summarize(r);
  return r;
}

std::string two_decimals(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

store::EmbeddingStore domain_store(int d, int nc, int dim, double value) {
  stage1::DomainClassEmbeddings e;
  e.domain_id = d;
  e.rows = nn::Tensor(nc, dim);
  for (int c = 0; c < nc; ++c)
    for (int j = 0; j < dim; ++j) e.rows(c, j) = value + c + 0.1 * j;
  std::vector<std::string> names;
  for (int c = 0; c < nc; ++c) names.push_back("class " + std::to_string(c));
  return store::make_domain_store(e, names, "teacher", "cfg", {});
}

}  // namespace

TEST_CASE("summary over four rotations gives mean 90.09 and worst 80.14") {
  auto r = from_scores("rise_dipt", {{0.9051, 0.9051}, {0.9587, 0.9587}, {0.9384, 0.9384}, {0.8014, 0.8014}});
  CHECK(r.rotations.size() == 4);
  CHECK(two_decimals(r.mean.macro_f1) == "90.09");
  CHECK(two_decimals(r.worst.macro_f1) == "80.14");
  CHECK(two_decimals(r.mean.accuracy) == "90.09");
}

TEST_CASE("single rotation: mean equals worst") {
  auto r = from_scores("m", {{0.7, 0.6}});
  CHECK(r.mean.accuracy == r.worst.accuracy);
  CHECK(r.mean.macro_f1 == r.worst.macro_f1);
  RotationResult empty;
  CHECK_THROWS_AS(summarize(empty), ValidationError);
}

TEST_CASE("worst takes each metric's own minimum") {
  auto r = from_scores("m", {{0.9, 0.5}, {0.6, 0.8}});
  CHECK(r.worst.accuracy == doctest::Approx(0.6));
  CHECK(r.worst.macro_f1 == doctest::Approx(0.5));
}

TEST_CASE("roster") {
  distill::DistillConfig base;
  base.epochs = 7;
  auto full = default_roster(base, true);
  auto conv = default_roster(base, false);
  REQUIRE(full.size() == 8);
  REQUIRE(conv.size() == 6);
  std::vector<std::string> names;
  for (const auto& m : full) names.push_back(m.name);
  CHECK(names == std::vector<std::string>{"zero_shot", "kd", "rise", "rise_dipt", "vl2v", "vl2v_dipt", "vl2v_vit",
                                          "vl2v_vit_dipt"});
  CHECK(full[0].zero_shot);
  CHECK(full[1].config.mode == distill::Mode::vanilla_kd);
  CHECK(full[3].config.source == distill::Source::dipt_invariant);
  CHECK(full[4].config.source == distill::Source::generic_prompt);
  CHECK(full[7].config.student.arch == "vit");
  for (const auto& m : full) CHECK(m.config.epochs == 7);
  auto back = MethodSpec::from_json(full[3].to_json());
  CHECK(back.to_json() == full[3].to_json());
}

TEST_CASE("method seeds are deterministic and distinct") {
  CHECK(method_seed(5, "rise", 0) == method_seed(5, "rise", 0));
  CHECK(method_seed(5, "rise", 0) != method_seed(5, "rise", 1));
  CHECK(method_seed(5, "rise", 0) != method_seed(5, "rise_dipt", 0));
  CHECK(method_seed(5, "rise", 0) != method_seed(6, "rise", 0));
}

TEST_CASE("rotation invariant store uses exactly the training domains") {
  std::vector<store::EmbeddingStore> stores;
  for (int d : {0, 1, 3, 4}) stores.push_back(domain_store(d, 2, 3, d));
  data::Rotation rot{{1, 3, 4}, 0};
  auto inv = rotation_invariant_store(stores, rot);
  CHECK(inv.provenance.source_domains == std::vector<int>{1, 3, 4});
  for (int c = 0; c < 2; ++c)
    for (int j = 0; j < 3; ++j) CHECK(inv.matrix(c, j) == doctest::Approx((1.0 + 3.0 + 4.0) / 3.0 + c + 0.1 * j));

  data::Rotation missing{{1, 2}, 0};
  CHECK_THROWS_AS(rotation_invariant_store(stores, missing), MissingArtifactError);
}

TEST_CASE("results json round trip") {
  std::vector<RotationResult> rs{from_scores("a", {{0.5, 0.4}, {0.75, 0.7}}), from_scores("b", {{1.0, 1.0}})};
  auto back = results_from_json(results_to_json(rs));
  REQUIRE(back.size() == 2);
  CHECK(results_to_json(back) == results_to_json(rs));
  CHECK(back[0].worst.macro_f1 == 0.4);
  CHECK(back[0].rotations[1].metrics.confusion == rs[0].rotations[1].metrics.confusion);
  CHECK_THROWS(results_from_json(nlohmann::json::array({{{"method", "x"}}})));
}

TEST_CASE("report files") {
  std::vector<RotationResult> rs;
  for (const char* m : {"zero_shot", "kd", "rise", "rise_dipt", "vl2v", "vl2v_dipt"})
    rs.push_back(from_scores(m, {{0.9051, 0.9}, {0.9587, 0.95}, {0.9384, 0.93}, {0.8014, 0.8}}));
  auto dir = testing::scratch_dir("eval_report");
  emit_report(rs, dir / "a");
  emit_report(rs, dir / "b");
  const std::string summary = testing::read_file(dir / "a" / "summary.csv");
  const std::string detail = testing::read_file(dir / "a" / "detail.csv");
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 7);
  CHECK(std::count(detail.begin(), detail.end(), '\n') == 25);
  CHECK(summary.rfind("method,mean_acc,mean_f1,worst_acc,worst_f1\n", 0) == 0);
  CHECK(detail.rfind("method,test_domain,acc,f1\n", 0) == 0);
  CHECK(summary.find("rise_dipt,90.0900,89.5000,80.1400,80.0000\n") != std::string::npos);
  for (const char* f : {"summary.csv", "detail.csv", "acc.png", "f1.png"})
    CHECK(testing::read_file(dir / "a" / f) == testing::read_file(dir / "b" / f));

  emit_report(rs, dir / "plain", false);
  CHECK_FALSE(std::filesystem::exists(dir / "plain" / "acc.png"));

  std::ofstream(dir / "blocker") << "x";
  CHECK_THROWS_AS(emit_report(rs, dir / "blocker" / "out"), IoError);
}

namespace {

struct Bench {
  data::DomainDataset ds;
  teacher::TeacherModel teacher;
  store::EmbeddingStore agg, generic;
  std::vector<store::EmbeddingStore> domain_stores;
};

Bench make_bench(const std::filesystem::path& dir, const data::ImageLoader& loader) {
  auto ds = data::generate_dataset(testing::tiny_spec(4, 6, 9), dir);
  auto bank = prompts::default_bank(ds.class_names);
  teacher::TeacherModel t(testing::tiny_teacher_config(), teacher::Tokenizer::build(bank.corpus()), 12);
  auto agg = prompts::compute_aggregated_embeddings(t, bank);
  Bench b{ds, t, store::make_store("agg_template", agg, {t.hash(), "bank", {}, {}}),
          store::make_store("generic_prompt", prompts::compute_generic_prompt_embeddings(t, bank),
                            {t.hash(), "bank", {}, {}}),
          {}};
  stage1::Stage1Config c;
  c.steps = 3;
  c.batch_size = 4;
  c.seed = 3;
  for (int d : {0, 1, 2}) {
    auto res = stage1::train_domain_prompts(ds.filter_domain(d), b.teacher, agg, c, loader);
    b.domain_stores.push_back(store::make_domain_store(res.embeddings, ds.class_names, t.hash(), c.hash(), {}));
  }
  return b;
}

std::vector<MethodSpec> small_roster() {
  distill::DistillConfig base;
  base.epochs = 2;
  base.batch_size = 8;
  base.student.conv_channels = {4};
  base.student.patch_size = 8;
  base.student.vit_dim = 8;
  base.student.vit_heads = 2;
  base.student.vit_layers = 1;
  base.student.vit_mlp = 8;
  return default_roster(base, true);
}

}  // namespace

TEST_CASE("rotation run: no test-domain reads outside evaluation, deterministic") {
  testing::LoggingLoader loader;
  auto b = make_bench(testing::scratch_dir("eval_rotation"), loader);
  auto plan = data::make_rotation_plan(b.ds, 3);
  REQUIRE(plan.rotations.size() == 3);
  Inputs in{&b.ds, &b.teacher, &b.agg, &b.generic, &b.domain_stores, &loader, 17};
  const std::string teacher_hash = b.teacher.hash();
  loader.log.clear();
  int students = 0;
  auto first = run_rotation(plan, small_roster(), in, [&](const TrainedStudent& s) {
    ++students;
    if (s.store && s.store->name == "invariant") {
      for (int d : s.store->provenance.source_domains) CHECK(d != s.test_domain);
    }
  });
  CHECK(students == 3 * 7);
  CHECK(b.teacher.hash() == teacher_hash);
  REQUIRE(first.size() == 8);
  for (const auto& r : first) CHECK(r.rotations.size() == 3);

  for (const auto& a : loader.log) {
    CHECK(a.domain != 3);
    if (a.ctx.stage == data::Stage::distill) CHECK(a.domain != a.ctx.rotation_test);
    if (a.ctx.stage == data::Stage::evaluate) CHECK(a.domain == a.ctx.rotation_test);
  }
  auto second = run_rotation(plan, small_roster(), in);
  CHECK(results_to_json(first) == results_to_json(second));
}

TEST_CASE("rotation run refuses a leaking plan") {
  testing::LoggingLoader loader;
  auto b = make_bench(testing::scratch_dir("eval_leak"), loader);
  Inputs in{&b.ds, &b.teacher, &b.agg, &b.generic, &b.domain_stores, &loader, 1};
  auto roster = small_roster();
  roster.resize(1);
  data::RotationPlan bad{3, {{{0, 1}, 1}}};
  CHECK_THROWS_AS(run_rotation(bad, roster, in), LeakageError);
  data::RotationPlan val{3, {{{0, 3}, 1}}};
  CHECK_THROWS_AS(run_rotation(val, roster, in), LeakageError);
}
