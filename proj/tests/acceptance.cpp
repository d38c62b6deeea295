// Acceptance run: one PASS/FAIL line per criterion, detail lines indented.
// Exits nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dipt/data.hpp"
#include "dipt/distill.hpp"
#include "dipt/error.hpp"
#include "dipt/eval.hpp"
#include "dipt/hash.hpp"
#include "dipt/prompts.hpp"
#include "dipt/stage1.hpp"
#include "dipt/store.hpp"
#include "dipt/teacher.hpp"
#include "dipt/workspace.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace dipt;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::string summary;
  std::vector<std::string> details;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      details.push_back("failed: " + what);
    }
  }
};

// ---- property criteria -------------------------------------------------

Verdict stage1_gradients() {
  Verdict v;
  auto t0 = Clock::now();
  teacher::TeacherModel t(testing::tiny_teacher_config(16),
                          teacher::Tokenizer::build({"a patch of normal lymph node", "lymph node metastasis"}), 21);
  auto spec = testing::tiny_spec(2, 2, 5);
  std::vector<Image> imgs;
  std::vector<int> labels;
  for (int i = 0; i < 4; ++i) {
    imgs.push_back(data::render_image(spec, i % 2, i / 2, i));
    labels.push_back(i / 2);
  }
  nn::Tensor feats = t.encode_images(imgs);
  std::mt19937_64 rng(8);
  prompts::AggregatedEmbeddings agg{{"normal", "tumor"}, nn::gaussian(2, 16, 0.3, rng)};
  nn::Var tokens = nn::parameter(nn::gaussian(2, 16, 0.5, rng));
  double worst = 0.0;
  std::size_t checked = 0;
  for (double tau : {0.01, 0.07, 1.0}) {
    auto loss = [&] {
      nn::Var e = stage1::class_embeddings(t, tokens, agg);
      return nn::add(stage1::loss_ds(nn::constant(feats), e, labels, tau), stage1::loss_g(e, agg.rows));
    };
    auto res = testing::check_gradients(loss, {tokens}, 1e-3, 1e-6);
    v.details.push_back("tau " + fmt("%g", tau) + ": max rel err " + fmt("%.3e", res.max_rel_error));
    worst = std::max(worst, res.max_rel_error);
    checked = res.checked;
  }
  const double secs = seconds_since(t0);
  v.require(checked == 32, "expected 32 token entries");
  v.require(worst <= 1e-3, "relative error above 1e-3");
  v.require(secs < 60.0, "runtime above 60 s");
  v.summary = "max rel err " + fmt("%.3e", worst) + " over " + std::to_string(checked) + " entries, " +
              fmt("%.2f", secs) + " s";
  return v;
}

Verdict stage2_gradients() {
  Verdict v;
  std::mt19937_64 rng(6);
  distill::StudentConfig sc;
  sc.conv_channels = {2, 4};
  sc.embed_dim = 16;
  sc.image_size = 8;
  distill::StudentModel student(sc, 3);
  nn::Tensor pixels = nn::gaussian(4 * 64, 3, 0.7, rng);
  nn::Tensor teacher = nn::gaussian(4, 16, 1.0, rng);
  nn::Tensor classes = nn::gaussian(2, 16, 1.0, rng);
  std::vector<int> y{0, 1, 1, 0};
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto [li, la] : {std::pair{1.0, 1.0}, std::pair{0.7, 1.3}, std::pair{0.0, 1.0}}) {
    auto loss = [&] {
      auto f = student.forward(pixels, 4).embedding;
      return nn::add(nn::scale(distill::loss_image_align(f, nn::constant(teacher)), li),
                     nn::scale(distill::loss_text_align(f, y, classes), la));
    };
    auto res = testing::check_gradients(loss, student.projection_params(), 1e-3, 1e-6);
    worst = std::max(worst, res.max_rel_error);
    checked = res.checked;
    v.details.push_back("lambda " + fmt("%g", li) + "/" + fmt("%g", la) + ": max rel err " +
                        fmt("%.3e", res.max_rel_error));
  }
  v.require(checked == 4 * 16 + 16, "expected 80 head entries");
  v.require(worst <= 1e-3, "relative error above 1e-3");
  v.summary = "max rel err " + fmt("%.3e", worst) + " over " + std::to_string(checked) + " head entries";
  return v;
}

Verdict encoder_equivalence() {
  Verdict v;
  auto bank = prompts::default_bank(data::default_class_names(2));
  teacher::TeacherModel m(teacher::TeacherConfig{}, teacher::Tokenizer::build(bank.corpus()), 17);
  std::mt19937_64 rng(29);
  const auto& words = m.tokenizer().words();
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::string text;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) text += words[rng() % words.size()] + " ";
    auto seq = m.tokenize(text);
    auto a = m.encode_text(seq);
    auto b = m.encode_text(m.embed_lookup(seq));
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  v.require(worst <= 1e-6, "difference above 1e-6");
  v.summary = "max |diff| " + fmt("%.3e", worst) + " over 20 prompts";
  return v;
}

store::EmbeddingStore random_domain_store(int d, int nc, int dim, std::mt19937_64& rng) {
  stage1::DomainClassEmbeddings e;
  e.domain_id = d;
  e.rows = nn::gaussian(nc, dim, 1.0, rng);
  std::vector<std::string> names;
  for (int c = 0; c < nc; ++c) names.push_back("class " + std::to_string(c));
  return store::make_domain_store(e, names, "teacher", "cfg");
}

Verdict aggregation_properties() {
  Verdict v;
  std::mt19937_64 rng(31);
  auto one = random_domain_store(3, 3, 64, rng);
  auto single = store::aggregate_class_embeddings({one});
  v.require(single.matrix.data == one.matrix.data, "D=1 is not the identity");

  double perm = 0.0, oracle = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int D = 2 + trial % 4;
    std::vector<store::EmbeddingStore> stores;
    for (int d = 0; d < D; ++d) stores.push_back(random_domain_store(d, 3, 64, rng));
    auto base = store::aggregate_class_embeddings(stores);
    auto shuffled = stores;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto other = store::aggregate_class_embeddings(shuffled);
    for (std::size_t i = 0; i < base.matrix.size(); ++i) {
      perm = std::max(perm, std::abs(base.matrix.data[i] - other.matrix.data[i]));
      long double sum = 0.0L;
      for (const auto& s : stores) sum += s.matrix.data[i];
      oracle = std::max(oracle, std::abs(base.matrix.data[i] - static_cast<double>(sum / D)));
    }
  }
  v.require(perm <= 1e-7, "permutation changed the result");
  v.require(oracle <= 1e-7, "disagrees with the mean oracle");
  v.summary = "D=1 identity " + std::string(single.matrix.data == one.matrix.data ? "exact" : "broken") +
              ", permutation " + fmt("%.1e", perm) + ", oracle " + fmt("%.1e", oracle);
  return v;
}

nn::Tensor rows_of(std::initializer_list<std::vector<double>> rows) {
  nn::Tensor t(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size()));
  int r = 0;
  for (const auto& row : rows) std::ranges::copy(row, t.row(r++).begin());
  return t;
}

Verdict closed_forms() {
  Verdict v;
  double uniform = 0.0;
  for (int nc : {2, 3, 5}) {
    nn::Tensor x(4, 3), same(nc, 3);
    for (int i = 0; i < 4; ++i) x(i, i % 3) = 1.0;
    for (int c = 0; c < nc; ++c) same(c, 0) = 1.0;
    std::vector<int> y{0, 1 % nc, 0, nc - 1};
    uniform = std::max(uniform, std::abs(stage1::loss_ds(x, same, y, 0.01) - std::log(double(nc))));
  }
  v.require(uniform <= 1e-9, "uniform logits do not give ln N_c");

  const double parallel = stage1::loss_g(rows_of({{1, 2, 0}, {0, -1, 3}}), rows_of({{2, 4, 0}, {0, -0.5, 1.5}}));
  v.require(std::abs(parallel) <= 1e-12, "loss_g nonzero for parallel rows");

  std::mt19937_64 rng(3);
  double self_kd = 0.0;
  for (double T : {0.5, 1.0, 4.0}) {
    nn::Tensor z = nn::gaussian(5, 4, 2.0, rng);
    self_kd = std::max(self_kd, std::abs(distill::loss_vanilla_kd(z, z, T)));
  }
  v.require(self_kd <= 1e-12, "loss_vanilla_kd(z, z, T) nonzero");

  const double kl = distill::loss_vanilla_kd(rows_of({{0, 2}}), rows_of({{2, 0}}), 1.0);
  const bool kl_ok = std::abs(kl - 1.4509) <= 1e-3;
  v.require(kl_ok, "teacher (2,0) / student (0,2) at T=1 gives " + fmt("%.4f", kl) +
                       "; expected 1.4509 (independent value: 2 tanh 1 = " + fmt("%.4f", 2 * std::tanh(1.0)) + ")");
  v.summary = "ln N_c err " + fmt("%.1e", uniform) + ", parallel loss_g " + fmt("%.1e", parallel) +
              ", self KD " + fmt("%.1e", self_kd) + ", KL example " + fmt("%.4f", kl);
  return v;
}

Verdict table2_crosscheck() {
  Verdict v;
  eval::RotationResult r;
  r.method = "rise_dipt";
  int d = 0;
  for (double f : {0.9051, 0.9587, 0.9384, 0.8014}) {
    eval::RotationEntry e;
    e.test_domain = d++;
    e.metrics.accuracy = f;
    e.metrics.macro_f1 = f;
    r.rotations.push_back(e);
  }
  eval::summarize(r);
  const std::string mean = fmt("%.2f", r.mean.macro_f1 * 100.0);
  const std::string worst = fmt("%.2f", r.worst.macro_f1 * 100.0);
  v.require(mean == "90.09", "mean is " + mean);
  v.require(worst == "80.14", "worst is " + worst);
  v.summary = "mean " + mean + ", worst " + worst;
  return v;
}

// ---- benchmark runs ----------------------------------------------------

struct Run {
  std::uint64_t seed = 0;
  fs::path ws;
  workspace::ExperimentConfig cfg;
  double seconds = 0.0;
  std::vector<testing::LoggingLoader::Access> log;
  std::string error;
};

Run benchmark_run(std::uint64_t seed, const fs::path& ws) {
  Run run;
  run.seed = seed;
  run.ws = ws;
  fs::remove_all(ws);
  testing::LoggingLoader loader;
  workspace::Options opt;
  opt.loader = &loader;
  opt.log = [](const std::string& line) { std::cout << "    " << line << '\n' << std::flush; };
  auto t0 = Clock::now();
  try {
    run.cfg = workspace::load_config(DIPT_BENCHMARK_CONFIG, {}, seed, ws);
    workspace::run_all(run.cfg, opt);
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  run.seconds = seconds_since(t0);
  run.log = std::move(loader.log);
  return run;
}

std::map<std::string, double> mean_f1(const fs::path& ws) {
  std::map<std::string, double> out;
  for (const auto& r : workspace::read_results(ws)) out[r.method] = r.mean.macro_f1;
  return out;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

Verdict frozen_teacher(const Run& run) {
  Verdict v;
  if (!run.error.empty()) {
    v.require(false, "benchmark run failed: " + run.error);
    return v;
  }
  const fs::path& ws = run.ws;
  auto stamp = read_json(ws / "stamps" / "pretrain-teacher.json");
  const std::string recorded = stamp["records"]["teacher_hash"];
  const std::string file_hash = stamp["outputs"]["teacher/teacher.ckpt"];
  v.require(sha256_file(ws / "teacher" / "teacher.ckpt") == file_hash, "teacher checkpoint bytes changed");

  auto model = teacher::load_checkpoint(ws / "teacher" / "teacher.ckpt");
  const std::string h0 = model.hash();
  v.require(h0 == recorded, "reloaded teacher hash differs from the recorded one");

  int artefacts = 0;
  for (const auto& entry : fs::directory_iterator(ws / "stores")) {
    auto s = store::load_store(entry.path());
    v.require(s.provenance.teacher_hash == recorded, entry.path().filename().string() + " names another teacher");
    ++artefacts;
  }
  for (const auto& entry : fs::directory_iterator(ws / "students")) {
    json header;
    distill::load_student(entry.path(), &header);
    v.require(header.value("teacher_hash", "") == recorded, entry.path().filename().string() + " names another teacher");
    ++artefacts;
  }

  // Re-run one domain of stage 1 and one student in process around the same
  // teacher object.
  auto ds = data::load_manifest(ws / "data" / "manifest.jsonl");
  auto agg_store = store::load_store(ws / "stores" / "agg_template.json");
  prompts::AggregatedEmbeddings agg{agg_store.class_names, agg_store.matrix};
  stage1::Stage1Config s1 = run.cfg.stage1;
  s1.seed = run.cfg.effective_stage1_seed();
  stage1::train_domain_prompts(ds.filter_domain(0), model, agg, s1);
  const std::string h1 = model.hash();

  auto roster = run.cfg.roster();
  auto it = std::ranges::find_if(roster, [](const eval::MethodSpec& m) { return m.name == "rise_dipt"; });
  auto inv = store::load_store(ws / "stores" / "invariant_test0.json");
  distill::DistillConfig dc = it->config;
  dc.epochs = 1;
  distill::DistillInputs in;
  in.store = &inv;
  in.rotation_test = 0;
  distill::train_student(ds.filter_domains({1, 3, 4}), model, dc, in);
  const std::string h2 = model.hash();
  v.require(h1 == h0, "stage 1 changed the teacher");
  v.require(h2 == h0, "stage 2 changed the teacher");
  v.summary = "hash " + h0.substr(0, 12) + " unchanged across stage 1 and stage 2; " + std::to_string(artefacts) +
              " stores/students carry it";
  return v;
}

Verdict leakage_audit(const std::vector<Run>& runs) {
  Verdict v;
  long reads = 0, violations = 0, evaluate_reads = 0, aggregate_reads = 0;
  for (const auto& run : runs) {
    if (!run.error.empty()) {
      v.require(false, "benchmark run failed: " + run.error);
      continue;
    }
    const int val = run.cfg.validation_domain;
    for (const auto& a : run.log) {
      ++reads;
      bool bad = false;
      switch (a.ctx.stage) {
        case data::Stage::tune: bad = a.domain != a.ctx.owner_domain || a.domain == val; break;
        case data::Stage::aggregate: ++aggregate_reads; bad = true; break;
        case data::Stage::distill:
          bad = a.ctx.rotation_test < 0 || a.domain == a.ctx.rotation_test || a.domain == val;
          break;
        case data::Stage::evaluate: ++evaluate_reads; bad = a.domain != a.ctx.rotation_test; break;
        case data::Stage::sweep: bad = a.domain != val; break;
        case data::Stage::pretrain: break;
        default: bad = true;
      }
      violations += bad;
    }
    // Rotation t's invariant store must come from its training domains only.
    for (const auto& entry : fs::directory_iterator(run.ws / "stores")) {
      const std::string name = entry.path().stem().string();
      if (!name.starts_with("invariant_test")) continue;
      const int t = std::stoi(name.substr(14));
      auto s = store::load_store(entry.path());
      for (int d : s.provenance.source_domains) {
        if (d == t || d == val) {
          ++violations;
          v.details.push_back("seed " + std::to_string(run.seed) + ": " + name + " draws on domain " + std::to_string(d));
        }
      }
    }
  }
  v.require(violations == 0, std::to_string(violations) + " held-out reads");
  v.require(evaluate_reads > 0, "no evaluation reads logged");
  v.summary = std::to_string(reads) + " logged reads over " + std::to_string(runs.size()) + " run(s), " +
              std::to_string(violations) + " test-domain reads in tuning/aggregation/distillation, " +
              std::to_string(aggregate_reads) + " image reads during aggregation";
  return v;
}

Verdict benchmark(const std::vector<Run>& runs, const json& pinned) {
  Verdict v;
  const double limit = pinned.at("max_seconds_per_run");
  const double dipt_min = pinned.at("min_mean_f1").at("rise_dipt");
  std::vector<std::string> per_seed;
  for (const auto& run : runs) {
    const std::string tag = "seed " + std::to_string(run.seed);
    if (!run.error.empty()) {
      v.require(false, tag + ": run failed: " + run.error);
      continue;
    }
    v.require(run.seconds < limit, tag + ": " + fmt("%.0f", run.seconds) + " s");
    for (const auto& r : workspace::read_tune_records(run.ws))
      v.require(r.final_loss < r.initial_loss, tag + ": stage-1 loss did not drop on domain " + std::to_string(r.domain));

    auto f1 = mean_f1(run.ws);
    const double dipt = f1.at("rise_dipt");
    std::string line = tag + ": " + fmt("%.0f", run.seconds) + " s;";
    for (const auto& [m, f] : f1) line += " " + m + " " + fmt("%.4f", f);
    v.details.push_back(line);
    for (const char* rival : {"rise", "kd", "zero_shot"})
      v.require(dipt >= f1.at(rival), tag + ": rise_dipt " + fmt("%.4f", dipt) + " < " + rival + " " +
                                          fmt("%.4f", f1.at(rival)));
    v.require(dipt >= dipt_min, tag + ": rise_dipt below the pinned " + fmt("%.2f", dipt_min));

    const auto key = std::to_string(run.seed);
    if (pinned.at("pilot_mean_f1").contains(key)) {
      double drift = 0.0;
      for (const auto& [m, f] : pinned["pilot_mean_f1"][key].items())
        if (f1.contains(m)) drift = std::max(drift, std::abs(f1.at(m) - f.get<double>()));
      v.details.push_back(tag + ": max drift from the pinned pilot " + fmt("%.1e", drift));
      v.require(drift <= 1e-5, tag + ": results moved away from the pinned pilot");
    }
  }
  int ok = 0;
  for (const auto& run : runs) {
    if (!run.error.empty()) continue;
    auto f1 = mean_f1(run.ws);
    ok += f1.at("rise_dipt") >= std::max({f1.at("rise"), f1.at("kd"), f1.at("zero_shot")});
  }
  v.summary = "ordering holds on " + std::to_string(ok) + "/" + std::to_string(runs.size()) + " seeds";
  return v;
}

std::vector<fs::path> csv_files(const fs::path& ws) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(ws))
    if (e.is_regular_file() && e.path().extension() == ".csv") out.push_back(fs::relative(e.path(), ws));
  std::ranges::sort(out);
  return out;
}

Verdict determinism(const std::vector<Run>& first, const std::vector<Run>& second) {
  Verdict v;
  double worst = 0.0;
  int csvs = 0;
  for (std::size_t i = 0; i < first.size(); ++i) {
    const auto& a = first[i];
    const auto& b = second[i];
    const std::string tag = "seed " + std::to_string(a.seed);
    if (!a.error.empty() || !b.error.empty()) {
      v.require(false, tag + ": run failed");
      continue;
    }
    auto ra = workspace::read_results(a.ws);
    auto rb = workspace::read_results(b.ws);
    v.require(ra.size() == rb.size(), tag + ": method count differs");
    for (std::size_t m = 0; m < std::min(ra.size(), rb.size()); ++m) {
      v.require(ra[m].method == rb[m].method, tag + ": method order differs");
      auto diff = [&](double x, double y) { worst = std::max(worst, std::abs(x - y)); };
      diff(ra[m].mean.accuracy, rb[m].mean.accuracy);
      diff(ra[m].mean.macro_f1, rb[m].mean.macro_f1);
      diff(ra[m].worst.accuracy, rb[m].worst.accuracy);
      diff(ra[m].worst.macro_f1, rb[m].worst.macro_f1);
      for (std::size_t r = 0; r < std::min(ra[m].rotations.size(), rb[m].rotations.size()); ++r) {
        diff(ra[m].rotations[r].metrics.accuracy, rb[m].rotations[r].metrics.accuracy);
        diff(ra[m].rotations[r].metrics.macro_f1, rb[m].rotations[r].metrics.macro_f1);
      }
    }
    auto fa = csv_files(a.ws);
    v.require(fa == csv_files(b.ws), tag + ": CSV sets differ");
    for (const auto& rel : fa) {
      ++csvs;
      v.require(testing::read_file(a.ws / rel) == testing::read_file(b.ws / rel), tag + ": " + rel.string() + " differs");
    }
  }
  v.require(worst <= 1e-6, "metric difference above 1e-6");
  v.summary = "max metric diff " + fmt("%.1e", worst) + ", " + std::to_string(csvs) + " CSVs compared";
  return v;
}

const char* kTitles[] = {"",
                         "stage-1 gradient oracle",
                         "stage-2 gradient oracle",
                         "discrete/continuous encoder equivalence",
                         "invariant aggregation properties",
                         "closed-form loss values",
                         "rotation summary cross-check",
                         "frozen teacher",
                         "no-leakage audit",
                         "seeded benchmark",
                         "determinism"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  fs::path workdir = fs::temp_directory_path() / "dipt_acceptance";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--workdir", workdir, "where benchmark workspaces are written");
  app.add_option("--seeds", seeds, "benchmark seeds")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  std::set<int> selected(only.begin(), only.end());
  if (selected.empty())
    for (int c = 1; c <= 10; ++c) selected.insert(c);

  json pinned;
  {
    std::ifstream in(DIPT_PINNED_FIXTURE);
    pinned = json::parse(in);
  }

  int failures = 0;
  auto emit = [&](int id, const Verdict& v) {
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << id << ". " << kTitles[id] << ": " << v.summary << '\n';
    for (const auto& d : v.details) std::cout << "      " << d << '\n';
    std::cout << std::flush;
    failures += !v.pass;
  };
  auto guarded = [&](int id, auto&& fn) {
    if (!selected.contains(id)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.summary = std::string("error: ") + e.what();
    }
    emit(id, v);
  };

  guarded(1, stage1_gradients);
  guarded(2, stage2_gradients);
  guarded(3, encoder_equivalence);
  guarded(4, aggregation_properties);
  guarded(5, closed_forms);
  guarded(6, table2_crosscheck);

  const bool need_all = selected.contains(9) || selected.contains(10);
  const bool need_any = need_all || selected.contains(7) || selected.contains(8);
  std::vector<Run> runs, repeats;
  if (need_any) {
    const auto list = need_all ? seeds : std::vector<std::uint64_t>{seeds.front()};
    for (auto s : list) {
      std::cout << "  benchmark seed " << s << '\n' << std::flush;
      runs.push_back(benchmark_run(s, workdir / ("seed" + std::to_string(s))));
      std::cout << "  seed " << s << " finished in " << fmt("%.0f", runs.back().seconds) << " s\n" << std::flush;
    }
  }
  guarded(7, [&] { return frozen_teacher(runs.front()); });
  guarded(8, [&] { return leakage_audit(runs); });
  guarded(9, [&] { return benchmark(runs, pinned); });
  if (selected.contains(10)) {
    for (auto s : seeds) {
      std::cout << "  repeat seed " << s << '\n' << std::flush;
      repeats.push_back(benchmark_run(s, workdir / ("seed" + std::to_string(s) + "_repeat")));
    }
  }
  guarded(10, [&] { return determinism(runs, repeats); });

  std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criteria failed") << '\n';
  return failures == 0 ? 0 : 1;
}
