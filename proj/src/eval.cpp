#include "dipt/eval.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "dipt/error.hpp"
#include "dipt/hash.hpp"
#include "dipt/image.hpp"

namespace dipt::eval {

using nlohmann::json;

json MethodSpec::to_json() const { return {{"name", name}, {"zero_shot", zero_shot}, {"config", config.to_json()}}; }

MethodSpec MethodSpec::from_json(const json& j) {
  MethodSpec m;
  m.name = j.at("name").get<std::string>();
  m.zero_shot = j.value("zero_shot", false);
  if (j.contains("config")) m.config = distill::DistillConfig::from_json(j.at("config"));
  if (m.config.name.empty()) m.config.name = m.name;
  return m;
}

std::vector<MethodSpec> default_roster(const distill::DistillConfig& base, bool include_vit) {
  using distill::Mode;
  using distill::Source;
  auto make = [&](std::string name, Mode mode, Source source, const std::string& arch) {
    MethodSpec m;
    m.name = std::move(name);
    m.config = base;
    m.config.name = m.name;
    m.config.mode = mode;
    m.config.source = source;
    m.config.student.arch = arch;
    return m;
  };
  std::vector<MethodSpec> out;
  MethodSpec zs;
  zs.name = "zero_shot";
  zs.zero_shot = true;
  zs.config = base;
  zs.config.name = zs.name;
  out.push_back(zs);
  out.push_back(make("kd", Mode::vanilla_kd, Source::agg_template, "conv"));
  out.push_back(make("rise", Mode::dual, Source::agg_template, "conv"));
  out.push_back(make("rise_dipt", Mode::dual, Source::dipt_invariant, "conv"));
  out.push_back(make("vl2v", Mode::dual, Source::generic_prompt, "conv"));
  out.push_back(make("vl2v_dipt", Mode::dual, Source::dipt_invariant, "conv"));
  if (include_vit) {
    out.push_back(make("vl2v_vit", Mode::dual, Source::generic_prompt, "vit"));
    out.push_back(make("vl2v_vit_dipt", Mode::dual, Source::dipt_invariant, "vit"));
  }
  return out;
}

std::uint64_t method_seed(std::uint64_t stage2_seed, const std::string& method, int test_domain) {
  return derive_seed(stage2_seed, "method:" + method, static_cast<std::uint64_t>(test_domain));
}

store::EmbeddingStore rotation_invariant_store(const std::vector<store::EmbeddingStore>& domain_stores,
                                               const data::Rotation& rotation) {
  std::vector<store::EmbeddingStore> picked;
  std::set<int> covered;
  for (const auto& s : domain_stores) {
    const auto& src = s.provenance.source_domains;
    if (std::ranges::find(src, rotation.test_domain) != src.end()) continue;
    bool in_train = !src.empty();
    for (int d : src) in_train = in_train && rotation.train_domains.count(d) > 0;
    if (!in_train) continue;
    picked.push_back(s);
    covered.insert(src.begin(), src.end());
  }
  for (int d : rotation.train_domains) {
    if (!covered.count(d))
      throw MissingArtifactError("no prompt embeddings for training domain " + std::to_string(d) +
                                 "; run tune-prompts first");
  }
  auto inv = store::aggregate_class_embeddings(picked);
  for (int d : inv.provenance.source_domains) {
    if (d == rotation.test_domain)
      throw LeakageError("invariant store for test domain " + std::to_string(d) + " includes that domain");
  }
  return inv;
}

const store::EmbeddingStore* method_store(const MethodSpec& method, const Inputs& in,
                                          const store::EmbeddingStore* invariant) {
  if (method.zero_shot) return in.agg_template;
  if (!method.config.uses_store()) return nullptr;
  switch (method.config.source) {
    case distill::Source::generic_prompt: return in.generic_prompt;
    case distill::Source::agg_template: return in.agg_template;
    case distill::Source::dipt_invariant: return invariant;
  }
  return nullptr;
}

void summarize(RotationResult& r) {
  if (r.rotations.empty()) throw ValidationError("rotations", "no rotations for method " + r.method);
  Summary mean, worst{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  for (const auto& e : r.rotations) {
    mean.accuracy += e.metrics.accuracy;
    mean.macro_f1 += e.metrics.macro_f1;
    worst.accuracy = std::min(worst.accuracy, e.metrics.accuracy);
    worst.macro_f1 = std::min(worst.macro_f1, e.metrics.macro_f1);
  }
  mean.accuracy /= static_cast<double>(r.rotations.size());
  mean.macro_f1 /= static_cast<double>(r.rotations.size());
  r.mean = mean;
  r.worst = worst;
}

std::vector<int> method_predictions(const MethodSpec& method, const distill::StudentModel* student,
                                    const teacher::VisionLanguageModel& teacher, const store::EmbeddingStore* store,
                                    const std::vector<Image>& images) {
  if (method.zero_shot) {
    if (!store) throw MissingArtifactError("zero-shot needs the agg_template store");
    return distill::zero_shot_predict(teacher, *store, images);
  }
  if (!student) throw MissingArtifactError("no student for method " + method.name);
  if (method.config.mode == distill::Mode::vanilla_kd) return distill::predict_head(*student, images);
  if (!store) throw MissingArtifactError("method " + method.name + " needs an embedding store to classify");
  return distill::predict(*student, *store, images);
}

std::vector<RotationResult> run_rotation(const data::RotationPlan& plan, const std::vector<MethodSpec>& methods,
                                         const Inputs& in, const std::function<void(const TrainedStudent&)>& on_student,
                                         const std::function<void(const std::string&)>& log) {
  if (!in.dataset || !in.teacher || !in.agg_template || !in.domain_stores)
    throw ValidationError("inputs", "dataset, teacher, agg_template store and domain stores are required");
  if (plan.rotations.empty()) throw ValidationError("plan", "no rotations");
  const data::ImageLoader& loader = in.loader ? *in.loader : data::default_loader();
  const int nc = in.dataset->num_classes();

  std::vector<RotationResult> results(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m) results[m].method = methods[m].name;

  for (const auto& rot : plan.rotations) {
    if (rot.train_domains.count(rot.test_domain))
      throw LeakageError("test domain " + std::to_string(rot.test_domain) + " listed among training domains");
    if (rot.train_domains.count(plan.validation_domain) || rot.test_domain == plan.validation_domain)
      throw LeakageError("validation domain " + std::to_string(plan.validation_domain) + " used in a rotation");
    const auto train = in.dataset->filter_domains(rot.train_domains);
    const auto test = in.dataset->filter_domain(rot.test_domain);
    const auto invariant = rotation_invariant_store(*in.domain_stores, rot);
    const auto test_images = data::load_images(test, loader, {data::Stage::evaluate, rot.test_domain, -1});
    std::vector<int> labels;
    for (const auto& r : test.records) labels.push_back(r.class_id);

    for (std::size_t m = 0; m < methods.size(); ++m) {
      const MethodSpec& method = methods[m];
      const store::EmbeddingStore* s = method_store(method, in, &invariant);
      std::optional<distill::StudentResult> trained;
      if (!method.zero_shot) {
        distill::DistillConfig cfg = method.config;
        cfg.seed = method_seed(in.stage2_seed, method.name, rot.test_domain);
        const store::EmbeddingStore* zs = cfg.mode == distill::Mode::vanilla_kd ? in.agg_template : nullptr;
        trained.emplace(distill::train_student(train, *in.teacher, cfg, {s, zs, rot.test_domain}, loader));
        if (on_student) on_student({method.name, rot.test_domain, &*trained, s, cfg});
      }
      const auto pred =
          method_predictions(method, trained ? &trained->student : nullptr, *in.teacher, s, test_images);
      results[m].rotations.push_back({rot.test_domain, compute_metrics(pred, labels, nc)});
      if (log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "test domain %d  %-14s acc %.4f  f1 %.4f", rot.test_domain,
                      method.name.c_str(), results[m].rotations.back().metrics.accuracy,
                      results[m].rotations.back().metrics.macro_f1);
        log(buf);
      }
    }
  }
  for (auto& r : results) summarize(r);
  return results;
}

json results_to_json(const std::vector<RotationResult>& results) {
  json out = json::array();
  for (const auto& r : results) {
    json rots = json::array();
    for (const auto& e : r.rotations) {
      rots.push_back({{"test_domain", e.test_domain},
                      {"accuracy", e.metrics.accuracy},
                      {"macro_f1", e.metrics.macro_f1},
                      {"per_class_f1", e.metrics.per_class_f1},
                      {"confusion", e.metrics.confusion}});
    }
    out.push_back({{"method", r.method},
                   {"rotations", rots},
                   {"mean", {{"accuracy", r.mean.accuracy}, {"macro_f1", r.mean.macro_f1}}},
                   {"worst", {{"accuracy", r.worst.accuracy}, {"macro_f1", r.worst.macro_f1}}}});
  }
  return out;
}

std::vector<RotationResult> results_from_json(const json& j) {
  std::vector<RotationResult> out;
  try {
    for (const auto& r : j) {
      RotationResult rr;
      rr.method = r.at("method").get<std::string>();
      for (const auto& e : r.at("rotations")) {
        RotationEntry entry;
        entry.test_domain = e.at("test_domain").get<int>();
        entry.metrics.accuracy = e.at("accuracy").get<double>();
        entry.metrics.macro_f1 = e.at("macro_f1").get<double>();
        entry.metrics.per_class_f1 = e.value("per_class_f1", std::vector<double>{});
        entry.metrics.confusion = e.value("confusion", std::vector<std::vector<long>>{});
        rr.rotations.push_back(std::move(entry));
      }
      summarize(rr);
      out.push_back(std::move(rr));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed results: ") + e.what());
  }
  return out;
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v * 100.0);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

// One bar per method: height = mean, a dark band at the worst value.
Image bar_chart(const std::vector<RotationResult>& results, bool f1) {
  const int bar = 24, gap = 12, height = 200;
  const int width = gap + static_cast<int>(results.size()) * (bar + gap);
  Image img(width, height);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{255});
  auto put = [&](int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &img.pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };
  for (int x = 0; x < width; ++x) put(x, height - 1, {0, 0, 0});
  for (std::size_t i = 0; i < results.size(); ++i) {
    const double mean = f1 ? results[i].mean.macro_f1 : results[i].mean.accuracy;
    const double worst = f1 ? results[i].worst.macro_f1 : results[i].worst.accuracy;
    const int x0 = gap + static_cast<int>(i) * (bar + gap);
    const int top = height - 1 - static_cast<int>(mean * (height - 2));
    const int w_y = height - 1 - static_cast<int>(worst * (height - 2));
    for (int x = x0; x < x0 + bar; ++x) {
      for (int y = top; y < height - 1; ++y) put(x, y, {70, 110, 180});
      for (int y = w_y - 1; y <= w_y + 1; ++y) put(x, y, {20, 20, 20});
    }
  }
  return img;
}

}  // namespace

void emit_report(const std::vector<RotationResult>& results, const std::filesystem::path& out_dir, bool charts) {
  if (results.empty()) throw ValidationError("results", "nothing to report");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());

  std::string detail = "method,test_domain,acc,f1\n";
  std::string summary = "method,mean_acc,mean_f1,worst_acc,worst_f1\n";
  for (const auto& r : results) {
    for (const auto& e : r.rotations) {
      detail += r.method + "," + std::to_string(e.test_domain) + "," + pct(e.metrics.accuracy) + "," +
                pct(e.metrics.macro_f1) + "\n";
    }
    summary += r.method + "," + pct(r.mean.accuracy) + "," + pct(r.mean.macro_f1) + "," + pct(r.worst.accuracy) +
               "," + pct(r.worst.macro_f1) + "\n";
  }
  write_text(out_dir / "detail.csv", detail);
  write_text(out_dir / "summary.csv", summary);
  if (charts) {
    write_png(bar_chart(results, false), out_dir / "acc.png");
    write_png(bar_chart(results, true), out_dir / "f1.png");
  }
}

}  // namespace dipt::eval
