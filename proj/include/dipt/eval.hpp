#pragma once

// Leave-one-domain-out evaluation: per-rotation invariant stores built from
// the rotation's training domains only, one student per method and rotation,
// metrics on the held-out domain, mean / worst summaries and CSV reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/data.hpp"
#include "dipt/distill.hpp"
#include "dipt/metrics.hpp"
#include "dipt/store.hpp"
#include "dipt/teacher.hpp"

namespace dipt::eval {

struct MethodSpec {
  std::string name;
  bool zero_shot = false;          // teacher + agg_template store, no student
  distill::DistillConfig config;   // ignored for zero-shot

  nlohmann::json to_json() const;
  static MethodSpec from_json(const nlohmann::json& j);
};

// zero_shot, kd, rise, rise_dipt, vl2v, vl2v_dipt and, with `include_vit`,
// vl2v_vit and vl2v_vit_dipt. `base` supplies the optimisation settings.
std::vector<MethodSpec> default_roster(const distill::DistillConfig& base, bool include_vit = true);

// Per-method, per-rotation seed.
std::uint64_t method_seed(std::uint64_t stage2_seed, const std::string& method, int test_domain);

struct Inputs {
  const data::DomainDataset* dataset = nullptr;
  const teacher::VisionLanguageModel* teacher = nullptr;
  const store::EmbeddingStore* agg_template = nullptr;
  const store::EmbeddingStore* generic_prompt = nullptr;
  const std::vector<store::EmbeddingStore>* domain_stores = nullptr;  // "domain:{d}"
  const data::ImageLoader* loader = nullptr;                          // default loader when null
  std::uint64_t stage2_seed = 0;
};

// Mean of the rotation's training-domain stores. Stores that cover the test
// domain or any domain outside the rotation are ignored; a training domain
// without a store raises MissingArtifactError.
store::EmbeddingStore rotation_invariant_store(const std::vector<store::EmbeddingStore>& domain_stores,
                                               const data::Rotation& rotation);

// Store a method trains against and classifies with (null for image-only
// and vanilla KD training; vanilla KD predicts with its head).
const store::EmbeddingStore* method_store(const MethodSpec& method, const Inputs& in,
                                          const store::EmbeddingStore* invariant);

struct Summary {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

struct RotationEntry {
  int test_domain = 0;
  Metrics metrics;
};

struct RotationResult {
  std::string method;
  std::vector<RotationEntry> rotations;
  Summary mean;
  Summary worst;  // minimum over rotations, per metric
};

// Fills mean and worst from the per-rotation entries.
void summarize(RotationResult& r);

struct TrainedStudent {
  std::string method;
  int test_domain = 0;
  const distill::StudentResult* result = nullptr;
  const store::EmbeddingStore* store = nullptr;
  distill::DistillConfig config;
};

// Trains and scores every method on every rotation. `on_student` sees each
// trained student before it is scored (for saving checkpoints).
std::vector<RotationResult> run_rotation(const data::RotationPlan& plan, const std::vector<MethodSpec>& methods,
                                         const Inputs& in,
                                         const std::function<void(const TrainedStudent&)>& on_student = {},
                                         const std::function<void(const std::string&)>& log = {});

// Predictions of one trained (or zero-shot) method on images.
std::vector<int> method_predictions(const MethodSpec& method, const distill::StudentModel* student,
                                    const teacher::VisionLanguageModel& teacher, const store::EmbeddingStore* store,
                                    const std::vector<Image>& images);

nlohmann::json results_to_json(const std::vector<RotationResult>& results);
std::vector<RotationResult> results_from_json(const nlohmann::json& j);

// detail.csv (method,test_domain,acc,f1), summary.csv
// (method,mean_acc,mean_f1,worst_acc,worst_f1) with percentages to four
// decimals, plus acc.png / f1.png bar charts (mean bar, worst marker).
void emit_report(const std::vector<RotationResult>& results, const std::filesystem::path& out_dir,
                 bool charts = true);

}  // namespace dipt::eval
