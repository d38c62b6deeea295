#pragma once

// Experiment configuration and the file-based pipeline behind the CLI.
//
// Workspace layout:
//   data/        generated dataset (manifest.jsonl, dataset.json, images/)
//   teacher/     teacher.ckpt, bank.json
//   prompts/     tokens_d{d}.ckpt, sweep.csv, selection.json
//   stores/      agg_template.json, generic_prompt.json, domain_{d}.json,
//                invariant_test{t}.json
//   students/    {method}_test{t}.ckpt
//   reports/     results.json, detail.csv, summary.csv, acc.png, f1.png
//   stamps/      {command}.json
//
// Every command writes a stamp recording the hashes of its inputs, its
// configuration and its outputs. A command whose stamp matches is skipped; a
// stamp that disagrees with the current inputs or with the files on disk is
// a provenance error unless `force` is set.
//
// Seeds: each stage seed is derive_seed(global seed, stage label) with
// labels "dataset", "teacher", "stage1" and "stage2", unless the stage's
// config section sets "seed" explicitly.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/data.hpp"
#include "dipt/distill.hpp"
#include "dipt/eval.hpp"
#include "dipt/stage1.hpp"
#include "dipt/teacher.hpp"

namespace dipt::workspace {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  data::DatasetSpec dataset;
  teacher::TeacherConfig teacher;
  teacher::PretrainConfig pretrain;
  int templates_per_class = 8;
  stage1::Stage1Config stage1;
  distill::DistillConfig stage2;            // optimisation settings shared by the roster
  std::vector<eval::MethodSpec> methods;    // empty: the default roster
  bool include_vit = true;
  int validation_domain = 2;
  bool charts = true;
  std::filesystem::path workspace;

  // Stage seeds after applying the global seed and any explicit overrides.
  std::optional<std::uint64_t> dataset_seed, teacher_seed, stage1_seed, stage2_seed;
  std::uint64_t effective_dataset_seed() const;
  std::uint64_t effective_teacher_seed() const;
  std::uint64_t effective_stage1_seed() const;
  std::uint64_t effective_stage2_seed() const;

  std::vector<eval::MethodSpec> roster() const;
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected with the offending path.
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Reads a JSON config file (or an empty object when `path` is empty), applies
// overrides, then --seed / --workspace / DIPT_WORKSPACE.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                             std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> workspace);

struct Options {
  bool force = false;
  const data::ImageLoader* loader = nullptr;  // default loader when null
  std::function<void(const std::string&)> log;
};

enum class Outcome { ran, skipped };

Outcome gen_data(const ExperimentConfig& cfg, const Options& opt = {});
Outcome pretrain_teacher(const ExperimentConfig& cfg, const Options& opt = {});
Outcome sweep(const ExperimentConfig& cfg, const Options& opt = {});
Outcome tune_prompts(const ExperimentConfig& cfg, const Options& opt = {});
Outcome aggregate(const ExperimentConfig& cfg, const Options& opt = {});
Outcome distill_students(const ExperimentConfig& cfg, const Options& opt = {});
Outcome evaluate(const ExperimentConfig& cfg, const Options& opt = {});
Outcome report(const ExperimentConfig& cfg, const Options& opt = {});
// Every command in order; the sweep runs only when both sweep lists are set.
void run_all(const ExperimentConfig& cfg, const Options& opt = {});

// Checks every stamp against its upstream stamps and the files on disk;
// raises ProvenanceError naming the first mismatched hash. Stamps from
// `stop_before` onwards are not checked.
void verify_chain(const std::filesystem::path& workspace, const std::string& stop_before = "");

// Per-domain prompt tuning outcome recorded in the tune-prompts stamp.
struct TuneRecord {
  int domain = 0;
  int k = 0;
  double learning_rate = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};
std::vector<TuneRecord> read_tune_records(const std::filesystem::path& workspace);

std::vector<eval::RotationResult> read_results(const std::filesystem::path& workspace);

// Selection rule for one domain's sweep rows: lowest validation loss, then
// smaller k, then smaller learning rate.
struct SweepRow {
  int domain = 0;
  int k = 0;
  double learning_rate = 0.0;
  double validation_loss = 0.0;
  double validation_f1 = 0.0;
};
SweepRow select_sweep_winner(const std::vector<SweepRow>& rows);

}  // namespace dipt::workspace
