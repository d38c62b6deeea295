#pragma once

// Per-class prompt templates and their aggregated text embeddings: the mean
// of the M unit-norm template encodings of each class. The rows double as the
// frozen class-generic token of the learnable prompts and as the zero-shot
// classifier.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dipt/autograd.hpp"
#include "dipt/teacher.hpp"

namespace dipt::prompts {

struct PromptTemplateBank {
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<std::string>> templates;  // class name -> M prompts

  int num_classes() const { return static_cast<int>(class_names.size()); }
  int templates_per_class() const;
  const std::vector<std::string>& for_class(int class_id) const;
  // Checks M >= 1, equal M across classes, nonempty prompts, and (when a
  // tokenizer is given) that every prompt fits in max_length.
  void validate(const teacher::Tokenizer* tokenizer = nullptr) const;
  // Every prompt string, class by class (vocabulary building).
  std::vector<std::string> corpus() const;
};

// Generic patterns like "a patch of {}"; M = 8.
const std::vector<std::string>& default_templates();

PromptTemplateBank default_bank(const std::vector<std::string>& class_names, int templates_per_class = 8);

void save_bank(const PromptTemplateBank& bank, const std::filesystem::path& path);
PromptTemplateBank load_bank(const std::filesystem::path& path);

// N_c x d_e; row i is the plain (un-renormalised) mean of class i's encoded
// templates.
struct AggregatedEmbeddings {
  std::vector<std::string> class_names;
  nn::Tensor rows;
};

AggregatedEmbeddings compute_aggregated_embeddings(const teacher::VisionLanguageModel& teacher,
                                                   const PromptTemplateBank& bank);

// One template per class, the first ("a patch of {class}"), encoded as-is.
AggregatedEmbeddings compute_generic_prompt_embeddings(const teacher::VisionLanguageModel& teacher,
                                                       const PromptTemplateBank& bank);

}  // namespace dipt::prompts
