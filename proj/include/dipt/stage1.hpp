#pragma once

// Per-domain prompt tuning. Each training domain d learns k continuous
// tokens T^d; the prompt for class i is [T^d_1 .. T^d_k, A_i] where A_i is
// the frozen aggregated template embedding of class i. The objective is
// cross-entropy over cosine logits / tau on the domain's images plus
// mean(1 - cos(E_{d,i}, A_i)) to keep the prompts near the class-generic
// embedding. Only the tokens are optimised; the teacher stays frozen.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/autograd.hpp"
#include "dipt/data.hpp"
#include "dipt/metrics.hpp"
#include "dipt/prompts.hpp"
#include "dipt/teacher.hpp"

namespace dipt::stage1 {

struct DomainTokens {
  int domain_id = 0;
  nn::Tensor tokens;  // [k, d_t]
  int k() const { return tokens.rows; }
};

struct Stage1Config {
  int k = 2;
  double learning_rate = 5e-5;
  double temperature = 0.01;
  int steps = 500;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  std::vector<int> sweep_k{2, 3, 4};
  std::vector<double> sweep_learning_rates{5e-6, 5e-5};

  void validate() const;
  nlohmann::json to_json() const;
  static Stage1Config from_json(const nlohmann::json& j);
  // Hash of the fields that affect one training run (not the sweep lists).
  std::string hash() const;
};

struct DomainClassEmbeddings {
  int domain_id = 0;
  nn::Tensor rows;  // [N_c, d_e], unit rows
};

// Seeded N(0, init_std^2) draw; the stream depends on (seed, domain, k).
DomainTokens init_domain_tokens(int domain_id, int k, int d_t, std::uint64_t seed, double init_std = 0.02);

// [k+1, d_t]: the domain tokens followed by the class's aggregated row.
nn::Var build_prompt(const nn::Var& tokens, int class_id, const prompts::AggregatedEmbeddings& agg);
nn::Tensor build_prompt(const DomainTokens& tokens, int class_id, const prompts::AggregatedEmbeddings& agg);

// [N_c, d_e] differentiable w.r.t. `tokens`.
nn::Var class_embeddings(const teacher::VisionLanguageModel& teacher, const nn::Var& tokens,
                         const prompts::AggregatedEmbeddings& agg);
DomainClassEmbeddings domain_class_embeddings(const teacher::VisionLanguageModel& teacher, const DomainTokens& tokens,
                                              const prompts::AggregatedEmbeddings& agg);

// Mean cross-entropy of softmax(cos(image_i, class_j) / tau) at the labels.
nn::Var loss_ds(const nn::Var& image_embeddings, const nn::Var& class_embeddings, std::span<const int> labels,
                double temperature);
double loss_ds(const nn::Tensor& image_embeddings, const nn::Tensor& class_embeddings, std::span<const int> labels,
               double temperature);
// mean_i (1 - cos(E_i, A_i)).
nn::Var loss_g(const nn::Var& class_embeddings, const nn::Tensor& aggregated);
double loss_g(const nn::Tensor& class_embeddings, const nn::Tensor& aggregated);

struct Stage1Result {
  DomainTokens tokens;
  DomainClassEmbeddings embeddings;
  std::vector<double> step_losses;  // minibatch total loss before each update
  double initial_loss = 0.0;        // full-domain total loss at initialisation
  double final_loss = 0.0;          // full-domain total loss after training
};

// `domain_data` must hold exactly one domain. Teacher image embeddings are
// computed once up front. Plain SGD over the tokens only.
Stage1Result train_domain_prompts(const data::DomainDataset& domain_data, const teacher::VisionLanguageModel& teacher,
                                  const prompts::AggregatedEmbeddings& agg, const Stage1Config& config,
                                  const data::ImageLoader& loader = data::default_loader());

struct ValidationScore {
  double loss = 0.0;  // loss_ds + loss_g on the validation images
  eval::Metrics metrics;
};

// Scores class embeddings on pre-encoded validation images.
ValidationScore validate_embeddings(const nn::Tensor& class_rows, const nn::Tensor& aggregated,
                                    const nn::Tensor& image_embeddings, const std::vector<int>& labels,
                                    double temperature);

void save_tokens(const DomainTokens& tokens, const std::filesystem::path& path, const nlohmann::json& meta);
// Returns tokens plus the header metadata.
DomainTokens load_tokens(const std::filesystem::path& path, nlohmann::json* header = nullptr);

}  // namespace dipt::stage1
