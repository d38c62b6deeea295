#pragma once

// Student image models and their training against the frozen teacher:
// image alignment (student embedding vs teacher image embedding), text
// alignment (student embedding vs the class row of an embedding store),
// their weighted sum, or logit distillation from the teacher's zero-shot
// classifier. Embedding-aligned students classify by cosine against a store.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/autograd.hpp"
#include "dipt/data.hpp"
#include "dipt/layers.hpp"
#include "dipt/store.hpp"
#include "dipt/teacher.hpp"

namespace dipt::distill {

enum class Mode { vanilla_kd, image_only, text_aligned, dual };
enum class Source { generic_prompt, agg_template, dipt_invariant };

const char* to_string(Mode m);
const char* to_string(Source s);
Mode parse_mode(const std::string& s);
Source parse_source(const std::string& s);
// Store name holding the embeddings for a source.
std::string store_name(Source s);

struct StudentConfig {
  std::string arch = "conv";  // "conv" or "vit"
  std::vector<int> conv_channels{8, 16, 32};
  int patch_size = 8;
  int vit_dim = 32;
  int vit_heads = 4;
  int vit_layers = 2;
  int vit_mlp = 64;
  int embed_dim = 64;
  int image_size = 64;
  int num_classes = 0;  // > 0 adds a linear classification head
  // Standardise each image channel to zero mean, unit variance before the
  // first layer.
  bool input_norm = true;

  void validate() const;
  nlohmann::json to_json() const;
  static StudentConfig from_json(const nlohmann::json& j);
};

class StudentModel {
 public:
  StudentModel(StudentConfig config, std::uint64_t seed);

  struct Output {
    nn::Var embedding;  // [batch, embed_dim], not normalised
    nn::Var logits;     // [batch, num_classes], only with a head
  };
  Output forward(const nn::Tensor& pixels, int batch) const;

  const StudentConfig& config() const noexcept { return config_; }
  nn::ParamSet& params() noexcept { return params_; }
  const nn::ParamSet& params() const noexcept { return params_; }
  std::uint64_t init_seed() const noexcept { return seed_; }
  std::string hash() const;
  // Projection head parameters (weight, bias).
  std::vector<nn::Var> projection_params() const { return {projection_.weight, projection_.bias}; }

 private:
  StudentConfig config_;
  std::uint64_t seed_;
  nn::ParamSet params_;
  std::vector<nn::Conv2d> convs_;
  nn::Conv2d patch_embed_;
  nn::Var position_embedding_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear projection_;
  nn::Linear head_;
};

struct DistillConfig {
  std::string name;  // free label used in reports
  Mode mode = Mode::dual;
  Source source = Source::agg_template;
  double lambda_image = 1.0;
  double lambda_text = 1.0;
  double kd_temperature = 4.0;
  double teacher_tau = 0.01;  // teacher zero-shot logits = cos / tau
  double learning_rate = 3e-3;
  int epochs = 30;
  int batch_size = 32;
  // Strength of the random per-image colour transform applied to training
  // batches (channel mixing, hue, contrast, brightness); 0 disables it.
  double color_jitter = 1.0;
  std::uint64_t seed = 0;
  StudentConfig student;

  void validate() const;
  bool uses_store() const { return mode == Mode::text_aligned || mode == Mode::dual; }
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Random colour transform of each image in a [pixels, 3] batch with values
// in [-1, 1]; strength 0 returns the input unchanged.
nn::Tensor color_jitter(const nn::Tensor& pixels, int pixels_per_image, double strength, std::mt19937_64& rng);

// mean(1 - cos(student_i, teacher_i)).
nn::Var loss_image_align(const nn::Var& student, const nn::Var& teacher);
double loss_image_align(const nn::Tensor& student, const nn::Tensor& teacher);
// mean(1 - cos(student_i, E_{y_i})).
nn::Var loss_text_align(const nn::Var& student, std::span<const int> labels, const nn::Tensor& class_rows);
double loss_text_align(const nn::Tensor& student, std::span<const int> labels, const nn::Tensor& class_rows);
// Batch mean of KL(softmax(teacher/T) || softmax(student/T)).
nn::Var kd_divergence(const nn::Var& student_logits, const nn::Tensor& teacher_logits, double temperature);
// T^2 * kd_divergence.
nn::Var loss_vanilla_kd(const nn::Var& student_logits, const nn::Tensor& teacher_logits, double temperature);
double loss_vanilla_kd(const nn::Tensor& student_logits, const nn::Tensor& teacher_logits, double temperature);

// Teacher zero-shot logits cos(h_I(x), E_i) / tau for pre-encoded images.
nn::Tensor teacher_logits(const nn::Tensor& teacher_image_embeddings, const nn::Tensor& class_rows, double tau);

struct StudentResult {
  StudentModel student;
  std::vector<double> epoch_losses;  // mean minibatch loss per epoch
  double initial_loss = 0.0;         // full training-set loss before training
  double final_loss = 0.0;           // full training-set loss after training
};

struct DistillInputs {
  const store::EmbeddingStore* store = nullptr;       // text modes
  const store::EmbeddingStore* zero_shot = nullptr;   // vanilla_kd: agg_template store
  int rotation_test = -1;                             // records of this domain are refused
};

StudentResult train_student(const data::DomainDataset& train_data, const teacher::VisionLanguageModel& teacher,
                            const DistillConfig& config, const DistillInputs& inputs,
                            const data::ImageLoader& loader = data::default_loader());

// Embeddings for a set of images, in chunks.
nn::Tensor embed_images(const StudentModel& student, const std::vector<Image>& images, int chunk = 64);

// argmax cos(f(x), E_i); ties go to the lowest class id.
std::vector<int> predict(const StudentModel& student, const store::EmbeddingStore& store,
                         const std::vector<Image>& images);
// argmax of the linear head (students with a head).
std::vector<int> predict_head(const StudentModel& student, const std::vector<Image>& images);
std::vector<int> zero_shot_predict(const teacher::VisionLanguageModel& teacher, const store::EmbeddingStore& store,
                                   const std::vector<Image>& images);

void save_student(const StudentModel& student, const std::filesystem::path& path, const nlohmann::json& meta);
StudentModel load_student(const std::filesystem::path& path, nlohmann::json* header = nullptr);

}  // namespace dipt::distill
