#pragma once

// Frozen vision-language teacher: word tokenizer, transformer text encoder
// accepting token ids or continuous token embeddings, convolutional image
// encoder, symmetric contrastive pretraining, and checkpoint I/O.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dipt/autograd.hpp"
#include "dipt/data.hpp"
#include "dipt/image.hpp"
#include "dipt/layers.hpp"

namespace dipt::teacher {

using Embedding = std::vector<double>;

struct TokenSequence {
  std::vector<int> ids;  // bos-prefixed, eos present, padded to max_length
  int eos_position() const;
  bool operator==(const TokenSequence&) const = default;
};

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kFirstWord = 4;

  // `words` become ids kFirstWord.. in sorted order; duplicates are dropped.
  explicit Tokenizer(std::vector<std::string> words, int max_length = 16);
  // Vocabulary = every word appearing in `corpus`.
  static Tokenizer build(const std::vector<std::string>& corpus, int max_length = 16);

  // Lowercases and splits on anything that is not a letter or digit.
  static std::vector<std::string> split_words(std::string_view text);

  TokenSequence tokenize(std::string_view text) const;
  std::string decode(const TokenSequence& seq) const;
  // True when every word fits between bos and eos without truncation.
  bool fits(std::string_view text) const;

  int max_length() const noexcept { return max_length_; }
  int vocab_size() const noexcept { return kFirstWord + static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const noexcept { return words_; }
  std::string vocab_hash() const;

 private:
  std::vector<std::string> words_;
  int max_length_;
};

struct TeacherConfig {
  int dim = 64;  // token width == embedding width
  int heads = 4;
  int layers = 2;
  int mlp_dim = 128;
  int image_size = 64;
  std::vector<int> conv_channels{16, 32, 32, 64};
  double logit_scale = 1.0 / 0.07;

  void validate() const;
  nlohmann::json to_json() const;
  static TeacherConfig from_json(const nlohmann::json& j);
};

// Seam for swapping in another vision-language model. Every text path must
// return L2-normalised rows and accept both discrete and continuous input.
class VisionLanguageModel {
 public:
  virtual ~VisionLanguageModel() = default;

  virtual const Tokenizer& tokenizer() const = 0;
  virtual int token_dim() const = 0;
  virtual int embed_dim() const = 0;
  virtual int image_size() const = 0;

  // [batch, embed_dim], unit rows.
  virtual nn::Var encode_text_batch(const std::vector<TokenSequence>& seqs) const = 0;
  // Each prompt is [n, token_dim] (same n for all); the encoder wraps it as
  // [bos, prompt..., eos] and pools at eos.
  virtual nn::Var encode_text_batch(const std::vector<nn::Var>& prompts) const = 0;
  // `pixels` is NHWC [batch*h*w, 3] as produced by data::to_tensor.
  virtual nn::Var encode_image_batch(const nn::Tensor& pixels, int batch) const = 0;
  // Content rows of the token-embedding table for a sequence (no bos/eos/pad).
  virtual nn::Tensor embed_lookup(const TokenSequence& seq) const = 0;
  // Hash identifying the exact parameters.
  virtual std::string hash() const = 0;

  TokenSequence tokenize(std::string_view text) const { return tokenizer().tokenize(text); }
  Embedding encode_text(const TokenSequence& seq) const;
  Embedding encode_text(const nn::Tensor& continuous) const;
  Embedding encode_image(const Image& img) const;
  // Encodes images in chunks; returns [n, embed_dim].
  nn::Tensor encode_images(const std::vector<Image>& images, int chunk = 64) const;
};

class TeacherModel final : public VisionLanguageModel {
 public:
  TeacherModel(TeacherConfig config, Tokenizer tokenizer, std::uint64_t seed);

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  int token_dim() const override { return config_.dim; }
  int embed_dim() const override { return config_.dim; }
  int image_size() const override { return config_.image_size; }
  nn::Var encode_text_batch(const std::vector<TokenSequence>& seqs) const override;
  nn::Var encode_text_batch(const std::vector<nn::Var>& prompts) const override;
  nn::Var encode_image_batch(const nn::Tensor& pixels, int batch) const override;
  nn::Tensor embed_lookup(const TokenSequence& seq) const override;
  std::string hash() const override;

  const TeacherConfig& config() const noexcept { return config_; }
  const nn::ParamSet& params() const noexcept { return params_; }
  nn::ParamSet& params() noexcept { return params_; }
  std::uint64_t init_seed() const noexcept { return seed_; }

  // Parameters are frozen (no gradient tracking) unless explicitly unfrozen
  // for pretraining.
  void set_trainable(bool trainable);

 private:
  nn::Var text_trunk(nn::Var x, int batch, int seq, std::span<const std::uint8_t> mask,
                     std::span<const int> eos_rows) const;

  TeacherConfig config_;
  Tokenizer tokenizer_;
  std::uint64_t seed_;
  nn::ParamSet params_;
  nn::Var token_embedding_;     // [vocab, dim]
  nn::Var position_embedding_;  // [max_length, dim]
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear text_projection_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear image_projection_;
};

// Caption templates used for pretraining; "{}" is replaced by the class name.
const std::vector<std::string>& caption_templates();
std::string render_template(std::string_view tmpl, std::string_view class_name);

struct PretrainConfig {
  int epochs = 12;
  int batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  std::vector<double> epoch_losses;
};

// Symmetric InfoNCE over in-batch image/caption pairs. Items sharing a class
// are all treated as positives (uniform soft targets), since with few
// classes most of a batch shares captions' class.
TeacherModel pretrain_teacher(const data::DomainDataset& dataset, const Tokenizer& tokenizer,
                              const TeacherConfig& config, const PretrainConfig& pretrain,
                              const data::ImageLoader& loader = data::default_loader(),
                              PretrainResult* result = nullptr);

// Argmax cosine of each image embedding against class rows (ties -> lowest id).
std::vector<int> nearest_class(const nn::Tensor& image_embeddings, const nn::Tensor& class_rows);

void save_checkpoint(const TeacherModel& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
// When `expected` is given its vocabulary hash must match the checkpoint's.
TeacherModel load_checkpoint(const std::filesystem::path& path, const Tokenizer* expected = nullptr);

}  // namespace dipt::teacher
