#include "dipt/teacher.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <cctype>
#include <numeric>
#include <random>
#include <set>

#include "dipt/checkpoint.hpp"
#include "dipt/error.hpp"
#include "dipt/hash.hpp"

namespace dipt::teacher {

using nlohmann::json;
using nn::Tensor;
using nn::Var;

int TokenSequence::eos_position() const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == Tokenizer::kEos) return static_cast<int>(i);
  }
  throw ShapeError("token sequence has no eos");
}

Tokenizer::Tokenizer(std::vector<std::string> words, int max_length) : max_length_(max_length) {
  if (max_length < 2) throw ValidationError("max_length", "must be >= 2");
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  words.erase(std::remove(words.begin(), words.end(), std::string()), words.end());
  words_ = std::move(words);
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus, int max_length) {
  std::vector<std::string> words;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) words.push_back(std::move(w));
  }
  return Tokenizer(std::move(words), max_length);
}

std::vector<std::string> Tokenizer::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenSequence Tokenizer::tokenize(std::string_view text) const {
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(max_length_), kPad);
  seq.ids[0] = kBos;
  const auto words = split_words(text);
  const std::size_t room = static_cast<std::size_t>(max_length_) - 2;
  const std::size_t n = std::min(words.size(), room);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = std::lower_bound(words_.begin(), words_.end(), words[i]);
    seq.ids[i + 1] = (it != words_.end() && *it == words[i]) ? kFirstWord + static_cast<int>(it - words_.begin())
                                                             : kUnk;
  }
  seq.ids[n + 1] = kEos;
  return seq;
}

std::string Tokenizer::decode(const TokenSequence& seq) const {
  std::string out;
  for (int id : seq.ids) {
    if (id == kBos || id == kPad) continue;
    if (id == kEos) break;
    if (!out.empty()) out.push_back(' ');
    out += id == kUnk ? "<unk>" : words_.at(static_cast<std::size_t>(id - kFirstWord));
  }
  return out;
}

bool Tokenizer::fits(std::string_view text) const {
  return split_words(text).size() <= static_cast<std::size_t>(max_length_) - 2;
}

std::string Tokenizer::vocab_hash() const {
  Sha256 h;
  h.update("max_length=" + std::to_string(max_length_) + "\n");
  for (const auto& w : words_) {
    h.update(w);
    h.update("\n");
  }
  return h.hex();
}

void TeacherConfig::validate() const {
  if (dim <= 0) throw ValidationError("teacher.dim", "must be positive");
  if (heads <= 0 || dim % heads != 0) throw ValidationError("teacher.heads", "must divide dim");
  if (layers <= 0) throw ValidationError("teacher.layers", "must be positive");
  if (conv_channels.empty()) throw ValidationError("teacher.conv_channels", "must be nonempty");
  if (image_size < 16) throw ValidationError("teacher.image_size", "must be >= 16");
  if (!(logit_scale > 0.0)) throw ValidationError("teacher.logit_scale", "must be positive");
}

json TeacherConfig::to_json() const {
  return {{"dim", dim},
          {"heads", heads},
          {"layers", layers},
          {"mlp_dim", mlp_dim},
          {"image_size", image_size},
          {"conv_channels", conv_channels},
          {"logit_scale", logit_scale}};
}

TeacherConfig TeacherConfig::from_json(const json& j) {
  TeacherConfig c;
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  c.image_size = j.value("image_size", c.image_size);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.logit_scale = j.value("logit_scale", c.logit_scale);
  return c;
}

Embedding VisionLanguageModel::encode_text(const TokenSequence& seq) const {
  return encode_text_batch(std::vector<TokenSequence>{seq}).value().data;
}

Embedding VisionLanguageModel::encode_text(const Tensor& continuous) const {
  return encode_text_batch(std::vector<Var>{nn::constant(continuous)}).value().data;
}

Embedding VisionLanguageModel::encode_image(const Image& img) const {
  return encode_image_batch(data::to_tensor(std::vector<Image>{img}), 1).value().data;
}

Tensor VisionLanguageModel::encode_images(const std::vector<Image>& images, int chunk) const {
  Tensor out(static_cast<int>(images.size()), embed_dim());
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(chunk));
    std::vector<const Image*> part;
    for (std::size_t i = start; i < end; ++i) part.push_back(&images[i]);
    Var e = encode_image_batch(data::to_tensor(part), static_cast<int>(part.size()));
    std::copy(e.value().data.begin(), e.value().data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * static_cast<std::size_t>(embed_dim())));
  }
  return out;
}

TeacherModel::TeacherModel(TeacherConfig config, Tokenizer tokenizer, std::uint64_t seed)
    : config_(std::move(config)), tokenizer_(std::move(tokenizer)), seed_(seed) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.dim;
  token_embedding_ = params_.add("text.token_embedding", nn::gaussian(tokenizer_.vocab_size(), d, 0.02, rng));
  position_embedding_ = params_.add("text.position_embedding", nn::gaussian(tokenizer_.max_length(), d, 0.01, rng));
  for (int l = 0; l < config_.layers; ++l) {
    blocks_.push_back(
        nn::TransformerBlock::make(params_, "text.block" + std::to_string(l), d, config_.heads, config_.mlp_dim, rng));
  }
  final_norm_ = nn::LayerNorm::make(params_, "text.final_norm", d);
  text_projection_ = nn::Linear::make(params_, "text.projection", d, d, rng, false);
  int in = 3;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    convs_.push_back(
        nn::Conv2d::make(params_, "image.conv" + std::to_string(i), in, config_.conv_channels[i], 3, 2, 1, rng));
    in = config_.conv_channels[i];
  }
  image_projection_ = nn::Linear::make(params_, "image.projection", in, d, rng);
  set_trainable(false);
}

void TeacherModel::set_trainable(bool trainable) {
  for (const auto& [_, v] : params_.items()) v.node()->requires_grad = trainable;
}

Var TeacherModel::text_trunk(Var x, int batch, int seq, std::span<const std::uint8_t> mask,
                             std::span<const int> eos_rows) const {
  x = nn::add_broadcast_rows(x, nn::slice_rows(position_embedding_, 0, seq));
  for (const auto& block : blocks_) x = block(x, batch, seq, mask);
  Var pooled = nn::gather_rows(final_norm_(x), eos_rows);
  return nn::l2_normalize_rows(text_projection_(pooled));
}

Var TeacherModel::encode_text_batch(const std::vector<TokenSequence>& seqs) const {
  if (seqs.empty()) throw ShapeError("encode_text: empty batch");
  const int L = tokenizer_.max_length();
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::vector<int> eos_rows;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = seqs[b];
    if (static_cast<int>(s.ids.size()) != L) {
      throw LengthError("token sequence length " + std::to_string(s.ids.size()) + " != max_length " +
                        std::to_string(L));
    }
    for (int id : s.ids) {
      if (id < 0 || id >= tokenizer_.vocab_size()) throw ShapeError("token id " + std::to_string(id) + " out of range");
      ids.push_back(id);
      mask.push_back(id != Tokenizer::kPad ? 1 : 0);
    }
    eos_rows.push_back(static_cast<int>(b) * L + s.eos_position());
  }
  Var x = nn::gather_rows(token_embedding_, ids);
  return text_trunk(x, static_cast<int>(seqs.size()), L, mask, eos_rows);
}

Var TeacherModel::encode_text_batch(const std::vector<Var>& prompts) const {
  if (prompts.empty()) throw ShapeError("encode_text: empty batch");
  const int n = prompts.front().rows();
  const int d = config_.dim;
  if (n + 2 > tokenizer_.max_length()) {
    throw LengthError("continuous prompt of " + std::to_string(n) + " rows exceeds max_length " +
                      std::to_string(tokenizer_.max_length()) + " after bos/eos wrapping");
  }
  const std::array<int, 1> bos{Tokenizer::kBos};
  const std::array<int, 1> eos{Tokenizer::kEos};
  Var bos_row = nn::gather_rows(token_embedding_, bos);
  Var eos_row = nn::gather_rows(token_embedding_, eos);
  std::vector<Var> parts;
  std::vector<int> eos_rows;
  const int L = n + 2;
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    const Var& p = prompts[b];
    if (p.cols() != d) {
      throw ShapeError("continuous prompt width " + std::to_string(p.cols()) + " != token_dim " + std::to_string(d));
    }
    if (p.rows() != n) throw ShapeError("continuous prompts in one batch must share a length");
    parts.push_back(bos_row);
    parts.push_back(p);
    parts.push_back(eos_row);
    eos_rows.push_back(static_cast<int>(b) * L + L - 1);
  }
  return text_trunk(nn::concat_rows(parts), static_cast<int>(prompts.size()), L, {}, eos_rows);
}

Var TeacherModel::encode_image_batch(const Tensor& pixels, int batch) const {
  const int s = config_.image_size;
  if (pixels.cols != 3 || pixels.rows != batch * s * s) {
    throw ShapeError("image batch " + pixels.shape_str() + " does not match " + std::to_string(batch) + " RGB images of " +
                     std::to_string(s) + "x" + std::to_string(s));
  }
  Var x = nn::constant(pixels);
  int h = s;
  int w = s;
  for (const auto& conv : convs_) x = nn::relu(conv(x, batch, h, w));
  Var pooled = nn::global_avg_pool(x, batch, h * w);
  return nn::l2_normalize_rows(image_projection_(pooled));
}

Tensor TeacherModel::embed_lookup(const TokenSequence& seq) const {
  const int eos = seq.eos_position();
  const int d = config_.dim;
  Tensor out(eos - 1, d);
  for (int i = 1; i < eos; ++i) {
    auto src = token_embedding_.value().row(seq.ids[static_cast<std::size_t>(i)]);
    std::copy(src.begin(), src.end(), out.row(i - 1).begin());
  }
  return out;
}

std::string TeacherModel::hash() const { return params_hash(params_); }

const std::vector<std::string>& caption_templates() {
  static const std::vector<std::string> kTemplates{
      "{}",
      "a photo of {}",
      "an image showing {}",
      "a slide of {} tissue",
      "histology of {}",
      "a microscopy image of {}",
      "tissue sample with {}",
      "a stained section of {}",
  };
  return kTemplates;
}

std::string render_template(std::string_view tmpl, std::string_view class_name) {
  std::string out(tmpl);
  const auto pos = out.find("{}");
  if (pos == std::string::npos) return out + " " + std::string(class_name);
  out.replace(pos, 2, class_name);
  return out;
}

json PretrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// -(1/n) sum_ij targets_ij * log_softmax(logits)_ij
Var soft_cross_entropy(const Var& logits, const Tensor& targets) {
  return nn::scale(nn::sum(nn::mul(nn::constant(targets), nn::log_softmax_rows(logits))), -1.0 / logits.rows());
}

}  // namespace

TeacherModel pretrain_teacher(const data::DomainDataset& dataset, const Tokenizer& tokenizer,
                              const TeacherConfig& config, const PretrainConfig& pretrain,
                              const data::ImageLoader& loader, PretrainResult* result) {
  if (dataset.records.empty()) throw ValidationError("dataset", "pretraining needs a nonempty dataset");
  if (pretrain.epochs < 0) throw ValidationError("teacher.epochs", "must be >= 0");
  if (pretrain.batch_size < 2) throw ValidationError("teacher.batch_size", "must be >= 2");
  TeacherModel model(config, tokenizer, derive_seed(pretrain.seed, "teacher-init"));
  if (pretrain.epochs == 0) return model;

  const auto images = data::load_images(dataset, loader, {data::Stage::pretrain});
  for (const auto& img : images) {
    if (img.width != config.image_size || img.height != config.image_size) {
      throw ShapeError("pretraining image size differs from teacher image_size");
    }
  }
  const auto& templates = caption_templates();
  for (const auto& name : dataset.class_names) {
    for (const auto& t : templates) {
      if (!tokenizer.fits(render_template(t, name))) throw LengthError("caption too long: " + render_template(t, name));
    }
  }

  model.set_trainable(true);
  nn::Adam opt(model.params().vars(), pretrain.learning_rate);
  std::mt19937_64 rng(derive_seed(pretrain.seed, "teacher-shuffle"));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(pretrain.batch_size);

  for (int epoch = 0; epoch < pretrain.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const int n = static_cast<int>(end - start);
      if (n < 2) break;
      std::vector<const Image*> batch_imgs;
      std::vector<TokenSequence> captions;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const auto& rec = dataset.records[order[i]];
        batch_imgs.push_back(&images[order[i]]);
        const auto& tmpl = templates[rng() % templates.size()];
        captions.push_back(tokenizer.tokenize(render_template(tmpl, rec.class_name)));
        labels.push_back(rec.class_id);
      }
      Tensor targets(n, n);
      for (int i = 0; i < n; ++i) {
        int same = 0;
        for (int j = 0; j < n; ++j) same += labels[i] == labels[j];
        for (int j = 0; j < n; ++j) targets(i, j) = labels[i] == labels[j] ? 1.0 / same : 0.0;
      }
      opt.zero_grad();
      Var img = model.encode_image_batch(data::to_tensor(batch_imgs), n);
      Var txt = model.encode_text_batch(captions);
      Var logits = nn::scale(nn::matmul_nt(img, txt), config.logit_scale);
      // targets is symmetric, so it serves both directions.
      Var loss = nn::scale(nn::add(soft_cross_entropy(logits, targets), soft_cross_entropy(nn::transpose(logits), targets)),
                           0.5);
      loss.backward();
      opt.step();
      total += loss.item();
      ++batches;
    }
    if (result) result->epoch_losses.push_back(total / std::max(1, batches));
  }
  model.set_trainable(false);
  return model;
}

std::vector<int> nearest_class(const Tensor& image_embeddings, const Tensor& class_rows) {
  if (image_embeddings.cols != class_rows.cols) {
    throw ShapeError("nearest_class: embedding dim " + std::to_string(image_embeddings.cols) + " vs class dim " +
                     std::to_string(class_rows.cols));
  }
  std::vector<double> norms(static_cast<std::size_t>(class_rows.rows));
  for (int c = 0; c < class_rows.rows; ++c) {
    double s = 0.0;
    for (double v : class_rows.row(c)) s += v * v;
    if (!(s > 0.0)) throw NumericalError("class row " + std::to_string(c) + " has zero norm");
    norms[static_cast<std::size_t>(c)] = std::sqrt(s);
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(image_embeddings.rows));
  for (int i = 0; i < image_embeddings.rows; ++i) {
    auto x = image_embeddings.row(i);
    double xn = 0.0;
    for (double v : x) xn += v * v;
    if (!(xn > 0.0)) throw NumericalError("image embedding " + std::to_string(i) + " has zero norm");
    int best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < class_rows.rows; ++c) {
      auto e = class_rows.row(c);
      double dot = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) dot += x[k] * e[k];
      const double cos = dot / (std::sqrt(xn) * norms[static_cast<std::size_t>(c)]);
      if (cos > best_cos) {  // strict: ties keep the lower id
        best_cos = cos;
        best = c;
      }
    }
    out.push_back(best);
  }
  return out;
}

void save_checkpoint(const TeacherModel& model, const std::filesystem::path& path, const json& extra) {
  json meta = extra.is_object() ? extra : json::object();
  meta["kind"] = "teacher";
  meta["d_t"] = model.token_dim();
  meta["d_e"] = model.embed_dim();
  meta["vocab_hash"] = model.tokenizer().vocab_hash();
  meta["vocab"] = model.tokenizer().words();
  meta["max_length"] = model.tokenizer().max_length();
  meta["arch"] = model.config().to_json();
  meta["init_seed"] = model.init_seed();
  meta["params_hash"] = model.hash();
  write_checkpoint(path, meta, model.params());
}

TeacherModel load_checkpoint(const std::filesystem::path& path, const Tokenizer* expected) {
  Checkpoint ck = read_checkpoint(path);
  const json& h = ck.header;
  auto field = [&](const char* name) -> const json& {
    if (!h.contains(name)) throw CheckpointError("teacher checkpoint missing field " + std::string(name));
    return h.at(name);
  };
  if (field("kind") != "teacher") throw CheckpointError("field kind is " + h.at("kind").dump() + ", expected teacher");
  const TeacherConfig cfg = TeacherConfig::from_json(field("arch"));
  if (field("d_t").get<int>() != cfg.dim || field("d_e").get<int>() != cfg.dim) {
    throw CheckpointError("fields d_t/d_e disagree with arch.dim");
  }
  Tokenizer tok(field("vocab").get<std::vector<std::string>>(), field("max_length").get<int>());
  if (tok.vocab_hash() != field("vocab_hash").get<std::string>()) {
    throw CheckpointError("field vocab_hash does not match the stored vocabulary");
  }
  if (expected && expected->vocab_hash() != tok.vocab_hash()) {
    throw CompatibilityError("tokenizer vocabulary " + expected->vocab_hash().substr(0, 12) +
                             " is incompatible with checkpoint vocabulary " + tok.vocab_hash().substr(0, 12));
  }
  TeacherModel model(cfg, std::move(tok), field("init_seed").get<std::uint64_t>());
  load_params(ck, model.params());
  if (h.contains("params_hash") && h.at("params_hash").get<std::string>() != model.hash()) {
    throw CheckpointError("field params_hash does not match loaded parameters");
  }
  return model;
}

}  // namespace dipt::teacher
