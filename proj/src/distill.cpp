#include "dipt/distill.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "dipt/checkpoint.hpp"
#include "dipt/error.hpp"
#include "dipt/hash.hpp"

namespace dipt::distill {

using nlohmann::json;
using nn::Tensor;
using nn::Var;

const char* to_string(Mode m) {
  switch (m) {
    case Mode::vanilla_kd: return "vanilla_kd";
    case Mode::image_only: return "image_only";
    case Mode::text_aligned: return "text_aligned";
    case Mode::dual: return "dual";
  }
  return "?";
}

const char* to_string(Source s) {
  switch (s) {
    case Source::generic_prompt: return "generic_prompt";
    case Source::agg_template: return "agg_template";
    case Source::dipt_invariant: return "dipt_invariant";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::vanilla_kd, Mode::image_only, Mode::text_aligned, Mode::dual})
    if (s == to_string(m)) return m;
  throw ValidationError("mode", "unknown distillation mode '" + s + "'");
}

Source parse_source(const std::string& s) {
  for (Source v : {Source::generic_prompt, Source::agg_template, Source::dipt_invariant})
    if (s == to_string(v)) return v;
  throw ValidationError("embedding_source", "unknown embedding source '" + s + "'");
}

std::string store_name(Source s) {
  switch (s) {
    case Source::generic_prompt: return "generic_prompt";
    case Source::agg_template: return "agg_template";
    case Source::dipt_invariant: return "invariant";
  }
  return "?";
}

// --- Student ----------------------------------------------------------------

void StudentConfig::validate() const {
  if (arch != "conv" && arch != "vit") throw ValidationError("student.arch", "must be conv or vit");
  if (embed_dim < 1) throw ValidationError("student.embed_dim", "must be >= 1");
  if (image_size < 1) throw ValidationError("student.image_size", "must be >= 1");
  if (num_classes < 0) throw ValidationError("student.num_classes", "must be >= 0");
  if (arch == "conv") {
    if (conv_channels.empty()) throw ValidationError("student.conv_channels", "empty");
    for (int c : conv_channels)
      if (c < 1) throw ValidationError("student.conv_channels", "entries must be >= 1");
  } else {
    if (patch_size < 1 || image_size % patch_size != 0)
      throw ValidationError("student.patch_size", "must divide image_size");
    if (vit_dim < 1 || vit_heads < 1 || vit_dim % vit_heads != 0)
      throw ValidationError("student.vit_heads", "must divide vit_dim");
    if (vit_layers < 1) throw ValidationError("student.vit_layers", "must be >= 1");
    if (vit_mlp < 1) throw ValidationError("student.vit_mlp", "must be >= 1");
  }
}

json StudentConfig::to_json() const {
  return {{"arch", arch},           {"conv_channels", conv_channels}, {"patch_size", patch_size},
          {"vit_dim", vit_dim},     {"vit_heads", vit_heads},         {"vit_layers", vit_layers},
          {"vit_mlp", vit_mlp},     {"embed_dim", embed_dim},         {"image_size", image_size},
          {"num_classes", num_classes}, {"input_norm", input_norm}};
}

StudentConfig StudentConfig::from_json(const json& j) {
  StudentConfig c;
  c.arch = j.value("arch", c.arch);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.vit_dim = j.value("vit_dim", c.vit_dim);
  c.vit_heads = j.value("vit_heads", c.vit_heads);
  c.vit_layers = j.value("vit_layers", c.vit_layers);
  c.vit_mlp = j.value("vit_mlp", c.vit_mlp);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.input_norm = j.value("input_norm", c.input_norm);
  c.validate();
  return c;
}

namespace {

Tensor standardize_channels(const Tensor& pixels, int pixels_per_image) {
  Tensor out = pixels;
  for (int start = 0; start < pixels.rows; start += pixels_per_image) {
    for (int c = 0; c < 3; ++c) {
      double mean = 0.0, sq = 0.0;
      for (int p = start; p < start + pixels_per_image; ++p) mean += pixels.row(p)[c];
      mean /= pixels_per_image;
      for (int p = start; p < start + pixels_per_image; ++p) sq += (pixels.row(p)[c] - mean) * (pixels.row(p)[c] - mean);
      const double inv = 1.0 / std::sqrt(sq / pixels_per_image + 1e-5);
      for (int p = start; p < start + pixels_per_image; ++p) out.row(p)[c] = (pixels.row(p)[c] - mean) * inv;
    }
  }
  return out;
}

}  // namespace

StudentModel::StudentModel(StudentConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  std::mt19937_64 rng(seed);
  int features = 0;
  if (config_.arch == "conv") {
    int in = 3;
    for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
      convs_.push_back(nn::Conv2d::make(params_, "conv" + std::to_string(i), in, config_.conv_channels[i], 3, 2, 1, rng));
      in = config_.conv_channels[i];
    }
    features = in;
  } else {
    const int p = config_.patch_size;
    const int tokens = (config_.image_size / p) * (config_.image_size / p);
    patch_embed_ = nn::Conv2d::make(params_, "patch_embed", 3, config_.vit_dim, p, p, 0, rng);
    position_embedding_ = params_.add("position_embedding", nn::gaussian(tokens, config_.vit_dim, 0.02, rng));
    for (int l = 0; l < config_.vit_layers; ++l) {
      blocks_.push_back(nn::TransformerBlock::make(params_, "block" + std::to_string(l), config_.vit_dim,
                                                   config_.vit_heads, config_.vit_mlp, rng));
    }
    final_norm_ = nn::LayerNorm::make(params_, "final_norm", config_.vit_dim);
    features = config_.vit_dim;
  }
  projection_ = nn::Linear::make(params_, "projection", features, config_.embed_dim, rng);
  if (config_.num_classes > 0) head_ = nn::Linear::make(params_, "head", features, config_.num_classes, rng);
}

StudentModel::Output StudentModel::forward(const Tensor& pixels, int batch) const {
  const int s = config_.image_size;
  if (pixels.cols != 3 || pixels.rows != batch * s * s) {
    throw ShapeError("student input " + pixels.shape_str() + " does not match " + std::to_string(batch) +
                     " RGB images of " + std::to_string(s) + "x" + std::to_string(s));
  }
  Var x = nn::constant(config_.input_norm ? standardize_channels(pixels, s * s) : pixels);
  Var pooled;
  if (config_.arch == "conv") {
    int h = s, w = s;
    for (const auto& conv : convs_) x = nn::relu(conv(x, batch, h, w));
    pooled = nn::global_avg_pool(x, batch, h * w);
  } else {
    int h = s, w = s;
    x = patch_embed_(x, batch, h, w);
    const int seq = h * w;
    x = nn::add_broadcast_rows(x, position_embedding_);
    for (const auto& block : blocks_) x = block(x, batch, seq);
    pooled = nn::mean_row_groups(final_norm_(x), seq);
  }
  Output out;
  out.embedding = projection_(pooled);
  if (config_.num_classes > 0) out.logits = head_(pooled);
  return out;
}

std::string StudentModel::hash() const { return params_hash(params_); }

// --- Distillation config ------------------------------------------------------

void DistillConfig::validate() const {
  student.validate();
  if (lambda_image < 0.0) throw ValidationError("lambda_image", "must be >= 0");
  if (lambda_text < 0.0) throw ValidationError("lambda_text", "must be >= 0");
  if (mode == Mode::dual && !(lambda_image + lambda_text > 0.0))
    throw ValidationError("lambda_image", "dual mode needs lambda_image + lambda_text > 0");
  if (!(kd_temperature > 0.0)) throw ValidationError("kd_temperature", "must be > 0");
  if (!(teacher_tau > 0.0)) throw ValidationError("teacher_tau", "must be > 0");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate", "must be > 0");
  if (epochs < 0) throw ValidationError("epochs", "must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  if (!(color_jitter >= 0.0)) throw ValidationError("color_jitter", "must be >= 0");
}

json DistillConfig::to_json() const {
  return {{"name", name},
          {"mode", to_string(mode)},
          {"embedding_source", to_string(source)},
          {"lambda_image", lambda_image},
          {"lambda_text", lambda_text},
          {"kd_temperature", kd_temperature},
          {"teacher_tau", teacher_tau},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"color_jitter", color_jitter},
          {"seed", seed},
          {"student", student.to_json()}};
}

DistillConfig DistillConfig::from_json(const json& j) {
  DistillConfig c;
  c.name = j.value("name", c.name);
  c.mode = parse_mode(j.value("mode", std::string(to_string(c.mode))));
  c.source = parse_source(j.value("embedding_source", std::string(to_string(c.source))));
  c.lambda_image = j.value("lambda_image", c.lambda_image);
  c.lambda_text = j.value("lambda_text", c.lambda_text);
  c.kd_temperature = j.value("kd_temperature", c.kd_temperature);
  c.teacher_tau = j.value("teacher_tau", c.teacher_tau);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.color_jitter = j.value("color_jitter", c.color_jitter);
  c.seed = j.value("seed", c.seed);
  if (j.contains("student")) c.student = StudentConfig::from_json(j.at("student"));
  c.validate();
  return c;
}

std::string DistillConfig::hash() const { return sha256_hex(to_json().dump()); }

// --- Losses -------------------------------------------------------------------

namespace {

Var one_minus_mean_cos(const Var& a, const Var& b) {
  Var cos = nn::row_dot(nn::l2_normalize_rows(a), nn::l2_normalize_rows(b));
  return nn::add_scalar(nn::scale(nn::mean(cos), -1.0), 1.0);
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  return nn::scale(nn::mean(nn::pick(nn::log_softmax_rows(logits), labels)), -1.0);
}

Tensor softmax_rows(const Tensor& z, double temperature) {
  Tensor p(z.rows, z.cols);
  for (int i = 0; i < z.rows; ++i) {
    auto in = z.row(i);
    auto out = p.row(i);
    const double mx = *std::max_element(in.begin(), in.end()) / temperature;
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) s += (out[j] = std::exp(in[j] / temperature - mx));
    for (double& v : out) v /= s;
  }
  return p;
}

}  // namespace

Var loss_image_align(const Var& student, const Var& teacher) {
  if (student.value().rows != teacher.value().rows || student.value().cols != teacher.value().cols)
    throw ShapeError("image alignment: student " + student.value().shape_str() + " vs teacher " +
                     teacher.value().shape_str());
  if (student.value().rows == 0) throw ValidationError("batch", "empty batch");
  return one_minus_mean_cos(student, teacher);
}

double loss_image_align(const Tensor& student, const Tensor& teacher) {
  return loss_image_align(nn::constant(student), nn::constant(teacher)).item();
}

Var loss_text_align(const Var& student, std::span<const int> labels, const Tensor& class_rows) {
  const Tensor& s = student.value();
  if (s.rows == 0) throw ValidationError("batch", "empty batch");
  if (static_cast<int>(labels.size()) != s.rows)
    throw ShapeError("text alignment: " + std::to_string(labels.size()) + " labels for " + std::to_string(s.rows) +
                     " embeddings");
  if (s.cols != class_rows.cols)
    throw ShapeError("text alignment: student dim " + std::to_string(s.cols) + " vs store dim " +
                     std::to_string(class_rows.cols));
  for (int y : labels)
    if (y < 0 || y >= class_rows.rows) throw ValidationError("labels", "no embedding row for label " + std::to_string(y));
  return one_minus_mean_cos(student, nn::gather_rows(nn::constant(class_rows), labels));
}

double loss_text_align(const Tensor& student, std::span<const int> labels, const Tensor& class_rows) {
  return loss_text_align(nn::constant(student), labels, class_rows).item();
}

Var kd_divergence(const Var& student_logits, const Tensor& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("kd_temperature", "must be > 0");
  const Tensor& s = student_logits.value();
  if (s.rows != teacher_logits.rows || s.cols != teacher_logits.cols)
    throw ShapeError("kd: student logits " + s.shape_str() + " vs teacher logits " + teacher_logits.shape_str());
  if (s.rows == 0) throw ValidationError("batch", "empty batch");
  const Tensor p = softmax_rows(teacher_logits, temperature);
  double neg_entropy = 0.0;
  for (double v : p.data)
    if (v > 0.0) neg_entropy += v * std::log(v);
  const double n = s.rows;
  Var logq = nn::log_softmax_rows(nn::scale(student_logits, 1.0 / temperature));
  Var cross = nn::sum(nn::mul(nn::constant(p), logq));
  return nn::add_scalar(nn::scale(cross, -1.0 / n), neg_entropy / n);
}

Var loss_vanilla_kd(const Var& student_logits, const Tensor& teacher_logits, double temperature) {
  return nn::scale(kd_divergence(student_logits, teacher_logits, temperature), temperature * temperature);
}

double loss_vanilla_kd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  return loss_vanilla_kd(nn::constant(student_logits), teacher_logits, temperature).item();
}

Tensor teacher_logits(const Tensor& teacher_image_embeddings, const Tensor& class_rows, double tau) {
  if (!(tau > 0.0)) throw ValidationError("teacher_tau", "must be > 0");
  if (teacher_image_embeddings.cols != class_rows.cols)
    throw ShapeError("teacher logits: image dim " + std::to_string(teacher_image_embeddings.cols) + " vs class dim " +
                     std::to_string(class_rows.cols));
  return nn::scale(nn::matmul_nt(nn::l2_normalize_rows(nn::constant(teacher_image_embeddings)),
                                 nn::l2_normalize_rows(nn::constant(class_rows))),
                   1.0 / tau)
      .value();
}

// --- Training -------------------------------------------------------------------

namespace {

Tensor gather_images(const Tensor& pixels, int pixels_per_image, std::span<const int> idx) {
  Tensor out(static_cast<int>(idx.size()) * pixels_per_image, 3);
  const std::size_t block = static_cast<std::size_t>(pixels_per_image) * 3;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = pixels.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[i]) * block);
    std::copy(src, src + static_cast<std::ptrdiff_t>(block), out.data.begin() + static_cast<std::ptrdiff_t>(i * block));
  }
  return out;
}

}  // namespace

Tensor color_jitter(const Tensor& pixels, int pixels_per_image, double strength, std::mt19937_64& rng) {
  if (strength == 0.0) return pixels;
  if (pixels_per_image < 1 || pixels.cols != 3 || pixels.rows % pixels_per_image != 0)
    throw ShapeError("color_jitter: expected [images * pixels, 3]");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor out = pixels;
  const int images = pixels.rows / pixels_per_image;
  for (int i = 0; i < images; ++i) {
    std::array<double, 9> mix{};
    for (int k = 0; k < 9; ++k) mix[k] = (k % 4 == 0 ? 1.0 : 0.0) + 0.2 * strength * u(rng);
    const double angle = 0.5 * strength * u(rng);
    const double contrast = 1.0 + 0.3 * strength * u(rng);
    const double brightness = 0.1 * strength * u(rng);
    // Rotation about the grey axis.
    const double c = std::cos(angle), s = std::sin(angle), k = 1.0 / std::sqrt(3.0), a = (1.0 - c) / 3.0;
    const std::array<double, 9> rot{c + a, a - s * k, a + s * k, a + s * k, c + a, a - s * k, a - s * k, a + s * k, c + a};
    std::array<double, 9> m{};
    for (int r = 0; r < 3; ++r)
      for (int q = 0; q < 3; ++q)
        for (int t = 0; t < 3; ++t) m[r * 3 + q] += rot[r * 3 + t] * mix[t * 3 + q];
    for (int p = i * pixels_per_image; p < (i + 1) * pixels_per_image; ++p) {
      auto px = out.row(p);
      const std::array<double, 3> x{(px[0] + 1.0) / 2.0, (px[1] + 1.0) / 2.0, (px[2] + 1.0) / 2.0};
      for (int r = 0; r < 3; ++r) {
        const double v = m[r * 3] * x[0] + m[r * 3 + 1] * x[1] + m[r * 3 + 2] * x[2];
        px[r] = 2.0 * std::clamp((v - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0) - 1.0;
      }
    }
  }
  return out;
}

namespace {

Tensor gather_rows(const Tensor& t, std::span<const int> idx) {
  Tensor out(static_cast<int>(idx.size()), t.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) std::ranges::copy(t.row(idx[i]), out.row(static_cast<int>(i)).begin());
  return out;
}

void check_store(const store::EmbeddingStore& s, const std::string& expected_name, const data::DomainDataset& ds,
                 const teacher::VisionLanguageModel& teacher) {
  if (s.name != expected_name)
    throw CompatibilityError("expected store '" + expected_name + "', got '" + s.name + "'");
  if (s.class_names != ds.class_names) throw CompatibilityError("store '" + s.name + "' classes differ from the dataset's");
  if (s.dim() != teacher.embed_dim())
    throw CompatibilityError("store '" + s.name + "' dim " + std::to_string(s.dim()) + " vs teacher " +
                             std::to_string(teacher.embed_dim()));
  if (s.provenance.teacher_hash != teacher.hash())
    throw ProvenanceError("store '" + s.name + "' was built from teacher " + s.provenance.teacher_hash +
                          ", not the current teacher " + teacher.hash());
}

}  // namespace

StudentResult train_student(const data::DomainDataset& train_data, const teacher::VisionLanguageModel& teacher,
                            const DistillConfig& config_in, const DistillInputs& inputs,
                            const data::ImageLoader& loader) {
  DistillConfig config = config_in;
  config.student.embed_dim = teacher.embed_dim();
  config.student.image_size = teacher.image_size();
  config.student.num_classes = config.mode == Mode::vanilla_kd ? train_data.num_classes() : 0;
  config.validate();
  if (train_data.records.empty()) throw ValidationError("train_data", "no training records");
  for (const auto& r : train_data.records) {
    if (r.domain_id == inputs.rotation_test)
      throw LeakageError("test domain " + std::to_string(r.domain_id) + " present in distillation data");
  }

  const store::EmbeddingStore* text_store = nullptr;
  if (config.uses_store()) {
    if (!inputs.store) throw MissingArtifactError("distillation mode " + std::string(to_string(config.mode)) +
                                                  " needs the '" + store_name(config.source) + "' store");
    check_store(*inputs.store, store_name(config.source), train_data, teacher);
    for (int d : inputs.store->provenance.source_domains) {
      if (d == inputs.rotation_test)
        throw LeakageError("store '" + inputs.store->name + "' was built with test domain " + std::to_string(d));
    }
    text_store = inputs.store;
  }
  if (config.mode == Mode::vanilla_kd) {
    if (!inputs.zero_shot) throw MissingArtifactError("vanilla_kd needs the 'agg_template' store");
    check_store(*inputs.zero_shot, "agg_template", train_data, teacher);
  }
  const std::string teacher_hash = teacher.hash();
  const std::string store_digest = text_store ? text_store->digest() : "";

  const auto images = data::load_images(train_data, loader, {data::Stage::distill, inputs.rotation_test, -1});
  const Tensor pixels = data::to_tensor(images);
  const int ppi = config.student.image_size * config.student.image_size;
  std::vector<int> labels;
  for (const auto& r : train_data.records) labels.push_back(r.class_id);
  const int n = static_cast<int>(labels.size());

  const bool needs_teacher = config.mode != Mode::text_aligned;
  const Tensor teacher_emb = needs_teacher ? teacher.encode_images(images) : Tensor();
  const Tensor kd_logits = config.mode == Mode::vanilla_kd
                               ? teacher_logits(teacher_emb, inputs.zero_shot->matrix, config.teacher_tau)
                               : Tensor();

  StudentResult result{StudentModel(config.student, derive_seed(config.seed, "student-init")), {}, 0.0, 0.0};
  StudentModel& student = result.student;

  std::mt19937_64 aug_rng(derive_seed(config.seed, "student-augment"));
  auto batch_loss = [&](std::span<const int> idx, bool augment) {
    std::vector<int> y;
    for (int i : idx) y.push_back(labels[static_cast<std::size_t>(i)]);
    Tensor x = gather_images(pixels, ppi, idx);
    if (augment) x = color_jitter(x, ppi, config.color_jitter, aug_rng);
    auto out = student.forward(x, static_cast<int>(idx.size()));
    switch (config.mode) {
      case Mode::vanilla_kd:
        return nn::add(loss_vanilla_kd(out.logits, gather_rows(kd_logits, idx), config.kd_temperature),
                       cross_entropy(out.logits, y));
      case Mode::image_only:
        return nn::scale(loss_image_align(out.embedding, nn::constant(gather_rows(teacher_emb, idx))),
                         config.lambda_image);
      case Mode::text_aligned:
        return nn::scale(loss_text_align(out.embedding, y, text_store->matrix), config.lambda_text);
      case Mode::dual:
        break;
    }
    return nn::add(
        nn::scale(loss_image_align(out.embedding, nn::constant(gather_rows(teacher_emb, idx))), config.lambda_image),
        nn::scale(loss_text_align(out.embedding, y, text_store->matrix), config.lambda_text));
  };
  auto full_loss = [&] {
    double total = 0.0;
    std::vector<int> idx;
    for (int start = 0; start < n; start += 64) {
      idx.resize(static_cast<std::size_t>(std::min(64, n - start)));
      std::iota(idx.begin(), idx.end(), start);
      total += batch_loss(idx, false).item() * static_cast<double>(idx.size());
    }
    return total / n;
  };

  result.initial_loss = full_loss();
  nn::Adam opt(student.params().vars(), config.learning_rate);
  std::mt19937_64 rng(derive_seed(config.seed, "student-order"));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += config.batch_size) {
      const int len = std::min(config.batch_size, n - start);
      std::span<const int> idx(order.data() + start, static_cast<std::size_t>(len));
      opt.zero_grad();
      Var loss = batch_loss(idx, true);
      if (!std::isfinite(loss.item()))
        throw NumericalError("student loss is not finite at epoch " + std::to_string(epoch));
      loss.backward();
      opt.step();
      sum += loss.item();
      ++batches;
    }
    result.epoch_losses.push_back(sum / batches);
  }
  result.final_loss = config.epochs == 0 ? result.initial_loss : full_loss();

  if (teacher.hash() != teacher_hash) throw ProvenanceError("teacher parameters changed during distillation");
  if (text_store && text_store->digest() != store_digest) throw ProvenanceError("store changed during distillation");
  return result;
}

Tensor embed_images(const StudentModel& student, const std::vector<Image>& images, int chunk) {
  Tensor out(static_cast<int>(images.size()), student.config().embed_dim);
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(chunk));
    std::vector<const Image*> part;
    for (std::size_t i = start; i < end; ++i) part.push_back(&images[i]);
    const Tensor e = student.forward(data::to_tensor(part), static_cast<int>(part.size())).embedding.value();
    std::ranges::copy(e.data, out.data.begin() + static_cast<std::ptrdiff_t>(start * static_cast<std::size_t>(out.cols)));
  }
  return out;
}

std::vector<int> predict(const StudentModel& student, const store::EmbeddingStore& store,
                         const std::vector<Image>& images) {
  if (store.dim() != student.config().embed_dim)
    throw ShapeError("store dim " + std::to_string(store.dim()) + " vs student projection dim " +
                     std::to_string(student.config().embed_dim));
  return teacher::nearest_class(embed_images(student, images), store.matrix);
}

std::vector<int> predict_head(const StudentModel& student, const std::vector<Image>& images) {
  if (student.config().num_classes < 1) throw ValidationError("student", "model has no classification head");
  std::vector<int> out;
  for (std::size_t start = 0; start < images.size(); start += 64) {
    const std::size_t end = std::min(images.size(), start + 64);
    std::vector<const Image*> part;
    for (std::size_t i = start; i < end; ++i) part.push_back(&images[i]);
    const Tensor z = student.forward(data::to_tensor(part), static_cast<int>(part.size())).logits.value();
    for (int r = 0; r < z.rows; ++r) {
      auto row = z.row(r);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

std::vector<int> zero_shot_predict(const teacher::VisionLanguageModel& teacher, const store::EmbeddingStore& store,
                                   const std::vector<Image>& images) {
  if (store.dim() != teacher.embed_dim())
    throw ShapeError("store dim " + std::to_string(store.dim()) + " vs teacher dim " + std::to_string(teacher.embed_dim()));
  return teacher::nearest_class(teacher.encode_images(images), store.matrix);
}

void save_student(const StudentModel& student, const std::filesystem::path& path, const json& meta) {
  json header = meta.is_object() ? meta : json::object();
  header["kind"] = "student";
  header["student"] = student.config().to_json();
  header["init_seed"] = student.init_seed();
  header["params_hash"] = student.hash();
  write_checkpoint(path, header, student.params());
}

StudentModel load_student(const std::filesystem::path& path, json* header) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", "") != "student") throw CheckpointError("kind: expected student in " + path.string());
  if (!ck.header.contains("student")) throw CheckpointError("student: missing config in " + path.string());
  StudentModel m(StudentConfig::from_json(ck.header["student"]), ck.header.value("init_seed", std::uint64_t{0}));
  load_params(ck, m.params());
  if (header) *header = ck.header;
  return m;
}

}  // namespace dipt::distill
