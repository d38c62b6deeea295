#include "dipt/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dipt/checkpoint.hpp"
#include "dipt/error.hpp"
#include "dipt/hash.hpp"
#include "dipt/layers.hpp"

namespace dipt::stage1 {

using nn::Tensor;
using nn::Var;
using nlohmann::json;

void Stage1Config::validate() const {
  if (k < 1) throw ValidationError("stage1.k", "must be >= 1 (k = 0 leaves only the class-generic token)");
  if (!(learning_rate > 0.0)) throw ValidationError("stage1.learning_rate", "must be > 0");
  if (!(temperature > 0.0)) throw ValidationError("stage1.temperature", "must be > 0");
  if (steps < 0) throw ValidationError("stage1.steps", "must be >= 0");
  if (batch_size < 1) throw ValidationError("stage1.batch_size", "must be >= 1");
  if (!(init_std >= 0.0)) throw ValidationError("stage1.init_std", "must be >= 0");
  for (int v : sweep_k)
    if (v < 1) throw ValidationError("stage1.sweep_k", "entries must be >= 1");
  for (double v : sweep_learning_rates)
    if (!(v > 0.0)) throw ValidationError("stage1.sweep_learning_rates", "entries must be > 0");
}

json Stage1Config::to_json() const {
  return {{"k", k},
          {"learning_rate", learning_rate},
          {"temperature", temperature},
          {"steps", steps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"init_std", init_std},
          {"sweep_k", sweep_k},
          {"sweep_learning_rates", sweep_learning_rates}};
}

Stage1Config Stage1Config::from_json(const json& j) {
  Stage1Config c;
  c.k = j.value("k", c.k);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.temperature = j.value("temperature", c.temperature);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  c.sweep_k = j.value("sweep_k", c.sweep_k);
  c.sweep_learning_rates = j.value("sweep_learning_rates", c.sweep_learning_rates);
  c.validate();
  return c;
}

std::string Stage1Config::hash() const {
  json j = to_json();
  j.erase("sweep_k");
  j.erase("sweep_learning_rates");
  return sha256_hex(j.dump());
}

DomainTokens init_domain_tokens(int domain_id, int k, int d_t, std::uint64_t seed, double init_std) {
  if (k < 1) throw ValidationError("k", "must be >= 1 (k = 0 leaves only the class-generic token)");
  if (d_t < 1) throw ValidationError("d_t", "must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, "stage1-init", static_cast<std::uint64_t>(domain_id),
                                  static_cast<std::uint64_t>(k)));
  return DomainTokens{domain_id, nn::gaussian(k, d_t, init_std, rng)};
}

Var build_prompt(const Var& tokens, int class_id, const prompts::AggregatedEmbeddings& agg) {
  if (class_id < 0 || class_id >= agg.rows.rows)
    throw ValidationError("class_id", "out of range: " + std::to_string(class_id));
  if (tokens.value().cols != agg.rows.cols)
    throw ShapeError("prompt tokens width " + std::to_string(tokens.value().cols) + " vs class embedding width " +
                     std::to_string(agg.rows.cols));
  Tensor row(1, agg.rows.cols);
  std::ranges::copy(agg.rows.row(class_id), row.data.begin());
  return nn::concat_rows({tokens, nn::constant(std::move(row))});
}

Tensor build_prompt(const DomainTokens& tokens, int class_id, const prompts::AggregatedEmbeddings& agg) {
  return build_prompt(nn::constant(tokens.tokens), class_id, agg).value();
}

Var class_embeddings(const teacher::VisionLanguageModel& teacher, const Var& tokens,
                     const prompts::AggregatedEmbeddings& agg) {
  if (tokens.value().cols != teacher.token_dim())
    throw ShapeError("prompt tokens width " + std::to_string(tokens.value().cols) + " vs teacher token dim " +
                     std::to_string(teacher.token_dim()));
  std::vector<Var> prompts;
  for (int i = 0; i < agg.rows.rows; ++i) prompts.push_back(build_prompt(tokens, i, agg));
  return teacher.encode_text_batch(prompts);
}

DomainClassEmbeddings domain_class_embeddings(const teacher::VisionLanguageModel& teacher, const DomainTokens& tokens,
                                              const prompts::AggregatedEmbeddings& agg) {
  return {tokens.domain_id, class_embeddings(teacher, nn::constant(tokens.tokens), agg).value()};
}

Var loss_ds(const Var& image_embeddings, const Var& class_embeddings, std::span<const int> labels,
            double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature", "must be > 0");
  const int n = image_embeddings.value().rows;
  if (n == 0) throw ValidationError("batch", "empty batch");
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("labels " + std::to_string(labels.size()) + " vs batch " + std::to_string(n));
  const int nc = class_embeddings.value().rows;
  for (int y : labels)
    if (y < 0 || y >= nc) throw ValidationError("labels", "label out of range: " + std::to_string(y));
  Var logits = nn::scale(nn::matmul_nt(nn::l2_normalize_rows(image_embeddings), nn::l2_normalize_rows(class_embeddings)),
                         1.0 / temperature);
  return nn::scale(nn::mean(nn::pick(nn::log_softmax_rows(logits), labels)), -1.0);
}

double loss_ds(const Tensor& image_embeddings, const Tensor& class_embeddings, std::span<const int> labels,
               double temperature) {
  return loss_ds(nn::constant(image_embeddings), nn::constant(class_embeddings), labels, temperature).item();
}

Var loss_g(const Var& class_embeddings, const Tensor& aggregated) {
  const Tensor& e = class_embeddings.value();
  if (e.rows != aggregated.rows || e.cols != aggregated.cols)
    throw ShapeError("loss_g: embeddings " + e.shape_str() + " vs aggregated " + aggregated.shape_str());
  Var cos = nn::row_dot(nn::l2_normalize_rows(class_embeddings), nn::l2_normalize_rows(nn::constant(aggregated)));
  return nn::add_scalar(nn::scale(nn::mean(cos), -1.0), 1.0);
}

double loss_g(const Tensor& class_embeddings, const Tensor& aggregated) {
  return loss_g(nn::constant(class_embeddings), aggregated).item();
}

namespace {

Tensor gather(const Tensor& t, std::span<const int> idx) {
  Tensor out(static_cast<int>(idx.size()), t.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) std::ranges::copy(t.row(idx[i]), out.row(static_cast<int>(i)).begin());
  return out;
}

}  // namespace

Stage1Result train_domain_prompts(const data::DomainDataset& domain_data, const teacher::VisionLanguageModel& teacher,
                                  const prompts::AggregatedEmbeddings& agg, const Stage1Config& config,
                                  const data::ImageLoader& loader) {
  config.validate();
  if (domain_data.records.empty()) throw ValidationError("domain_data", "no records");
  const int domain = domain_data.records.front().domain_id;
  for (const auto& r : domain_data.records) {
    if (r.domain_id != domain)
      throw ValidationError("domain_data", "prompt tuning takes one domain at a time; found domains " +
                                               std::to_string(domain) + " and " + std::to_string(r.domain_id));
  }
  if (agg.rows.rows != domain_data.num_classes())
    throw ShapeError("aggregated embeddings have " + std::to_string(agg.rows.rows) + " classes, dataset has " +
                     std::to_string(domain_data.num_classes()));
  const std::string teacher_hash = teacher.hash();
  const Tensor agg_before = agg.rows;

  const auto images = data::load_images(domain_data, loader, {data::Stage::tune, -1, domain});
  const Tensor image_emb = teacher.encode_images(images);
  std::vector<int> labels;
  for (const auto& r : domain_data.records) labels.push_back(r.class_id);

  Stage1Result result;
  DomainTokens init = init_domain_tokens(domain, config.k, teacher.token_dim(), config.seed, config.init_std);
  Var tokens = nn::parameter(init.tokens);

  auto full_loss = [&] {
    const Tensor e = class_embeddings(teacher, nn::constant(tokens.value()), agg).value();
    return loss_ds(image_emb, e, labels, config.temperature) + loss_g(e, agg.rows);
  };
  result.initial_loss = full_loss();

  const int n = static_cast<int>(labels.size());
  const int batch = std::min(config.batch_size, n);
  std::mt19937_64 rng(derive_seed(config.seed, "stage1-order", static_cast<std::uint64_t>(domain)));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  nn::Sgd opt({tokens}, config.learning_rate);

  for (int step = 0; step < config.steps; ++step) {
    std::vector<int> idx;
    while (static_cast<int>(idx.size()) < batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::vector<int> y;
    for (int i : idx) y.push_back(labels[static_cast<std::size_t>(i)]);
    opt.zero_grad();
    Var e = class_embeddings(teacher, tokens, agg);
    Var loss = nn::add(loss_ds(nn::constant(gather(image_emb, idx)), e, y, config.temperature), loss_g(e, agg.rows));
    result.step_losses.push_back(loss.item());
    if (!std::isfinite(loss.item())) throw NumericalError("stage-1 loss is not finite at step " + std::to_string(step));
    loss.backward();
    opt.step();
  }

  result.final_loss = full_loss();
  result.tokens = DomainTokens{domain, tokens.value()};
  result.embeddings = domain_class_embeddings(teacher, result.tokens, agg);

  if (teacher.hash() != teacher_hash) throw ProvenanceError("teacher parameters changed during prompt tuning");
  if (agg.rows.data != agg_before.data) throw ProvenanceError("aggregated embeddings changed during prompt tuning");
  return result;
}

ValidationScore validate_embeddings(const Tensor& class_rows, const Tensor& aggregated, const Tensor& image_embeddings,
                                    const std::vector<int>& labels, double temperature) {
  ValidationScore s;
  s.loss = loss_ds(image_embeddings, class_rows, labels, temperature) + loss_g(class_rows, aggregated);
  s.metrics = eval::compute_metrics(teacher::nearest_class(image_embeddings, class_rows), labels, class_rows.rows);
  return s;
}

void save_tokens(const DomainTokens& tokens, const std::filesystem::path& path, const json& meta) {
  json header = meta.is_object() ? meta : json::object();
  header["kind"] = "domain_tokens";
  header["domain_id"] = tokens.domain_id;
  header["k"] = tokens.k();
  header["d_t"] = tokens.tokens.cols;
  write_checkpoint(path, header, {{"tokens", &tokens.tokens}});
}

DomainTokens load_tokens(const std::filesystem::path& path, json* header) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", "") != "domain_tokens")
    throw CheckpointError("kind: expected domain_tokens in " + path.string());
  if (!ck.has("tokens")) throw CheckpointError("tensors: missing 'tokens' in " + path.string());
  DomainTokens t{ck.header.value("domain_id", -1), ck.tensor("tokens")};
  if (t.k() != ck.header.value("k", -1)) throw CheckpointError("k: header does not match tensor rows");
  if (header) *header = ck.header;
  return t;
}

}  // namespace dipt::stage1
