#pragma once

// Named class-embedding matrices with provenance, persisted as JSON:
//
//   {"format_version": 1, "name": ..., "dim": d, "class_names": [...],
//    "embeddings": {class name: [floats]}, "provenance": {...}, "digest": ...}
//
// Names: "agg_template", "generic_prompt", "domain:{d}", "invariant".
// Floats are written with round-trip precision. `digest` is the SHA-256 of
// the document without the digest field.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/autograd.hpp"
#include "dipt/prompts.hpp"
#include "dipt/stage1.hpp"

namespace dipt::store {

inline constexpr int kStoreFormatVersion = 1;

struct Provenance {
  std::string teacher_hash;
  std::string config_hash;
  std::vector<int> source_domains;  // sorted
  std::vector<std::string> inputs;  // digests of upstream artefacts

  bool operator==(const Provenance&) const = default;
};

struct EmbeddingStore {
  std::string name;
  std::vector<std::string> class_names;
  nn::Tensor matrix;  // [N_c, dim]
  Provenance provenance;

  int dim() const { return matrix.cols; }
  void validate() const;
  nlohmann::json to_json() const;  // without digest
  std::string digest() const;
};

std::string domain_store_name(int domain);

EmbeddingStore make_store(std::string name, const prompts::AggregatedEmbeddings& emb, Provenance provenance);
EmbeddingStore make_domain_store(const stage1::DomainClassEmbeddings& emb, std::vector<std::string> class_names,
                                 std::string teacher_hash, std::string config_hash,
                                 std::vector<std::string> inputs = {});

// Per-class arithmetic mean over the domain stores, no renormalisation.
// Inputs must agree on classes (same order), dim and teacher hash, and come
// from distinct domains; the result is independent of input order.
EmbeddingStore aggregate_class_embeddings(const std::vector<EmbeddingStore>& domain_stores);

// Write-once: writing over an existing file with different bytes raises
// ProvenanceError; identical bytes are a no-op.
void save_store(const EmbeddingStore& store, const std::filesystem::path& path);

struct LoadExpectation {
  std::optional<std::vector<std::string>> class_names;  // must match exactly, order included
  std::optional<int> dim;
  std::optional<std::string> teacher_hash;
};

// Digest or provenance problems are reported through `warnings`; shape,
// class or dim disagreements with `expect` raise CompatibilityError.
EmbeddingStore load_store(const std::filesystem::path& path, const LoadExpectation& expect = {},
                          std::vector<std::string>* warnings = nullptr);

}  // namespace dipt::store
