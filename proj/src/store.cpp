#include "dipt/store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dipt/error.hpp"
#include "dipt/hash.hpp"

namespace dipt::store {

using nlohmann::json;

namespace {

bool valid_name(const std::string& name) {
  if (name == "agg_template" || name == "generic_prompt" || name == "invariant") return true;
  if (name.rfind("domain:", 0) != 0 || name.size() == 7) return false;
  return std::all_of(name.begin() + 7, name.end(), [](char c) { return c >= '0' && c <= '9'; });
}

json provenance_json(const Provenance& p) {
  return {{"teacher_hash", p.teacher_hash},
          {"config_hash", p.config_hash},
          {"source_domains", p.source_domains},
          {"inputs", p.inputs}};
}

}  // namespace

std::string domain_store_name(int domain) { return "domain:" + std::to_string(domain); }

void EmbeddingStore::validate() const {
  if (!valid_name(name)) throw ValidationError("name", "unknown store name '" + name + "'");
  if (class_names.empty()) throw ValidationError("class_names", "empty");
  if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size())
    throw ValidationError("class_names", "duplicate class name");
  if (matrix.rows != static_cast<int>(class_names.size()))
    throw ShapeError("store '" + name + "' has " + std::to_string(matrix.rows) + " rows for " +
                     std::to_string(class_names.size()) + " classes");
  if (matrix.cols < 1) throw ShapeError("store '" + name + "' has zero width");
  for (double v : matrix.data)
    if (!std::isfinite(v)) throw NumericalError("store '" + name + "' has a non-finite entry");
  if (provenance.teacher_hash.empty()) throw ValidationError("provenance.teacher_hash", "missing");
}

json EmbeddingStore::to_json() const {
  json emb = json::object();
  for (int i = 0; i < matrix.rows; ++i) {
    auto r = matrix.row(i);
    emb[class_names[static_cast<std::size_t>(i)]] = std::vector<double>(r.begin(), r.end());
  }
  return {{"format_version", kStoreFormatVersion},
          {"name", name},
          {"dim", dim()},
          {"class_names", class_names},
          {"embeddings", emb},
          {"provenance", provenance_json(provenance)}};
}

std::string EmbeddingStore::digest() const { return sha256_hex(to_json().dump()); }

EmbeddingStore make_store(std::string name, const prompts::AggregatedEmbeddings& emb, Provenance provenance) {
  EmbeddingStore s{std::move(name), emb.class_names, emb.rows, std::move(provenance)};
  s.validate();
  return s;
}

EmbeddingStore make_domain_store(const stage1::DomainClassEmbeddings& emb, std::vector<std::string> class_names,
                                 std::string teacher_hash, std::string config_hash, std::vector<std::string> inputs) {
  EmbeddingStore s{domain_store_name(emb.domain_id), std::move(class_names), emb.rows,
                   Provenance{std::move(teacher_hash), std::move(config_hash), {emb.domain_id}, std::move(inputs)}};
  s.validate();
  return s;
}

EmbeddingStore aggregate_class_embeddings(const std::vector<EmbeddingStore>& domain_stores) {
  if (domain_stores.empty()) throw AggregationError("no domain embeddings to aggregate");
  std::vector<const EmbeddingStore*> sorted;
  for (const auto& s : domain_stores) sorted.push_back(&s);
  std::ranges::sort(sorted, [](const auto* a, const auto* b) { return a->provenance.source_domains < b->provenance.source_domains; });

  const EmbeddingStore& ref = *sorted.front();
  std::set<int> domains;
  std::vector<std::string> inputs, config_hashes;
  for (const auto* s : sorted) {
    if (s->class_names != ref.class_names)
      throw AggregationError("class mismatch between '" + ref.name + "' and '" + s->name + "'");
    if (s->dim() != ref.dim())
      throw AggregationError("dim mismatch between '" + ref.name + "' (" + std::to_string(ref.dim()) + ") and '" +
                             s->name + "' (" + std::to_string(s->dim()) + ")");
    if (s->provenance.teacher_hash != ref.provenance.teacher_hash)
      throw AggregationError("teacher hash mismatch between '" + ref.name + "' and '" + s->name + "'");
    for (int d : s->provenance.source_domains) {
      if (!domains.insert(d).second) throw AggregationError("domain " + std::to_string(d) + " appears twice");
    }
    inputs.push_back(s->digest());
    config_hashes.push_back(s->provenance.config_hash);
  }

  nn::Tensor mean(ref.matrix.rows, ref.matrix.cols);
  for (const auto* s : sorted)
    for (std::size_t i = 0; i < mean.data.size(); ++i) mean.data[i] += s->matrix.data[i];
  for (double& v : mean.data) v /= static_cast<double>(sorted.size());

  json cfg = config_hashes;
  EmbeddingStore out{"invariant", ref.class_names, std::move(mean),
                     Provenance{ref.provenance.teacher_hash, sha256_hex(cfg.dump()),
                                std::vector<int>(domains.begin(), domains.end()), std::move(inputs)}};
  out.validate();
  return out;
}

void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  store.validate();
  json doc = store.to_json();
  doc["digest"] = store.digest();
  const std::string text = doc.dump(2) + "\n";
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream existing;
    existing << in.rdbuf();
    if (existing.str() == text) return;
    throw ProvenanceError("store already exists with different content: " + path.string());
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write store: " + path.string());
  out << text;
  if (!out) throw IoError("failed writing store: " + path.string());
}

EmbeddingStore load_store(const std::filesystem::path& path, const LoadExpectation& expect,
                          std::vector<std::string>* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open store: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("store " + path.string() + " is not valid JSON: " + e.what());
  }
  auto require = [&](const char* key) -> const json& {
    if (!doc.contains(key)) throw SchemaError(std::string("store field '") + key + "' missing in " + path.string());
    return doc.at(key);
  };
  if (require("format_version") != kStoreFormatVersion)
    throw SchemaError("store format_version " + doc["format_version"].dump() + " unsupported");

  EmbeddingStore s;
  try {
    s.name = require("name").get<std::string>();
    s.class_names = require("class_names").get<std::vector<std::string>>();
    const int dim = require("dim").get<int>();
    const json& emb = require("embeddings");
    s.matrix = nn::Tensor(static_cast<int>(s.class_names.size()), dim);
    for (std::size_t i = 0; i < s.class_names.size(); ++i) {
      if (!emb.contains(s.class_names[i]))
        throw SchemaError("store has no embedding for class '" + s.class_names[i] + "'");
      const auto row = emb.at(s.class_names[i]).get<std::vector<double>>();
      if (static_cast<int>(row.size()) != dim)
        throw SchemaError("embedding for '" + s.class_names[i] + "' has " + std::to_string(row.size()) +
                          " values, expected " + std::to_string(dim));
      std::ranges::copy(row, s.matrix.row(static_cast<int>(i)).begin());
    }
    if (emb.size() != s.class_names.size()) throw SchemaError("store has embeddings for unlisted classes");
    const json& p = require("provenance");
    s.provenance.teacher_hash = p.value("teacher_hash", "");
    s.provenance.config_hash = p.value("config_hash", "");
    s.provenance.source_domains = p.value("source_domains", std::vector<int>{});
    s.provenance.inputs = p.value("inputs", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw SchemaError("store " + path.string() + " has a malformed field: " + e.what());
  }
  s.validate();

  std::vector<std::string> local;
  const std::string recorded = doc.value("digest", "");
  if (recorded.empty()) local.push_back("store " + path.string() + " has no digest");
  else if (recorded != s.digest())
    local.push_back("store " + path.string() + " digest mismatch: content or provenance was modified");

  if (expect.class_names && *expect.class_names != s.class_names) {
    std::vector<std::string> a = *expect.class_names, b = s.class_names;
    std::ranges::sort(a);
    std::ranges::sort(b);
    throw CompatibilityError(a == b ? "store class order differs from the requested order"
                                    : "store classes differ from the requested classes");
  }
  if (expect.dim && *expect.dim != s.dim())
    throw CompatibilityError("store dim " + std::to_string(s.dim()) + " vs expected " + std::to_string(*expect.dim));
  if (expect.teacher_hash && *expect.teacher_hash != s.provenance.teacher_hash)
    local.push_back("store " + path.string() + " was built from a different teacher");

  if (warnings) warnings->insert(warnings->end(), local.begin(), local.end());
  return s;
}

}  // namespace dipt::store
