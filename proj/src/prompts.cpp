#include "dipt/prompts.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "dipt/error.hpp"

namespace dipt::prompts {

using nlohmann::json;

int PromptTemplateBank::templates_per_class() const {
  return class_names.empty() ? 0 : static_cast<int>(for_class(0).size());
}

const std::vector<std::string>& PromptTemplateBank::for_class(int class_id) const {
  if (class_id < 0 || class_id >= num_classes()) throw ShapeError("class id out of range");
  auto it = templates.find(class_names[static_cast<std::size_t>(class_id)]);
  if (it == templates.end()) throw ValidationError("templates", "no templates for " + class_names[static_cast<std::size_t>(class_id)]);
  return it->second;
}

void PromptTemplateBank::validate(const teacher::Tokenizer* tokenizer) const {
  if (class_names.empty()) throw ValidationError("class_names", "must be nonempty");
  std::set<std::string> seen;
  for (const auto& c : class_names) {
    if (!seen.insert(c).second) throw ValidationError("class_names", "duplicate class '" + c + "'");
  }
  const std::size_t m = for_class(0).size();
  if (m == 0) throw ValidationError("templates", "each class needs at least one template");
  for (int i = 0; i < num_classes(); ++i) {
    const auto& ts = for_class(i);
    if (ts.size() != m) throw ValidationError("templates", "classes have different template counts");
    for (const auto& t : ts) {
      if (t.empty()) throw ValidationError("templates", "empty template for " + class_names[static_cast<std::size_t>(i)]);
      if (tokenizer && !tokenizer->fits(t)) throw LengthError("template exceeds max_length: '" + t + "'");
    }
  }
}

std::vector<std::string> PromptTemplateBank::corpus() const {
  std::vector<std::string> out;
  for (int i = 0; i < num_classes(); ++i) {
    for (const auto& t : for_class(i)) out.push_back(t);
  }
  return out;
}

const std::vector<std::string>& default_templates() {
  static const std::vector<std::string> kTemplates{
      "a patch of {}",
      "an image of {} tissue",
      "a histopathology image of {}",
      "a tissue patch showing {}",
      "a microscopy slide of {}",
      "a stained patch of {}",
      "a close up patch of {} tissue",
      "pathology image showing {}",
  };
  return kTemplates;
}

PromptTemplateBank default_bank(const std::vector<std::string>& class_names, int templates_per_class) {
  const auto& all = default_templates();
  if (templates_per_class < 1 || templates_per_class > static_cast<int>(all.size())) {
    throw ValidationError("templates_per_class", "must lie in [1, " + std::to_string(all.size()) + "]");
  }
  PromptTemplateBank bank;
  bank.class_names = class_names;
  for (const auto& name : class_names) {
    auto& list = bank.templates[name];
    for (int m = 0; m < templates_per_class; ++m) list.push_back(teacher::render_template(all[static_cast<std::size_t>(m)], name));
  }
  bank.validate();
  return bank;
}

void save_bank(const PromptTemplateBank& bank, const std::filesystem::path& path) {
  json t = json::object();
  for (const auto& [k, v] : bank.templates) t[k] = v;
  json j{{"class_names", bank.class_names}, {"templates", t}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

PromptTemplateBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  json j = json::parse(in);
  PromptTemplateBank bank;
  bank.class_names = j.at("class_names").get<std::vector<std::string>>();
  for (auto& [k, v] : j.at("templates").items()) bank.templates[k] = v.get<std::vector<std::string>>();
  bank.validate();
  return bank;
}

namespace {

// Encodes the selected templates of every class and averages per class.
AggregatedEmbeddings mean_of_encodings(const teacher::VisionLanguageModel& teacher, const PromptTemplateBank& bank,
                                       int per_class) {
  bank.validate();
  for (int i = 0; i < bank.num_classes(); ++i) {
    for (int m = 0; m < per_class; ++m) {
      const auto& t = bank.for_class(i)[static_cast<std::size_t>(m)];
      if (!teacher.tokenizer().fits(t)) throw LengthError("template exceeds max_length: '" + t + "'");
    }
  }
  AggregatedEmbeddings out;
  out.class_names = bank.class_names;
  out.rows = nn::Tensor(bank.num_classes(), teacher.embed_dim());
  for (int i = 0; i < bank.num_classes(); ++i) {
    std::vector<teacher::TokenSequence> seqs;
    for (int m = 0; m < per_class; ++m) seqs.push_back(teacher.tokenize(bank.for_class(i)[static_cast<std::size_t>(m)]));
    const nn::Tensor enc = teacher.encode_text_batch(seqs).value();
    auto dst = out.rows.row(i);
    for (int m = 0; m < per_class; ++m) {
      auto src = enc.row(m);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    for (double& v : dst) v /= per_class;
  }
  return out;
}

}  // namespace

AggregatedEmbeddings compute_aggregated_embeddings(const teacher::VisionLanguageModel& teacher,
                                                   const PromptTemplateBank& bank) {
  return mean_of_encodings(teacher, bank, bank.templates_per_class());
}

AggregatedEmbeddings compute_generic_prompt_embeddings(const teacher::VisionLanguageModel& teacher,
                                                       const PromptTemplateBank& bank) {
  return mean_of_encodings(teacher, bank, 1);
}

}  // namespace dipt::prompts
