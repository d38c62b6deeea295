#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "dipt/error.hpp"
#include "dipt/prompts.hpp"
#include "test_util.hpp"

using namespace dipt;
using namespace dipt::prompts;

namespace {

// Returns a fixed unit vector per decoded prompt string.
class StubModel final : public teacher::VisionLanguageModel {
 public:
  StubModel(teacher::Tokenizer tok, int dim) : tok_(std::move(tok)), dim_(dim) {}

  std::map<std::string, std::vector<double>> table;

  const teacher::Tokenizer& tokenizer() const override { return tok_; }
  int token_dim() const override { return dim_; }
  int embed_dim() const override { return dim_; }
  int image_size() const override { return 8; }
  nn::Var encode_text_batch(const std::vector<teacher::TokenSequence>& seqs) const override {
    nn::Tensor out(static_cast<int>(seqs.size()), dim_);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto& v = table.at(tok_.decode(seqs[i]));
      std::copy(v.begin(), v.end(), out.row(static_cast<int>(i)).begin());
    }
    return nn::constant(out);
  }
  nn::Var encode_text_batch(const std::vector<nn::Var>&) const override { throw Error("unused"); }
  nn::Var encode_image_batch(const nn::Tensor&, int) const override { throw Error("unused"); }
  nn::Tensor embed_lookup(const teacher::TokenSequence&) const override { throw Error("unused"); }
  std::string hash() const override { return "stub"; }

 private:
  teacher::Tokenizer tok_;
  int dim_;
};

std::vector<double> random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  double s = 0.0;
  for (double& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

PromptTemplateBank bank_with(const std::vector<std::string>& names, int m) {
  PromptTemplateBank b;
  b.class_names = names;
  for (const auto& n : names) {
    for (int i = 0; i < m; ++i) b.templates[n].push_back("prompt " + std::to_string(i) + " " + n);
  }
  return b;
}

}  // namespace

TEST_CASE("default bank renders class names into every template") {
  auto bank = default_bank({"normal lymph node", "lymph node metastasis"});
  CHECK(bank.templates_per_class() == 8);
  CHECK(bank.corpus().size() == 16);
  const auto& t = bank.for_class(0);
  CHECK(std::find(t.begin(), t.end(), "a patch of normal lymph node") != t.end());
  CHECK(bank.for_class(1)[0] == "a patch of lymph node metastasis");
  CHECK(default_bank({"x", "y", "z"}, 3).corpus().size() == 9);
  CHECK_THROWS_AS(default_bank({"x"}, 9), ValidationError);
  CHECK_THROWS_AS(default_bank({"x"}, 0), ValidationError);
}

TEST_CASE("bank validation") {
  auto dup = default_bank({"a", "b"});
  dup.class_names = {"a", "a"};
  CHECK_THROWS_AS(dup.validate(), ValidationError);

  auto uneven = bank_with({"a", "b"}, 3);
  uneven.templates["b"].pop_back();
  CHECK_THROWS_AS(uneven.validate(), ValidationError);

  auto missing = bank_with({"a", "b"}, 2);
  missing.templates.erase("b");
  CHECK_THROWS_AS(missing.validate(), ValidationError);

  auto tok = teacher::Tokenizer::build({"word"}, 4);
  auto long_bank = bank_with({"a"}, 1);
  long_bank.templates["a"][0] = "one two three four five";
  CHECK_THROWS_AS(long_bank.validate(&tok), LengthError);
}

TEST_CASE("bank save and load round trip") {
  auto dir = testing::scratch_dir("bank_io");
  auto bank = default_bank({"normal lymph node", "lymph node metastasis"}, 5);
  save_bank(bank, dir / "bank.json");
  auto loaded = load_bank(dir / "bank.json");
  CHECK(loaded.class_names == bank.class_names);
  CHECK(loaded.templates == bank.templates);
  CHECK_THROWS(load_bank(dir / "missing.json"));
}

TEST_CASE("single template aggregation is the template encoding") {
  auto bank = bank_with({"a", "b"}, 1);
  StubModel m(teacher::Tokenizer::build(bank.corpus()), 4);
  m.table["prompt 0 a"] = {1, 0, 0, 0};
  m.table["prompt 0 b"] = {0, 0.6, 0.8, 0};
  auto agg = compute_aggregated_embeddings(m, bank);
  CHECK(agg.class_names == bank.class_names);
  CHECK(std::vector<double>(agg.rows.row(0).begin(), agg.rows.row(0).end()) == std::vector<double>{1, 0, 0, 0});
  CHECK(std::vector<double>(agg.rows.row(1).begin(), agg.rows.row(1).end()) == std::vector<double>{0, 0.6, 0.8, 0});
}

TEST_CASE("two orthogonal templates average without renormalising") {
  auto bank = bank_with({"a"}, 2);
  StubModel m(teacher::Tokenizer::build(bank.corpus()), 2);
  m.table["prompt 0 a"] = {1, 0};
  m.table["prompt 1 a"] = {0, 1};
  auto agg = compute_aggregated_embeddings(m, bank);
  CHECK(agg.rows(0, 0) == doctest::Approx(0.5));
  CHECK(agg.rows(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("aggregation matches an explicit mean, is order invariant, and has norm at most one") {
  std::mt19937_64 rng(11);
  const int dim = 7, m_count = 5;
  auto bank = bank_with({"a", "b", "c"}, m_count);
  StubModel m(teacher::Tokenizer::build(bank.corpus()), dim);
  for (const auto& [_, ts] : bank.templates)
    for (const auto& t : ts) m.table[t] = random_unit(dim, rng);

  auto agg = compute_aggregated_embeddings(m, bank);
  for (int c = 0; c < 3; ++c) {
    double sq = 0.0;
    for (int j = 0; j < dim; ++j) {
      double expect = 0.0;
      for (const auto& t : bank.for_class(c)) expect += m.table[t][static_cast<std::size_t>(j)];
      expect /= m_count;
      CHECK(std::abs(agg.rows(c, j) - expect) <= 1e-7);
      sq += agg.rows(c, j) * agg.rows(c, j);
    }
    CHECK(std::sqrt(sq) <= 1.0 + 1e-12);
  }

  auto shuffled = bank;
  for (auto& [_, ts] : shuffled.templates) std::shuffle(ts.begin(), ts.end(), rng);
  auto agg2 = compute_aggregated_embeddings(m, shuffled);
  for (std::size_t i = 0; i < agg.rows.data.size(); ++i) CHECK(std::abs(agg.rows.data[i] - agg2.rows.data[i]) <= 1e-12);

  auto generic = compute_generic_prompt_embeddings(m, bank);
  for (int j = 0; j < dim; ++j) CHECK(generic.rows(1, j) == m.table[bank.for_class(1)[0]][static_cast<std::size_t>(j)]);
}

TEST_CASE("aggregation with the real teacher rejects over-long templates") {
  teacher::TeacherConfig c;
  c.dim = 8;
  c.heads = 2;
  c.mlp_dim = 16;
  c.image_size = 16;
  c.conv_channels = {4};
  auto bank = bank_with({"a"}, 1);
  bank.templates["a"][0] = "a b c d e f g h i j k l m n o p q";
  teacher::TeacherModel model(c, teacher::Tokenizer::build(bank.corpus()), 1);
  CHECK_THROWS_AS(compute_aggregated_embeddings(model, bank), LengthError);
  bank.templates["a"][0] = "a b c";
  auto agg = compute_aggregated_embeddings(model, bank);
  CHECK(agg.rows.rows == 1);
  CHECK(agg.rows.cols == 8);
}
