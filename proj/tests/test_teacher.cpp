#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "dipt/checkpoint.hpp"
#include "dipt/error.hpp"
#include "dipt/hash.hpp"
#include "dipt/prompts.hpp"
#include "dipt/teacher.hpp"
#include "test_util.hpp"

using namespace dipt;
using namespace dipt::teacher;

namespace {

Tokenizer small_tokenizer() {
  return Tokenizer::build({"a patch of normal lymph node", "lymph node metastasis", "an image of tissue"});
}

TeacherConfig tiny_config() {
  TeacherConfig c;
  c.dim = 16;
  c.heads = 4;
  c.mlp_dim = 32;
  c.image_size = 16;
  c.conv_channels = {4, 8};
  return c;
}

double norm(const Embedding& e) {
  double s = 0.0;
  for (double v : e) s += v * v;
  return std::sqrt(s);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

Image random_image(int size, std::mt19937_64& rng) {
  Image img(size, size);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  return img;
}

data::DatasetSpec probe_spec(std::uint64_t seed) {
  data::DatasetSpec s;
  s.num_domains = 3;
  s.samples_per_class_per_domain = 20;
  s.image_size = 16;
  s.seed = seed;
  return s;
}

Tokenizer corpus_tokenizer(const std::vector<std::string>& class_names) {
  auto corpus = prompts::default_bank(class_names).corpus();
  for (const auto& n : class_names) {
    for (const auto& t : caption_templates()) corpus.push_back(render_template(t, n));
  }
  return Tokenizer::build(corpus);
}

}  // namespace

TEST_CASE("tokenize the reference prompt") {
  Tokenizer tok = small_tokenizer();
  auto seq = tok.tokenize("a patch of normal lymph node");
  REQUIRE(seq.ids.size() == 16);
  CHECK(seq.ids[0] == Tokenizer::kBos);
  CHECK(seq.ids[7] == Tokenizer::kEos);
  for (int i = 1; i < 7; ++i) CHECK(seq.ids[i] >= Tokenizer::kFirstWord);
  for (int i = 8; i < 16; ++i) CHECK(seq.ids[i] == Tokenizer::kPad);
  CHECK(tok.decode(seq) == "a patch of normal lymph node");
  CHECK(seq.eos_position() == 7);
}

TEST_CASE("tokenize edge cases") {
  Tokenizer tok = small_tokenizer();
  auto empty = tok.tokenize("");
  CHECK(empty.ids[0] == Tokenizer::kBos);
  CHECK(empty.ids[1] == Tokenizer::kEos);
  CHECK(empty.ids[2] == Tokenizer::kPad);
  auto unk = tok.tokenize("zzzunseenword");
  CHECK(unk.ids[1] == Tokenizer::kUnk);
  CHECK(tok.decode(tok.tokenize("A PATCH, of Lymph")) == "a patch of lymph");
  std::string long_text;
  for (int i = 0; i < 30; ++i) long_text += "node ";
  auto trunc = tok.tokenize(long_text);
  CHECK(trunc.ids.size() == 16);
  CHECK(trunc.ids.back() == Tokenizer::kEos);
  CHECK_FALSE(tok.fits(long_text));
  CHECK(tok.tokenize("a patch") == tok.tokenize("a patch"));
}

TEST_CASE("special ids are distinct and below word ids") {
  std::set<int> s{Tokenizer::kPad, Tokenizer::kBos, Tokenizer::kEos, Tokenizer::kUnk};
  CHECK(s.size() == 4);
  CHECK(*s.rbegin() < Tokenizer::kFirstWord);
}

TEST_CASE("encoders produce unit-norm deterministic outputs") {
  TeacherModel m(tiny_config(), small_tokenizer(), 3);
  std::mt19937_64 rng(1);
  auto e1 = m.encode_text(m.tokenize("normal lymph node"));
  CHECK(norm(e1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(e1 == m.encode_text(m.tokenize("normal lymph node")));
  nn::Tensor cont = nn::gaussian(3, 16, 0.5, rng);
  auto e2 = m.encode_text(cont);
  CHECK(std::abs(norm(e2) - 1.0) <= 1e-6);
  CHECK(e2 == m.encode_text(cont));
  Image img = random_image(16, rng);
  auto e3 = m.encode_image(img);
  CHECK(std::abs(norm(e3) - 1.0) <= 1e-6);
  CHECK(e3 == m.encode_image(img));
}

TEST_CASE("discrete and continuous text paths agree") {
  TeacherModel m(tiny_config(), small_tokenizer(), 5);
  std::mt19937_64 rng(17);
  const auto& words = m.tokenizer().words();
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::string text;
    const int n = static_cast<int>(rng() % 14);
    for (int i = 0; i < n; ++i) text += words[rng() % words.size()] + " ";
    auto seq = m.tokenize(text);
    auto a = m.encode_text(seq);
    auto b = m.encode_text(m.embed_lookup(seq));
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("encoder shape and length errors") {
  TeacherModel m(tiny_config(), small_tokenizer(), 3);
  CHECK_THROWS_AS(m.encode_text(nn::Tensor(2, 8, 0.1)), ShapeError);
  CHECK_THROWS_AS(m.encode_text(nn::Tensor(15, 16, 0.1)), LengthError);
  CHECK_NOTHROW(m.encode_text(nn::Tensor(14, 16, 0.1)));
  CHECK_THROWS_AS(m.encode_image(Image(8, 8)), ShapeError);
  TokenSequence bad{{1, 2}};
  CHECK_THROWS_AS(m.encode_text(bad), LengthError);
}

TEST_CASE("gradients flow to continuous prompts without touching the teacher") {
  TeacherModel m(tiny_config(), small_tokenizer(), 3);
  const std::string before = m.hash();
  std::mt19937_64 rng(2);
  nn::Var prompt = nn::parameter(nn::gaussian(2, 16, 0.3, rng));
  nn::Var out = m.encode_text_batch(std::vector<nn::Var>{prompt});
  nn::sum(out).backward();
  double g = 0.0;
  for (double v : prompt.grad().data) g += std::abs(v);
  CHECK(g > 0.0);
  for (const auto& [_, p] : m.params().items()) CHECK_FALSE(p.requires_grad());
  CHECK(m.hash() == before);
}

TEST_CASE("checkpoint round trip is exact") {
  auto dir = testing::scratch_dir("teacher_ckpt");
  TeacherModel m(tiny_config(), small_tokenizer(), 9);
  save_checkpoint(m, dir / "t.ckpt");
  TeacherModel loaded = load_checkpoint(dir / "t.ckpt");
  CHECK(loaded.hash() == m.hash());
  std::mt19937_64 rng(3);
  Image img = random_image(16, rng);
  auto a = m.encode_image(img);
  auto b = loaded.encode_image(img);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-7);
  auto ta = m.encode_text(m.tokenize("lymph node"));
  auto tb = loaded.encode_text(loaded.tokenize("lymph node"));
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(std::abs(ta[i] - tb[i]) <= 1e-7);

  auto ck = read_checkpoint(dir / "t.ckpt");
  CHECK(ck.header["d_t"] == 16);
  CHECK(ck.header["d_e"] == 16);
  CHECK(ck.header["vocab_hash"] == m.tokenizer().vocab_hash());
  CHECK(ck.header.contains("arch"));
}

TEST_CASE("checkpoint error paths") {
  auto dir = testing::scratch_dir("teacher_ckpt_err");
  TeacherModel m(tiny_config(), small_tokenizer(), 9);
  save_checkpoint(m, dir / "t.ckpt");
  const std::string bytes = testing::read_file(dir / "t.ckpt");

  std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), CheckpointError);
  std::ofstream(dir / "tiny.ckpt", std::ios::binary) << bytes.substr(0, 5);
  CHECK_THROWS_AS(load_checkpoint(dir / "tiny.ckpt"), CheckpointError);

  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  std::ofstream(dir / "flip.ckpt", std::ios::binary) << flipped;
  CHECK_THROWS_AS(load_checkpoint(dir / "flip.ckpt"), CheckpointError);

  std::string versioned = bytes;
  auto pos = versioned.find("\"format_version\":1");
  REQUIRE(pos != std::string::npos);
  versioned[pos + 17] = '7';
  std::ofstream(dir / "ver.ckpt", std::ios::binary) << versioned;
  try {
    load_checkpoint(dir / "ver.ckpt");
    FAIL("expected checkpoint error");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("format_version") != std::string::npos);
  }

  Tokenizer other = Tokenizer::build({"completely different words"});
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt", &other), CompatibilityError);
  Tokenizer same = small_tokenizer();
  CHECK_NOTHROW(load_checkpoint(dir / "t.ckpt", &same));
}

TEST_CASE("pretraining with zero epochs returns the seeded initialisation") {
  auto dir = testing::scratch_dir("pretrain0");
  auto ds = data::generate_dataset(probe_spec(1), dir);
  auto tok = corpus_tokenizer(ds.class_names);
  PretrainConfig pc;
  pc.epochs = 0;
  pc.seed = 42;
  auto m = pretrain_teacher(ds, tok, tiny_config(), pc);
  TeacherModel init(tiny_config(), tok, derive_seed(42, "teacher-init"));
  CHECK(m.hash() == init.hash());
}

TEST_CASE("pretraining rejects an empty dataset") {
  data::DomainDataset empty;
  empty.class_names = {"a", "b"};
  CHECK_THROWS_AS(pretrain_teacher(empty, small_tokenizer(), tiny_config(), PretrainConfig{}), ValidationError);
}

TEST_CASE("pretraining is deterministic and aligns images with captions") {
  auto dir = testing::scratch_dir("pretrain_probe");
  auto ds = data::generate_dataset(probe_spec(3), dir);
  auto tok = corpus_tokenizer(ds.class_names);
  PretrainConfig pc;
  pc.epochs = 6;
  pc.batch_size = 16;
  pc.seed = 5;
  auto a = pretrain_teacher(ds, tok, tiny_config(), pc);
  auto b = pretrain_teacher(ds, tok, tiny_config(), pc);
  CHECK(a.hash() == b.hash());

  pc.epochs = 0;
  auto init = pretrain_teacher(ds, tok, tiny_config(), pc);

  // Fixed probe: image paired with the first caption template of its class.
  auto probe = data::generate_dataset(probe_spec(77), testing::scratch_dir("pretrain_probe_set"));
  auto images = data::load_images(probe, data::default_loader(), {});
  auto in_pair = [&](const TeacherModel& m) {
    auto emb = m.encode_images(images);
    double total = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      auto cap = m.encode_text(m.tokenize(render_template(caption_templates()[0], probe.records[i].class_name)));
      total += cosine(emb.row(static_cast<int>(i)), cap);
    }
    return total / static_cast<double>(images.size());
  };
  CHECK(in_pair(a) > in_pair(init));
}
