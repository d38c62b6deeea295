#include "dipt/workspace.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dipt/error.hpp"
#include "dipt/hash.hpp"
#include "dipt/prompts.hpp"
#include "dipt/store.hpp"

namespace dipt::workspace {

namespace fs = std::filesystem;
using nlohmann::json;

// --- Configuration --------------------------------------------------------------

std::uint64_t ExperimentConfig::effective_dataset_seed() const {
  return dataset_seed.value_or(derive_seed(seed, "dataset"));
}
std::uint64_t ExperimentConfig::effective_teacher_seed() const {
  return teacher_seed.value_or(derive_seed(seed, "teacher"));
}
std::uint64_t ExperimentConfig::effective_stage1_seed() const {
  return stage1_seed.value_or(derive_seed(seed, "stage1"));
}
std::uint64_t ExperimentConfig::effective_stage2_seed() const {
  return stage2_seed.value_or(derive_seed(seed, "stage2"));
}

std::vector<eval::MethodSpec> ExperimentConfig::roster() const {
  return methods.empty() ? eval::default_roster(stage2, include_vit) : methods;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  teacher.validate();
  stage1.validate();
  stage2.validate();
  if (templates_per_class < 1) throw ValidationError("prompts.templates_per_class", "must be >= 1");
  if (pretrain.epochs < 0) throw ValidationError("teacher.pretrain.epochs", "must be >= 0");
  if (pretrain.batch_size < 2) throw ValidationError("teacher.pretrain.batch_size", "must be >= 2");
  if (!(pretrain.learning_rate > 0.0)) throw ValidationError("teacher.pretrain.learning_rate", "must be > 0");
  if (teacher.image_size != dataset.image_size)
    throw ValidationError("teacher.model.image_size", "must equal dataset.image_size");
  if (validation_domain < 0 || validation_domain >= dataset.num_domains)
    throw ValidationError("eval.validation_domain", "not one of the dataset's domains");
  if (stage1.sweep_k.empty()) throw ValidationError("stage1.sweep_k", "sweep list is empty");
  if (stage1.sweep_learning_rates.empty())
    throw ValidationError("stage1.sweep_learning_rates", "sweep list is empty");
  std::set<std::string> names;
  for (const auto& m : roster()) {
    if (m.name.empty()) throw ValidationError("stage2.methods", "method without a name");
    if (!names.insert(m.name).second) throw ValidationError("stage2.methods", "duplicate method " + m.name);
    if (!m.zero_shot) m.config.validate();
  }
}

json ExperimentConfig::to_json() const {
  json ds = dataset.to_json();
  ds.erase("seed");
  if (dataset_seed) ds["seed"] = *dataset_seed;
  json pre = pretrain.to_json();
  pre.erase("seed");
  if (teacher_seed) pre["seed"] = *teacher_seed;
  json s1 = stage1.to_json();
  s1.erase("seed");
  if (stage1_seed) s1["seed"] = *stage1_seed;
  json base = stage2.to_json();
  for (const char* k : {"seed", "name", "mode", "embedding_source"}) base.erase(k);
  json s2 = {{"base", base}, {"include_vit", include_vit}};
  if (!methods.empty()) {
    json ms = json::array();
    for (const auto& m : methods) ms.push_back(m.to_json());
    s2["methods"] = ms;
  }
  if (stage2_seed) s2["seed"] = *stage2_seed;
  return {{"seed", seed},
          {"dataset", ds},
          {"teacher", {{"model", teacher.to_json()}, {"pretrain", pre}}},
          {"prompts", {{"templates_per_class", templates_per_class}}},
          {"stage1", s1},
          {"stage2", s2},
          {"eval", {{"validation_domain", validation_domain}, {"charts", charts}}},
          {"paths", {{"workspace", workspace.string()}}}};
}

namespace {

void check_known_keys(const json& in, const json& known, const std::string& path) {
  if (!in.is_object()) return;
  for (const auto& [key, value] : in.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw ValidationError(p, "unknown configuration key");
    if (value.is_object() && known.at(key).is_object()) check_known_keys(value, known.at(key), p);
  }
}

json known_schema() {
  ExperimentConfig full;
  full.dataset_seed = full.teacher_seed = full.stage1_seed = full.stage2_seed = 0;
  json j = full.to_json();
  j["stage2"]["methods"] = json::array();
  return j;
}

template <class T>
std::optional<T> opt_value(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config", "must be a JSON object");
  check_known_keys(j, known_schema(), "");
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    const json empty = json::object();
    const json& ds = j.contains("dataset") ? j.at("dataset") : empty;
    c.dataset = data::DatasetSpec::from_json(ds);
    c.dataset_seed = opt_value<std::uint64_t>(ds, "seed");
    const json& t = j.contains("teacher") ? j.at("teacher") : empty;
    if (t.contains("model")) c.teacher = teacher::TeacherConfig::from_json(t.at("model"));
    if (t.contains("pretrain")) c.pretrain = teacher::PretrainConfig::from_json(t.at("pretrain"));
    c.teacher_seed = t.contains("pretrain") ? opt_value<std::uint64_t>(t.at("pretrain"), "seed") : std::nullopt;
    if (j.contains("prompts")) c.templates_per_class = j.at("prompts").value("templates_per_class", c.templates_per_class);
    const json& s1 = j.contains("stage1") ? j.at("stage1") : empty;
    c.stage1 = stage1::Stage1Config::from_json(s1);
    c.stage1_seed = opt_value<std::uint64_t>(s1, "seed");
    const json& s2 = j.contains("stage2") ? j.at("stage2") : empty;
    if (s2.contains("base")) c.stage2 = distill::DistillConfig::from_json(s2.at("base"));
    c.include_vit = s2.value("include_vit", c.include_vit);
    if (s2.contains("methods"))
      for (const auto& m : s2.at("methods")) c.methods.push_back(eval::MethodSpec::from_json(m));
    c.stage2_seed = opt_value<std::uint64_t>(s2, "seed");
    if (j.contains("eval")) {
      c.validation_domain = j.at("eval").value("validation_domain", c.validation_domain);
      c.charts = j.at("eval").value("charts", c.charts);
    }
    if (j.contains("paths")) c.workspace = j.at("paths").value("workspace", std::string());
  } catch (const json::exception& e) {
    throw ValidationError("config", std::string("malformed value: ") + e.what());
  }
  c.dataset.seed = c.effective_dataset_seed();
  c.pretrain.seed = c.effective_teacher_seed();
  c.stage1.seed = c.effective_stage1_seed();
  c.stage2.seed = c.effective_stage2_seed();
  c.validate();
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("--set", "expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &config;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ValidationError("--set", "empty path component in '" + key + "'");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides,
                             std::optional<std::uint64_t> seed, std::optional<fs::path> workspace) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open config: " + path.string());
    try {
      j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
      throw ValidationError("config", "cannot parse " + path.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (seed) j["seed"] = *seed;
  if (workspace) {
    j["paths"]["workspace"] = workspace->string();
  } else if (!j.contains("paths") || j["paths"].value("workspace", std::string()).empty()) {
    if (const char* env = std::getenv("DIPT_WORKSPACE"); env && *env) j["paths"]["workspace"] = env;
  }
  ExperimentConfig c = ExperimentConfig::from_json(j);
  if (c.workspace.empty()) throw ValidationError("paths.workspace", "no workspace (use --workspace or DIPT_WORKSPACE)");
  return c;
}

// --- Stamps -------------------------------------------------------------------------

namespace {

struct Stamp {
  std::string command;
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // "command:output" -> hash
  std::map<std::string, std::string> outputs;  // relative path -> hash
  json records = json::object();
};

fs::path stamp_path(const fs::path& ws, const std::string& cmd) { return ws / "stamps" / (cmd + ".json"); }

std::optional<Stamp> read_stamp(const fs::path& ws, const std::string& cmd) {
  const fs::path p = stamp_path(ws, cmd);
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream in(p);
  try {
    json j = json::parse(in);
    Stamp s{j.at("command"), j.at("config_hash"), j.at("inputs"), j.at("outputs"), j.value("records", json::object())};
    return s;
  } catch (const json::exception& e) {
    throw ProvenanceError("stamp " + p.string() + " is unreadable: " + e.what());
  }
}

void write_stamp(const fs::path& ws, const Stamp& s) {
  fs::create_directories(ws / "stamps");
  json j = {{"command", s.command},
            {"config_hash", s.config_hash},
            {"inputs", s.inputs},
            {"outputs", s.outputs},
            {"records", s.records}};
  std::ofstream out(stamp_path(ws, s.command));
  if (!out) throw IoError("cannot write stamp for " + s.command);
  out << j.dump(2) << "\n";
}

std::string output_hash(const fs::path& ws, const std::string& rel) {
  if (rel == "data") {
    if (!fs::exists(ws / "data" / data::kManifestName)) return "missing";
    return data::dataset_hash(data::load_manifest(ws / "data"));
  }
  const fs::path p = ws / rel;
  if (!fs::exists(p)) return "missing";
  return sha256_file(p);
}

void note(const Options& opt, const std::string& msg) {
  if (opt.log) opt.log(msg);
}

// Inputs contributed by an upstream command, after checking its outputs are
// still the ones it recorded.
std::map<std::string, std::string> upstream(const fs::path& ws, const std::string& cmd) {
  auto s = read_stamp(ws, cmd);
  if (!s) throw MissingArtifactError("missing " + cmd + " outputs in " + ws.string() + "; run " + cmd + " first");
  std::map<std::string, std::string> out;
  for (const auto& [rel, h] : s->outputs) {
    const std::string now = output_hash(ws, rel);
    if (now != h)
      throw ProvenanceError(cmd + " output " + rel + " changed: recorded " + h + ", found " + now);
    out[cmd + ":" + rel] = h;
  }
  return out;
}

// True when an up-to-date stamp makes the command a no-op.
bool up_to_date(const fs::path& ws, const std::string& cmd, const std::string& config_hash,
                const std::map<std::string, std::string>& inputs, const Options& opt) {
  auto s = read_stamp(ws, cmd);
  if (!s) return false;
  std::string mismatch;
  if (s->config_hash != config_hash) mismatch = "config: recorded " + s->config_hash + ", current " + config_hash;
  if (mismatch.empty()) {
    for (const auto& [k, v] : inputs) {
      auto it = s->inputs.find(k);
      const std::string rec = it == s->inputs.end() ? "none" : it->second;
      if (rec != v) {
        mismatch = k + ": recorded " + rec + ", current " + v;
        break;
      }
    }
    if (mismatch.empty() && s->inputs.size() != inputs.size()) mismatch = "input set changed";
  }
  if (mismatch.empty()) {
    for (const auto& [rel, h] : s->outputs) {
      const std::string now = output_hash(ws, rel);
      if (now != h) {
        mismatch = "output " + rel + ": recorded " + h + ", found " + now;
        break;
      }
    }
    if (mismatch.empty()) {
      note(opt, cmd + ": skipped (up to date)");
      return true;
    }
  }
  if (!opt.force)
    throw ProvenanceError(cmd + ": existing outputs do not match (" + mismatch + "); rerun with --force to replace them");
  for (const auto& [rel, _] : s->outputs) {
    if (rel == "data") fs::remove_all(ws / "data");
    else fs::remove(ws / rel);
  }
  fs::remove(stamp_path(ws, cmd));
  return false;
}

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

data::DomainDataset load_data(const ExperimentConfig& cfg) { return data::load_manifest(cfg.workspace / "data"); }

const data::ImageLoader& loader_of(const Options& opt) { return opt.loader ? *opt.loader : data::default_loader(); }

prompts::PromptTemplateBank load_bank_checked(const fs::path& ws, const data::DomainDataset& ds) {
  auto bank = prompts::load_bank(ws / "teacher" / "bank.json");
  if (bank.class_names != ds.class_names) throw CompatibilityError("prompt bank classes differ from the dataset's");
  return bank;
}

teacher::TeacherModel load_teacher(const fs::path& ws, const prompts::PromptTemplateBank& bank) {
  auto corpus = bank.corpus();
  for (const auto& n : bank.class_names)
    for (const auto& t : teacher::caption_templates()) corpus.push_back(teacher::render_template(t, n));
  auto tok = teacher::Tokenizer::build(corpus);
  return teacher::load_checkpoint(ws / "teacher" / "teacher.ckpt", &tok);
}

std::vector<int> train_domains(const ExperimentConfig& cfg, const data::DomainDataset& ds) {
  std::vector<int> out;
  for (int d : ds.domain_ids)
    if (d != cfg.validation_domain) out.push_back(d);
  return out;
}

store::EmbeddingStore load_checked_store(const fs::path& p, const data::DomainDataset& ds,
                                         const teacher::TeacherModel& t) {
  std::vector<std::string> warnings;
  auto s = store::load_store(p, {ds.class_names, t.embed_dim(), t.hash()}, &warnings);
  if (!warnings.empty()) throw ProvenanceError(warnings.front());
  return s;
}

std::string student_file(const std::string& method, int test) {
  return "students/" + method + "_test" + std::to_string(test) + ".ckpt";
}

std::string invariant_file(int test) { return "stores/invariant_test" + std::to_string(test) + ".json"; }

}  // namespace

// --- Commands -----------------------------------------------------------------------

Outcome gen_data(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  const std::string ch = hash_json(cfg.dataset.to_json());
  if (up_to_date(ws, "gen-data", ch, {}, opt)) return Outcome::skipped;
  if (fs::exists(ws / "data" / data::kManifestName) && !opt.force)
    throw ProvenanceError("gen-data: " + (ws / "data").string() + " exists without a stamp; rerun with --force");
  fs::remove_all(ws / "data");
  auto ds = data::generate_dataset(cfg.dataset, ws / "data");
  note(opt, "gen-data: " + std::to_string(ds.records.size()) + " images in " + (ws / "data").string());
  write_stamp(ws, {"gen-data", ch, {}, {{"data", data::dataset_hash(ds)}}, json::object()});
  return Outcome::ran;
}

Outcome pretrain_teacher(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  auto inputs = upstream(ws, "gen-data");
  const std::string ch = hash_json({{"model", cfg.teacher.to_json()},
                                    {"pretrain", cfg.pretrain.to_json()},
                                    {"templates_per_class", cfg.templates_per_class}});
  if (up_to_date(ws, "pretrain-teacher", ch, inputs, opt)) return Outcome::skipped;
  auto ds = load_data(cfg);
  auto bank = prompts::default_bank(ds.class_names, cfg.templates_per_class);
  auto corpus = bank.corpus();
  for (const auto& n : ds.class_names)
    for (const auto& t : teacher::caption_templates()) corpus.push_back(teacher::render_template(t, n));
  auto tok = teacher::Tokenizer::build(corpus);
  bank.validate(&tok);
  teacher::PretrainResult pr;
  auto model = teacher::pretrain_teacher(ds, tok, cfg.teacher, cfg.pretrain, loader_of(opt), &pr);
  fs::create_directories(ws / "teacher");
  prompts::save_bank(bank, ws / "teacher" / "bank.json");
  teacher::save_checkpoint(model, ws / "teacher" / "teacher.ckpt",
                           {{"dataset_hash", inputs.at("gen-data:data")}, {"epoch_losses", pr.epoch_losses}});
  if (!pr.epoch_losses.empty()) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "pretrain-teacher: loss %.4f -> %.4f over %zu epochs", pr.epoch_losses.front(),
                  pr.epoch_losses.back(), pr.epoch_losses.size());
    note(opt, buf);
  }
  Stamp s{"pretrain-teacher", ch, inputs, {}, {{"teacher_hash", model.hash()}, {"epoch_losses", pr.epoch_losses}}};
  for (const char* f : {"teacher/teacher.ckpt", "teacher/bank.json"}) s.outputs[f] = output_hash(ws, f);
  write_stamp(ws, s);
  return Outcome::ran;
}

SweepRow select_sweep_winner(const std::vector<SweepRow>& rows) {
  if (rows.empty()) throw ValidationError("stage1.sweep", "empty sweep grid");
  const SweepRow* best = &rows.front();
  for (const auto& r : rows) {
    auto key = [](const SweepRow& x) { return std::tuple(x.validation_loss, x.k, x.learning_rate); };
    if (key(r) < key(*best)) best = &r;
  }
  return *best;
}

Outcome sweep(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  auto inputs = upstream(ws, "pretrain-teacher");
  auto data_in = upstream(ws, "gen-data");
  inputs.insert(data_in.begin(), data_in.end());
  json sj = cfg.stage1.to_json();
  const std::string ch = hash_json({{"stage1", sj}, {"validation_domain", cfg.validation_domain}});
  if (up_to_date(ws, "sweep", ch, inputs, opt)) return Outcome::skipped;
  if (cfg.stage1.sweep_k.empty() || cfg.stage1.sweep_learning_rates.empty())
    throw ValidationError("stage1.sweep", "empty sweep grid");

  auto ds = load_data(cfg);
  auto bank = load_bank_checked(ws, ds);
  auto model = load_teacher(ws, bank);
  auto agg = prompts::compute_aggregated_embeddings(model, bank);
  const auto val = ds.filter_domain(cfg.validation_domain);
  const auto val_images = data::load_images(val, loader_of(opt), {data::Stage::sweep, -1, cfg.validation_domain});
  const auto val_emb = model.encode_images(val_images);
  std::vector<int> val_labels;
  for (const auto& r : val.records) val_labels.push_back(r.class_id);

  std::string csv = "domain,k,lr,validation_loss,validation_f1\n";
  json selection = json::object();
  for (int d : train_domains(cfg, ds)) {
    std::vector<SweepRow> rows;
    for (int k : cfg.stage1.sweep_k) {
      for (double lr : cfg.stage1.sweep_learning_rates) {
        auto c = cfg.stage1;
        c.k = k;
        c.learning_rate = lr;
        auto res = stage1::train_domain_prompts(ds.filter_domain(d), model, agg, c, loader_of(opt));
        auto score = stage1::validate_embeddings(res.embeddings.rows, agg.rows, val_emb, val_labels, c.temperature);
        rows.push_back({d, k, lr, score.loss, score.metrics.macro_f1});
        char buf[160];
        std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", d, k, lr, score.loss, score.metrics.macro_f1);
        csv += buf;
        std::snprintf(buf, sizeof buf, "sweep: domain %d k=%d lr=%g  val loss %.4f  val f1 %.4f", d, k, lr, score.loss,
                      score.metrics.macro_f1);
        note(opt, buf);
      }
    }
    auto best = select_sweep_winner(rows);
    selection[std::to_string(d)] = {{"k", best.k}, {"learning_rate", best.learning_rate}};
  }
  fs::create_directories(ws / "prompts");
  {
    std::ofstream out(ws / "prompts" / "sweep.csv", std::ios::binary);
    out << csv;
    std::ofstream sel(ws / "prompts" / "selection.json");
    sel << selection.dump(2) << "\n";
    if (!out || !sel) throw IoError("cannot write sweep outputs");
  }
  Stamp s{"sweep", ch, inputs, {}, selection};
  for (const char* f : {"prompts/sweep.csv", "prompts/selection.json"}) s.outputs[f] = output_hash(ws, f);
  write_stamp(ws, s);
  return Outcome::ran;
}

Outcome tune_prompts(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  auto inputs = upstream(ws, "pretrain-teacher");
  auto data_in = upstream(ws, "gen-data");
  inputs.insert(data_in.begin(), data_in.end());
  json selection = json::object();
  if (read_stamp(ws, "sweep")) {
    auto sweep_in = upstream(ws, "sweep");
    inputs.insert(sweep_in.begin(), sweep_in.end());
    std::ifstream in(ws / "prompts" / "selection.json");
    selection = json::parse(in);
  }
  json sj = cfg.stage1.to_json();
  sj.erase("sweep_k");
  sj.erase("sweep_learning_rates");
  const std::string ch = hash_json({{"stage1", sj}, {"validation_domain", cfg.validation_domain}});
  if (up_to_date(ws, "tune-prompts", ch, inputs, opt)) return Outcome::skipped;

  auto ds = load_data(cfg);
  auto bank = load_bank_checked(ws, ds);
  auto model = load_teacher(ws, bank);
  const std::string th = model.hash();
  const std::string teacher_file = inputs.at("pretrain-teacher:teacher/teacher.ckpt");
  const std::string bank_hash = inputs.at("pretrain-teacher:teacher/bank.json");
  auto agg = prompts::compute_aggregated_embeddings(model, bank);
  auto gen = prompts::compute_generic_prompt_embeddings(model, bank);
  fs::create_directories(ws / "stores");
  fs::create_directories(ws / "prompts");
  Stamp s{"tune-prompts", ch, inputs, {}, json::array()};
  auto save = [&](const store::EmbeddingStore& st, const std::string& f) {
    store::save_store(st, ws / f);
    s.outputs[f] = output_hash(ws, f);
  };
  save(store::make_store("agg_template", agg, {th, bank_hash, {}, {teacher_file}}), "stores/agg_template.json");
  save(store::make_store("generic_prompt", gen, {th, bank_hash, {}, {teacher_file}}), "stores/generic_prompt.json");

  for (int d : train_domains(cfg, ds)) {
    auto c = cfg.stage1;
    if (selection.contains(std::to_string(d))) {
      c.k = selection[std::to_string(d)].at("k");
      c.learning_rate = selection[std::to_string(d)].at("learning_rate");
    }
    auto res = stage1::train_domain_prompts(ds.filter_domain(d), model, agg, c, loader_of(opt));
    const std::string tok_file = "prompts/tokens_d" + std::to_string(d) + ".ckpt";
    stage1::save_tokens(res.tokens, ws / tok_file,
                        {{"seed", c.seed},
                         {"config", c.to_json()},
                         {"teacher_hash", th},
                         {"initial_loss", res.initial_loss},
                         {"final_loss", res.final_loss}});
    s.outputs[tok_file] = output_hash(ws, tok_file);
    save(store::make_domain_store(res.embeddings, ds.class_names, th, c.hash(), {s.outputs[tok_file]}),
         "stores/domain_" + std::to_string(d) + ".json");
    s.records.push_back({{"domain", d},
                         {"k", c.k},
                         {"learning_rate", c.learning_rate},
                         {"initial_loss", res.initial_loss},
                         {"final_loss", res.final_loss}});
    char buf[160];
    std::snprintf(buf, sizeof buf, "tune-prompts: domain %d k=%d lr=%g  loss %.4f -> %.4f", d, c.k, c.learning_rate,
                  res.initial_loss, res.final_loss);
    note(opt, buf);
  }
  write_stamp(ws, s);
  return Outcome::ran;
}

Outcome aggregate(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  auto inputs = upstream(ws, "tune-prompts");
  const std::string ch = hash_json({{"validation_domain", cfg.validation_domain}});
  if (up_to_date(ws, "aggregate", ch, inputs, opt)) return Outcome::skipped;
  auto ds = load_data(cfg);
  auto bank = load_bank_checked(ws, ds);
  auto model = load_teacher(ws, bank);
  std::vector<store::EmbeddingStore> domain_stores;
  for (int d : train_domains(cfg, ds))
    domain_stores.push_back(load_checked_store(ws / ("stores/domain_" + std::to_string(d) + ".json"), ds, model));
  auto plan = data::make_rotation_plan(ds, cfg.validation_domain);
  Stamp s{"aggregate", ch, inputs, {}, json::object()};
  for (const auto& rot : plan.rotations) {
    auto inv = eval::rotation_invariant_store(domain_stores, rot);
    const std::string f = invariant_file(rot.test_domain);
    store::save_store(inv, ws / f);
    s.outputs[f] = output_hash(ws, f);
    note(opt, "aggregate: " + f + " from " + std::to_string(inv.provenance.source_domains.size()) + " domains");
  }
  write_stamp(ws, s);
  return Outcome::ran;
}

Outcome distill_students(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  auto inputs = upstream(ws, "aggregate");
  for (const char* up : {"tune-prompts", "pretrain-teacher", "gen-data"}) {
    auto more = upstream(ws, up);
    inputs.insert(more.begin(), more.end());
  }
  json roster = json::array();
  for (const auto& m : cfg.roster()) roster.push_back(m.to_json());
  const std::string ch = hash_json({{"roster", roster},
                                    {"stage2_seed", cfg.effective_stage2_seed()},
                                    {"validation_domain", cfg.validation_domain}});
  if (up_to_date(ws, "distill", ch, inputs, opt)) return Outcome::skipped;

  auto ds = load_data(cfg);
  auto bank = load_bank_checked(ws, ds);
  auto model = load_teacher(ws, bank);
  auto agg = load_checked_store(ws / "stores/agg_template.json", ds, model);
  auto gen = load_checked_store(ws / "stores/generic_prompt.json", ds, model);
  auto plan = data::make_rotation_plan(ds, cfg.validation_domain);
  fs::create_directories(ws / "students");
  Stamp s{"distill", ch, inputs, {}, json::array()};
  for (const auto& rot : plan.rotations) {
    auto inv = load_checked_store(ws / invariant_file(rot.test_domain), ds, model);
    const auto train = ds.filter_domains(rot.train_domains);
    eval::Inputs in{&ds, &model, &agg, &gen, nullptr, opt.loader, cfg.effective_stage2_seed()};
    for (const auto& m : cfg.roster()) {
      if (m.zero_shot) continue;
      const store::EmbeddingStore* st = eval::method_store(m, in, &inv);
      auto c = m.config;
      c.seed = eval::method_seed(cfg.effective_stage2_seed(), m.name, rot.test_domain);
      const store::EmbeddingStore* zs = c.mode == distill::Mode::vanilla_kd ? &agg : nullptr;
      auto res = distill::train_student(train, model, c, {st, zs, rot.test_domain}, loader_of(opt));
      const std::string f = student_file(m.name, rot.test_domain);
      distill::save_student(res.student, ws / f,
                            {{"method", m.name},
                             {"test_domain", rot.test_domain},
                             {"mode", distill::to_string(c.mode)},
                             {"embedding_source", distill::to_string(c.source)},
                             {"store_name", st ? st->name : ""},
                             {"store_digest", st ? st->digest() : ""},
                             {"teacher_hash", model.hash()},
                             {"config", c.to_json()},
                             {"initial_loss", res.initial_loss},
                             {"final_loss", res.final_loss},
                             {"epoch_losses", res.epoch_losses}});
      s.outputs[f] = output_hash(ws, f);
      s.records.push_back({{"method", m.name},
                           {"test_domain", rot.test_domain},
                           {"initial_loss", res.initial_loss},
                           {"final_loss", res.final_loss}});
      char buf[160];
      std::snprintf(buf, sizeof buf, "distill: test %d %-14s loss %.4f -> %.4f", rot.test_domain, m.name.c_str(),
                    res.initial_loss, res.final_loss);
      note(opt, buf);
    }
  }
  write_stamp(ws, s);
  return Outcome::ran;
}

Outcome evaluate(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  verify_chain(ws, "evaluate");
  auto inputs = upstream(ws, "distill");
  auto more = upstream(ws, "aggregate");
  inputs.insert(more.begin(), more.end());
  json names = json::array();
  for (const auto& m : cfg.roster()) names.push_back(m.to_json());
  const std::string ch = hash_json({{"roster", names}, {"validation_domain", cfg.validation_domain}});
  if (up_to_date(ws, "evaluate", ch, inputs, opt)) return Outcome::skipped;

  auto ds = load_data(cfg);
  auto bank = load_bank_checked(ws, ds);
  auto model = load_teacher(ws, bank);
  auto agg = load_checked_store(ws / "stores/agg_template.json", ds, model);
  auto gen = load_checked_store(ws / "stores/generic_prompt.json", ds, model);
  auto plan = data::make_rotation_plan(ds, cfg.validation_domain);
  const auto roster = cfg.roster();
  std::vector<eval::RotationResult> results(roster.size());
  for (std::size_t i = 0; i < roster.size(); ++i) results[i].method = roster[i].name;
  for (const auto& rot : plan.rotations) {
    auto inv = load_checked_store(ws / invariant_file(rot.test_domain), ds, model);
    const auto test = ds.filter_domain(rot.test_domain);
    const auto images = data::load_images(test, loader_of(opt), {data::Stage::evaluate, rot.test_domain, -1});
    std::vector<int> labels;
    for (const auto& r : test.records) labels.push_back(r.class_id);
    eval::Inputs in{&ds, &model, &agg, &gen, nullptr, opt.loader, cfg.effective_stage2_seed()};
    for (std::size_t i = 0; i < roster.size(); ++i) {
      const auto& m = roster[i];
      const store::EmbeddingStore* st = eval::method_store(m, in, &inv);
      std::optional<distill::StudentModel> student;
      if (!m.zero_shot) {
        json header;
        student.emplace(distill::load_student(ws / student_file(m.name, rot.test_domain), &header));
        if (header.value("teacher_hash", "") != model.hash())
          throw ProvenanceError("student " + student_file(m.name, rot.test_domain) + " was distilled from teacher " +
                                header.value("teacher_hash", "") + ", not " + model.hash());
        const std::string want = st ? st->digest() : "";
        if (header.value("store_digest", "") != want)
          throw ProvenanceError("student " + student_file(m.name, rot.test_domain) + " was trained on store " +
                                header.value("store_digest", "") + ", current store is " + want);
      }
      auto pred = eval::method_predictions(m, student ? &*student : nullptr, model, st, images);
      results[i].rotations.push_back({rot.test_domain, eval::compute_metrics(pred, labels, ds.num_classes())});
    }
  }
  for (auto& r : results) eval::summarize(r);
  fs::create_directories(ws / "reports");
  {
    std::ofstream out(ws / "reports" / "results.json");
    out << eval::results_to_json(results).dump(2) << "\n";
    if (!out) throw IoError("cannot write results");
  }
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "evaluate: %-14s mean acc %.4f f1 %.4f  worst acc %.4f f1 %.4f", r.method.c_str(),
                  r.mean.accuracy, r.mean.macro_f1, r.worst.accuracy, r.worst.macro_f1);
    note(opt, buf);
  }
  write_stamp(ws, {"evaluate", ch, inputs, {{"reports/results.json", output_hash(ws, "reports/results.json")}},
                   json::object()});
  return Outcome::ran;
}

Outcome report(const ExperimentConfig& cfg, const Options& opt) {
  const fs::path& ws = cfg.workspace;
  auto inputs = upstream(ws, "evaluate");
  const std::string ch = hash_json({{"charts", cfg.charts}});
  if (up_to_date(ws, "report", ch, inputs, opt)) return Outcome::skipped;
  auto results = read_results(ws);
  eval::emit_report(results, ws / "reports", cfg.charts);
  Stamp s{"report", ch, inputs, {}, json::object()};
  std::vector<std::string> files{"reports/detail.csv", "reports/summary.csv"};
  if (cfg.charts) {
    files.push_back("reports/acc.png");
    files.push_back("reports/f1.png");
  }
  for (const auto& f : files) s.outputs[f] = output_hash(ws, f);
  write_stamp(ws, s);
  note(opt, "report: " + (ws / "reports" / "summary.csv").string());
  return Outcome::ran;
}

void run_all(const ExperimentConfig& cfg, const Options& opt) {
  gen_data(cfg, opt);
  pretrain_teacher(cfg, opt);
  if (!cfg.stage1.sweep_k.empty() && !cfg.stage1.sweep_learning_rates.empty()) sweep(cfg, opt);
  tune_prompts(cfg, opt);
  aggregate(cfg, opt);
  distill_students(cfg, opt);
  evaluate(cfg, opt);
  report(cfg, opt);
}

void verify_chain(const fs::path& ws, const std::string& stop_before) {
  for (const char* cmd : {"gen-data", "pretrain-teacher", "sweep", "tune-prompts", "aggregate", "distill", "evaluate",
                          "report"}) {
    if (cmd == stop_before) break;
    auto s = read_stamp(ws, cmd);
    if (!s) continue;
    for (const auto& [r, h] : s->outputs) {
      const std::string now = output_hash(ws, r);
      if (now != h) throw ProvenanceError(std::string(cmd) + " output " + r + ": recorded " + h + ", found " + now);
    }
    for (const auto& [key, h] : s->inputs) {
      const auto colon = key.find(':');
      const std::string up = key.substr(0, colon);
      auto us = read_stamp(ws, up);
      if (!us) throw ProvenanceError(std::string(cmd) + " input " + key + ": upstream stamp " + up + " is missing");
      auto it = us->outputs.find(key.substr(colon + 1));
      const std::string rec = it == us->outputs.end() ? "missing" : it->second;
      if (rec != h)
        throw ProvenanceError(std::string(cmd) + " input " + key + ": recorded " + h + ", upstream now " + rec);
    }
  }
}

std::vector<TuneRecord> read_tune_records(const fs::path& ws) {
  auto s = read_stamp(ws, "tune-prompts");
  if (!s) throw MissingArtifactError("run tune-prompts first");
  std::vector<TuneRecord> out;
  for (const auto& r : s->records) {
    out.push_back({r.at("domain"), r.at("k"), r.at("learning_rate"), r.at("initial_loss"), r.at("final_loss")});
  }
  return out;
}

std::vector<eval::RotationResult> read_results(const fs::path& ws) {
  const fs::path p = ws / "reports" / "results.json";
  std::ifstream in(p);
  if (!in) throw MissingArtifactError("missing " + p.string() + "; run evaluate first");
  return eval::results_from_json(json::parse(in));
}

}  // namespace dipt::workspace
