#include "dipt/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "dipt/error.hpp"
#include "dipt/hash.hpp"

namespace dipt::data {

namespace fs = std::filesystem;
using nlohmann::json;

void DatasetSpec::validate() const {
  if (num_domains < 2) throw ValidationError("num_domains", "must be >= 2, got " + std::to_string(num_domains));
  if (num_classes < 2) throw ValidationError("num_classes", "must be >= 2, got " + std::to_string(num_classes));
  if (samples_per_class_per_domain < 1) {
    throw ValidationError("samples_per_class_per_domain", "must be positive");
  }
  if (image_size < 16) throw ValidationError("image_size", "must be >= 16, got " + std::to_string(image_size));
  if (!(shift_strength >= 0.0 && shift_strength <= 1.0)) {
    throw ValidationError("shift_strength", "must lie in [0, 1]");
  }
}

json DatasetSpec::to_json() const {
  return {{"num_domains", num_domains},
          {"num_classes", num_classes},
          {"samples_per_class_per_domain", samples_per_class_per_domain},
          {"image_size", image_size},
          {"shift_strength", shift_strength},
          {"seed", seed}};
}

DatasetSpec DatasetSpec::from_json(const json& j) {
  DatasetSpec s;
  s.num_domains = j.value("num_domains", s.num_domains);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.samples_per_class_per_domain = j.value("samples_per_class_per_domain", s.samples_per_class_per_domain);
  s.image_size = j.value("image_size", s.image_size);
  s.shift_strength = j.value("shift_strength", s.shift_strength);
  s.seed = j.value("seed", s.seed);
  return s;
}

DatasetSpec DatasetSpec::five_centre_binary() { return DatasetSpec{}; }

DatasetSpec DatasetSpec::kather_like() {
  DatasetSpec s;
  s.num_domains = 3;
  s.num_classes = 9;
  return s;
}

std::vector<std::string> default_class_names(int num_classes) {
  if (num_classes == 2) return {"normal lymph node", "lymph node metastasis"};
  if (num_classes == 9) {
    return {"adipose",       "background", "debris",         "lymphocytes",
            "mucus",         "smooth muscle", "normal colon mucosa", "cancer associated stroma",
            "colorectal adenocarcinoma epithelium"};
  }
  std::vector<std::string> names;
  for (int i = 0; i < num_classes; ++i) names.push_back("tissue type " + std::to_string(i));
  return names;
}

fs::path DomainDataset::resolve(const Record& r) const {
  fs::path p(r.path);
  return p.is_absolute() ? p : root / p;
}

DomainDataset DomainDataset::filter_domains(const std::set<int>& domains) const {
  DomainDataset out;
  out.root = root;
  out.class_names = class_names;
  out.spec = spec;
  for (const auto& r : records) {
    if (domains.count(r.domain_id)) out.records.push_back(r);
  }
  for (int d : domain_ids) {
    if (domains.count(d)) out.domain_ids.push_back(d);
  }
  return out;
}

std::size_t DomainDataset::count(int domain, int class_id) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const Record& r) {
    return r.domain_id == domain && r.class_id == class_id;
  }));
}

bool DomainDataset::same_content(const DomainDataset& other) const {
  return records == other.records && class_names == other.class_names && domain_ids == other.domain_ids;
}

namespace {

struct DomainTransform {
  std::array<double, 9> mix{};  // row-major 3x3
  double hue = 0.0;             // radians, rotation about the grey axis
  double contrast = 1.0;
  double brightness = 0.0;
};

// Raw draws do not depend on shift_strength, so the transform scales
// linearly towards the identity as the strength goes to zero.
DomainTransform domain_transform(const DatasetSpec& spec, int domain) {
  std::mt19937_64 rng(derive_seed(spec.seed, "domain", static_cast<std::uint64_t>(domain)));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double s = spec.shift_strength;
  DomainTransform t;
  for (int i = 0; i < 9; ++i) t.mix[i] = (i % 4 == 0 ? 1.0 : 0.0) + s * 0.35 * u(rng);
  t.hue = s * 0.6 * u(rng);
  t.contrast = 1.0 + s * 0.3 * u(rng);
  t.brightness = s * 0.12 * u(rng);
  return t;
}

// Rodrigues rotation about (1,1,1)/sqrt(3).
std::array<double, 9> hue_rotation(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double k = 1.0 / std::sqrt(3.0);
  const double t = 1.0 - c;
  const double a = t / 3.0;
  return {c + a,          a - s * k, a + s * k,   //
          a + s * k,      c + a,     a - s * k,   //
          a - s * k,      a + s * k, c + a};
}

struct ClassTexture {
  double blob_count;
  double stripe_freq;  // cycles per image side
  double blob_radius;  // fraction of the image side
};

ClassTexture class_texture(int class_id) {
  return ClassTexture{4.0 + 5.0 * class_id, 2.0 + 1.5 * class_id, 0.055 + 0.015 * (class_id % 3)};
}

}  // namespace

Image render_image(const DatasetSpec& spec, int domain, int class_id, int index) {
  const int n = spec.image_size;
  std::mt19937_64 rng(derive_seed(spec.seed, "image", static_cast<std::uint64_t>(domain),
                                  static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const ClassTexture tex = class_texture(class_id);
  const double freq = tex.stripe_freq + 0.6 * (u01(rng) - 0.5);
  const double theta = std::numbers::pi * u01(rng);
  const double phase = 2.0 * std::numbers::pi * u01(rng);
  const double stripe_amp = 0.25 + 0.2 * u01(rng);
  const int blobs = std::max(1, static_cast<int>(std::lround(tex.blob_count + 4.0 * (u01(rng) - 0.5))));

  struct Blob {
    double x, y, r, ink;
  };
  std::vector<Blob> bl;
  for (int i = 0; i < blobs; ++i) {
    bl.push_back({u01(rng) * n, u01(rng) * n, n * tex.blob_radius * (0.75 + 0.5 * u01(rng)), 0.8 + 0.6 * u01(rng)});
  }
  // Low-frequency background variation shared by both stains.
  const double bg_fx = 0.5 + u01(rng);
  const double bg_fy = 0.5 + u01(rng);
  const double bg_ph = 2.0 * std::numbers::pi * u01(rng);

  const DomainTransform dt = domain_transform(spec, domain);
  const auto hue = hue_rotation(dt.hue);
  // Optical-density vectors of the two synthetic stains.
  constexpr std::array<double, 3> kHem{0.65, 0.70, 0.29};
  constexpr std::array<double, 3> kEos{0.07, 0.99, 0.11};

  Image img(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) / n;
      const double py = static_cast<double>(y) / n;
      const double stripe =
          0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * (px * std::cos(theta) + py * std::sin(theta)) + phase);
      const double bg = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (bg_fx * px + bg_fy * py) + bg_ph);
      double eos = 0.35 + stripe_amp * stripe + 0.1 * bg + 0.04 * noise(rng);
      double hem = 0.05 + 0.05 * bg;
      for (const auto& b : bl) {
        const double dx = x - b.x;
        const double dy = y - b.y;
        hem += b.ink * std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
      }
      hem = std::min(hem, 1.6) + 0.04 * noise(rng);
      std::array<double, 3> rgb{};
      for (int c = 0; c < 3; ++c) rgb[c] = std::exp(-1.4 * (hem * kHem[c] + eos * kEos[c]));
      std::array<double, 3> mixed{};
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) mixed[r] += dt.mix[r * 3 + c] * rgb[c];
      }
      std::uint8_t* out = img.at(x, y);
      for (int r = 0; r < 3; ++r) {
        double v = 0.0;
        for (int c = 0; c < 3; ++c) v += hue[r * 3 + c] * mixed[c];
        v = (v - 0.5) * dt.contrast + 0.5 + dt.brightness;
        out[r] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return img;
}

namespace {

json record_json(const Record& r) {
  return {{"path", r.path}, {"class_id", r.class_id}, {"class_name", r.class_name}, {"domain_id", r.domain_id}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

DomainDataset generate_dataset(const DatasetSpec& spec, const fs::path& output_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(output_dir, ec);
  if (ec) throw IoError("cannot create " + output_dir.string() + ": " + ec.message());

  DomainDataset ds;
  ds.root = output_dir;
  ds.spec = spec;
  ds.class_names = default_class_names(spec.num_classes);
  for (int d = 0; d < spec.num_domains; ++d) ds.domain_ids.push_back(d);

  std::ostringstream manifest;
  for (int d = 0; d < spec.num_domains; ++d) {
    for (int c = 0; c < spec.num_classes; ++c) {
      const fs::path dir = fs::path("images") / ("d" + std::to_string(d)) / ("c" + std::to_string(c));
      fs::create_directories(output_dir / dir, ec);
      if (ec) throw IoError("cannot create " + (output_dir / dir).string() + ": " + ec.message());
      for (int i = 0; i < spec.samples_per_class_per_domain; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05d.png", i);
        Record r{(dir / name).generic_string(), c, ds.class_names[static_cast<std::size_t>(c)], d};
        write_png(render_image(spec, d, c, i), output_dir / r.path);
        manifest << record_json(r).dump() << '\n';
        ds.records.push_back(std::move(r));
      }
    }
  }
  write_text(output_dir / kManifestName, manifest.str());
  json sidecar{{"class_names", ds.class_names}, {"domain_ids", ds.domain_ids}, {"spec", spec.to_json()}};
  write_text(output_dir / kSidecarName, sidecar.dump(2) + "\n");
  return ds;
}

DomainDataset load_manifest(const fs::path& path) {
  const fs::path manifest = fs::is_directory(path) ? path / kManifestName : path;
  std::ifstream in(manifest);
  if (!in) throw LoadError("cannot open manifest " + manifest.string());
  DomainDataset ds;
  ds.root = manifest.parent_path();

  std::map<int, std::string> names;
  std::map<std::string, int> ids;
  std::set<int> domains;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    Record r;
    try {
      r.path = j.at("path").get<std::string>();
      r.class_id = j.at("class_id").get<int>();
      r.class_name = j.at("class_name").get<std::string>();
      r.domain_id = j.at("domain_id").get<int>();
    } catch (const json::exception& e) {
      throw SchemaError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (r.class_id < 0 || r.domain_id < 0) {
      throw SchemaError("manifest line " + std::to_string(line_no) + ": negative class_id or domain_id");
    }
    if (auto it = names.find(r.class_id); it != names.end() && it->second != r.class_name) {
      throw SchemaError("class_id " + std::to_string(r.class_id) + " bound to both '" + it->second + "' and '" +
                        r.class_name + "'");
    }
    if (auto it = ids.find(r.class_name); it != ids.end() && it->second != r.class_id) {
      throw SchemaError("class_name '" + r.class_name + "' bound to class_ids " + std::to_string(it->second) +
                        " and " + std::to_string(r.class_id));
    }
    names[r.class_id] = r.class_name;
    ids[r.class_name] = r.class_id;
    domains.insert(r.domain_id);
    ds.records.push_back(std::move(r));
  }
  for (const auto& r : ds.records) {
    if (!fs::exists(ds.resolve(r))) throw LoadError("missing image file " + ds.resolve(r).string());
  }

  const fs::path sidecar = ds.root / kSidecarName;
  if (fs::exists(sidecar)) {
    std::ifstream sin(sidecar);
    json sj = json::parse(sin);
    ds.class_names = sj.at("class_names").get<std::vector<std::string>>();
    if (sj.contains("spec")) ds.spec = DatasetSpec::from_json(sj.at("spec"));
    for (const auto& [id, name] : names) {
      if (id >= ds.num_classes() || ds.class_names[static_cast<std::size_t>(id)] != name) {
        throw SchemaError("class_id " + std::to_string(id) + " ('" + name + "') disagrees with " + sidecar.string());
      }
    }
  } else {
    const int n = names.empty() ? 0 : names.rbegin()->first + 1;
    for (int i = 0; i < n; ++i) {
      auto it = names.find(i);
      if (it == names.end()) throw SchemaError("class_id " + std::to_string(i) + " has no records and no sidecar name");
      ds.class_names.push_back(it->second);
    }
  }
  ds.domain_ids.assign(domains.begin(), domains.end());
  return ds;
}

std::string dataset_hash(const DomainDataset& ds) {
  Sha256 h;
  h.update(sha256_file(ds.root / kManifestName));
  if (fs::exists(ds.root / kSidecarName)) h.update(sha256_file(ds.root / kSidecarName));
  for (const auto& r : ds.records) h.update(sha256_file(ds.resolve(r)));
  return h.hex();
}

RotationPlan make_rotation_plan(const DomainDataset& dataset, int validation_domain) {
  const auto& doms = dataset.domain_ids;
  if (std::find(doms.begin(), doms.end(), validation_domain) == doms.end()) {
    throw ValidationError("validation_domain", std::to_string(validation_domain) + " is not present in the dataset");
  }
  std::vector<int> rest;
  for (int d : doms) {
    if (d != validation_domain) rest.push_back(d);
  }
  if (rest.size() < 2) {
    throw ValidationError("validation_domain",
                          "leaves " + std::to_string(rest.size()) + " domain(s); a train/test split needs at least 2");
  }
  RotationPlan plan;
  plan.validation_domain = validation_domain;
  for (int test : rest) {
    Rotation r;
    r.test_domain = test;
    for (int d : rest) {
      if (d != test) r.train_domains.insert(d);
    }
    plan.rotations.push_back(std::move(r));
  }
  return plan;
}

const char* to_string(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::tune: return "tune";
    case Stage::sweep: return "sweep";
    case Stage::aggregate: return "aggregate";
    case Stage::distill: return "distill";
    case Stage::evaluate: return "evaluate";
    case Stage::probe: return "probe";
  }
  return "unknown";
}

Image FileImageLoader::load(const DomainDataset& ds, const Record& r, const AccessContext&) const {
  return read_png(ds.resolve(r));
}

const ImageLoader& default_loader() {
  static const FileImageLoader loader;
  return loader;
}

std::vector<Image> load_images(const DomainDataset& ds, const ImageLoader& loader, const AccessContext& ctx) {
  std::vector<Image> out;
  out.reserve(ds.records.size());
  for (const auto& r : ds.records) out.push_back(loader.load(ds, r, ctx));
  return out;
}

nn::Tensor to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) return nn::Tensor(0, 3);
  const int w = images.front()->width;
  const int h = images.front()->height;
  nn::Tensor t(static_cast<int>(images.size()) * w * h, 3);
  std::size_t k = 0;
  for (const Image* img : images) {
    if (img->width != w || img->height != h) throw ShapeError("to_tensor: images differ in size");
    for (std::uint8_t p : img->pixels) t.data[k++] = p / 127.5 - 1.0;
  }
  return t;
}

nn::Tensor to_tensor(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& i : images) ptrs.push_back(&i);
  return to_tensor(ptrs);
}

}  // namespace dipt::data
