#pragma once

// Seeded synthetic multi-domain patch datasets, JSONL manifests, image
// loading with access contexts, and leave-one-domain-out rotation plans.
//
// Class identity is carried only by geometry (nucleus-like blob count,
// stripe frequency); domain identity only by a per-domain colour transform
// (3x3 mixing, hue rotation, brightness/contrast). Class information is
// therefore domain-invariant by construction.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/autograd.hpp"
#include "dipt/image.hpp"

namespace dipt::data {

struct DatasetSpec {
  int num_domains = 5;
  int num_classes = 2;
  int samples_per_class_per_domain = 200;
  int image_size = 64;
  double shift_strength = 0.6;
  std::uint64_t seed = 0;

  void validate() const;  // throws ValidationError naming the field
  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);

  static DatasetSpec five_centre_binary();  // 5 centres, binary
  static DatasetSpec kather_like();    // 3 centres, 9 tissue types
};

// Names used for synthetic classes: the binary lymph-node task for two
// classes, the nine colorectal tissue types for nine, generic otherwise.
std::vector<std::string> default_class_names(int num_classes);

struct Record {
  std::string path;  // relative to the dataset root (or absolute)
  int class_id = 0;
  std::string class_name;
  int domain_id = 0;
  bool operator==(const Record&) const = default;
};

struct DomainDataset {
  std::filesystem::path root;  // directory the manifest lives in
  std::vector<Record> records;
  std::vector<std::string> class_names;
  std::vector<int> domain_ids;  // sorted, unique
  std::optional<DatasetSpec> spec;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::filesystem::path resolve(const Record& r) const;
  DomainDataset filter_domains(const std::set<int>& domains) const;
  DomainDataset filter_domain(int domain) const { return filter_domains({domain}); }
  std::size_t count(int domain, int class_id) const;
  bool same_content(const DomainDataset& other) const;  // ignores root
};

inline constexpr const char* kManifestName = "manifest.jsonl";
inline constexpr const char* kSidecarName = "dataset.json";

DomainDataset generate_dataset(const DatasetSpec& spec, const std::filesystem::path& output_dir);

// Renders one image without touching the filesystem.
Image render_image(const DatasetSpec& spec, int domain, int class_id, int index);

// Accepts either the manifest file or the directory containing it.
DomainDataset load_manifest(const std::filesystem::path& path);

// SHA-256 over the manifest, the sidecar (when present) and every image.
std::string dataset_hash(const DomainDataset& ds);

struct Rotation {
  std::set<int> train_domains;
  int test_domain = 0;
};

struct RotationPlan {
  int validation_domain = 0;
  std::vector<Rotation> rotations;
};

RotationPlan make_rotation_plan(const DomainDataset& dataset, int validation_domain);

// --- Image access -----------------------------------------------------------

enum class Stage { pretrain, tune, sweep, aggregate, distill, evaluate, probe };
const char* to_string(Stage s);

// Who is reading: the pipeline stage, the rotation's test domain (when the
// read belongs to one rotation) and the domain whose artefact is being
// produced (stage-1 tuning).
struct AccessContext {
  Stage stage = Stage::probe;
  int rotation_test = -1;
  int owner_domain = -1;
};

class ImageLoader {
 public:
  virtual ~ImageLoader() = default;
  virtual Image load(const DomainDataset& ds, const Record& r, const AccessContext& ctx) const = 0;
};

class FileImageLoader : public ImageLoader {
 public:
  Image load(const DomainDataset& ds, const Record& r, const AccessContext& ctx) const override;
};

const ImageLoader& default_loader();

std::vector<Image> load_images(const DomainDataset& ds, const ImageLoader& loader, const AccessContext& ctx);

// Packs images as NHWC rows [n*h*w, 3] scaled to [-1, 1].
nn::Tensor to_tensor(const std::vector<Image>& images);
nn::Tensor to_tensor(const std::vector<const Image*>& images);

}  // namespace dipt::data
