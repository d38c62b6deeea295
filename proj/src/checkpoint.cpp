#include "dipt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dipt/error.hpp"
#include "dipt/hash.hpp"

namespace dipt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'I', 'P', 'T', 'C', 'K', 'P', 'T'};

void append_floats(std::vector<std::uint8_t>& blob, const nn::Tensor& t) {
  const std::size_t off = blob.size();
  blob.resize(off + t.size() * sizeof(float));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t.data[i]);
    std::memcpy(blob.data() + off + i * sizeof(float), &f, sizeof(float));
  }
}

}  // namespace

const nn::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, _] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      const std::vector<std::pair<std::string, const nn::Tensor*>>& tensors) {
  if (!meta.is_object()) throw CheckpointError("checkpoint metadata must be a JSON object");
  nlohmann::json header = meta;
  header["format_version"] = kCheckpointFormatVersion;
  std::vector<std::uint8_t> blob;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    table.push_back({{"name", name}, {"rows", t->rows}, {"cols", t->cols}, {"offset", blob.size()}});
    append_floats(blob, *t);
  }
  header["tensors"] = std::move(table);
  header["blob_bytes"] = blob.size();
  header["blob_sha256"] = sha256_hex(blob);
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta, const nn::ParamSet& params) {
  std::vector<std::pair<std::string, const nn::Tensor*>> tensors;
  for (const auto& [name, v] : params.items()) tensors.emplace_back(name, &v.value());
  write_checkpoint(path, meta, tensors);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " (" + path.string() + ")";
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("bad magic or truncated header" + where);
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  const std::size_t header_start = sizeof(kMagic) + sizeof(len);
  if (len > bytes.size() - header_start) throw CheckpointError("truncated header" + where);

  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_start),
                                      bytes.begin() + static_cast<std::ptrdiff_t>(header_start + len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt header: ") + e.what() + where);
  }
  if (!ck.header.is_object() || !ck.header.contains("format_version")) {
    throw CheckpointError("header missing field format_version" + where);
  }
  if (ck.header["format_version"] != kCheckpointFormatVersion) {
    throw CheckpointError("unsupported format_version " + ck.header["format_version"].dump() + where);
  }
  const std::size_t blob_start = header_start + len;
  const std::size_t blob_bytes = ck.header.value("blob_bytes", std::size_t{0});
  if (bytes.size() - blob_start != blob_bytes) {
    throw CheckpointError("truncated blob: expected " + std::to_string(blob_bytes) + " bytes, found " +
                          std::to_string(bytes.size() - blob_start) + where);
  }
  std::span<const std::uint8_t> blob(bytes.data() + blob_start, blob_bytes);
  if (sha256_hex(blob) != ck.header.value("blob_sha256", std::string())) {
    throw CheckpointError("field blob_sha256 does not match payload" + where);
  }
  for (const auto& entry : ck.header.at("tensors")) {
    const int rows = entry.at("rows");
    const int cols = entry.at("cols");
    const std::size_t off = entry.at("offset");
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    if (off + count * sizeof(float) > blob.size()) {
      throw CheckpointError("tensor " + entry.at("name").get<std::string>() + " exceeds blob" + where);
    }
    nn::Tensor t(rows, cols);
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, blob.data() + off + i * sizeof(float), sizeof(float));
      t.data[i] = f;
    }
    ck.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void load_params(const Checkpoint& ckpt, nn::ParamSet& params) {
  for (const auto& [name, var] : params.items()) {
    const nn::Tensor& src = ckpt.tensor(name);
    nn::Var v = var;
    if (!src.same_shape(v.value())) {
      throw CheckpointError("tensor " + name + " has shape " + src.shape_str() + ", expected " +
                            v.value().shape_str());
    }
    v.mutable_value() = src;
  }
  if (ckpt.tensors.size() != params.items().size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.items().size()));
  }
}

std::string params_hash(const nn::ParamSet& params) {
  Sha256 h;
  std::vector<std::uint8_t> buf;
  for (const auto& [name, v] : params.items()) {
    h.update(name);
    const std::string shape = v.value().shape_str();
    h.update(shape);
    buf.clear();
    append_floats(buf, v.value());
    h.update(buf);
  }
  return h.hex();
}

}  // namespace dipt
