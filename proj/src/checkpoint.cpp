#include "mop/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mop {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host byte order");

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot open checkpoint " + path.string());
  }
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::size_t element_size(Precision p) { return p == Precision::f32 ? 4 : 8; }

template <typename Real>
constexpr Precision precision_of() {
  return sizeof(Real) == 4 ? Precision::f32 : Precision::f64;
}

CheckpointHeader parse_header(const std::string& bytes, std::size_t& header_end) {
  header_end = bytes.find('\0');
  if (header_end == std::string::npos) {
    throw CheckpointError("checkpoint truncated: no header terminator");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header_end));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) {
    throw CheckpointError("not a checkpoint file (format tag missing)");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version");
  }
  CheckpointHeader h;
  try {
    h.config = model_config_from_json(j.at("config"));
    h.precision = parse_precision(j.at("precision").get<std::string>());
    h.step = j.at("step").get<std::size_t>();
    h.has_optimizer = j.value("optimizer", false);
    h.metadata = j.contains("metadata") ? nlohmann::ordered_json(j["metadata"])
                                        : nlohmann::ordered_json::object();
    for (const auto& t : j.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::size_t>();
      e.precision = parse_precision(t.at("precision").get<std::string>());
      h.tensors.push_back(std::move(e));
    }
    h.blob_bytes = j.at("blob_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  return h;
}

template <typename Real>
void copy_out(const std::string& bytes, std::size_t blob_start, const TensorEntry& entry,
              Tensor<Real>& dst) {
  if (entry.shape != dst.shape()) {
    throw CheckpointError("tensor " + entry.name + " has shape " + shape_string(entry.shape) +
                          " but the config implies " + shape_string(dst.shape()));
  }
  std::memcpy(dst.ptr(), bytes.data() + blob_start + entry.offset, dst.size() * sizeof(Real));
}

}  // namespace

std::uint32_t crc32_bytes(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Real>& ckpt) {
  const Precision precision = precision_of<Real>();
  std::vector<std::pair<std::string, const Tensor<Real>*>> tensors;
  ckpt.weights.for_each(
      [&](const std::string& name, const Tensor<Real>& t) { tensors.emplace_back(name, &t); });
  if (ckpt.adam) {
    ckpt.adam->m.for_each([&](const std::string& name, const Tensor<Real>& t) {
      tensors.emplace_back("adam.m." + name, &t);
    });
    ckpt.adam->v.for_each([&](const std::string& name, const Tensor<Real>& t) {
      tensors.emplace_back("adam.v." + name, &t);
    });
  }

  nlohmann::ordered_json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["config"] = to_json(ckpt.weights.config);
  header["precision"] = std::string(precision_name(precision));
  header["step"] = ckpt.step;
  header["optimizer"] = ckpt.adam.has_value();
  header["adam_t"] = ckpt.adam ? ckpt.adam->t : 0;
  header["metadata"] = ckpt.metadata;
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t->shape();
    e["offset"] = offset;
    e["precision"] = std::string(precision_name(precision));
    dir.push_back(std::move(e));
    offset += t->size() * sizeof(Real);
  }
  header["tensors"] = std::move(dir);
  header["blob_bytes"] = offset;

  std::string blob(offset, '\0');
  for (std::size_t i = 0, at = 0; i < tensors.size(); ++i) {
    const auto* t = tensors[i].second;
    std::memcpy(blob.data() + at, t->ptr(), t->size() * sizeof(Real));
    at += t->size() * sizeof(Real);
  }
  const std::uint32_t crc = crc32_bytes(blob.data(), blob.size());
  unsigned char crc_bytes[4];
  for (int i = 0; i < 4; ++i) {
    crc_bytes[i] = static_cast<unsigned char>((crc >> (8 * i)) & 0xffu);
  }

  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw CheckpointError("cannot write checkpoint " + path.string());
    }
    const std::string text = header.dump(1);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.put('\0');
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    out.write(reinterpret_cast<const char*>(crc_bytes), 4);
    if (!out) {
      throw CheckpointError("short write on checkpoint " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot open checkpoint " + path.string());
  }
  std::string bytes;
  char c;
  while (in.get(c)) {
    bytes.push_back(c);
    if (c == '\0') {
      break;
    }
  }
  std::size_t end = 0;
  return parse_header(bytes, end);
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t header_end = 0;
  const CheckpointHeader h = parse_header(bytes, header_end);
  const std::size_t blob_start = header_end + 1;
  if (bytes.size() != blob_start + h.blob_bytes + 4) {
    throw CheckpointError("checkpoint " + path.string() + " truncated or padded: expected " +
                          std::to_string(blob_start + h.blob_bytes + 4) + " bytes, found " +
                          std::to_string(bytes.size()));
  }
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<std::uint32_t>(
                  static_cast<unsigned char>(bytes[blob_start + h.blob_bytes + i]))
              << (8 * i);
  }
  if (crc32_bytes(bytes.data() + blob_start, h.blob_bytes) != stored) {
    throw CheckpointError("checkpoint " + path.string() + " failed checksum");
  }
  if (h.precision != precision_of<Real>()) {
    throw CheckpointError("checkpoint precision is " + std::string(precision_name(h.precision)) +
                          ", requested " + std::string(precision_name(precision_of<Real>())));
  }

  Checkpoint<Real> ckpt;
  ckpt.weights = zero_weights<Real>(h.config);
  ckpt.step = h.step;
  ckpt.metadata = h.metadata;
  if (h.has_optimizer) {
    ckpt.adam = AdamState<Real>{zero_weights<Real>(h.config), zero_weights<Real>(h.config), 0};
  }
  std::vector<std::pair<std::string, Tensor<Real>*>> expected;
  ckpt.weights.for_each(
      [&](const std::string& name, Tensor<Real>& t) { expected.emplace_back(name, &t); });
  if (ckpt.adam) {
    ckpt.adam->m.for_each(
        [&](const std::string& name, Tensor<Real>& t) { expected.emplace_back("adam.m." + name, &t); });
    ckpt.adam->v.for_each(
        [&](const std::string& name, Tensor<Real>& t) { expected.emplace_back("adam.v." + name, &t); });
  }
  if (expected.size() != h.tensors.size()) {
    throw CheckpointError("checkpoint lists " + std::to_string(h.tensors.size()) +
                          " tensors, config implies " + std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const TensorEntry& e = h.tensors[i];
    if (e.name != expected[i].first) {
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is '" + e.name +
                            "', expected '" + expected[i].first + "'");
    }
    if (e.offset + shape_size(e.shape) * element_size(e.precision) > h.blob_bytes) {
      throw CheckpointError("tensor " + e.name + " extends past the blob");
    }
    copy_out(bytes, blob_start, e, *expected[i].second);
  }
  if (ckpt.adam) {
    const auto j = nlohmann::json::parse(bytes.begin(),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(header_end));
    ckpt.adam->t = j.value("adam_t", std::size_t{0});
  }
  return ckpt;
}

LoadedModel load_model(const std::filesystem::path& path) {
  const CheckpointHeader h = read_checkpoint_header(path);
  if (h.precision == Precision::f32) {
    return LoadedModel(load_checkpoint<float>(path).weights);
  }
  return LoadedModel(load_checkpoint<double>(path).weights);
}

template void save_checkpoint<float>(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace mop
