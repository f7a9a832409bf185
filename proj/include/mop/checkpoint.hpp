#pragma once

// Checkpoint layout: UTF-8 JSON header, a '\0' byte, the little-endian tensor
// blob, then the CRC32 of the blob as four little-endian bytes.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mop/model.hpp"

namespace mop {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointFormat = "mop-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// Adam first and second moments, stored with the same layout as the weights.
template <typename Real>
struct AdamState {
  TransformerWeights<Real> m;
  TransformerWeights<Real> v;
  std::size_t t = 0;
};

template <typename Real>
struct Checkpoint {
  TransformerWeights<Real> weights;
  std::optional<AdamState<Real>> adam;
  std::size_t step = 0;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
};

struct TensorEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes from the start of the blob
  Precision precision = Precision::f32;
};

struct CheckpointHeader {
  ModelConfig config;
  Precision precision = Precision::f32;
  std::size_t step = 0;
  bool has_optimizer = false;
  nlohmann::ordered_json metadata;
  std::vector<TensorEntry> tensors;
  std::size_t blob_bytes = 0;
};

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Real>& ckpt);

// Parses the header only; the blob is not read or verified.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

// Throws CheckpointError if the file precision differs from Real.
template <typename Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path);

// Weights only, in whichever precision the file holds.
LoadedModel load_model(const std::filesystem::path& path);

std::uint32_t crc32_bytes(const void* data, std::size_t size);

}  // namespace mop
