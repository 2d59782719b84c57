#pragma once

// Single-file checkpoint format (little endian):
//
//   magic      8 bytes  "MLDACKPT"
//   version    u32
//   created    32 bytes UTC ISO-8601, NUL padded   <- the only non-reproducible bytes
//   meta_len   u32, followed by meta_len bytes of UTF-8 JSON
//                (network spec echo, roles, free-form extras)
//   n_sections u32
//   per section:
//     role     u32 length + bytes (g | d_e | d_d | d_s | sf_head | afc_head)
//     n_tensor u32
//     per tensor: u32 name length + name, u8 dtype (0 f32, 1 f64),
//                 u32 ndim, i64 dims[ndim], raw element bytes
//
// Tensor names are the module's stable named_parameters()/named_buffers() keys.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mlda {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointTimestampOffset = 12;
inline constexpr std::size_t kCheckpointTimestampSize = 32;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TensorDict = std::vector<std::pair<std::string, torch::Tensor>>;

struct CheckpointSection {
  std::string role;
  TensorDict tensors;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string created;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointSection> sections;

  const CheckpointSection& section(const std::string& role) const;
  bool has_section(const std::string& role) const;
};

/// Parameters followed by buffers, in registration order, cloned to CPU.
TensorDict module_state(const torch::nn::Module& module);
/// Copies `state` into the module's tensors, matching by name and shape.
void load_module_state(torch::nn::Module& module, const TensorDict& state);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// 64-bit FNV-1a over names, shapes and raw bytes of every tensor.
std::uint64_t state_hash(const TensorDict& state);
std::uint64_t parameter_hash(const torch::nn::Module& module);

/// Byte equality of two checkpoint files, ignoring the timestamp field.
bool checkpoint_bytes_equal(const std::filesystem::path& a, const std::filesystem::path& b);

std::string utc_timestamp();

}  // namespace mlda
