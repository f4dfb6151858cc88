#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "eupe/tensor.hpp"
#include "eupe/vit.hpp"

namespace eupe {

inline constexpr std::uint16_t kCheckpointMajor = 1;
inline constexpr std::uint16_t kCheckpointMinor = 0;

// Little-endian container:
//   8 bytes   magic "EUPECKPT"
//   u32       version, (major << 16) | minor
//   u64       length of the text block, then the block itself:
//             one "key=value" line per entry, keys sorted
//   u32       tensor count, then per tensor:
//             u32 name length, name bytes, u8 dtype (1 = f32),
//             u32 rank, rank x u64 dims, raw f32 values
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  void put(const std::string& name, const Tensor& t);

  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void store_vit_config(Checkpoint& ckpt, const std::string& prefix, const ViTConfig& config);
ViTConfig read_vit_config(const Checkpoint& ckpt, const std::string& prefix);

// Tensors are stored as "<prefix>.<parameter name>".
void store_encoder(Checkpoint& ckpt, const std::string& prefix, const EncoderParams& params);
// Throws ShapeMismatchError when the stored encoder differs from expected.
EncoderParams load_encoder(const Checkpoint& ckpt, const std::string& prefix, const ViTConfig* expected = nullptr);

}  // namespace eupe
