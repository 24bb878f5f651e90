#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dana/tensor/tensor.hpp"

namespace dana::detector {

inline constexpr char kCheckpointMagic[9] = "DANACKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout (all integers and payloads little-endian):
///   magic[8] | u32 version | u64 config hash | u64 tensor count
///   per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f64 payload (row-major)
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::map<std::string, Tensor> tensors;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes atomically (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Row `position` of an M x N attention matrix as an h x w gray image,
/// min-max scaled to [0, 255]; a constant row maps to mid gray (128).
std::vector<std::uint8_t> attention_image(const Tensor& attention, std::size_t position, std::size_t h,
                                          std::size_t w);

}  // namespace dana::detector
