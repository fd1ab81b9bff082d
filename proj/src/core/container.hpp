#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace mergcn {

// "MERT" tensor container, version 1, little-endian:
//   magic "MERT" | u32 version | u32 count |
//   per entry: u16 name_len | name (UTF-8) | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<std::uint8_t> encode_container(std::span<const NamedTensor> entries);
std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes);

void write_container(const std::filesystem::path& path, std::span<const NamedTensor> entries);
std::vector<NamedTensor> read_container(const std::filesystem::path& path);

const Tensor* find_entry(std::span<const NamedTensor> entries, const std::string& name);

}  // namespace mergcn
