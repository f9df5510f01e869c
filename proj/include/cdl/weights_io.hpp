#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cdl/tensor.hpp"

namespace cdl {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// "CDLW" container: magic, u16 version, u32 entry count, then one manifest
// record per entry (u16 name length, name, u8 dtype, u8 rank, u32 dims) and
// finally the raw f64 arrays in manifest order. Little-endian throughout.
inline constexpr std::uint16_t kWeightsVersion = 1;

void write_weights(std::ostream& out, std::span<const NamedTensor> entries);
std::vector<NamedTensor> read_weights(std::istream& in);

void save_weights(const std::filesystem::path& path, std::span<const NamedTensor> entries);
std::vector<NamedTensor> load_weights(const std::filesystem::path& path);

// Entry lookup; throws FormatError naming the missing entry.
const Tensor& find_entry(std::span<const NamedTensor> entries, const std::string& name);
bool has_entry(std::span<const NamedTensor> entries, const std::string& name);

}  // namespace cdl
