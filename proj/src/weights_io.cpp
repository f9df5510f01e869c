#include "cdl/weights_io.hpp"

#include <fstream>
#include <limits>

#include "cdl/binary_io.hpp"
#include "cdl/error.hpp"

namespace cdl {

using namespace binio;

void write_weights(std::ostream& out, std::span<const NamedTensor> entries) {
  CDL_REQUIRE(entries.size() <= std::numeric_limits<std::uint32_t>::max(), "too many weight entries");
  out.write("CDLW", 4);
  put_le<std::uint16_t>(out, kWeightsVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const NamedTensor& e : entries) {
    CDL_REQUIRE(e.name.size() <= 0xFFFF, "weight name too long: " + e.name);
    CDL_REQUIRE(e.value.rank() <= 0xFF, "rank too large: " + e.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_le<std::uint8_t>(out, 0);  // f64
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (int d : e.value.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (const NamedTensor& e : entries)
    for (double v : e.value.values()) put_f64(out, v);
  if (!out) throw FormatError("write failed");
}

std::vector<NamedTensor> read_weights(std::istream& in) {
  expect_magic(in, "CDLW");
  const auto version = get_le<std::uint16_t>(in);
  if (version != kWeightsVersion) throw FormatError("unsupported CDLW version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(in);
  std::vector<NamedTensor> entries;
  std::vector<Shape> shapes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated entry name");
    const auto dtype = get_le<std::uint8_t>(in);
    if (dtype != 0) throw FormatError("unsupported dtype " + std::to_string(dtype) + " for " + name);
    const auto rank = get_le<std::uint8_t>(in);
    Shape shape;
    for (int r = 0; r < rank; ++r) {
      const auto d = get_le<std::uint32_t>(in);
      if (d == 0 || d > 1u << 28) throw FormatError("bad dimension in " + name);
      shape.push_back(static_cast<int>(d));
    }
    entries.push_back({std::move(name), Tensor()});
    shapes.push_back(std::move(shape));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::vector<double> data(shape_numel(shapes[i]));
    for (double& v : data) v = get_f64(in);
    entries[i].value = Tensor(shapes[i], std::move(data));
  }
  return entries;
}

void save_weights(const std::filesystem::path& path, std::span<const NamedTensor> entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_weights(out, entries);
}

std::vector<NamedTensor> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_weights(in);
}

const Tensor& find_entry(std::span<const NamedTensor> entries, const std::string& name) {
  for (const NamedTensor& e : entries)
    if (e.name == name) return e.value;
  throw FormatError("missing weight entry " + name);
}

bool has_entry(std::span<const NamedTensor> entries, const std::string& name) {
  for (const NamedTensor& e : entries)
    if (e.name == name) return true;
  return false;
}

}  // namespace cdl
