#pragma once

// SPWT container layout (all integers little-endian):
//   [0,4)    magic "SPWT"
//   [4,8)    u32 format version
//   [8,16)   u64 header length H
//   [16,16+H) UTF-8 JSON header:
//              {"entries":[{"name","dtype","shape","offset","length"}...],"metadata":{...}}
//   zero padding up to the next multiple of 64: start of the payload section
//   payload blobs; each "offset" is relative to the payload start and a multiple of 64.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spwt/errors.hpp"

namespace spwt {

inline constexpr char kContainerMagic[4] = {'S', 'P', 'W', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlignment = 64;

enum class DType { f32, f64, u8 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

inline std::string to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "u8") return DType::u8;
  throw FormatError("container: unknown dtype '" + s + "'");
}

namespace detail {

template <typename T>
T from_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<std::uint8_t*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

inline std::size_t align_up(std::size_t n) { return (n + kContainerAlignment - 1) / kContainerAlignment * kContainerAlignment; }

}  // namespace detail

// One named tensor with its raw little-endian payload.
struct Tensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  static Tensor from_f64(std::string name, std::vector<std::size_t> shape, std::span<const double> values) {
    Tensor t{std::move(name), DType::f64, std::move(shape), {}};
    if (t.element_count() != values.size()) throw std::invalid_argument("Tensor: shape does not match value count");
    t.bytes.reserve(values.size() * 8);
    for (double v : values) detail::append_le(t.bytes, v);
    return t;
  }

  static Tensor from_f32(std::string name, std::vector<std::size_t> shape, std::span<const float> values) {
    Tensor t{std::move(name), DType::f32, std::move(shape), {}};
    if (t.element_count() != values.size()) throw std::invalid_argument("Tensor: shape does not match value count");
    for (float v : values) detail::append_le(t.bytes, v);
    return t;
  }

  static Tensor from_u8(std::string name, std::vector<std::size_t> shape, std::span<const std::uint8_t> values) {
    Tensor t{std::move(name), DType::u8, std::move(shape), {values.begin(), values.end()}};
    if (t.element_count() != values.size()) throw std::invalid_argument("Tensor: shape does not match value count");
    return t;
  }

  // Floating-point payloads promoted to double.
  std::vector<double> as_f64() const {
    const std::size_t n = element_count();
    std::vector<double> out(n);
    switch (dtype) {
      case DType::f64:
        for (std::size_t i = 0; i < n; ++i) out[i] = detail::from_le<double>(bytes.data() + 8 * i);
        break;
      case DType::f32:
        for (std::size_t i = 0; i < n; ++i) out[i] = detail::from_le<float>(bytes.data() + 4 * i);
        break;
      case DType::u8:
        for (std::size_t i = 0; i < n; ++i) out[i] = bytes[i];
        break;
    }
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct ContainerFile {
  std::vector<Tensor> entries;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  const Tensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError("container: missing entry '" + name + "'");
  }
};

inline std::vector<std::uint8_t> encode_container(const ContainerFile& c) {
  nlohmann::json header;
  header["entries"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : c.entries) {
    if (e.bytes.size() != e.element_count() * dtype_size(e.dtype))
      throw std::invalid_argument("container: entry '" + e.name + "' payload does not match shape and dtype");
    header["entries"].push_back({{"name", e.name},
                                 {"dtype", to_string(e.dtype)},
                                 {"shape", e.shape},
                                 {"offset", offset},
                                 {"length", e.bytes.size()}});
    offset = detail::align_up(offset + e.bytes.size());
  }
  header["metadata"] = c.metadata.is_null() ? nlohmann::json::object() : c.metadata;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  detail::append_le<std::uint32_t>(out, kContainerVersion);
  detail::append_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload = detail::align_up(out.size());
  out.resize(payload, 0);
  for (const auto& e : c.entries) {
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
    if (&e != &c.entries.back()) out.resize(detail::align_up(out.size()), 0);
  }
  return out;
}

inline ContainerFile decode_container(std::span<const std::uint8_t> data) {
  if (data.size() < 16 || !std::equal(kContainerMagic, kContainerMagic + 4, data.begin()))
    throw FormatError("container: bad magic bytes");
  const auto version = detail::from_le<std::uint32_t>(data.data() + 4);
  if (version != kContainerVersion) throw FormatError("container: unsupported version " + std::to_string(version));
  const auto header_len = detail::from_le<std::uint64_t>(data.data() + 8);
  if (header_len > data.size() - 16) throw FormatError("container: header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.begin() + 16, data.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: malformed JSON header: ") + e.what());
  }
  const std::size_t payload = detail::align_up(16 + header_len);
  if (payload > data.size() && !(header.contains("entries") && header["entries"].empty()))
    throw FormatError("container: payload section is missing");

  ContainerFile c;
  try {
    if (!header.is_object() || !header.contains("entries") || !header["entries"].is_array())
      throw FormatError("container: header has no entry table");
    if (header.contains("metadata")) c.metadata = header["metadata"];
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (const auto& je : header["entries"]) {
      Tensor t;
      t.name = je.at("name").get<std::string>();
      t.dtype = parse_dtype(je.at("dtype").get<std::string>());
      t.shape = je.at("shape").get<std::vector<std::size_t>>();
      const auto offset = je.at("offset").get<std::size_t>();
      const auto length = je.at("length").get<std::size_t>();
      if (length != t.element_count() * dtype_size(t.dtype))
        throw FormatError("container: entry '" + t.name + "' length does not match shape x dtype");
      if (offset % kContainerAlignment != 0) throw FormatError("container: entry '" + t.name + "' is misaligned");
      if (payload + offset + length > data.size() || offset + length < offset)
        throw FormatError("container: entry '" + t.name + "' lies outside the file");
      ranges.emplace_back(offset, offset + length);
      t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(payload + offset),
                     data.begin() + static_cast<std::ptrdiff_t>(payload + offset + length));
      c.entries.push_back(std::move(t));
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
      if (ranges[i].first < ranges[i - 1].second) throw FormatError("container: overlapping entries");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: invalid entry table: ") + e.what());
  }
  return c;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes to a sibling temporary file, then renames over the target.
inline void write_bytes_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_bytes_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline ContainerFile read_container(const std::filesystem::path& path) { return decode_container(read_bytes(path)); }

inline void write_container(const std::filesystem::path& path, const ContainerFile& c) {
  write_bytes_atomic(path, encode_container(c));
}

}  // namespace spwt
