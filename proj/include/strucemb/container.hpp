#ifndef STRUCEMB_CONTAINER_HPP
#define STRUCEMB_CONTAINER_HPP

// Tensor container shared by weight files and persisted context caches.
//
//   "SEMB1"                      5 bytes magic
//   u32 little-endian            header length H
//   H bytes JSON                 {"meta": {...},
//                                 "tensors": [{"name", "shape", "offset"}]}
//   payload                      row-major little-endian float32; each
//                                tensor's offset is relative to payload start

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "strucemb/error.hpp"

namespace strucemb {

inline constexpr std::string_view kContainerMagic = "SEMB1";

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct TensorFile {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_container(const TensorFile& file) {
  nlohmann::json header;
  header["meta"] = file.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : file.tensors) {
    if (t.data.size() != t.element_count())
      fail(ErrorCode::shape_mismatch, "tensor '" + t.name + "' data size does not match its shape");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += 4 * t.data.size();
  }
  const std::string header_text = header.dump();

  std::string out(kContainerMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  out.reserve(out.size() + offset);
  for (const auto& t : file.tensors)
    for (float v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline TensorFile decode_container(std::string_view bytes) {
  if (bytes.size() < kContainerMagic.size() ||
      bytes.substr(0, kContainerMagic.size()) != kContainerMagic)
    fail(ErrorCode::bad_magic, "not a SEMB1 container");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = kContainerMagic.size();
  if (bytes.size() < pos + 4) fail(ErrorCode::truncated, "container header length missing");
  const std::uint32_t header_len = detail::get_u32(base + pos);
  pos += 4;
  if (bytes.size() < pos + header_len) fail(ErrorCode::truncated, "container header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_record, std::string("container header is not valid JSON: ") + e.what());
  }
  pos += header_len;
  const std::size_t payload_size = bytes.size() - pos;

  TensorFile file;
  try {
    file.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = t.element_count();
      if (offset + 4 * static_cast<std::uint64_t>(count) > payload_size)
        fail(ErrorCode::truncated, "payload truncated in tensor '" + t.name + "'");
      t.data.resize(count);
      const unsigned char* src = base + pos + offset;
      for (std::size_t i = 0; i < count; ++i)
        t.data[i] = std::bit_cast<float>(detail::get_u32(src + 4 * i));
      file.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_record, std::string("container directory malformed: ") + e.what());
  }
  return file;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "short write to " + path.string());
}

inline void write_container(const std::filesystem::path& path, const TensorFile& file) {
  write_file_bytes(path, encode_container(file));
}

inline TensorFile read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

}  // namespace strucemb

#endif  // STRUCEMB_CONTAINER_HPP
