#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/common.hpp"

namespace trace {

// Flat tensor container:
//   4-byte magic | uint32 LE header length | UTF-8 JSON header | float64 LE data
// The header lists {"name","shape","offset"} per tensor, offsets in doubles
// from the start of the data block.

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

struct TensorContainer {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw InputError("tensor container: missing tensor '" + name + "'");
  }
};

namespace detail {

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

inline std::uint32_t read_u32_le(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw InputError("tensor container: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f64_le(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (auto& c : b) {
    c = static_cast<char>(bits & 0xff);
    bits >>= 8;
  }
  out.write(b.data(), 8);
}

inline double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_tensor_container(std::ostream& out, std::string_view magic, const TensorContainer& c) {
  if (magic.size() != 4) throw Error("tensor container magic must be 4 bytes");
  auto header = c.header;
  auto index = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.data.size()) throw Error("tensor '" + t.name + "' shape does not match its data");
    index.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += n;
  }
  header["tensors"] = index;
  const std::string text = header.dump();
  out.write(magic.data(), 4);
  detail::write_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : c.tensors) {
    for (double v : t.data) detail::write_f64_le(out, v);
  }
}

inline TensorContainer read_tensor_container(std::istream& in, std::string_view magic) {
  std::array<char, 4> m{};
  in.read(m.data(), 4);
  if (!in || std::string_view(m.data(), 4) != magic) {
    throw InputError("tensor container: bad magic (expected '" + std::string(magic) + "')");
  }
  const auto len = detail::read_u32_le(in);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw InputError("tensor container: truncated header");
  TensorContainer c;
  try {
    c.header = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("tensor container header: ") + e.what());
  }
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() % 8 != 0) throw InputError("tensor container: data block not a multiple of 8 bytes");
  const std::size_t total = data.size() / 8;
  for (const auto& entry : c.header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (offset + n > total) throw InputError("tensor container: tensor '" + t.name + "' out of range");
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.data[i] = detail::read_f64_le(&data[(offset + i) * 8]);
    c.tensors.push_back(std::move(t));
  }
  c.header.erase("tensors");
  return c;
}

inline void write_tensor_file(const std::string& path, std::string_view magic, const TensorContainer& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  write_tensor_container(out, magic, c);
}

inline TensorContainer read_tensor_file(const std::string& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return read_tensor_container(in, magic);
}

}  // namespace trace
