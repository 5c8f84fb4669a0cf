#pragma once

// Checkpoints are a pair of files:
//   <stem>.layout  text, one block per line: name,shape,offset  (shape like 2x16)
//   <stem>.bin     the flat values as raw little-endian IEEE-754 doubles

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "flatmatch/error.hpp"
#include "flatmatch/param_vector.hpp"

namespace flatmatch {

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape_token(const std::string& tok) {
  Shape s;
  std::stringstream ss(tok);
  std::string part;
  while (std::getline(ss, part, 'x')) s.push_back(static_cast<std::size_t>(std::stoull(part)));
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& stem, const ParamVector& theta) {
  std::ofstream manifest(stem.string() + ".layout");
  if (!manifest) throw std::runtime_error("cannot write " + stem.string() + ".layout");
  for (const auto& e : theta.layout().entries())
    manifest << e.name << ',' << detail::shape_token(e.shape) << ',' << e.offset << '\n';

  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + stem.string() + ".bin");
  for (double v : theta.values()) {
    const auto bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(v));
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    bin.write(bytes, 8);
  }
}

inline ParamVector load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream manifest(stem.string() + ".layout");
  if (!manifest) throw std::runtime_error("cannot read " + stem.string() + ".layout");
  std::vector<std::pair<std::string, Shape>> blocks;
  std::vector<std::size_t> offsets;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, shape, offset;
    if (!std::getline(ss, name, ',') || !std::getline(ss, shape, ',') || !std::getline(ss, offset)) {
      throw ContractError("malformed layout line: " + line);
    }
    blocks.emplace_back(name, detail::parse_shape_token(shape));
    offsets.push_back(static_cast<std::size_t>(std::stoull(offset)));
  }
  auto layout = std::make_shared<const Layout>(blocks);
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    if (layout->entries()[i].offset != offsets[i]) {
      throw ContractError("layout offsets are not contiguous at block " + layout->entries()[i].name);
    }
  }

  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + stem.string() + ".bin");
  std::vector<double> values(layout->total());
  for (auto& v : values) {
    char bytes[8];
    if (!bin.read(bytes, 8)) throw ContractError("checkpoint value file is shorter than its layout");
    std::uint64_t bits;
    std::memcpy(&bits, bytes, 8);
    v = std::bit_cast<double>(detail::to_little_endian(bits));
  }
  if (bin.peek() != std::char_traits<char>::eof()) {
    throw ContractError("checkpoint value file is longer than its layout");
  }
  return ParamVector(std::move(layout), std::move(values));
}

}  // namespace flatmatch
