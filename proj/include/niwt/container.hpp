#pragma once

// Little-endian binary container shared by checkpoints, map files and the
// packed image file:
//
//   "NIWT" | u32 version | u64 header length | UTF-8 JSON header | payload
//
// The header carries caller metadata under "meta" and a table of tensors
// (name, dtype, shape, byte offset into the payload, byte length).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "niwt/array.hpp"

namespace niwt::io {

inline constexpr std::uint32_t kContainerVersion = 1;

struct ByteArray {
  Shape shape;
  std::vector<std::uint8_t> data;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Array>> tensors;
  std::vector<std::pair<std::string, ByteArray>> bytes;

  const Array& tensor(const std::string& name) const;
  const ByteArray& byte_array(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace niwt::io
