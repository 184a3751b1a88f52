#include "niwt/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "niwt/error.hpp"

namespace niwt::io {

static_assert(std::endian::native == std::endian::little,
              "container payloads are written in host order, which must be little-endian");

namespace {

constexpr char kMagic[4] = {'N', 'I', 'W', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), ErrorCode::kIo, "truncated container: " + path.string());
  return v;
}

}  // namespace

const Array& Container::tensor(const std::string& name) const {
  for (const auto& [n, a] : tensors) {
    if (n == name) return a;
  }
  fail(ErrorCode::kIo, "container has no tensor named '" + name + "'");
}

const ByteArray& Container::byte_array(const std::string& name) const {
  for (const auto& [n, a] : bytes) {
    if (n == name) return a;
  }
  fail(ErrorCode::kIo, "container has no byte array named '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : c.tensors) {
    const std::uint64_t len = a.size() * sizeof(double);
    table.push_back({{"name", name}, {"dtype", "f64"}, {"shape", a.shape},
                     {"offset", offset}, {"bytes", len}});
    offset += len;
  }
  for (const auto& [name, a] : c.bytes) {
    const std::uint64_t len = a.data.size();
    table.push_back({{"name", name}, {"dtype", "u8"}, {"shape", a.shape},
                     {"offset", offset}, {"bytes", len}});
    offset += len;
  }
  const nlohmann::json header{{"meta", c.meta}, {"tensors", table}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kContainerVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, a] : c.tensors) {
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.size() * sizeof(double)));
  }
  for (const auto& [name, a] : c.bytes) {
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size()));
  }
  require(static_cast<bool>(os), ErrorCode::kIo, "write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  require(is && std::memcmp(magic, kMagic, 4) == 0, ErrorCode::kIo,
          "not a NIWT container: " + path.string());
  const auto version = get<std::uint32_t>(is, path);
  require(version == kContainerVersion, ErrorCode::kIo,
          "unsupported container version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(is, path);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  require(static_cast<bool>(is), ErrorCode::kIo, "truncated header: " + path.string());
  const auto header = nlohmann::json::parse(text);
  const auto payload_start = is.tellg();

  Container c;
  c.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto len = entry.at("bytes").get<std::uint64_t>();
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    const auto dtype = entry.at("dtype").get<std::string>();
    if (dtype == "f64") {
      require(len == numel(shape) * sizeof(double), ErrorCode::kIo, "bad tensor length");
      Array a(shape);
      is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(len));
      c.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(a));
    } else if (dtype == "u8") {
      require(len == numel(shape), ErrorCode::kIo, "bad byte array length");
      ByteArray a{shape, std::vector<std::uint8_t>(len)};
      is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(len));
      c.bytes.emplace_back(entry.at("name").get<std::string>(), std::move(a));
    } else {
      fail(ErrorCode::kIo, "unknown dtype '" + dtype + "'");
    }
    require(static_cast<bool>(is), ErrorCode::kIo, "truncated payload: " + path.string());
  }
  return c;
}

}  // namespace niwt::io
