#pragma once

// Tensor file format: one line of JSON header followed by the payload.
//
//   {"byte_order":"little","dtype":"float64","name":"p3","shape":[8,24,24]}\n
//   <numel * 8 bytes, IEEE-754 binary64, little-endian, row-major>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "rcnet/tensor.hpp"

namespace rcnet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  nlohmann::json header{{"name", name},
                        {"shape", t.shape()},
                        {"dtype", "float64"},
                        {"byte_order", "little"}};
  os << header.dump() << '\n';
  for (double v : t.data()) {
    std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
  if (!os) throw std::runtime_error("write_tensor: stream failure writing '" + name + "'");
}

inline NamedTensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_tensor: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("read_tensor: malformed header: ") + e.what());
  }
  if (header.value("dtype", "") != "float64" || header.value("byte_order", "") != "little") {
    throw std::runtime_error("read_tensor: unsupported dtype or byte order");
  }
  Shape shape = header.at("shape").get<Shape>();
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) {
    char buf[8];
    if (!is.read(buf, 8)) throw std::runtime_error("read_tensor: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(detail::to_little_endian(bits));
  }
  return {header.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))};
}

inline void save_tensor(const std::filesystem::path& path, const std::string& name,
                        const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path.string());
  write_tensor(os, name, t);
}

inline NamedTensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace rcnet
