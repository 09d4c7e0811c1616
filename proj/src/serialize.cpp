#include "lab/serialize.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace lab {

namespace {
constexpr char kMagic[4] = {'L', 'A', 'T', 'B'};
constexpr uint32_t kVersion = 1;
}  // namespace

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

float read_f32(std::istream& is) {
  const uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

void save_params(std::ostream& os, const NamedParams& params) {
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  for (const auto& [name, tensor] : params) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = tensor.shape();
    write_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_u32(os, static_cast<uint32_t>(d));
    auto& data = const_cast<Tensor&>(tensor).data();
    for (real& v : data) {
      const float f = static_cast<float>(v);
      v = static_cast<real>(f);  // keep live model equal to the stored one
      write_f32(os, f);
    }
  }
}

void load_params(std::istream& is, const NamedParams& params) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, tensor] : params) by_name.emplace(name, tensor);
  std::map<std::string, bool> seen;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated name");
    const uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    size_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int>(read_u32(is));
      count *= static_cast<size_t>(shape[i]);
    }
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
    if (it->second.shape() != shape) {
      std::ostringstream msg;
      msg << "checkpoint: shape mismatch for '" << name << "'";
      throw std::runtime_error(msg.str());
    }
    auto& data = it->second.data();
    for (size_t i = 0; i < count; ++i) {
      const float f = read_f32(is);
      if (!std::isfinite(f))
        throw NumericError("checkpoint: non-finite value in '" + name + "'");
      data[i] = static_cast<real>(f);
    }
    seen[name] = true;
  }
  for (const auto& [name, tensor] : params)
    if (!seen.count(name))
      throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
}

void write_text_block(std::ostream& os, const std::string& text) {
  write_u32(os, static_cast<uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_text_block(std::istream& is) {
  const uint32_t len = read_u32(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw std::runtime_error("checkpoint: truncated text block");
  return text;
}

std::vector<unsigned char> params_bytes(const NamedParams& params) {
  std::ostringstream os(std::ios::binary);
  save_params(os, params);
  const std::string s = os.str();
  return std::vector<unsigned char>(s.begin(), s.end());
}

}  // namespace lab
