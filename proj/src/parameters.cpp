#include "msfanet/parameters.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "msfanet/errors.hpp"

namespace msfa {

std::string to_string(InitTag tag) {
  switch (tag) {
    case InitTag::pretrained: return "pretrained";
    case InitTag::gaussian: return "gaussian";
    case InitTag::ones: return "ones";
    case InitTag::zeros: return "zeros";
  }
  return "unknown";
}

namespace {

constexpr std::array<char, 8> kArchiveMagic{'M', 'S', 'F', 'A', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kArchiveVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw LoadError("tensor archive truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor_archive(std::ostream& out, const TensorMap& tensors) {
  out.write(kArchiveMagic.data(), kArchiveMagic.size());
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  std::vector<char> buf;
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    buf.resize(t.size() * 4);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(t[i]);
      for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
}

TensorMap read_tensor_archive(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kArchiveMagic) throw LoadError("not a tensor archive");
  const std::uint32_t version = get_u32(in);
  if (version != kArchiveVersion) throw LoadError("unsupported tensor archive version " + std::to_string(version));
  const std::uint32_t count = get_u32(in);
  TensorMap out;
  std::vector<unsigned char> buf;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = get_u32(in);
    if (len > 4096) throw LoadError("tensor archive: implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw LoadError("tensor archive truncated");
    const std::uint32_t rank = get_u32(in);
    if (rank > 8) throw LoadError("tensor archive: implausible rank for '" + name + "'");
    std::vector<int> shape(rank);
    std::size_t elems = 1;
    for (auto& d : shape) {
      d = static_cast<int>(get_u32(in));
      if (d < 0) throw LoadError("tensor archive: negative dimension in '" + name + "'");
      elems *= static_cast<std::size_t>(d);
    }
    if (elems > (std::size_t{1} << 31)) throw LoadError("tensor archive: implausible size for '" + name + "'");
    Tensor<float> t(shape);
    buf.resize(elems * 4);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw LoadError("tensor archive truncated in '" + name + "'");
    }
    for (std::size_t i = 0; i < elems; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
      t[i] = std::bit_cast<float>(bits);
    }
    if (!out.emplace(std::move(name), std::move(t)).second) throw LoadError("tensor archive: duplicate name");
  }
  return out;
}

void save_tensor_archive(const std::filesystem::path& path, const TensorMap& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  write_tensor_archive(out, tensors);
  if (!out) throw ExportError("cannot write tensor archive " + path.string());
}

TensorMap load_tensor_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open tensor archive " + path.string());
  return read_tensor_archive(in);
}

}  // namespace msfa
