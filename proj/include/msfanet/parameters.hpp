#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>

#include "msfanet/tensor.hpp"

namespace msfa {

/// How a parameter received its initial value.
enum class InitTag { pretrained, gaussian, ones, zeros };

std::string to_string(InitTag tag);

/// Named learnable tensors. Iteration order (and therefore serialization
/// order and RNG draw order at init) is the lexicographic name order.
template <typename T>
struct ParameterStore {
  std::map<std::string, Tensor<T>, std::less<>> tensors;
  std::map<std::string, InitTag, std::less<>> tags;

  bool contains(std::string_view name) const { return tensors.find(name) != tensors.end(); }

  Tensor<T>& at(std::string_view name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }
  const Tensor<T>& at(std::string_view name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  /// Same names and shapes, all zeros (gradient accumulators, optimizer moments).
  ParameterStore zeros_like() const {
    ParameterStore out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, Tensor<T>(t.shape()));
    out.tags = tags;
    return out;
  }

  void fill(T v) {
    for (auto& [_, t] : tensors) t.fill(v);
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    out.tags = tags;
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.tensors == b.tensors; }
};

// ---------------------------------------------------------------------------
// Named tensor archive: the on-disk container for pretrained backbones and
// the tensor sections of checkpoints.
//
//   "MSFATNSR" | u32 version (1) | u32 count |
//   count x { u32 name_len | name | u32 rank | i32 dims[rank] | f32 data[] }
//
// All integers and floats are little-endian.

using TensorMap = std::map<std::string, Tensor<float>, std::less<>>;

void write_tensor_archive(std::ostream& out, const TensorMap& tensors);
TensorMap read_tensor_archive(std::istream& in);
void save_tensor_archive(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_tensor_archive(const std::filesystem::path& path);

}  // namespace msfa
