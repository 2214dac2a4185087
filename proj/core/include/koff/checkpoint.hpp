#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "koff/tensor.hpp"

namespace koff {

// Named-array store shared by every artifact: a JSON manifest listing
// {name, shape, dtype, offset, bytes} and one raw little-endian blob next to
// it (manifest "x.json" -> blob "x.bin"). Round-trips are bit-exact.
class Checkpoint {
 public:
  enum class DType { kF32, kI32 };

  struct Entry {
    Shape shape;
    DType dtype = DType::kF32;
    std::vector<uint8_t> bytes;
  };

  void put(const std::string& name, const Tensor<float>& t);
  void put_f32(const std::string& name, Shape shape, const std::vector<float>& values);
  void put_i32(const std::string& name, Shape shape, const std::vector<int32_t>& values);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Entry& entry(const std::string& name) const;
  Tensor<float> get(const std::string& name) const;
  std::vector<float> get_f32(const std::string& name) const;
  std::vector<int32_t> get_i32(const std::string& name) const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;

  // Free-form string metadata (configs, provenance).
  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  void merge(const Checkpoint& other);

  void save(const std::filesystem::path& manifest) const;
  static Checkpoint load(const std::filesystem::path& manifest);
  static std::filesystem::path blob_path(const std::filesystem::path& manifest);

  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> meta_;
};

// FNV-1a 64 over bytes; used for artifact and parameter fingerprints.
uint64_t fnv1a(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(uint64_t v);

template <typename T>
uint64_t hash_tensor(const Tensor<T>& t, uint64_t seed = 0xcbf29ce484222325ULL) {
  return fnv1a(t.values().data(), t.values().size() * sizeof(T), seed);
}

}  // namespace koff
