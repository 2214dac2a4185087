#include "koff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "koff/errors.hpp"

namespace koff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in native order; big-endian hosts need byte swapping");

namespace {

const char* dtype_name(Checkpoint::DType d) { return d == Checkpoint::DType::kF32 ? "f32" : "i32"; }

Checkpoint::DType parse_dtype(const std::string& s) {
  if (s == "f32") return Checkpoint::DType::kF32;
  if (s == "i32") return Checkpoint::DType::kI32;
  throw InputError("unknown checkpoint dtype '" + s + "'");
}

template <typename V>
std::vector<uint8_t> to_bytes(const std::vector<V>& v) {
  std::vector<uint8_t> b(v.size() * sizeof(V));
  if (!b.empty()) std::memcpy(b.data(), v.data(), b.size());
  return b;
}

template <typename V>
std::vector<V> from_bytes(const std::vector<uint8_t>& b) {
  std::vector<V> v(b.size() / sizeof(V));
  if (!b.empty()) std::memcpy(v.data(), b.data(), b.size());
  return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor<float>& t) { put_f32(name, t.shape(), t.values()); }

void Checkpoint::put_f32(const std::string& name, Shape shape, const std::vector<float>& values) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("checkpoint array '" + name + "' length does not match " + shape_str(shape));
  entries_[name] = Entry{std::move(shape), DType::kF32, to_bytes(values)};
}

void Checkpoint::put_i32(const std::string& name, Shape shape, const std::vector<int32_t>& values) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("checkpoint array '" + name + "' length does not match " + shape_str(shape));
  entries_[name] = Entry{std::move(shape), DType::kI32, to_bytes(values)};
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InputError("checkpoint has no array named '" + name + "'");
  return it->second;
}

Tensor<float> Checkpoint::get(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::kF32) throw InputError("array '" + name + "' is not f32");
  return Tensor<float>::from(e.shape, from_bytes<float>(e.bytes));
}

std::vector<float> Checkpoint::get_f32(const std::string& name) const { return get(name).values(); }

std::vector<int32_t> Checkpoint::get_i32(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != DType::kI32) throw InputError("array '" + name + "' is not i32");
  return from_bytes<int32_t>(e.bytes);
}

std::vector<std::string> Checkpoint::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (auto it = entries_.lower_bound(prefix); it != entries_.end() && it->first.starts_with(prefix); ++it)
    out.push_back(it->first);
  return out;
}

void Checkpoint::merge(const Checkpoint& other) {
  for (const auto& [k, v] : other.entries_) entries_[k] = v;
  for (const auto& [k, v] : other.meta_) meta_[k] = v;
}

std::filesystem::path Checkpoint::blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

void Checkpoint::save(const std::filesystem::path& manifest) const {
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  nlohmann::ordered_json j;
  j["format"] = "koff-checkpoint-v1";
  j["blob"] = blob_path(manifest).filename().string();
  j["arrays"] = nlohmann::ordered_json::array();
  std::ofstream blob(blob_path(manifest), std::ios::binary | std::ios::trunc);
  if (!blob) throw InputError("cannot write " + blob_path(manifest).string());
  uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {
    nlohmann::ordered_json a;
    a["name"] = name;
    a["shape"] = e.shape;
    a["dtype"] = dtype_name(e.dtype);
    a["offset"] = offset;
    a["bytes"] = e.bytes.size();
    j["arrays"].push_back(a);
    blob.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    offset += e.bytes.size();
  }
  j["meta"] = meta_;
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw InputError("cannot write " + manifest.string());
  out << j.dump(1) << '\n';
}

Checkpoint Checkpoint::load(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw InputError("cannot open checkpoint manifest " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  auto bp = manifest.parent_path() / j.at("blob").get<std::string>();
  std::ifstream blob(bp, std::ios::binary);
  if (!blob) throw InputError("cannot open checkpoint blob " + bp.string());
  std::vector<uint8_t> all((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  for (const auto& a : j.at("arrays")) {
    Entry e;
    e.shape = a.at("shape").get<Shape>();
    e.dtype = parse_dtype(a.at("dtype").get<std::string>());
    auto off = a.at("offset").get<uint64_t>();
    auto n = a.at("bytes").get<uint64_t>();
    const uint64_t width = 4;
    if (off + n > all.size() || n != static_cast<uint64_t>(numel(e.shape)) * width)
      throw InputError("checkpoint array '" + a.at("name").get<std::string>() + "' is truncated or mis-sized");
    e.bytes.assign(all.begin() + static_cast<std::ptrdiff_t>(off), all.begin() + static_cast<std::ptrdiff_t>(off + n));
    ck.entries_[a.at("name").get<std::string>()] = std::move(e);
  }
  if (j.contains("meta")) ck.meta_ = j.at("meta").get<std::map<std::string, std::string>>();
  return ck;
}

uint64_t fnv1a(const void* data, size_t size, uint64_t seed) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot hash missing file " + path.string());
  std::vector<char> buf(1 << 16);
  uint64_t h = 0xcbf29ce484222325ULL;
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(buf.data(), static_cast<size_t>(in.gcount()), h);
  }
  return h;
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace koff
