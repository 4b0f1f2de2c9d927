#pragma once

// Named parameter storage and the on-disk tensor checkpoint format.
//
// Checkpoint layout: 8-byte little-endian header length N, then N bytes of
// JSON {name: {shape, dtype, byte_offset}}, then the little-endian IEEE-754
// payload. byte_offset is relative to the start of the payload.

#include "ctxasr/tensor.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ctxasr {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Dtype { f32, f64 };

inline std::string_view dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline Dtype parse_dtype(std::string_view s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw std::invalid_argument("unknown dtype '" + std::string(s) + "' (expected f32 or f64)");
}

template <typename S>
constexpr Dtype dtype_of() {
  return sizeof(S) == 4 ? Dtype::f32 : Dtype::f64;
}

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;

inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return out;
}

template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> t, bool trainable) {
    if (entries_.count(name)) throw std::invalid_argument("parameter '" + name + "' already registered");
    t.set_requires_grad(trainable);
    if (trainable) trainable_.insert(name);
    return entries_.emplace(name, std::move(t)).first->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  const Tensor<S>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor<S>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  void set_trainable(const std::string& name, bool trainable) {
    auto& t = get(name);
    t.set_requires_grad(trainable);
    if (!trainable) t.zero_grad();
    if (trainable)
      trainable_.insert(name);
    else
      trainable_.erase(name);
  }

  // Marks every entry whose name starts with prefix as frozen or trainable.
  void set_trainable_prefix(std::string_view prefix, bool trainable) {
    for (auto& [name, t] : entries_)
      if (name.starts_with(prefix)) set_trainable(name, trainable);
  }

  void erase_prefix(std::string_view prefix) {
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (it->first.starts_with(prefix)) {
        trainable_.erase(it->first);
        it = entries_.erase(it);
      } else {
        ++it;
      }
    }
  }

  bool is_trainable(const std::string& name) const { return trainable_.count(name) > 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto& [name, t] : entries_) out.push_back(name);
    return out;
  }

  std::vector<std::string> trainable_names() const { return {trainable_.begin(), trainable_.end()}; }

  std::vector<std::string> frozen_names() const {
    std::vector<std::string> out;
    for (auto& [name, t] : entries_)
      if (!trainable_.count(name)) out.push_back(name);
    return out;
  }

  std::size_t count(const std::vector<std::string>& names) const {
    std::size_t n = 0;
    for (auto& name : names) n += get(name).numel();
    return n;
  }
  std::size_t trainable_count() const { return count(trainable_names()); }

  const std::map<std::string, Tensor<S>>& entries() const { return entries_; }

  // FNV-1a over names and raw values of the given entries.
  std::uint64_t checksum(const std::vector<std::string>& names) const {
    std::uint64_t h = kFnvOffset;
    for (auto& name : names) {
      h = fnv1a(name, h);
      auto d = get(name).data();
      h = fnv1a(d.data(), d.size_bytes(), h);
    }
    return h;
  }
  std::uint64_t frozen_checksum() const { return checksum(frozen_names()); }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor<S>> entries_;
  std::set<std::string> trainable_;
};

// Values read back from a checkpoint, widened to double.
struct StoredTensor {
  Shape shape;
  Dtype dtype = Dtype::f32;
  std::vector<double> values;
};

template <typename S>
void save_tensors(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, const Tensor<S>*>>& tensors, Dtype dtype) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  const std::size_t width = dtype == Dtype::f32 ? 4 : 8;
  std::size_t offset = 0;
  for (auto& [name, t] : tensors) {
    header[name] = {{"shape", t->shape()}, {"dtype", dtype_name(dtype)}, {"byte_offset", offset}};
    offset += t->numel() * width;
  }
  const std::string head = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  const std::uint64_t n = head.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (auto& [name, t] : tensors) {
    if (dtype == Dtype::f32) {
      std::vector<float> buf(t->data().begin(), t->data().end());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    } else {
      std::vector<double> buf(t->data().begin(), t->data().end());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
    }
  }
  if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
}

template <typename S>
void save_store(const std::filesystem::path& path, const ParamStore<S>& store, Dtype dtype) {
  std::vector<std::pair<std::string, const Tensor<S>*>> list;
  for (auto& [name, t] : store.entries()) list.emplace_back(name, &t);
  save_tensors(path, list, dtype);
}

inline std::map<std::string, StoredTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > (1ULL << 32)) throw CheckpointError("corrupt checkpoint header in '" + path.string() + "'");
  std::string head(n, '\0');
  in.read(head.data(), static_cast<std::streamsize>(n));
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header in '" + path.string() + "': " + e.what());
  }
  std::map<std::string, StoredTensor> out;
  for (auto& [name, meta] : header.items()) {
    StoredTensor st;
    st.shape = meta.at("shape").get<Shape>();
    st.dtype = parse_dtype(meta.at("dtype").get<std::string>());
    const std::size_t off = meta.at("byte_offset").get<std::size_t>();
    const std::size_t count = numel_of(st.shape);
    const std::size_t width = st.dtype == Dtype::f32 ? 4 : 8;
    if (off + count * width > payload.size())
      throw CheckpointError("tensor '" + name + "' extends past the end of '" + path.string() + "'");
    st.values.resize(count);
    if (st.dtype == Dtype::f32) {
      std::vector<float> buf(count);
      std::memcpy(buf.data(), payload.data() + off, count * 4);
      std::copy(buf.begin(), buf.end(), st.values.begin());
    } else {
      std::memcpy(st.values.data(), payload.data() + off, count * 8);
    }
    out.emplace(name, std::move(st));
  }
  return out;
}

// Overwrites values of store entries under `prefix` from a checkpoint. Each of
// them must be present in the checkpoint with a matching shape.
template <typename S>
void assign_from(ParamStore<S>& store, const std::map<std::string, StoredTensor>& loaded,
                 std::string_view prefix = "") {
  for (auto& [name, t] : store.entries()) {
    if (!name.starts_with(prefix)) continue;
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape != t.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                            ", expected " + shape_str(t.shape()));
    auto dst = store.get(name).mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(it->second.values[i]);
  }
}

}  // namespace ctxasr
