#pragma once

// Named parameter tensors and the checkpoint format.
//
// Checkpoint layout: a text manifest followed by raw little-endian float64s.
//
//   xmodal-checkpoint 1
//   meta <key> <value>                       (zero or more)
//   tensor <name> <rank> <dims...> <offset>  (offset counted in float64s)
//   end
//   <binary payload>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/autodiff.hpp"
#include "xmodal/rng.hpp"

namespace xmodal {

enum class Init { kFanIn, kZeros, kOnes };

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
  };

  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Registers a tensor. Fan-in init draws U(-sqrt(6/fan_in), +sqrt(6/fan_in))
  /// from a stream keyed by registration order.
  Var<T> add(const std::string& name, Shape shape, Init init, std::size_t fan_in = 1) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    Tensor<T> t(std::move(shape));
    if (init == Init::kOnes) t.fill(T(1));
    if (init == Init::kFanIn) {
      Philox rng(seed_, entries_.size() + 1);
      const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
      for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    auto var = leaf(std::move(t), true);
    index_[name] = entries_.size();
    entries_.push_back({name, var});
    return var;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var->zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& e : entries_) e.var->requires_grad = on;
  }

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

using Meta = std::map<std::string, std::string>;

namespace detail {

inline void write_f64_le(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path, const Meta& meta = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os << "xmodal-checkpoint 1\n";
  for (const auto& [k, v] : meta) os << "meta " << k << ' ' << v << '\n';
  std::size_t offset = 0;
  for (const auto& e : store.entries()) {
    const auto& s = e.var->value.shape();
    os << "tensor " << e.name << ' ' << s.size();
    for (auto d : s) os << ' ' << d;
    os << ' ' << offset << '\n';
    offset += e.var->value.size();
  }
  os << "end\n";
  for (const auto& e : store.entries())
    for (T v : e.var->value.vec()) detail::write_f64_le(os, static_cast<double>(v));
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

struct CheckpointTensor {
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  Meta meta;
  std::map<std::string, CheckpointTensor> tensors;
  std::vector<std::string> order;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "xmodal-checkpoint 1")
    throw IoError("not an xmodal checkpoint: " + path);
  Checkpoint ck;
  std::vector<std::pair<std::string, std::size_t>> offsets;
  bool ended = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "end") {
      ended = true;
      break;
    }
    if (kind == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      ck.meta[key] = value;
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rank = 0, offset = 0;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      ls >> offset;
      if (!ls) throw IoError("malformed tensor line in " + path + ": " + line);
      ck.tensors[name] = {shape, {}};
      ck.order.push_back(name);
      offsets.emplace_back(name, offset);
    } else {
      throw IoError("unexpected manifest line in " + path + ": " + line);
    }
  }
  if (!ended) throw IoError("checkpoint manifest not terminated: " + path);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  for (const auto& [name, offset] : offsets) {
    auto& t = ck.tensors[name];
    const std::size_t n = shape_size(t.shape);
    if ((offset + n) * 8 > blob.size()) throw IoError("checkpoint payload truncated at tensor " + name);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.values[i] = detail::read_f64_le(blob.data() + (offset + i) * 8);
  }
  return ck;
}

/// Copies checkpoint values into a store with identical names and shapes.
template <typename T>
void load_into(ParamStore<T>& store, const Checkpoint& ck) {
  for (const auto& e : store.entries()) {
    auto it = ck.tensors.find(e.name);
    if (it == ck.tensors.end()) throw IoError("checkpoint lacks tensor " + e.name);
    if (it->second.shape != e.var->value.shape())
      throw IoError("checkpoint tensor " + e.name + " has shape " + shape_str(it->second.shape) +
                    ", model expects " + shape_str(e.var->value.shape()));
    for (std::size_t i = 0; i < it->second.values.size(); ++i)
      e.var->value[i] = static_cast<T>(it->second.values[i]);
  }
}

}  // namespace xmodal
