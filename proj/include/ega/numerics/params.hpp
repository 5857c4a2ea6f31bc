#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ega/numerics/matrix.hpp"

namespace ega {

class FrozenParameterError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TensorKind : std::uint8_t { parameter = 0, buffer = 1 };

struct Tensor {
  Matrix value;
  Matrix grad;  // same shape as value
  TensorKind kind = TensorKind::parameter;
  bool frozen = false;

  bool trainable() const noexcept { return kind == TensorKind::parameter && !frozen; }
};

// Named model state. Buffers (running statistics) share the namespace but never
// receive gradients.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Matrix value, TensorKind kind = TensorKind::parameter) {
    if (entries_.contains(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    Tensor t;
    t.grad = Matrix(value.rows(), value.cols());
    t.value = std::move(value);
    t.kind = kind;
    return entries_.emplace(name, std::move(t)).first->second;
  }

  bool contains(std::string_view name) const { return entries_.contains(std::string(name)); }

  Tensor& at(std::string_view name) {
    auto it = entries_.find(std::string(name));
    if (it == entries_.end()) throw std::out_of_range("ParamStore: no tensor " + std::string(name));
    return it->second;
  }
  const Tensor& at(std::string_view name) const {
    auto it = entries_.find(std::string(name));
    if (it == entries_.end()) throw std::out_of_range("ParamStore: no tensor " + std::string(name));
    return it->second;
  }

  Matrix& value(std::string_view name) { return at(name).value; }
  const Matrix& value(std::string_view name) const { return at(name).value; }
  const Matrix& grad(std::string_view name) const { return at(name).grad; }

  std::vector<std::string> names(std::string_view prefix = {}) const {
    std::vector<std::string> out;
    for (const auto& [n, t] : entries_)
      if (n.starts_with(prefix)) out.push_back(n);
    return out;
  }

  std::size_t size() const noexcept { return entries_.size(); }

  void zero_grad() {
    for (auto& [n, t] : entries_) t.grad.fill(0.0);
  }

  // Returns the number of tensors affected.
  std::size_t set_frozen(std::string_view prefix, bool frozen) {
    std::size_t n = 0;
    for (auto& [name, t] : entries_)
      if (name.starts_with(prefix)) {
        t.frozen = frozen;
        ++n;
      }
    return n;
  }
  void freeze_all() { set_frozen("", true); }

  // Single-writer update path. Rejects writes to frozen or non-parameter tensors.
  void update(std::string_view name, const std::function<void(Tensor&)>& fn) {
    Tensor& t = at(name);
    if (t.kind != TensorKind::parameter)
      throw FrozenParameterError("ParamStore: '" + std::string(name) + "' is a buffer");
    if (t.frozen) throw FrozenParameterError("ParamStore: '" + std::string(name) + "' is frozen");
    fn(t);
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, Tensor> entries_;
};

// Checkpoint layout (all integers and doubles little-endian):
//   magic "EGACKPT" + '\0' (8 bytes), version u8 (=1), record count u32,
//   then per record: name length u32, name bytes, kind u8, rows u64, cols u64,
//   rows*cols IEEE-754 binary64 values in row-major order.
namespace checkpoint {

inline constexpr std::array<char, 8> kMagic{'E', 'G', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint8_t kVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::istream& is) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw CheckpointError("checkpoint: truncated file");
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace detail

inline void write(std::ostream& os, const ParamStore& store, std::string_view prefix = {}) {
  const auto names = store.names(prefix);
  os.write(kMagic.data(), kMagic.size());
  detail::put_le<std::uint8_t>(os, kVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(names.size()));
  for (const auto& n : names) {
    const Tensor& t = store.at(n);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(n.size()));
    os.write(n.data(), static_cast<std::streamsize>(n.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.kind));
    detail::put_le<std::uint64_t>(os, t.value.rows());
    detail::put_le<std::uint64_t>(os, t.value.cols());
    for (double x : t.value.data()) detail::put_le<double>(os, x);
  }
}

// Loads records into `store`. Existing tensors must match in shape; unknown
// names are added.
inline void read(std::istream& is, ParamStore& store) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw CheckpointError("checkpoint: bad magic header");
  const auto version = detail::get_le<std::uint8_t>(is);
  if (version != kVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = detail::get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw CheckpointError("checkpoint: truncated name");
    const auto kind = static_cast<TensorKind>(detail::get_le<std::uint8_t>(is));
    const auto rows = detail::get_le<std::uint64_t>(is);
    const auto cols = detail::get_le<std::uint64_t>(is);
    std::vector<double> data(rows * cols);
    for (double& x : data) x = detail::get_le<double>(is);
    Matrix m(rows, cols, std::move(data));
    if (store.contains(name)) {
      Tensor& t = store.at(name);
      if (t.value.rows() != rows || t.value.cols() != cols)
        throw CheckpointError("checkpoint: shape mismatch for " + name);
      t.value = std::move(m);
    } else {
      store.add(name, std::move(m), kind);
    }
  }
}

inline void save(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  write(os, store);
}

inline void load(const std::string& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  read(is, store);
}

}  // namespace checkpoint

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Matrix uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                           std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

}  // namespace ega
