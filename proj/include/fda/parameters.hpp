#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fda/tensor.hpp"

namespace fda {

/// Ordered collection of named tensors. Insertion order is the
/// serialization and optimizer order.
template <typename Scalar>
class ParameterSet {
 public:
  void add(std::string name, Tensor<Scalar> value) {
    if (index_.count(name)) throw ArgumentError("parameter '" + name + "' already defined");
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
  }

  /// Adds every entry of `other`, prefixing its names.
  void merge(const ParameterSet& other, const std::string& prefix = "") {
    for (std::size_t i = 0; i < other.size(); ++i) add(prefix + other.names_[i], other.values_[i]);
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  const Tensor<Scalar>& operator[](std::string_view name) const { return values_[lookup(name)]; }
  Tensor<Scalar>& at(std::string_view name) { return values_[lookup(name)]; }

  std::size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const Tensor<Scalar>& value(std::size_t i) const { return values_[i]; }
  Tensor<Scalar>& value(std::size_t i) { return values_[i]; }

  Index count() const {
    Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  /// Copy whose tensors are leaves of `tape`.
  ParameterSet track(Tape<Scalar>& tape) const {
    ParameterSet out = *this;
    for (auto& v : out.values_) v = tape.leaf(v.detached());
    return out;
  }

  /// Entries whose names start with `prefix`, with the prefix removed.
  ParameterSet subset(std::string_view prefix) const {
    ParameterSet out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (names_[i].rfind(prefix, 0) == 0) out.add(names_[i].substr(prefix.size()), values_[i]);
    }
    return out;
  }

  bool operator==(const ParameterSet& o) const {
    if (names_ != o.names_) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (values_[i].shape() != o.values_[i].shape()) return false;
      if (!(values_[i].data() == o.values_[i].data()).all()) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ArgumentError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<Scalar>> values_;
  std::map<std::string, std::size_t> index_;
};

template <typename To, typename From>
ParameterSet<To> cast(const ParameterSet<From>& p) {
  ParameterSet<To> out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& v = p.value(i);
    out.add(p.names()[i], Tensor<To>(v.shape(), v.data().template cast<To>()));
  }
  return out;
}

/// Fan-in scaled uniform (Kaiming) initialisation: U(-b, b), b = sqrt(6 / fan_in).
template <typename Scalar>
Tensor<Scalar> kaiming_uniform(Shape shape, Index fan_in, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

/// Adds `<name>.w` [out,in,k,k] and `<name>.b` [out] for a conv layer.
template <typename Scalar>
void add_conv(ParameterSet<Scalar>& p, const std::string& name, Index in, Index out, Index k, std::mt19937_64& rng,
              bool zero = false) {
  if (zero) {
    p.add(name + ".w", Tensor<Scalar>::zeros({out, in, k, k}));
  } else {
    p.add(name + ".w", kaiming_uniform<Scalar>({out, in, k, k}, in * k * k, rng));
  }
  p.add(name + ".b", Tensor<Scalar>::zeros({out}));
}

/// Stable 64-bit mix for deriving sub-seeds (splitmix64 finaliser).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_name(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

}  // namespace fda
