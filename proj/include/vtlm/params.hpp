#pragma once

#include <map>
#include <string>
#include <vector>

#include "vtlm/error.hpp"
#include "vtlm/rng.hpp"
#include "vtlm/tensor.hpp"

namespace vtlm {

/// Named learnable tensors. Iteration order is the lexicographic name order,
/// which fixes the order of optimizer updates and checkpoint records.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    if (!tensors_.emplace(name, std::move(t)).second) throw UsageError("duplicate parameter '" + name + "'");
  }

  void set(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    tensors_[name] = std::move(t);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw UsageError("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw UsageError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return tensors_.size(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }

  /// Deep copy (independent storage).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : tensors_) out.add(name, t.clone());
    return out;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.add(name, tensor_cast<U>(t));
    return out;
  }

  /// Copies every entry whose name starts with `from_prefix` into `dst`,
  /// renaming the prefix.
  void copy_prefixed(const std::string& from_prefix, const std::string& to_prefix, ParamStore& dst) const {
    for (const auto& [name, t] : tensors_) {
      if (name.rfind(from_prefix, 0) == 0) dst.set(to_prefix + name.substr(from_prefix.size()), t.clone());
    }
  }

  bool operator==(const ParamStore& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (const auto& [name, t] : tensors_) {
      auto it = other.tensors_.find(name);
      if (it == other.tensors_.end() || it->second.shape() != t.shape() || it->second.values() != t.values()) return false;
    }
    return true;
  }

 private:
  Map tensors_;
};

/// N(0, std^2) initialised tensor.
template <class T>
Tensor<T> normal_init(const Shape& shape, double stddev, Pcg32& rng) {
  std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(shape, std::move(v), true);
}

}  // namespace vtlm
