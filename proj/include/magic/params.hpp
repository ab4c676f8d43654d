#pragma once

#include "magic/autodiff.hpp"
#include "magic/errors.hpp"
#include "magic/tensor.hpp"

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace magic {

/// Named parameter tensors kept in insertion order. The order is part of the
/// checkpoint format, so it is deterministic for a given model configuration.
template <typename T>
class ParamStore {
 public:
  void add(std::string name, Tensor4<T> value) {
    if (index_.count(name) != 0) throw ConfigError("ParamStore: duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor4<T>& at(const std::string& name) const { return entries_[slot(name)].second; }
  Tensor4<T>& at(const std::string& name) { return entries_[slot(name)].second; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor4<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor4<T>>>& entries() { return entries_; }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Same names and shapes, zero values.
  ParamStore zeros_like() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, Tensor4<T>(t.shape()));
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  bool all_finite() const {
    for (const auto& [_, t] : entries_)
      if (!t.all_finite()) return false;
    return true;
  }

 private:
  std::size_t slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamStore: unknown parameter " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor4<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters of one store exposed as tape leaves, created lazily on first use.
template <typename T>
class Binding {
 public:
  Binding(Tape<T>& tape, const ParamStore<T>& store, bool requires_grad)
      : tape_(&tape), store_(&store), requires_grad_(requires_grad) {}

  Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var<T> v = tape_->leaf(store_->at(name), requires_grad_);
    vars_.emplace(name, v);
    return v;
  }

  /// Uses an existing variable for `name` instead of a fresh leaf.
  void bind(const std::string& name, Var<T> v) {
    if (!(store_->at(name).shape() == v.shape())) throw ConfigError("Binding: shape mismatch for " + name);
    vars_.insert_or_assign(name, std::move(v));
  }

  Tape<T>& tape() const { return *tape_; }
  bool requires_grad() const { return requires_grad_; }

  /// Gradients for every parameter of the store (zeros for parameters never touched).
  ParamStore<T> gradients() const {
    ParamStore<T> out;
    for (const auto& [name, t] : store_->entries()) {
      auto it = vars_.find(name);
      out.add(name, it == vars_.end() ? Tensor4<T>(t.shape()) : it->second.grad());
    }
    return out;
  }

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  bool requires_grad_;
  std::map<std::string, Var<T>> vars_;
};

using Rng = std::mt19937_64;

/// Conv weight (c_out, c_in, k, k) drawn from N(0, gain^2 / fan_in) plus zero bias.
template <typename T>
void add_conv(ParamStore<T>& store, const std::string& prefix, Index c_in, Index c_out, Index k,
              Rng& rng, double gain = 1.0) {
  Tensor4<T> w(c_out, c_in, k, k);
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(double(c_in * k * k)));
  for (auto& v : w.values()) v = T(dist(rng));
  store.add(prefix + ".w", std::move(w));
  store.add(prefix + ".b", Tensor4<T>(c_out, 1, 1, 1));
}

}  // namespace magic
