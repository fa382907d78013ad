#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "edt/numerics/tensor.hpp"

namespace edt {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Gradients, aligned with the parameter order of the store they came from.
template <class T>
using Gradients = std::vector<NamedTensor<T>>;

/// Named learnable tensors plus their AdamW moment accumulators. Insertion
/// order is preserved; it is the serialization order of checkpoints.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> first_moment;
    Tensor<T> second_moment;

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  Tensor<T>& add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) {
      throw ContractViolation("duplicate parameter name '" + name + "'");
    }
    index_.emplace(name, entries_.size());
    Tensor<T> zeros(value.shape());
    entries_.push_back(Entry{std::move(name), std::move(value), zeros, zeros});
    return entries_.back().value;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
      throw ContractViolation("unknown parameter '" + std::string(name) + "'");
    }
    return it->second;
  }

  const Tensor<T>& at(std::string_view name) const { return entries_[index_of(name)].value; }
  Tensor<T>& at(std::string_view name) { return entries_[index_of(name)].value; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::int64_t step() const noexcept { return step_; }
  void set_step(std::int64_t s) {
    if (s < 0) throw ContractViolation("optimizer step counter must be >= 0");
    step_ = s;
  }

  Gradients<T> zeros_like() const {
    Gradients<T> g;
    g.reserve(entries_.size());
    for (const auto& e : entries_) g.push_back({e.name, Tensor<T>(e.value.shape())});
    return g;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      auto& entry = out.entries().emplace_back();
      entry.name = e.name;
      entry.value = e.value.template cast<U>();
      entry.first_moment = e.first_moment.template cast<U>();
      entry.second_moment = e.second_moment.template cast<U>();
    }
    out.rebuild_index();
    out.set_step(step_);
    return out;
  }

  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!index_.emplace(entries_[i].name, i).second) {
        throw ContractViolation("duplicate parameter name '" + entries_[i].name + "'");
      }
    }
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.step_ == b.step_ && a.entries_ == b.entries_;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::int64_t step_ = 0;
};

}  // namespace edt
