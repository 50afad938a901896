#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "tameta/common.hpp"
#include "tameta/tensor.hpp"

namespace tameta {

// An ordered, named collection of parameter arrays. This is the raw-value
// form that persists across iterations; tapes bind these values as leaves
// for one forward/backward pass and updated values are written back here.
struct ParamDef {
  std::string name;
  Shape shape;
};

class ParamSet {
 public:
  ParamSet() = default;

  void add(std::string name, Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<long>(values.size()))
      throw shape_error("ParamSet::add: value count does not match shape for '" + name + "'");
    defs_.push_back(ParamDef{std::move(name), std::move(shape)});
    values_.push_back(std::move(values));
  }

  std::size_t count() const { return defs_.size(); }
  const ParamDef& def(std::size_t i) const { return defs_[i]; }
  const std::vector<double>& values(std::size_t i) const { return values_[i]; }
  std::vector<double>& values(std::size_t i) { return values_[i]; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < defs_.size(); ++i)
      if (defs_[i].name == name) return i;
    throw error("ParamSet: no parameter named '" + name + "'");
  }

  const std::vector<double>& values(const std::string& name) const {
    return values_[index_of(name)];
  }
  std::vector<double>& values(const std::string& name) { return values_[index_of(name)]; }

  long total_size() const {
    long n = 0;
    for (const auto& v : values_) n += static_cast<long>(v.size());
    return n;
  }

  // Concatenation of all arrays in declaration order.
  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_size()));
    for (const auto& v : values_) flat.insert(flat.end(), v.begin(), v.end());
    return flat;
  }

  void unflatten(std::span<const double> flat) {
    if (static_cast<long>(flat.size()) != total_size())
      throw shape_error("ParamSet::unflatten: size mismatch");
    std::size_t off = 0;
    for (auto& v : values_) {
      std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.begin());
      off += v.size();
    }
  }

  // Binds every array as a leaf on the given record.
  std::vector<Tensor> bind(Tape& tape, bool requires_grad = true) const {
    std::vector<Tensor> out;
    out.reserve(defs_.size());
    for (std::size_t i = 0; i < defs_.size(); ++i)
      out.push_back(tape.leaf(defs_[i].shape, values_[i], requires_grad));
    return out;
  }

  // Copies current values from a parallel list of tensors.
  void assign_from(const std::vector<Tensor>& tensors) {
    if (tensors.size() != defs_.size()) throw shape_error("ParamSet::assign_from: count mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto v = tensors[i].values();
      if (static_cast<long>(v.size()) != numel(defs_[i].shape))
        throw shape_error("ParamSet::assign_from: shape mismatch for '" + defs_[i].name + "'");
      values_[i].assign(v.begin(), v.end());
    }
  }

  bool same_layout(const ParamSet& other) const {
    if (defs_.size() != other.defs_.size()) return false;
    for (std::size_t i = 0; i < defs_.size(); ++i)
      if (defs_[i].name != other.defs_[i].name || defs_[i].shape != other.defs_[i].shape)
        return false;
    return true;
  }

 private:
  std::vector<ParamDef> defs_;
  std::vector<std::vector<double>> values_;
};

// Per-coordinate sums of B same-layout gradient contributions, accumulated
// in value-sorted order so the result is bitwise invariant to the order of
// the contributions (batch updates must not depend on task order).
inline std::vector<std::vector<double>> merge_gradients(
    const std::vector<std::vector<std::vector<double>>>& per_task,
    std::span<const double> weights = {}) {
  if (per_task.empty()) throw error("merge_gradients: no contributions");
  const std::size_t arrays = per_task[0].size();
  std::vector<std::vector<double>> out(arrays);
  std::vector<double> terms(per_task.size());
  for (std::size_t a = 0; a < arrays; ++a) {
    const std::size_t n = per_task[0][a].size();
    out[a].assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t b = 0; b < per_task.size(); ++b) {
        double w = weights.empty() ? 1.0 : weights[b];
        terms[b] = w * per_task[b][a][j];
      }
      std::sort(terms.begin(), terms.end());
      double s = 0.0;
      for (double v : terms) s += v;
      out[a][j] = s;
    }
  }
  return out;
}

}  // namespace tameta
