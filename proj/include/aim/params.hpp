#pragma once

#include <map>
#include <string>
#include <vector>

#include "aim/common.hpp"
#include "aim/tensor.hpp"

namespace aim {

// Named parameter registry. std::map keeps iteration order deterministic,
// which the optimizer, checkpoints and logs all rely on.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void insert(const std::string& name, Tensor<T> t) {
    if (params_.count(name)) throw config_error("duplicate parameter name: " + name);
    params_.emplace(name, std::move(t));
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw config_error("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw config_error("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (auto& [k, v] : params_) n += v.size();
    return n;
  }

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  Map params_;
};

template <class T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> normal_init(Shape shape, double std, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(rng.normal(0.0, std));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace aim
