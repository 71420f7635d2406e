#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "uvtm/error.hpp"

namespace uvtm::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A learnable tensor with its gradient and Adam moments.
template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  Mat<T> m;
  Mat<T> v;
};

/// Named parameters, addressed by the index returned from add().
template <typename T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw Error("neuralcore", "duplicate parameter name " + name);
    Parameter<T> p;
    p.name = name;
    p.value = Mat<T>::Zero(rows, cols);
    p.grad = Mat<T>::Zero(rows, cols);
    p.m = Mat<T>::Zero(rows, cols);
    p.v = Mat<T>::Zero(rows, cols);
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("neuralcore", "unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::int64_t step = 0;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      const std::size_t i = out.add(p.name, p.value.rows(), p.value.cols());
      out[i].value = p.value.template cast<U>();
      out[i].m = p.m.template cast<U>();
      out[i].v = p.v.template cast<U>();
    }
    out.step = step;
    return out;
  }

  /// Copies values from a store with identical names and shapes.
  template <typename U>
  void assign_values(const ParamStore<U>& other) {
    for (auto& p : params_) {
      const auto& src = other[other.index_of(p.name)];
      if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols())
        throw Error("neuralcore", "shape mismatch for parameter " + p.name);
      p.value = src.value.template cast<T>();
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)) with fan_in = cols, fan_out = rows.
template <typename T>
void xavier_uniform(Mat<T>& w, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
}

}  // namespace uvtm::nn
