#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "habmap/error.hpp"

namespace habmap::nnet {

/// Dense row-major array with a runtime shape.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, T fill = T{0})
        : shape_(std::move(shape)), values_(count(shape_), fill) {}
    Tensor(std::vector<std::size_t> shape, std::vector<T> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != count(shape_)) throw DataError("tensor value count does not match shape");
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }

    std::span<const T> values() const { return values_; }
    std::span<T> values() { return values_; }
    T* data() { return values_.data(); }
    const T* data() const { return values_.data(); }
    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    /// Element (i, j) of a rank-2 tensor.
    T& at(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }

    std::span<const T> row(std::size_t i) const {
        const auto w = size() / shape_[0];
        return std::span<const T>(values_).subspan(i * w, w);
    }

    void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    bool operator==(const Tensor&) const = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<T> values_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

} // namespace habmap::nnet
