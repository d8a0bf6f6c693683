#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "memdist/common.hpp"

namespace memdist {

// Dense row-major tensor of 64-bit floats. Compute is always f64; 32-bit
// storage only appears at the artifact serialization boundary.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_.assign(static_cast<size_t>(shape_numel(t.shape_)), 0.0);
        return t;
    }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw ShapeError("Tensor::from_data: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int> new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(new_shape));
        Tensor t = *this;
        t.shape_ = std::move(new_shape);
        return t;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace memdist
