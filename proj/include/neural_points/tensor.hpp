#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "neural_points/errors.hpp"

namespace np {

/// Dense row-major double tensor. Values are immutable once a tensor is
/// published by an operation; copies share the underlying buffer.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (static_cast<std::int64_t>(data_->size()) != count(shape_))
            throw dimension_error("Tensor: data length " + std::to_string(data_->size()) +
                                  " does not match shape " + shape_string());
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    /// Same shape, shared nothing; fills with `v`.
    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.mut()) x = v;
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    /// Leading dimension treating the tensor as a 2-D array (rank-1 => 1 row).
    int rows() const { return rank() >= 2 ? shape_[0] : 1; }
    /// Trailing dimension treating the tensor as 2-D.
    int cols() const {
        if (rank() == 0) return 0;
        std::int64_t c = 1;
        for (std::size_t i = rank() >= 2 ? 1 : 0; i < shape_.size(); ++i) c *= shape_[i];
        return static_cast<int>(c);
    }

    const double* data() const { return data_->data(); }
    double* data() { return data_->data(); }
    const std::vector<double>& vec() const { return *data_; }
    std::vector<double>& mut() { return *data_; }

    double at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double at(int r, int c) const {
        return (*data_)[static_cast<std::size_t>(r) * cols() + c];
    }
    double& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double& at(int r, int c) {
        return (*data_)[static_cast<std::size_t>(r) * cols() + c];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    /// Cheap reinterpretation: same buffer, new shape (element count must match).
    Tensor reshaped(std::vector<int> new_shape) const {
        if (count(new_shape) != size())
            throw dimension_error("Tensor::reshaped: element count mismatch " + shape_string() +
                                  " -> " + shape_string(new_shape));
        Tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        return t;
    }

    /// Deep copy with its own buffer.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    bool shares_buffer(const Tensor& o) const { return data_ == o.data_; }

    std::string shape_string() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << 'x';
            os << s[i];
        }
        os << ']';
        return os.str();
    }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw dimension_error("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

inline bool all_finite(const Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.at(i))) return false;
    return true;
}

}  // namespace np
