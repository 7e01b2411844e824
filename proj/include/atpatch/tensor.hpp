#pragma once

#include <atpatch/errors.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace atpatch {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles.
///
/// A rank-0 tensor (empty shape) holds exactly one element. `requires_grad`
/// marks trainable leaves; `grad` is populated by `Tape::backward` and
/// cleared by the optimizer.
class Tensor {
public:
    Tensor() : data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor(Shape{values.size()}, std::vector<double>(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
        return shape_[axis];
    }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double item() const {
        if (data_.size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void check_finite(std::string_view where) const {
        if (!all_finite()) throw NumericError("non-finite value in " + std::string(where));
    }

    bool same_values(const Tensor& other) const noexcept {
        return shape_ == other.shape_ && data_ == other.data_;
    }

    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    void zero_grad() { grad.reset(); }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace atpatch
