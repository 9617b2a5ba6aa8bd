#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dualatt/error.hpp"
#include "dualatt/rng.hpp"

namespace dualatt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. Parameters carry `requires_grad` and a
// gradient buffer of the same length as the data; activations built inside
// a Graph keep their gradients on the graph instead.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor normal(Shape shape, Rng& rng, double stddev);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Rank-4 [B,C,H,W] and rank-2 [B,C] element access.
    double& at(std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
        return data_[((b * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
    }
    double at(std::size_t b, std::size_t c, std::size_t i, std::size_t j) const {
        return data_[((b * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
    }
    double& at(std::size_t b, std::size_t c) { return data_[b * shape_[1] + c]; }
    double at(std::size_t b, std::size_t c) const { return data_[b * shape_[1] + c]; }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on);
    bool has_grad() const noexcept { return !grad_.empty(); }
    std::span<double> grad() noexcept { return grad_; }
    std::span<const double> grad() const noexcept { return grad_; }
    // Allocates (zeroed) on first use.
    std::vector<double>& grad_buffer();
    void zero_grad();

    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::vector<double> grad_;
};

// Throws DimensionError naming `what` unless `t` has the given rank.
void expect_rank(const Tensor& t, std::size_t rank, const char* what);

}  // namespace dualatt
