#include "dualatt/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace dualatt {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor shape " + shape_str(shape_) + " has a zero extent");
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor shape " + shape_str(shape_) + " has a zero extent");
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                             std::to_string(shape_numel(shape_)) + " values, got " +
                             std::to_string(data_.size()));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = stddev * rng.normal();
    return t;
}

void Tensor::set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.clear();
}

std::vector<double>& Tensor::grad_buffer() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
    return grad_;
}

void Tensor::zero_grad() {
    if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
}

}  // namespace dualatt
