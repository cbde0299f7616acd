#include "ofq/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "ofq/errors.hpp"

namespace ofq {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto e : shape_) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_to_string(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                             " values but " + std::to_string(data_.size()) + " were given");
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
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

std::size_t Tensor::rows() const {
    switch (shape_.size()) {
        case 1: return 1;
        case 2: return shape_[0];
        default: throw DimensionError("rows() needs a rank-1 or rank-2 tensor, got " + shape_to_string(shape_));
    }
}

std::size_t Tensor::cols() const {
    switch (shape_.size()) {
        case 1: return shape_[0];
        case 2: return shape_[1];
        default: throw DimensionError("cols() needs a rank-1 or rank-2 tensor, got " + shape_to_string(shape_));
    }
}

double Tensor::item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape_));
    return data_[0];
}

std::span<double> Tensor::ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
    return grad_;
}

std::span<double> Tensor::grad() {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return grad_;
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return grad_;
}

void Tensor::zero_grad() { grad_.assign(data_.size(), 0.0); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    // (exponent + 1) >> 11 is 1 exactly for inf/NaN; shifts and adds vectorize.
    std::uint64_t bad = 0;
    for (double v : data_) bad |= (((std::bit_cast<std::uint64_t>(v) >> 52) & 0x7ffU) + 1) >> 11;
    return bad == 0;
}

bool Tensor::same_values(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_ == other.data_;
}

}  // namespace ofq
