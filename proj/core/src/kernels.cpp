#include "ofq/kernels.hpp"

#include "ofq/errors.hpp"

namespace ofq::kernels {
namespace {

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
    }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
    if (b.shape()[0] != k) mismatch("matmul", a, b);
    Tensor c(Shape{m, p});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = C + i * p;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = A[i * k + t];
            const double* brow = B + t * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (b.shape()[1] != a.shape()[1]) mismatch("matmul_nt", a, b);
    // Same summation order as the dot-product form, but the inner loop runs
    // over contiguous output columns.
    return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    const std::size_t k = a.shape()[0], m = a.shape()[1], p = b.shape()[1];
    if (b.shape()[0] != k) mismatch("matmul_tn", a, b);
    Tensor c(Shape{m, p});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = c.data().data();
    for (std::size_t t = 0; t < k; ++t) {
        const double* arow = A + t * m;
        const double* brow = B + t * p;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = C + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    }
    return out;
}

void add_into(Tensor& dst, const Tensor& src) {
    if (dst.size() != src.size()) {
        throw DimensionError("add_into: " + shape_to_string(dst.shape()) + " vs " + shape_to_string(src.shape()));
    }
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace ofq::kernels
