#pragma once

#include "ofq/tensor.hpp"

// Raw dense kernels shared by the autodiff ops and the quantizers. No graph
// bookkeeping here; shape checks throw DimensionError.
namespace ofq::kernels {

/// C = A·B for A[m×k], B[k×p].
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A·Bᵀ for A[m×k], B[p×k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// C = Aᵀ·B for A[k×m], B[k×p].
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

/// Accumulates src into dst elementwise; shapes must hold the same count.
void add_into(Tensor& dst, const Tensor& src);

}  // namespace ofq::kernels
