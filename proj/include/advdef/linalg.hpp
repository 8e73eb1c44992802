#pragma once

#include <cstddef>

namespace advdef::linalg {

// Row-major C[m,n] = alpha * op(A) * op(B) + beta * C, where op(A) is [m,k]
// and op(B) is [k,n]. With trans_a the stored A is [k,m]; with trans_b the
// stored B is [n,k].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c);

}  // namespace advdef::linalg
