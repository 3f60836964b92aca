#pragma once

#include <vector>

#include "smdk/tensor.hpp"

namespace smdk {

// Elementwise (same shape).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);

// 2-D a plus 1-D bias broadcast over rows.
Tensor add_rowvec(const Tensor& a, const Tensor& bias);

// 2-D matrix product (fixed reduction tree for bitwise determinism).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor slice_cols(const Tensor& a, int start, int width);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Row gather (embedding lookup); backward scatters into the used rows.
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);

// Softmax along `axis` (negative axes count from the back). 1-D or 2-D.
Tensor softmax(const Tensor& x, int axis = -1);
// Row softmax over a square matrix with entries j > i masked out.
Tensor causal_softmax(const Tensor& scores);
Tensor log_softmax(const Tensor& x);  // last axis, 2-D

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);

Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);       // scalar
Tensor mean(const Tensor& x);      // scalar
Tensor sum_sq(const Tensor& x);    // scalar, sum of squares
Tensor col_mean(const Tensor& x);  // 2-D -> 1-D column means

// Mean negative log-likelihood in nats over all positions.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

}  // namespace smdk
