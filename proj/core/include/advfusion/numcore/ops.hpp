// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every op checks shapes up front, rejects
// non-finite results, and records itself when any input requires grad.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "advfusion/numcore/tensor.hpp"

namespace advfusion::numcore {

inline constexpr double kDefaultLayerNormEps = 1e-5;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a[T x n] + bias[n], broadcast over the leading axis only.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor relu(const Tensor& a);

/// Row-wise normalization of x[T x h] with affine gamma[h], beta[h].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kDefaultLayerNormEps);

/// Gathers rows of table[V x h]; result is [ids.size() x h].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);

/// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);

/// Softmax along `axis` of a rank-1 or rank-2 tensor, max-subtracted.
Tensor softmax(const Tensor& a, std::size_t axis);
/// Row softmax of a square score matrix restricted to columns j <= i;
/// entries above the diagonal are exactly zero.
Tensor causal_softmax(const Tensor& scores);

/// Mean of -log softmax(logits[t])[targets[t]] over positions whose target
/// is not `ignore_index`. Zero when every position is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::int64_t ignore_index = -100);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// out[t] = <a[t], b[t]> for a, b of shape [T x h]; result [T x 1].
Tensor row_dot(const Tensor& a, const Tensor& b);
/// out[t, :] = a[t, :] * s[t, 0] for a[T x h], s[T x 1].
Tensor scale_rows(const Tensor& a, const Tensor& s);

/// Kronecker product of two matrices.
Tensor kron(const Tensor& a, const Tensor& b);
/// u[p] (x) v[q] -> [p x q].
Tensor outer(const Tensor& u, const Tensor& v);

}  // namespace advfusion::numcore
