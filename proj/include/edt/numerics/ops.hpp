#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "edt/numerics/autodiff.hpp"

// Differentiable primitives. Matrices are rank-2 row-major; a rank-1 tensor is
// accepted wherever a single row (bias, gain) is expected. Every op validates
// shapes and throws ContractViolation on mismatch.
namespace edt::ad {

template <class T> Var<T> matmul(Var<T> a, Var<T> b);
template <class T> Var<T> add(Var<T> a, Var<T> b);
/// a[m,n] + row[n], broadcast over rows.
template <class T> Var<T> add_row(Var<T> a, Var<T> row);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> a, T factor);

/// tanh-approximation GELU.
template <class T> Var<T> gelu(Var<T> a);
template <class T> Var<T> tanh(Var<T> a);
template <class T> Var<T> softmax_rows(Var<T> a);
template <class T> Var<T> log_softmax_rows(Var<T> a);
template <class T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

/// out[i] = table[indices[i]]. Serves both embedding lookups and row permutations.
template <class T> Var<T> gather_rows(Var<T> table, std::vector<std::size_t> indices);
template <class T> Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <class T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <class T> Var<T> concat_rows(std::span<const Var<T>> parts);

template <class T> Var<T> sum(Var<T> a);
template <class T> Var<T> mean(Var<T> a);

/// Row-weighted mean squared error against a constant target:
/// sum_i w_i sum_j (pred_ij - target_ij)^2 / (cols * sum_i w_i). Zero when all weights are zero.
template <class T>
Var<T> squared_error(Var<T> pred, Tensor<T> target, std::vector<T> row_weights);

/// Row-weighted mean of -log softmax(logits)_i[target_i].
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::size_t> targets, std::vector<T> row_weights);

/// Row-weighted mean of |alpha - 1(u < 0)| * u^2 with u = target - pred; pred is [n,1] or [n].
template <class T>
Var<T> expectile(Var<T> pred, std::vector<T> target, T alpha, std::vector<T> row_weights);

/// Block-diagonal multi-head self-attention over packed sequences.
/// Each segment is an independent sequence of `length` rows starting at
/// `offset`; `masks[mask]` is its length x length allow-matrix (query, key).
/// Every query row must allow at least one key.
struct AttentionLayout {
  struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
    std::size_t mask = 0;
  };
  std::vector<Segment> segments;
  std::vector<std::vector<std::uint8_t>> masks;
};

/// qkv is [N, 3d] laid out as (q | k | v); returns [N, d].
template <class T>
Var<T> masked_attention(Var<T> qkv, std::shared_ptr<const AttentionLayout> layout, std::size_t n_heads);

/// x @ w + b.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

}  // namespace edt::ad
