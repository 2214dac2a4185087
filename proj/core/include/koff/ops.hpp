#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "koff/tensor.hpp"

// Differentiable kernels. Every op records a backward closure when any input
// is tracked and grad mode is on. Broadcasting exists only for the *_row ops,
// which treat the input as [rows, c] over its leading dimensions.
namespace koff {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., in] times w[out, in] transposed -> [..., out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);
template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5));

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// table[V, d] gathered at ids -> [ids.size(), d]; ids must lie in [0, V).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int32_t> ids);

struct AttentionShape {
  int batch = 1;
  int seq = 1;
  int heads = 1;
};

// Mask predicate for a key row laid out as [memory slots; text positions].
// Memory slots are visible to every query; text obeys causality.
inline bool attention_allowed(int n_kv, int query, int column) {
  return column < n_kv || column - n_kv <= query;
}

// Row-major [seq, n_kv + seq] mask built from attention_allowed.
std::vector<uint8_t> attention_mask(int n_kv, int seq);

// Multi-head causal attention. q, k, v are [batch*seq, heads*d_head];
// mem_k/mem_v are [n_kv, heads*d_head] memory slots prepended to every
// sequence's keys/values (undefined tensors mean no memory). Scores are
// scaled by 1/sqrt(d_head).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& mem_k, const Tensor<T>& mem_v, AttentionShape s);

// Attention probabilities [batch, heads, seq, n_kv + seq], masked entries 0.
template <typename T>
std::vector<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& mem_k,
                               AttentionShape s);

// Hard Concrete reparameterization with given uniform noise u in (0,1).
// Gradient w.r.t. log_alpha flows inside (0,1) and is zero in the clamp.
template <typename T>
Tensor<T> hard_concrete(const Tensor<T>& log_alpha, std::span<const double> u, double beta,
                        double gamma, double zeta);

// Mean next-token negative log-likelihood; positions with target < 0 skipped.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets);

// Mean over positions of sum_i p(i) (ln p(i) - ln softmax(logits)[idx_i]),
// with k (index, prob) pairs per position.
template <typename T>
Tensor<T> topk_kl(const Tensor<T>& logits, std::span<const int32_t> idx,
                  std::span<const float> probs, int k);

}  // namespace koff
