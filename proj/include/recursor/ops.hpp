#pragma once

#include <span>
#include <vector>

#include "recursor/tensor.hpp"

namespace recursor {

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kRopeBase = 10000.0;

// ---- linear algebra -------------------------------------------------------

// [m x k] . [k x n]; contraction runs sequentially over k.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// out[i, :] = s[i] * x[i, :]
Tensor scale_rows(const Tensor& x, const Tensor& s);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// ---- reductions / reshaping -----------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [m x n] -> [n], mean over rows.
Tensor mean_rows(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);
// [m x n] -> [m]
Tensor select_column(const Tensor& a, std::size_t column);

Tensor gather_rows(const Tensor& table, std::span<const int> rows);
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Copy of `base` with rows `rows` replaced by `values` (one row each).
Tensor scatter_rows(const Tensor& base, std::span<const int> rows, const Tensor& values);
Tensor concat_rows(std::span<const Tensor> parts);

// ---- normalization / probability ------------------------------------------

// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);
// Row-wise log-sum-exp, [m x n] -> [m].
Tensor logsumexp_rows(const Tensor& x);
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps = kRmsNormEps);

// ---- attention --------------------------------------------------------------

// Rotary embedding over `n_heads` heads packed along the last axis; adjacent
// dimension pairs rotate by position * base^(-2i/d_head).
Tensor rope(const Tensor& x, std::span<const int> positions, int n_heads,
            double base = kRopeBase);

// Scaled dot-product attention where query row i sees key row j iff
// key_pos[j] <= query_pos[i]. q packs n_heads heads, k/v pack n_kv_heads
// heads; query head h reads kv head h / (n_heads / n_kv_heads).
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const int> query_pos, std::span<const int> key_pos,
                        int n_heads, int n_kv_heads);

// Single-head causal attention with rotary embedding, keys at absolute
// positions 0..T_k-1 and queries at position_offset + i.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int position_offset);

// ---- losses ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// Mean NLL over rows where mask is true.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            const std::vector<bool>& mask);
// Mean binary cross-entropy; probabilities clipped to [eps, 1-eps].
Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> targets,
                            double eps = 1e-7);
Tensor mse(const Tensor& a, const Tensor& b);
// Mean over rows of KL(softmax(teacher) || softmax(student)); teacher detached.
Tensor forward_kl(const Tensor& teacher_logits, const Tensor& student_logits);

// ---- non-differentiable helpers -------------------------------------------

std::vector<int> argmax_rows(const Tensor& x);
bool all_finite(const Tensor& x);

}  // namespace recursor
