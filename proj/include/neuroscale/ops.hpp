#pragma once

#include <vector>

#include "neuroscale/tensor.hpp"

namespace neuroscale::ops {

// All kernels are pure: inputs are never mutated, identical inputs produce
// bit-identical outputs. When a TapeScope is active and any input is tracked,
// the op records itself for reverse-mode differentiation.

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor addc(const Tensor& a, double c);
Tensor vexp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// 0.5 * x * (1 + erf(x / sqrt(2))), exact erf form
Tensor gelu(const Tensor& a);

// out = a * s with a trainable scalar s (1-element tensor)
Tensor scale_by(const Tensor& a, const Tensor& s);

// ---- matrix ----
Tensor matmul(const Tensor& a, const Tensor& b);            // [m,k]x[k,n] -> [m,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias); // x[n,a], w[a,b], bias[b]
Tensor transpose(const Tensor& a);                          // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, std::vector<int> shape);    // copying reshape

// ---- slicing / concatenation (2-D) ----
Tensor slice_rows(const Tensor& a, int first, int count);
Tensor slice_cols(const Tensor& a, int first, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// ---- broadcast ----
Tensor add_rowvec(const Tensor& x, const Tensor& v); // x[n,d] + v[d] per row
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor add_colvec(const Tensor& x, const Tensor& v); // x[c,t] + v[c] per column
Tensor mul_colvec(const Tensor& x, const Tensor& v);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_rows(const Tensor& a); // [n,d] -> [d], mean over rows

// ---- row-wise ----
// Row softmax with max-subtraction. With a mask, entries where mask is false
// get probability exactly 0 and are never read, so masked inputs have zero
// influence on the output bits.
Tensor row_softmax(const Tensor& a);
Tensor row_softmax_masked(const Tensor& a, const std::vector<uint8_t>& mask);
// Per-row zero mean, unit variance (population variance, eps inside the sqrt).
Tensor row_standardize(const Tensor& a, double eps);
// Rows scaled to unit L2 norm; throws contract_error naming any zero-norm row.
Tensor row_l2_normalize(const Tensor& a);

// ---- losses ----
// Per-row -log softmax(logits)[target], max-subtracted. Returns [n].
Tensor softmax_xent_rows(const Tensor& logits, const std::vector<int>& targets);
// Single-vector convenience over logits[V].
Tensor softmax_xent(const Tensor& logits, int target);

// ---- convolution ----
// x[ci,L], w[co,ci,K], bias[co] -> [co, floor((L+2p-K)/s)+1]
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
// x[ci,H,W], w[co,ci,kh,kw], bias[co] -> [co,H',W']
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);

// ---- lookup ----
Tensor gather_rows(const Tensor& table, const std::vector<int>& rows); // table[V,d] -> [n,d]

// ---- resampling ----
// Separable bilinear interpolation on an [h,w,c] map with half-pixel sample
// centers: source coordinate of output cell i is (i+0.5)*h/p - 0.5, clamped
// to [0, h-1]. Identity (bit-exact copy) when sizes match.
Tensor bilinear_resize(const Tensor& map, int out_h, int out_w);

// ---- layout ----
Tensor chw_to_hwc(const Tensor& a); // [c,h,w] -> [h,w,c]
Tensor hwc_to_chw(const Tensor& a); // [h,w,c] -> [c,h,w]

// ---- misc ----
// Value copy detached from the tape.
Tensor stopgrad(const Tensor& a);
// Forward takes `values`' numbers, backward routes the gradient to `grad_path`
// with an identity Jacobian (straight-through estimator).
Tensor straight_through(const Tensor& values, const Tensor& grad_path);

// ---- composed helpers (no new node kinds) ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
// x[c,t] normalized per group of channels then per-channel affine.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps);
Tensor mean_softmax_xent(const Tensor& logits, const std::vector<int>& targets);

} // namespace neuroscale::ops
