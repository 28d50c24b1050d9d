#pragma once

// Dense building blocks shared by the decoder and the vision encoder. Every
// forward has a matching backward that accumulates parameter gradients and
// returns the input gradient. Row-major activations: one row per position.

#include <Eigen/Dense>

#include <vector>

namespace forge {

using Mat  = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecF = Eigen::VectorXf;

namespace nn {

inline constexpr float kRmsEps = 1e-5f;
inline constexpr float kRopeBase = 10000.0f;

// y = x·Wᵀ (+ b). Weights are [out × in].
Mat linear(const Mat & x, const Mat & w);
Mat linear(const Mat & x, const Mat & w, const Mat & bias);

// Accumulates dW (and db) and returns dx.
Mat linear_backward(const Mat & x, const Mat & w, const Mat & dy, Mat & dw);
Mat linear_backward(const Mat & x, const Mat & w, const Mat & dy, Mat & dw, Mat & db);

// Row-wise RMS norm with a learned [1 × D] gain. inv_rms receives 1/rms per row.
Mat rms_norm(const Mat & x, const Mat & gain, VecF * inv_rms = nullptr);
Mat rms_norm_backward(const Mat & x, const Mat & gain, const VecF & inv_rms, const Mat & dy, Mat & dgain);

// Rotary embedding on each head's (i, i + head_dim/2) pairs, in place.
// Row r sits at absolute position pos0 + r; inverse applies the transpose rotation.
void rope(Mat & x, int n_heads, int pos0, bool inverse = false);

// Multi-head scaled dot-product attention. q has one row per query (absolute
// positions q_pos0..), k/v one row per key (positions 0..). probs, when given,
// receives one [n_q × n_k] matrix per head for the backward pass.
Mat attention(const Mat & q, const Mat & k, const Mat & v, int n_heads, bool causal, int q_pos0,
              std::vector<Mat> * probs = nullptr);

void attention_backward(const Mat & q, const Mat & k, const Mat & v, const std::vector<Mat> & probs,
                        const Mat & d_out, int n_heads, Mat & dq, Mat & dk, Mat & dv);

float silu(float x);
float silu_grad(float x);
float gelu(float x);
float gelu_grad(float x);

} // namespace nn
} // namespace forge
