#pragma once

#include <span>

#include "adlprune/tensor.hpp"

// Differentiable ops. Broadcasting is limited to scalar-to-tensor and
// equal shapes, plus explicit bias (last-dim) broadcasting in add_bias/linear.
namespace adlprune::ops {

Tensor matmul(const Tensor& a, const Tensor& b);

// a[B,M,K] x b[B,K,N], or b[B,N,K] when transpose_b.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// x[..., In] * W[Out, In]^T + bias[Out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor transpose(const Tensor& a);  // rank 2
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor swish(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x, double scale);

// z[T, D] or z[B, T, D]; w[D, k], k odd; zero "same" padding, no bias.
Tensor depthwise_conv1d(const Tensor& z, const Tensor& w);

inline constexpr double kLayerNormEps = 1e-6;
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Mean cross-entropy of logits[N, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

double sigmoid(double x);

}  // namespace adlprune::ops
