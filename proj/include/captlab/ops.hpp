#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "captlab/tensor.hpp"

// Differentiable operations. Every op checks shapes, computes its forward
// value, and (when the tape is live) registers a backward rule. Broadcasting
// exists only where an op documents it.
namespace captlab {

/// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

/// x[... x n] + bias[n], the bias broadcast over every row.
Tensor add_row(const Tensor& x, const Tensor& bias);

/// Multiplies row r of x by weights[r]. The weights are constants.
Tensor scale_rows(const Tensor& x, std::span<const double> weights);

Tensor sum(const Tensor& x);

/// Scalar holding x.values[flat_index].
Tensor select(const Tensor& x, std::size_t flat_index);

Tensor reshape(const Tensor& x, Shape shape);

/// Softmax over the last axis with max subtraction.
Tensor softmax(const Tensor& x);

Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy_loss(const Tensor& logits, std::span<const std::size_t> labels);

/// Masked arithmetic mean of the rows of x[T x d]; returns shape [d].
Tensor mean_pool(const Tensor& x, std::span<const std::uint8_t> mask);

/// Sparse linear recombination of rows:
///   out[o] = (sum over terms t with t.out == o of t.weight * x[t.in]) / divisor[o]
/// Sums run in term order.
struct RowMix {
  struct Term {
    std::size_t out;
    std::size_t in;
    double weight;
  };
  std::vector<Term> terms;
  std::vector<double> divisor;  // one per output row

  std::size_t out_rows() const { return divisor.size(); }
};

Tensor row_mix(const Tensor& x, const RowMix& mix);

/// Rows of x in the given order (repeats allowed).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Stacks 2-D tensors of equal width along the row axis.
Tensor concat_rows(std::span<const Tensor> parts);

/// 'same'-length depthwise 1-D convolution over the rows of x[L x d] with a
/// kernel[w x d]. Out-of-range taps read the nearest edge row.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel);

/// Geometry of a multi-head self-attention call over B sequences of L rows.
struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  // key_valid[b * seq_len + k] == 0 excludes key k of sequence b.
  std::vector<std::uint8_t> key_valid;
};

/// Scaled dot-product attention on packed projections qkv[(B*L) x 3d]
/// (columns: queries, keys, values). Returns [(B*L) x d]. When `probs` is
/// given it receives the post-softmax scores laid out [B][heads][L][L];
/// excluded entries are exactly 0.
Tensor attention(const Tensor& qkv, const AttentionLayout& layout,
                 std::vector<double>* probs = nullptr, std::vector<double>* logits = nullptr);

}  // namespace captlab
