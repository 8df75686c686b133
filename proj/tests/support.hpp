#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "captlab/batch.hpp"
#include "captlab/config.hpp"
#include "captlab/data.hpp"
#include "captlab/tensor.hpp"

namespace testsupport {

inline std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline captlab::Tensor random_tensor(captlab::Shape shape, std::mt19937_64& rng,
                                     bool requires_grad = false, double stddev = 1.0) {
  const std::size_t n = captlab::shape_numel(shape);
  return captlab::Tensor::from(std::move(shape), gaussian(n, rng, stddev), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Reference matrix product, three nested loops.
inline std::vector<double> naive_matmul(std::span<const double> a, std::span<const double> b,
                                        std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline captlab::ModelConfig tiny_config(captlab::AttentionMode mode = captlab::AttentionMode::bidirectional,
                                        std::uint64_t seed = 3) {
  captlab::ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.max_len = 24;
  c.num_classes = 3;
  c.mode = mode;
  c.backbone_seed = seed;
  return c;
}

// Batch of random ids with per-row lengths; the rest is padding.
inline captlab::Batch random_batch(const std::vector<std::size_t>& lengths, std::size_t seq_len,
                                   std::size_t vocab, std::size_t classes, std::mt19937_64& rng) {
  captlab::Batch b;
  b.batch_size = lengths.size();
  b.seq_len = seq_len;
  b.token_ids.assign(b.batch_size * seq_len, 0);
  b.mask.assign(b.batch_size * seq_len, 0);
  b.structural_indices.resize(b.batch_size);
  std::uniform_int_distribution<std::int32_t> id(3, static_cast<std::int32_t>(vocab) - 1);
  std::uniform_int_distribution<std::size_t> label(0, classes - 1);
  for (std::size_t r = 0; r < lengths.size(); ++r) {
    for (std::size_t t = 0; t < lengths[r]; ++t) {
      b.token_ids[r * seq_len + t] = id(rng);
      b.mask[r * seq_len + t] = 1;
    }
    b.labels.push_back(label(rng));
    b.structural_indices[r] = {0};
  }
  return b;
}

}  // namespace testsupport
