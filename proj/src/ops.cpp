#include "captlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <string>
#include <utility>

#include <cblas.h>

#include "captlab/errors.hpp"

namespace captlab {
namespace {

using NodePtr = std::shared_ptr<detail::Node>;

void guard_finite(std::string_view op, const std::vector<double>& values) {
#ifndef CAPTLAB_NO_FINITE_GUARD
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
#else
  (void)op;
  (void)values;
#endif
}

// Builds the output node. The backward rule is attached only when the tape
// is live and some input requires a gradient.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, std::function<void(detail::Node&)> rule) {
  guard_finite(op, values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op_kind = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward_rule = std::move(rule);
    ++autograd_stats().nodes_recorded;
  }
  return Tensor(std::move(node));
}

// Gradient buffer of an input, or nullptr if it does not take one.
double* grad_of(const NodePtr& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

void require_matrix(const Tensor& t, std::string_view op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// C[m x n] += op(A) * op(B), row-major, through BLAS. op(A) is m x k.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* A, const double* B, double* C) {
  static std::once_flag single_thread;
  std::call_once(single_thread, [] { openblas_set_num_threads(1); });
  if (m == 0 || n == 0 || k == 0) return;
  const auto lda = static_cast<blasint>(trans_a ? m : k);
  const auto ldb = static_cast<blasint>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<blasint>(m),
              static_cast<blasint>(n), static_cast<blasint>(k), 1.0, A, lda, B, ldb, 1.0, C,
              static_cast<blasint>(n));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data());
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const NodePtr& na = self.inputs[0];
    const NodePtr& nb = self.inputs[1];
    // dA += G * B^T, dB += A^T * G. Frozen weights skip their half entirely.
    if (double* dA = grad_of(na)) gemm(false, true, m, k, n, self.grad.data(), nb->values.data(), dA);
    if (double* dB = grad_of(nb)) gemm(true, false, k, n, m, na->values.data(), self.grad.data(), dB);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (const NodePtr& in : self.inputs) {
      if (double* d = grad_of(in)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const NodePtr& na = self.inputs[0];
    const NodePtr& nb = self.inputs[1];
    // Read both operands before writing: a and b may be the same node.
    const std::vector<double> av = na->values;
    const std::vector<double> bv = nb->values;
    if (double* d = grad_of(na)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
    }
    if (double* d = grad_of(nb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result("scale", x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    if (double* d = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n || bias.rank() != 1) {
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " for rows of width " +
                     std::to_string(n));
  }
  const std::size_t rows = x.rows();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + bias[j];
  }
  return make_result("add_row", x.shape(), std::move(out), {x, bias},
                     [rows, n](detail::Node& self) {
                       if (double* d = grad_of(self.inputs[0])) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
                       }
                       if (double* d = grad_of(self.inputs[1])) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < n; ++j) d[j] += self.grad[r * n + j];
                         }
                       }
                     });
}

Tensor scale_rows(const Tensor& x, std::span<const double> weights) {
  const std::size_t rows = x.rows(), n = x.cols();
  if (weights.size() != rows) {
    throw ShapeError("scale_rows: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] * w[r];
  }
  return make_result("scale_rows", x.shape(), std::move(out), {x},
                     [w = std::move(w), n](detail::Node& self) {
                       if (double* d = grad_of(self.inputs[0])) {
                         for (std::size_t r = 0; r < w.size(); ++r) {
                           for (std::size_t j = 0; j < n; ++j) {
                             d[r * n + j] += self.grad[r * n + j] * w[r];
                           }
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result("sum", {}, {total}, {x}, [](detail::Node& self) {
    if (double* d = grad_of(self.inputs[0])) {
      const std::size_t n = self.inputs[0]->values.size();
      for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[0];
    }
  });
}

Tensor select(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.numel()) throw IndexError("select index out of range");
  return make_result("select", {}, {x[flat_index]}, {x}, [flat_index](detail::Node& self) {
    if (double* d = grad_of(self.inputs[0])) d[flat_index] += self.grad[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (double* d = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (n == 0) throw ShapeError("softmax over an empty axis");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_result("softmax", x.shape(), out, {x}, [out, rows, n](detail::Node& self) {
    if (double* d = grad_of(self.inputs[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = out.data() + r * n;
        const double* g = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[j] * (g[j] - dot);
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  }
  return make_result("gelu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    const NodePtr& in = self.inputs[0];
    if (double* d = grad_of(in)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = in->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        d[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (n == 0) throw ShapeError("layer_norm over an empty axis");
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm affine parameters do not match width " + std::to_string(n));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm eps must be positive");
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (in[j] - mean) * inv;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gain[j] + bias[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n](detail::Node& self) {
        const double* g = self.grad.data();
        const NodePtr& gain_node = self.inputs[1];
        if (double* dx = grad_of(self.inputs[0])) {
          std::vector<double> dxhat(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = g[r * n + j] * gain_node->values[j];
              s1 += dxhat[j];
              s2 += dxhat[j] * xhat[r * n + j];
            }
            const double k = inv_std[r] / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              dx[r * n + j] +=
                  k * (static_cast<double>(n) * dxhat[j] - s1 - xhat[r * n + j] * s2);
            }
          }
        }
        if (double* dg = grad_of(gain_node)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * xhat[r * n + j];
          }
        }
        if (double* db = grad_of(self.inputs[2])) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
          }
        }
      });
}

Tensor cross_entropy_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy_loss");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy_loss: label count != batch");
  if (batch == 0) throw ShapeError("cross_entropy_loss on an empty batch");
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw IndexError("label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
    const double* row = logits.values().data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - mx);
      z += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= z;
    loss -= (row[labels[b]] - mx) - std::log(z);
  }
  loss /= static_cast<double>(batch);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result("cross_entropy", {}, {loss}, {logits},
                     [probs = std::move(probs), lab = std::move(lab), batch,
                      classes](detail::Node& self) {
                       if (double* d = grad_of(self.inputs[0])) {
                         const double g = self.grad[0] / static_cast<double>(batch);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t c = 0; c < classes; ++c) {
                             const double onehot = (c == lab[b]) ? 1.0 : 0.0;
                             d[b * classes + c] += g * (probs[b * classes + c] - onehot);
                           }
                         }
                       }
                     });
}

Tensor row_mix(const Tensor& x, const RowMix& mix) {
  const std::size_t n = x.cols(), in_rows = x.rows(), out_rows = mix.out_rows();
  std::vector<double> out(out_rows * n, 0.0);
  for (const auto& t : mix.terms) {
    if (t.out >= out_rows || t.in >= in_rows) throw IndexError("row_mix term out of range");
    const double* src = x.values().data() + t.in * n;
    double* dst = out.data() + t.out * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] += t.weight * src[j];
  }
  for (std::size_t o = 0; o < out_rows; ++o) {
    if (mix.divisor[o] == 0.0) throw ContractError("row_mix divisor is zero");
    for (std::size_t j = 0; j < n; ++j) out[o * n + j] /= mix.divisor[o];
  }
  return make_result("row_mix", {out_rows, n}, std::move(out), {x}, [mix, n](detail::Node& self) {
    if (double* d = grad_of(self.inputs[0])) {
      for (const auto& t : mix.terms) {
        const double w = t.weight / mix.divisor[t.out];
        const double* g = self.grad.data() + t.out * n;
        double* dst = d + t.in * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += w * g[j];
      }
    }
  });
}

Tensor mean_pool(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_matrix(x, "mean_pool");
  if (mask.size() != x.dim(0)) throw ShapeError("mean_pool: mask length != row count");
  RowMix mix;
  double count = 0.0;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (mask[r]) {
      mix.terms.push_back({0, r, 1.0});
      count += 1.0;
    }
  }
  if (count == 0.0) throw ContractError("mean_pool over an all-zero mask");
  mix.divisor = {count};
  return reshape(row_mix(x, mix), {x.dim(1)});
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t n = x.cols(), in_rows = x.rows();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t o = 0; o < idx.size(); ++o) {
    if (idx[o] >= in_rows) throw IndexError("gather_rows index out of range");
    std::copy_n(x.values().data() + idx[o] * n, n, out.data() + o * n);
  }
  const std::size_t count = idx.size();
  return make_result("gather_rows", {count, n}, std::move(out), {x},
                     [idx = std::move(idx), n](detail::Node& self) {
                       if (double* d = grad_of(self.inputs[0])) {
                         for (std::size_t o = 0; o < idx.size(); ++o) {
                           const double* g = self.grad.data() + o * n;
                           double* dst = d + idx[o] * n;
                           for (std::size_t j = 0; j < n; ++j) dst[j] += g[j];
                         }
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows width mismatch");
    offsets.push_back(rows);
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat_rows", {rows, n}, std::move(out), inputs,
                     [offsets = std::move(offsets), n](detail::Node& self) {
                       for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                         if (double* d = grad_of(self.inputs[i])) {
                           const std::size_t len = self.inputs[i]->values.size();
                           const double* g = self.grad.data() + offsets[i] * n;
                           for (std::size_t j = 0; j < len; ++j) d[j] += g[j];
                         }
                       }
                     });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel) {
  require_matrix(x, "depthwise_conv1d");
  require_matrix(kernel, "depthwise_conv1d");
  const std::size_t len = x.dim(0), n = x.dim(1), width = kernel.dim(0);
  if (kernel.dim(1) != n) throw ShapeError("depthwise_conv1d kernel width mismatch");
  if (width == 0 || len == 0) throw ShapeError("depthwise_conv1d on empty input");
  const std::ptrdiff_t left = static_cast<std::ptrdiff_t>((width - 1) / 2);
  auto source_row = [len, left](std::size_t t, std::size_t tap) {
    std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) - left + static_cast<std::ptrdiff_t>(tap);
    s = std::clamp<std::ptrdiff_t>(s, 0, static_cast<std::ptrdiff_t>(len) - 1);
    return static_cast<std::size_t>(s);
  };
  std::vector<double> out(len * n, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t tap = 0; tap < width; ++tap) {
      const std::size_t s = source_row(t, tap);
      for (std::size_t c = 0; c < n; ++c) out[t * n + c] += kernel[tap * n + c] * x[s * n + c];
    }
  }
  return make_result("depthwise_conv1d", {len, n}, std::move(out), {x, kernel},
                     [len, n, width, source_row](detail::Node& self) {
                       const NodePtr& nx = self.inputs[0];
                       const NodePtr& nk = self.inputs[1];
                       double* dx = grad_of(nx);
                       double* dk = grad_of(nk);
                       for (std::size_t t = 0; t < len; ++t) {
                         for (std::size_t tap = 0; tap < width; ++tap) {
                           const std::size_t s = source_row(t, tap);
                           for (std::size_t c = 0; c < n; ++c) {
                             const double g = self.grad[t * n + c];
                             if (dx) dx[s * n + c] += g * nk->values[tap * n + c];
                             if (dk) dk[tap * n + c] += g * nx->values[s * n + c];
                           }
                         }
                       }
                     });
}

Tensor attention(const Tensor& qkv, const AttentionLayout& layout, std::vector<double>* probs,
                 std::vector<double>* logits) {
  require_matrix(qkv, "attention");
  const std::size_t B = layout.batch, L = layout.seq_len, H = layout.heads;
  if (qkv.dim(0) != B * L) throw ShapeError("attention: row count != batch * seq_len");
  if (qkv.dim(1) % 3 != 0) throw ShapeError("attention: packed width not divisible by 3");
  const std::size_t d = qkv.dim(1) / 3;
  if (H == 0 || d % H != 0) throw ShapeError("attention: width not divisible by heads");
  if (layout.key_valid.size() != B * L) throw ShapeError("attention: key mask size mismatch");
  const std::size_t dh = d / H, stride = 3 * d;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* X = qkv.values().data();

  std::vector<double> P(B * H * L * L, 0.0);
  std::vector<double> out(B * L * d, 0.0);
  std::vector<double> scores(L);
  // Scaled scores before softmax; hidden keys stay 0.
  if (logits) logits->assign(B * H * L * L, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* valid = layout.key_valid.data() + b * L;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t q = 0; q < L; ++q) {
        const double* qv = X + (b * L + q) * stride + h * dh;
        const std::size_t kend = layout.causal ? q + 1 : L;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < kend; ++k) {
          if (!valid[k]) continue;
          const double* kv = X + (b * L + k) * stride + d + h * dh;
          double s = 0.0;
          for (std::size_t j = 0; j < dh; ++j) s += qv[j] * kv[j];
          scores[k] = s * inv_sqrt;
          mx = std::max(mx, scores[k]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          throw ContractError("attention row has no visible key");
        }
        double* prow = P.data() + ((b * H + h) * L + q) * L;
        if (logits) {
          double* lrow = logits->data() + ((b * H + h) * L + q) * L;
          for (std::size_t k = 0; k < kend; ++k) {
            if (valid[k]) lrow[k] = scores[k];
          }
        }
        double z = 0.0;
        for (std::size_t k = 0; k < kend; ++k) {
          if (!valid[k]) continue;
          prow[k] = std::exp(scores[k] - mx);
          z += prow[k];
        }
        double* orow = out.data() + (b * L + q) * d + h * dh;
        for (std::size_t k = 0; k < kend; ++k) {
          if (!valid[k]) continue;
          prow[k] /= z;
          const double* vv = X + (b * L + k) * stride + 2 * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) orow[j] += prow[k] * vv[j];
        }
      }
    }
  }
  if (probs) *probs = P;
  const bool causal = layout.causal;
  return make_result(
      "attention", {B * L, d}, std::move(out), {qkv},
      [P = std::move(P), B, L, H, d, dh, stride, inv_sqrt, causal](detail::Node& self) {
        double* dX = grad_of(self.inputs[0]);
        if (!dX) return;
        const double* X = self.inputs[0]->values.data();
        const double* G = self.grad.data();
        std::vector<double> dp(L);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t q = 0; q < L; ++q) {
              const double* prow = P.data() + ((b * H + h) * L + q) * L;
              const double* go = G + (b * L + q) * d + h * dh;
              const std::size_t kend = causal ? q + 1 : L;
              double dot = 0.0;
              for (std::size_t k = 0; k < kend; ++k) {
                if (prow[k] == 0.0) {
                  dp[k] = 0.0;
                  continue;
                }
                const double* vv = X + (b * L + k) * stride + 2 * d + h * dh;
                double s = 0.0;
                for (std::size_t j = 0; j < dh; ++j) s += go[j] * vv[j];
                dp[k] = s;
                dot += s * prow[k];
              }
              const double* qv = X + (b * L + q) * stride + h * dh;
              double* dq = dX + (b * L + q) * stride + h * dh;
              for (std::size_t k = 0; k < kend; ++k) {
                if (prow[k] == 0.0) continue;
                const double ds = prow[k] * (dp[k] - dot) * inv_sqrt;
                const double* kv = X + (b * L + k) * stride + d + h * dh;
                double* dk = dX + (b * L + k) * stride + d + h * dh;
                double* dv = dX + (b * L + k) * stride + 2 * d + h * dh;
                for (std::size_t j = 0; j < dh; ++j) {
                  dq[j] += ds * kv[j];
                  dk[j] += ds * qv[j];
                  dv[j] += prow[k] * go[j];
                }
              }
            }
          }
        }
      });
}

}  // namespace captlab
