#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and
// registers a closure that accumulates into its parents' gradients.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hsa_lab/numerics/kernels.hpp"
#include "hsa_lab/numerics/tensor.hpp"

namespace hsa_lab {

namespace detail {

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(s));
}

// Row-major products accumulated into c.

// c[m,n] += a[m,k] * b[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  gemm(false, false, m, n, k, T(1), a, k, b, n, T(1), c, n);
}

// c[m,k] += a[m,n] * b[k,n]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm(false, true, m, k, n, T(1), a, n, b, n, T(1), c, k);
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  gemm(true, false, k, n, m, T(1), a, k, b, n, T(1), c, n);
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a.shape(), "matmul");
  detail::require_2d(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, a=" + shape_str(a.shape()) +
                     " b=" + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return make_result<T>({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    if (T* ga = grad_of(pa)) detail::gemm_nt(m, n, k, self.grad.data(), pb.value.data(), ga);
    if (T* gb = grad_of(pb)) detail::gemm_tn(m, k, n, pa.value.data(), self.grad.data(), gb);
  });
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& self) {
    for (int s = 0; s < 2; ++s) {
      if (T* g = grad_of(*self.parents[s])) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    if (T* ga = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * pb.value[i];
    }
    if (T* gb = grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a}, "scale", [factor](Node<T>& self) {
    if (T* g = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  return make_result<T>({1}, {acc}, {a}, "sum", [](Node<T>& self) {
    if (T* g = grad_of(*self.parents[0])) {
      const T up = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += up;
    }
  });
}

/// x * sigmoid(x)
template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = x / (T(1) + std::exp(-x));
  }
  return make_result<T>(a.shape(), std::move(out), {a}, "silu", [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    if (T* g = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T x = pa.value[i];
        const T sig = T(1) / (T(1) + std::exp(-x));
        g[i] += self.grad[i] * sig * (T(1) + x * (T(1) - sig));
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T v = in[base + j * sp.inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      T z = T(0);
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T e = std::exp(in[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "softmax", [sp](Node<T>& self) {
    T* g = grad_of(*self.parents[0]);
    if (!g) return;
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < sp.len; ++j) dot += y[base + j * sp.inner] * dy[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t at = base + j * sp.inner;
          g[at] += y[at] * (dy[at] - dot);
        }
      }
    }
  });
}

/// Each slice along `axis` divided by sqrt(mean(x^2) + eps), times gain.
template <std::floating_point T>
Tensor<T> rms_normalize(const Tensor<T>& x, std::size_t axis, T eps, const Tensor<T>& gain) {
  const auto sp = detail::split_at(x.shape(), axis);
  if (sp.len < 1) throw ShapeError("rms_normalize: empty axis");
  if (gain.size() != sp.len) {
    throw ShapeError("rms_normalize: gain " + shape_str(gain.shape()) + " vs axis extent " +
                     std::to_string(sp.len));
  }
  const std::size_t slices = sp.outer * sp.inner;
  std::vector<T> out(x.size());
  std::vector<T> inv_rms(slices);
  const T* in = x.data().data();
  const T* gv = gain.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T ms = T(0);
      for (std::size_t j = 0; j < sp.len; ++j) ms += in[base + j * sp.inner] * in[base + j * sp.inner];
      const T r = T(1) / std::sqrt(ms / T(sp.len) + eps);
      inv_rms[o * sp.inner + i] = r;
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] = in[base + j * sp.inner] * r * gv[j];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain}, "rms_normalize",
      [sp, inv_rms = std::move(inv_rms)](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pg = *self.parents[1];
        T* gx = grad_of(px);
        T* gg = grad_of(pg);
        const T* xin = px.value.data();
        const T* gain_v = pg.value.data();
        const T* dy = self.grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            const T r = inv_rms[o * sp.inner + i];
            T dot = T(0);  // sum_j dy_j * gain_j * x_j
            for (std::size_t j = 0; j < sp.len; ++j) {
              const std::size_t at = base + j * sp.inner;
              dot += dy[at] * gain_v[j] * xin[at];
              if (gg) gg[j] += dy[at] * xin[at] * r;
            }
            if (gx) {
              const T c = dot * r * r * r / T(sp.len);
              for (std::size_t j = 0; j < sp.len; ++j) {
                const std::size_t at = base + j * sp.inner;
                gx[at] += dy[at] * gain_v[j] * r - xin[at] * c;
              }
            }
          }
        }
      });
}

/// Mean negative log-likelihood of targets[i] under logits row i, over rows
/// where mask[i] is set.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  detail::require_2d(logits.shape(), "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(n) + " rows but " +
                     std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) +
                     " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " outside vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: empty mask");
  std::vector<T> probs(n * v, T(0));
  T total = T(0);
  const T* in = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const T* row = in + i * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    total += mx + std::log(z) - row[targets[i]];
  }
  const T inv = T(1) / T(count);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_result<T>(
      {1}, {total * inv}, {logits}, "cross_entropy",
      [n, v, inv, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](Node<T>& self) {
        T* g = grad_of(*self.parents[0]);
        if (!g) return;
        const T up = self.grad[0] * inv;
        for (std::size_t i = 0; i < n; ++i) {
          if (!msk[i]) continue;
          for (std::size_t j = 0; j < v; ++j) g[i * v + j] += up * probs[i * v + j];
          g[i * v + static_cast<std::size_t>(tgt[i])] -= up;
        }
      });
}

/// Selects entries along `axis`; repeated indices accumulate on backward.
template <std::floating_point T>
Tensor<T> gather(const Tensor<T>& x, std::size_t axis, std::span<const std::int32_t> indices) {
  const auto sp = detail::split_at(x.shape(), axis);
  for (auto ix : indices) {
    if (ix < 0 || static_cast<std::size_t>(ix) >= sp.len) {
      throw std::out_of_range("gather: index " + std::to_string(ix) + " outside extent " +
                              std::to_string(sp.len));
    }
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const std::size_t k = indices.size();
  std::vector<T> out(sp.outer * k * sp.inner);
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < k; ++j) {
      const T* src = in + (o * sp.len + static_cast<std::size_t>(indices[j])) * sp.inner;
      std::copy(src, src + sp.inner, out.begin() + static_cast<std::ptrdiff_t>((o * k + j) * sp.inner));
    }
  }
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  return make_result<T>(std::move(out_shape), std::move(out), {x}, "gather",
                        [sp, idx = std::move(idx)](Node<T>& self) {
                          T* g = grad_of(*self.parents[0]);
                          if (!g) return;
                          const std::size_t k = idx.size();
                          for (std::size_t o = 0; o < sp.outer; ++o) {
                            for (std::size_t j = 0; j < k; ++j) {
                              T* dst = g + (o * sp.len + static_cast<std::size_t>(idx[j])) * sp.inner;
                              const T* src = self.grad.data() + (o * k + j) * sp.inner;
                              for (std::size_t e = 0; e < sp.inner; ++e) dst[e] += src[e];
                            }
                          }
                        });
}

/// Rows of `table` picked by token id.
template <std::floating_point T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require_2d(table.shape(), "embedding");
  return gather(table, 0, ids);
}

template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  const auto first = detail::split_at(out_shape, axis);
  std::size_t total = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    if (p.ndim() != out_shape.size()) throw ShapeError("concat: rank mismatch " + shape_str(p.shape()));
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != axis && p.dim(d) != out_shape[d]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
      }
    }
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  std::vector<T> out(first.outer * total * first.inner);
  for (std::size_t o = 0; o < first.outer; ++o) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const std::size_t chunk = lens[pi] * first.inner;
      const T* src = parts[pi].data().data() + o * chunk;
      std::copy(src, src + chunk, out.begin() + static_cast<std::ptrdiff_t>(o * total * first.inner + off));
      off += chunk;
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), parts, "concat",
                        [first, total, lens = std::move(lens)](Node<T>& self) {
                          for (std::size_t o = 0; o < first.outer; ++o) {
                            std::size_t off = 0;
                            for (std::size_t pi = 0; pi < lens.size(); ++pi) {
                              const std::size_t chunk = lens[pi] * first.inner;
                              if (T* g = grad_of(*self.parents[pi])) {
                                const T* src = self.grad.data() + o * total * first.inner + off;
                                T* dst = g + o * chunk;
                                for (std::size_t e = 0; e < chunk; ++e) dst[e] += src[e];
                              }
                              off += chunk;
                            }
                          }
                        });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, "reshape", [](Node<T>& self) {
    if (T* g = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// x[n,in] * w[in,out] + bias[out]
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_2d(x.shape(), "linear");
  detail::require_2d(w.shape(), "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (bias.size() != out_dim) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(w.shape()));
  }
  std::vector<T> out(n * out_dim);
  for (std::size_t i = 0; i < n; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * out_dim));
  detail::gemm_nn(n, in, out_dim, x.data().data(), w.data().data(), out.data());
  return make_result<T>({n, out_dim}, std::move(out), {x, w, bias}, "linear",
                        [n, in, out_dim](Node<T>& self) {
                          Node<T>& px = *self.parents[0];
                          Node<T>& pw = *self.parents[1];
                          if (T* gx = grad_of(px)) detail::gemm_nt(n, out_dim, in, self.grad.data(), pw.value.data(), gx);
                          if (T* gw = grad_of(pw)) detail::gemm_tn(n, in, out_dim, px.value.data(), self.grad.data(), gw);
                          if (T* gb = grad_of(*self.parents[2])) {
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < out_dim; ++j) gb[j] += self.grad[i * out_dim + j];
                            }
                          }
                        });
}

/// SiLU-gated feed-forward: (silu(x Wg) * (x Wu)) Wd.
template <std::floating_point T>
Tensor<T> swiglu_ffn(const Tensor<T>& x, const Tensor<T>& w_gate, const Tensor<T>& w_up,
                     const Tensor<T>& w_down) {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

}  // namespace hsa_lab
