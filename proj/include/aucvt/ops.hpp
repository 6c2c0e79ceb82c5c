/*
 * Copyright 2026 The AU-CVT Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "aucvt/tensor.hpp"

namespace aucvt {

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

inline void require_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::record("add", a.shape(), std::move(out), {a, b},
                        [an, bn](const std::vector<double>& g) {
                          for (auto* n : {an.get(), bn.get()}) {
                            if (!n->requires_grad) continue;
                            auto& gn = detail::grad_buffer(*n);
                            for (std::size_t i = 0; i < g.size(); ++i) gn[i] += g[i];
                          }
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::record("sub", a.shape(), std::move(out), {a, b},
                        [an, bn](const std::vector<double>& g) {
                          if (an->requires_grad) {
                            auto& ga = detail::grad_buffer(*an);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = detail::grad_buffer(*bn);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::record("mul", a.shape(), std::move(out), {a, b},
                        [an, bn](const std::vector<double>& g) {
                          if (an->requires_grad) {
                            auto& ga = detail::grad_buffer(*an);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = detail::grad_buffer(*bn);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
                          }
                        });
}

/// s * a + t
inline Tensor affine(const Tensor& a, double s, double t = 0.0) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a[i] + t;
  auto an = a.node_ptr();
  return detail::record("affine", a.shape(), std::move(out), {a},
                        [an, s](const std::vector<double>& g) {
                          auto& ga = detail::grad_buffer(*an);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                        });
}

inline Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto xn = x.node_ptr();
  return detail::record("relu", x.shape(), std::move(out), {x},
                        [xn](const std::vector<double>& g) {
                          auto& gx = detail::grad_buffer(*xn);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (xn->data[i] > 0.0) gx[i] += g[i];
                          }
                        });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  }
  auto xn = x.node_ptr();
  return detail::record("gelu", x.shape(), std::move(out), {x},
                        [xn, inv_sqrt_2pi](const std::vector<double>& g) {
                          auto& gx = detail::grad_buffer(*xn);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            double v = xn->data[i];
                            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                            double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                            gx[i] += g[i] * (cdf + v * pdf);
                          }
                        });
}

/// Element-wise maximum. On exact ties the gradient goes to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("maximum", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::record("maximum", a.shape(), std::move(out), {a, b},
                        [an, bn](const std::vector<double>& g) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            bool left = an->data[i] >= bn->data[i];
                            auto* win = left ? an.get() : bn.get();
                            if (win->requires_grad) detail::grad_buffer(*win)[i] += g[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node_ptr();
  return detail::record("sum", {1}, {s}, {a}, [an](const std::vector<double>& g) {
    auto& ga = detail::grad_buffer(*an);
    for (double& v : ga) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return affine(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  auto an = a.node_ptr();
  return detail::record("reshape", std::move(shape), a.values(), {a},
                        [an](const std::vector<double>& g) {
                          auto& ga = detail::grad_buffer(*an);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

/// out.flat[i] = a.flat[index[i]]. Backward scatter-adds, so indices may repeat.
inline Tensor gather(const Tensor& a, Shape shape, std::vector<std::size_t> index) {
  if (shape_numel(shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                         shape_str(shape));
  }
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.numel()) throw DimensionError("gather: index out of range");
    out[i] = a[index[i]];
  }
  auto an = a.node_ptr();
  return detail::record("gather", std::move(shape), std::move(out), {a},
                        [an, idx = std::move(index)](const std::vector<double>& g) {
                          auto& ga = detail::grad_buffer(*an);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[idx[i]] += g[i];
                        });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<std::size_t> idx(r * c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < r; ++j) idx[i * r + j] = j * c + i;
  }
  return gather(a, {c, r}, std::move(idx));
}

/// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_cols", a, 2);
  if (begin >= end || end > a.dim(1)) throw DimensionError("slice_cols: bad range");
  std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<std::size_t> idx(r * w);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < w; ++j) idx[i * w + j] = i * c + begin + j;
  }
  return gather(a, {r, w}, std::move(idx));
}

/// Concatenates along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) {
        throw DimensionError("concat: " + shape_str(ref) + " vs " + shape_str(s));
      }
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  Shape shape = ref;
  shape[axis] = total;
  std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(parts[p].data().begin() + o * widths[p], widths[p],
                  out.begin() + o * row + off);
    }
    off += widths[p];
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node_ptr());
  return detail::record(
      "concat", std::move(shape), std::move(out), parts,
      [nodes, widths, outer, row](const std::vector<double>& g) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
          if (nodes[p]->requires_grad) {
            auto& gp = detail::grad_buffer(*nodes[p]);
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t j = 0; j < widths[p]; ++j) {
                gp[o * widths[p] + j] += g[o * row + off + j];
              }
            }
          }
          off += widths[p];
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::record(
      "matmul", {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](const std::vector<double>& g) {
        if (an->requires_grad) {  // dA = dC * B^T
          auto& ga = detail::grad_buffer(*an);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bn->data[p * n + j];
              ga[i * k + p] += s;
            }
          }
        }
        if (bn->requires_grad) {  // dB = A^T * dC
          auto& gb = detail::grad_buffer(*bn);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double av = an->data[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
            }
          }
        }
      });
}

/// x[..., d] + b[d]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.shape().back() != b.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  std::size_t d = b.dim(0);
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % d];
  auto xn = x.node_ptr(), bn = b.node_ptr();
  return detail::record("add_bias", x.shape(), std::move(out), {x, b},
                        [xn, bn, d](const std::vector<double>& g) {
                          if (xn->requires_grad) {
                            auto& gx = detail::grad_buffer(*xn);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = detail::grad_buffer(*bn);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  detail::require_finite("softmax", x.data());
  std::size_t outer = 1, inner = 1, n = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> y(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        y[base + j * inner] = std::exp(x[base + j * inner] - mx);
        s += y[base + j * inner];
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= s;
    }
  }
  auto xn = x.node_ptr();
  std::vector<double> ys = y;
  return detail::record(
      "softmax", x.shape(), std::move(y), {x},
      [xn, ys = std::move(ys), outer, inner, n](const std::vector<double>& g) {
        auto& gx = detail::grad_buffer(*xn);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * ys[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              std::size_t k = base + j * inner;
              gx[k] += ys[k] * (g[k] - dot);
            }
          }
        }
      });
}

inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("layernorm: eps must be positive");
  std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
    throw DimensionError("layernorm: " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  std::size_t rows = x.numel() / d;
  std::vector<double> y(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      y[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return detail::record(
      "layernorm", x.shape(), std::move(y), {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       d](const std::vector<double>& g) {
        if (gn->requires_grad) {
          auto& gg = detail::grad_buffer(*gn);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
        }
        if (bn->requires_grad) {
          auto& gb = detail::grad_buffer(*bn);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
        if (!xn->requires_grad) return;
        auto& gx = detail::grad_buffer(*xn);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = g[r * d + j] * gn->data[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[r * d + j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution (channels-first, single image)

/// x[Cin x H x W] (*) w[Cout x Cin x k x k], zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  detail::require_rank("conv2d", x, 3);
  detail::require_rank("conv2d", w, 4);
  std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernel " +
                         shape_str(w.shape()));
  }
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (h + 2 * pad < k || wd + 2 * pad < k) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()) + " (pad " + std::to_string(pad) + ")");
  }
  std::size_t ho = (h + 2 * pad - k) / stride + 1;
  std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(cout * ho * wo, 0.0);
  const double* X = x.data().data();
  const double* W = w.data().data();
  auto in_at = [&](std::size_t oy, std::size_t ky, std::size_t lim, std::ptrdiff_t& iy) {
    iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
    return iy >= 0 && iy < static_cast<std::ptrdiff_t>(lim);
  };
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double wv = W[((co * cin + ci) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            std::ptrdiff_t iy;
            if (!in_at(oy, ky, h, iy)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              std::ptrdiff_t ix;
              if (!in_at(ox, kx, wd, ix)) continue;
              out[(co * ho + oy) * wo + ox] += wv * X[(ci * h + iy) * wd + ix];
            }
          }
        }
      }
    }
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  return detail::record(
      "conv2d", {cout, ho, wo}, std::move(out), {x, w},
      [xn, wn, cin, h, wd, cout, k, ho, wo, stride, pad](const std::vector<double>& g) {
        std::vector<double>* gx = xn->requires_grad ? &detail::grad_buffer(*xn) : nullptr;
        std::vector<double>* gw = wn->requires_grad ? &detail::grad_buffer(*wn) : nullptr;
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                double wv = wn->data[widx];
                double acc = 0.0;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                              static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                    double go = g[(co * ho + oy) * wo + ox];
                    std::size_t xidx = (ci * h + iy) * wd + ix;
                    acc += go * xn->data[xidx];
                    if (gx) (*gx)[xidx] += go * wv;
                  }
                }
                if (gw) (*gw)[widx] += acc;
              }
            }
          }
        }
      });
}

/// x[C x H x W] with one k x k kernel per channel, stride 1, zero padding.
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  detail::require_rank("depthwise_conv2d", x, 3);
  detail::require_rank("depthwise_conv2d", w, 3);
  std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2), k = w.dim(1);
  if (w.dim(0) != c) {
    throw DimensionError("depthwise_conv2d: " + std::to_string(c) + " input channels vs " +
                         std::to_string(w.dim(0)) + " kernels");
  }
  if (w.dim(2) != k) throw DimensionError("depthwise_conv2d: kernel must be square");
  if (h + 2 * pad < k || wd + 2 * pad < k) {
    throw DimensionError("depthwise_conv2d: kernel larger than padded input");
  }
  std::size_t ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  std::vector<double> out(c * ho * wo, 0.0);
  auto src = [pad](std::size_t o, std::size_t kk, std::size_t lim) -> std::ptrdiff_t {
    auto i = static_cast<std::ptrdiff_t>(o + kk) - static_cast<std::ptrdiff_t>(pad);
    return (i < 0 || i >= static_cast<std::ptrdiff_t>(lim)) ? -1 : i;
  };
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double wv = w[(ch * k + ky) * k + kx];
        for (std::size_t oy = 0; oy < ho; ++oy) {
          auto iy = src(oy, ky, h);
          if (iy < 0) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            auto ix = src(ox, kx, wd);
            if (ix < 0) continue;
            out[(ch * ho + oy) * wo + ox] += wv * x[(ch * h + iy) * wd + ix];
          }
        }
      }
    }
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  return detail::record(
      "depthwise_conv2d", {c, ho, wo}, std::move(out), {x, w},
      [xn, wn, c, h, wd, k, ho, wo, src](const std::vector<double>& g) {
        std::vector<double>* gx = xn->requires_grad ? &detail::grad_buffer(*xn) : nullptr;
        std::vector<double>* gw = wn->requires_grad ? &detail::grad_buffer(*wn) : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              std::size_t widx = (ch * k + ky) * k + kx;
              double wv = wn->data[widx], acc = 0.0;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                auto iy = src(oy, ky, h);
                if (iy < 0) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  auto ix = src(ox, kx, wd);
                  if (ix < 0) continue;
                  double go = g[(ch * ho + oy) * wo + ox];
                  std::size_t xidx = (ch * h + iy) * wd + ix;
                  acc += go * xn->data[xidx];
                  if (gx) (*gx)[xidx] += go * wv;
                }
              }
              if (gw) (*gw)[widx] += acc;
            }
          }
        }
      });
}

/// x[C x H x W] + b[C]
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  detail::require_rank("add_channel_bias", x, 3);
  if (b.rank() != 1 || b.dim(0) != x.dim(0)) {
    throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
  }
  std::size_t plane = x.dim(1) * x.dim(2);
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i / plane];
  auto xn = x.node_ptr(), bn = b.node_ptr();
  return detail::record("add_channel_bias", x.shape(), std::move(out), {x, b},
                        [xn, bn, plane](const std::vector<double>& g) {
                          if (xn->requires_grad) {
                            auto& gx = detail::grad_buffer(*xn);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = detail::grad_buffer(*bn);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i / plane] += g[i];
                          }
                        });
}

/// Per-channel mean over rows [r0, r1) and columns [c0, c1) of x[C x H x W].
inline Tensor region_mean(const Tensor& x, std::size_t r0, std::size_t r1, std::size_t c0,
                          std::size_t c1) {
  detail::require_rank("region_mean", x, 3);
  if (r0 >= r1 || c0 >= c1 || r1 > x.dim(1) || c1 > x.dim(2)) {
    throw GeometryError("region_mean: empty or out-of-range region rows [" +
                        std::to_string(r0) + "," + std::to_string(r1) + ") cols [" +
                        std::to_string(c0) + "," + std::to_string(c1) + ") on " +
                        shape_str(x.shape()));
  }
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
  std::vector<double> out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t q = c0; q < c1; ++q) s += x[(ch * h + r) * w + q];
    }
    out[ch] = s * inv;
  }
  auto xn = x.node_ptr();
  return detail::record("region_mean", {c}, std::move(out), {x},
                        [xn, h, w, r0, r1, c0, c1, inv](const std::vector<double>& g) {
                          auto& gx = detail::grad_buffer(*xn);
                          for (std::size_t ch = 0; ch < g.size(); ++ch) {
                            for (std::size_t r = r0; r < r1; ++r) {
                              for (std::size_t q = c0; q < c1; ++q) {
                                gx[(ch * h + r) * w + q] += g[ch] * inv;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over labelled rows of -log softmax(logits)[row, target]. Rows with no
/// target are skipped; with no labelled rows the result is a constant zero.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::optional<int>>& targets) {
  detail::require_rank("cross_entropy", logits, 2);
  std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()));
  }
  detail::require_finite("cross_entropy", logits.data());
  std::size_t count = 0;
  for (const auto& t : targets) {
    if (!t) continue;
    if (*t < 0 || static_cast<std::size_t>(*t) >= k) {
      throw ContractError("cross_entropy: class id " + std::to_string(*t) + " out of range");
    }
    ++count;
  }
  if (count == 0) return Tensor::scalar(0.0);
  std::vector<double> probs(b * k, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (!targets[i]) continue;
    const double* z = logits.data().data() + i * k;
    double mx = *std::max_element(z, z + k), s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - mx);
    double lse = mx + std::log(s);
    loss += lse - z[*targets[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[j] - lse);
  }
  double inv = 1.0 / static_cast<double>(count);
  auto ln = logits.node_ptr();
  return detail::record("cross_entropy", {1}, {loss * inv}, {logits},
                        [ln, probs = std::move(probs), targets, k, inv](const std::vector<double>& g) {
                          auto& gl = detail::grad_buffer(*ln);
                          for (std::size_t i = 0; i < targets.size(); ++i) {
                            if (!targets[i]) continue;
                            for (std::size_t j = 0; j < k; ++j) {
                              double onehot = static_cast<int>(j) == *targets[i] ? 1.0 : 0.0;
                              gl[i * k + j] += g[0] * inv * (probs[i * k + j] - onehot);
                            }
                          }
                        });
}

/// Mean binary cross-entropy of sigmoid(logits) over entries whose mask is set.
/// With no valid entries the result is a constant zero.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets,
                              const std::vector<std::uint8_t>& mask) {
  if (targets.size() != logits.numel() || mask.size() != logits.numel()) {
    throw DimensionError("bce_with_logits: targets/mask size does not match " +
                         shape_str(logits.shape()));
  }
  detail::require_finite("bce_with_logits", logits.data());
  std::size_t count = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    double z = logits[i];
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    ++count;
  }
  if (count == 0) return Tensor::scalar(0.0);
  double inv = 1.0 / static_cast<double>(count);
  auto ln = logits.node_ptr();
  return detail::record("bce_with_logits", {1}, {loss * inv}, {logits},
                        [ln, targets, mask, inv](const std::vector<double>& g) {
                          auto& gl = detail::grad_buffer(*ln);
                          for (std::size_t i = 0; i < mask.size(); ++i) {
                            if (!mask[i]) continue;
                            double sig = 1.0 / (1.0 + std::exp(-ln->data[i]));
                            gl[i] += g[0] * inv * (sig - targets[i]);
                          }
                        });
}

}  // namespace aucvt
