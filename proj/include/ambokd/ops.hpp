#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ambokd/errors.hpp"
#include "ambokd/tape.hpp"
#include "ambokd/tensor.hpp"

// Differentiable operations over Var. Every op computes its forward value
// eagerly and records a backward closure that reads forward values back from
// the tape by id.
namespace ambokd {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw dimension_error(std::string(op) + ": expected rank " +
                          std::to_string(rank) + ", got shape " +
                          shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw dimension_error(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::size_t last_dim(const Tensor& t) {
  return t.rank() == 0 ? 1 : t.shape().back();
}

// out[m×n] += a[m×k] * b[k×n], all row-major.
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m×k] += g[m×n] * b[k×n]^T
inline void gemm_nt(const double* g, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out[k×n] += a[m×k]^T * g[m×n]
inline void gemm_tn(const double* a, const double* g, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

inline void softmax_rows(std::span<const double> x, std::span<double> out,
                         std::size_t cols, double temperature) {
  const std::size_t rows = cols ? x.size() / cols : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp((in[c] - mx) / temperature);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
}

inline void log_softmax_rows(std::span<const double> x, std::span<double> out,
                             std::size_t cols, double temperature) {
  const std::size_t rows = cols ? x.size() / cols : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp((in[c] - mx) / temperature);
    const double lz = std::log(z);
    for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mx) / temperature - lz;
  }
}

inline void check_temperature(double temperature, const char* op) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw parameter_error(std::string(op) + ": temperature must be positive, got " +
                          std::to_string(temperature));
}

}  // namespace detail

/// Value-only softmax along the last axis.
inline Tensor softmax_values(const Tensor& x, double temperature = 1.0) {
  detail::check_temperature(temperature, "softmax");
  Tensor out(x.shape());
  detail::softmax_rows(x.data(), out.data(), detail::last_dim(x), temperature);
  return out;
}

inline Var detach(Var a) { return a.tape->constant(a.value()); }

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw dimension_error("matmul: incompatible shapes " + shape_str(av.shape()) +
                          " and " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, m, k, n](const Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0])
          detail::gemm_nt(g.data().data(), t.value(b).data().data(),
                          gin[0]->data().data(), m, k, n);
        if (gin[1])
          detail::gemm_tn(t.value(a).data().data(), g.data().data(),
                          gin[1]->data().data(), m, k, n);
      });
}

/// Batched matmul: [B×m×k] x [B×k×n] -> [B×m×n].
inline Var bmm(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != bv.dim(1))
    throw dimension_error("bmm: incompatible shapes " + shape_str(av.shape()) +
                          " and " + shape_str(bv.shape()));
  const std::size_t bs = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  Tensor out({bs, m, n});
  for (std::size_t i = 0; i < bs; ++i)
    detail::gemm_nn(av.data().data() + i * m * k, bv.data().data() + i * k * n,
                    out.data().data() + i * m * n, m, k, n);
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, bs, m, k, n](const Tape& t, const Tensor& g,
                          std::span<Tensor* const> gin) {
        const double* ap = t.value(a).data().data();
        const double* bp = t.value(b).data().data();
        for (std::size_t i = 0; i < bs; ++i) {
          const double* gp = g.data().data() + i * m * n;
          if (gin[0])
            detail::gemm_nt(gp, bp + i * k * n, gin[0]->data().data() + i * m * k, m,
                            k, n);
          if (gin[1])
            detail::gemm_tn(ap + i * m * k, gp, gin[1]->data().data() + i * k * n, m,
                            k, n);
        }
      });
}

/// Swaps the last two axes of a rank-3 tensor.
inline Var transpose_last2(Var a) {
  const Tensor& av = a.value();
  detail::require_rank(av, 3, "transpose_last2");
  const std::size_t bs = av.dim(0), m = av.dim(1), n = av.dim(2);
  Tensor out({bs, n, m});
  for (std::size_t b = 0; b < bs; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[(b * n + j) * m + i] = av[(b * m + i) * n + j];
  return a.tape->record(std::move(out), {a},
                        [bs, m, n](const Tape&, const Tensor& g,
                                   std::span<Tensor* const> gin) {
                          for (std::size_t b = 0; b < bs; ++b)
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                (*gin[0])[(b * m + i) * n + j] +=
                                    g[(b * n + j) * m + i];
                        });
}

/// Adds a bias vector along the last axis.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const std::size_t n = detail::last_dim(xv);
  if (bv.size() != n)
    throw dimension_error("add_bias: bias " + shape_str(bv.shape()) +
                          " does not match last axis of " + shape_str(xv.shape()));
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return x.tape->record(std::move(out), {x, bias},
                        [n](const Tape&, const Tensor& g,
                            std::span<Tensor* const> gin) {
                          if (gin[0])
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[0])[i] += g[i];
                          if (gin[1])
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[1])[i % n] += g[i];
                        });
}

/// x·W + b for x [rows×in], W [in×out], b [out].
inline Var linear(Var x, Var weight, Var bias) {
  return add_bias(matmul(x, weight), bias);
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b},
                        [](const Tape&, const Tensor& g,
                           std::span<Tensor* const> gin) {
                          for (Tensor* gi : gin)
                            if (gi)
                              for (std::size_t i = 0; i < g.size(); ++i)
                                (*gi)[i] += g[i];
                        });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape->record(std::move(out), {a},
                        [factor](const Tape&, const Tensor& g,
                                 std::span<Tensor* const> gin) {
                          for (std::size_t i = 0; i < g.size(); ++i)
                            (*gin[0])[i] += factor * g[i];
                        });
}

/// Element-wise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b},
                        [a, b](const Tape& t, const Tensor& g,
                               std::span<Tensor* const> gin) {
                          const Tensor& av = t.value(a);
                          const Tensor& bv = t.value(b);
                          if (gin[0])
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[0])[i] += g[i] * bv[i];
                          if (gin[1])
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gin[1])[i] += g[i] * av[i];
                        });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a},
                        [a](const Tape& t, const Tensor& g,
                            std::span<Tensor* const> gin) {
                          const Tensor& av = t.value(a);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (av[i] > 0.0) (*gin[0])[i] += g[i];
                        });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a},
                        [self](const Tape& t, const Tensor& g,
                               std::span<Tensor* const> gin) {
                          const Tensor& y = t.value(Var{nullptr, self});
                          for (std::size_t i = 0; i < g.size(); ++i)
                            (*gin[0])[i] += g[i] * (1.0 - y[i] * y[i]);
                        });
}

/// Sum of all elements, as a [1] tensor.
inline Var sum(Var a) {
  const std::size_t n = a.value().size();
  return a.tape->record(Tensor::scalar(a.value().sum()), {a},
                        [n](const Tape&, const Tensor& g,
                            std::span<Tensor* const> gin) {
                          for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[0];
                        });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw dimension_error("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Σ c_i·a_i for a constant tensor c of the same shape.
inline Var dot_const(Var a, const Tensor& c) {
  detail::require_same_shape(a.value(), c, "dot_const");
  double s = 0.0;
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * c[i];
  return a.tape->record(Tensor::scalar(s), {a},
                        [c](const Tape&, const Tensor& g,
                            std::span<Tensor* const> gin) {
                          for (std::size_t i = 0; i < c.size(); ++i)
                            (*gin[0])[i] += g[0] * c[i];
                        });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a},
                        [](const Tape&, const Tensor& g,
                           std::span<Tensor* const> gin) {
                          for (std::size_t i = 0; i < g.size(); ++i)
                            (*gin[0])[i] += g[i];
                        });
}

/// Concatenates along the last axis; all leading dimensions must agree.
inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw dimension_error("concat_last: no inputs");
  const Tensor& first = parts.front().value();
  Shape lead(first.shape().begin(), first.shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    Shape l(v.shape().begin(), v.shape().end() - 1);
    if (l != lead)
      throw dimension_error("concat_last: leading dimensions differ: " +
                            shape_str(first.shape()) + " vs " + shape_str(v.shape()));
    widths.push_back(v.shape().back());
    total += v.shape().back();
  }
  const std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * widths[p], widths[p],
                  out.data().data() + r * total + offset);
    offset += widths[p];
  }
  return parts.front().tape->record(
      std::move(out), parts,
      [widths, rows, total](const Tape&, const Tensor& g,
                            std::span<Tensor* const> gin) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < gin.size(); ++p) {
          if (gin[p])
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[p]; ++c)
                (*gin[p])[r * widths[p] + c] += g[r * total + offset + c];
          offset += widths[p];
        }
      });
}

/// Softmax along the last axis of exp(x/temperature), max-subtracted.
inline Var softmax(Var x, double temperature = 1.0) {
  Tensor out = softmax_values(x.value(), temperature);
  const std::size_t cols = detail::last_dim(out);
  const std::size_t self = x.tape->size();
  return x.tape->record(
      std::move(out), {x},
      [self, cols, temperature](const Tape& t, const Tensor& g,
                                std::span<Tensor* const> gin) {
        const Tensor& y = t.value(Var{nullptr, self});
        const std::size_t rows = y.size() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            (*gin[0])[i] += y[i] * (g[i] - dot) / temperature;
          }
        }
      });
}

inline Var log_softmax(Var x, double temperature = 1.0) {
  detail::check_temperature(temperature, "log_softmax");
  const Tensor& xv = x.value();
  const std::size_t cols = detail::last_dim(xv);
  Tensor out(xv.shape());
  detail::log_softmax_rows(xv.data(), out.data(), cols, temperature);
  const std::size_t self = x.tape->size();
  return x.tape->record(
      std::move(out), {x},
      [self, cols, temperature](const Tape& t, const Tensor& g,
                                std::span<Tensor* const> gin) {
        const Tensor& y = t.value(Var{nullptr, self});
        const std::size_t rows = y.size() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            (*gin[0])[i] += (g[i] - std::exp(y[i]) * gs) / temperature;
          }
        }
      });
}

/// Selects x[r, index[r]] from a [rows×cols] tensor, giving [rows].
inline Var pick(Var x, std::span<const std::uint32_t> index) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "pick");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (index.size() != rows)
    throw dimension_error("pick: " + std::to_string(index.size()) +
                          " indices for " + std::to_string(rows) + " rows");
  Tensor out({rows});
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= cols)
      throw data_error("pick: index " + std::to_string(idx[r]) +
                       " out of range for " + std::to_string(cols) + " columns");
    out[r] = xv[r * cols + idx[r]];
  }
  return x.tape->record(std::move(out), {x},
                        [idx, cols](const Tape&, const Tensor& g,
                                    std::span<Tensor* const> gin) {
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            (*gin[0])[r * cols + idx[r]] += g[r];
                        });
}

/// 2-D convolution, NCHW input and OIKK weights, square kernel, zero padding.
inline Var conv2d(Var input, Var weight, Var bias, std::size_t stride,
                  std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(w, 4, "conv2d weight");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k || bias.value().size() != o)
    throw dimension_error("conv2d: weight " + shape_str(w.shape()) +
                          " incompatible with input " + shape_str(x.shape()));
  if (stride == 0) throw parameter_error("conv2d: stride must be positive");
  if (h + 2 * padding < k || wd + 2 * padding < k)
    throw dimension_error("conv2d: kernel larger than padded input " +
                          shape_str(x.shape()));
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - k) / stride + 1;
  Tensor out({n, o, oh, ow});
  const Tensor& bv = bias.value();

  // Visits every (output, input) tap pair that lands inside the input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const std::size_t oi = ((b * o + oc) * oh + y) * ow + xo;
            for (std::size_t ic = 0; ic < c; ++ic)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(y * stride + ky) -
                    static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(xo * stride + kx) -
                      static_cast<std::ptrdiff_t>(padding);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  const std::size_t ii =
                      ((b * c + ic) * h + static_cast<std::size_t>(iy)) * wd +
                      static_cast<std::size_t>(ix);
                  const std::size_t wi = ((oc * c + ic) * k + ky) * k + kx;
                  fn(oi, ii, wi);
                }
              }
          }
  };

  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bv[(i / (oh * ow)) % o];
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
    out[oi] += x[ii] * w[wi];
  });

  return input.tape->record(
      std::move(out), {input, weight, bias},
      [input, weight, for_each_tap, o, oh, ow](const Tape& t, const Tensor& g,
                                               std::span<Tensor* const> gin) {
        const Tensor& xv = t.value(input);
        const Tensor& wv = t.value(weight);
        Tensor* gx = gin[0];
        Tensor* gw = gin[1];
        if (gx || gw)
          for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
            const double go = g[oi];
            if (gx) (*gx)[ii] += go * wv[wi];
            if (gw) (*gw)[wi] += go * xv[ii];
          });
        if (gin[2])
          for (std::size_t i = 0; i < g.size(); ++i)
            (*gin[2])[(i / (oh * ow)) % o] += g[i];
      });
}

}  // namespace ambokd
