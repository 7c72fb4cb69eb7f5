#include "adlprune/ops.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace adlprune::ops {

namespace {

using detail::Node;

// Gradient sink for input i, or nullptr when that input is constant.
std::vector<double>* sink(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  if (in == nullptr || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(fmt::format("{}: incompatible shapes {} and {}", op,
                               shape_str(a.shape()), shape_str(b.shape())));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(fmt::format("{}: expected rank {}, got {}", op, rank,
                                 shape_str(t.shape())));
  }
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df, const char* name) {
  auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = f(xs[i]);
  return Tensor::record(
      x.shape(), std::move(y), {x},
      [df](Node& self) {
        auto* gx = sink(self, 0);
        if (!gx) return;
        const auto& xv = self.inputs[0]->data;
        for (std::size_t i = 0; i < xv.size(); ++i) {
          (*gx)[i] += self.grad[i] * df(xv[i], self.data[i]);
        }
      },
      name);
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a, b);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> y(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = y.data() + (i * n);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* br = bv.data() + (p * n);
      for (std::size_t j = 0; j < n; ++j) yr[j] += aip * br[j];
    }
  }
  return Tensor::record(
      {m, n}, std::move(y), {a, b},
      [m, k, n](Node& self) {
        const auto& g = self.grad;
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        if (auto* ga = sink(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              (*ga)[i * k + p] += acc;
            }
          }
        }
        if (auto* gb = sink(self, 1)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              double* gr = gb->data() + p * n;
              for (std::size_t j = 0; j < n; ++j) gr[j] += aip * g[i * n + j];
            }
          }
        }
      },
      "matmul");
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank("batched_matmul", a, 3);
  require_rank("batched_matmul", b, 3);
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2);
  if (b.dim(0) != bs) mismatch("batched_matmul", a, b);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) mismatch("batched_matmul", a, b);

  // Element (p, j) of the logical [K, N] right operand in batch q.
  auto b_index = [=](std::size_t q, std::size_t p, std::size_t j) {
    return transpose_b ? q * n * k + j * k + p : q * k * n + p * n + j;
  };

  auto av = a.data();
  auto bv = b.data();
  std::vector<double> y(bs * m * n, 0.0);
  for (std::size_t q = 0; q < bs; ++q) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = av.data() + ((q * m + i) * k);
      double* yr = y.data() + ((q * m + i) * n);
      if (transpose_b) {
        for (std::size_t j = 0; j < n; ++j) {
          const double* br = bv.data() + ((q * n + j) * k);
          double acc = 0.0;
          for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
          yr[j] = acc;
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const double* br = bv.data() + ((q * k + p) * n);
          for (std::size_t j = 0; j < n; ++j) yr[j] += ar[p] * br[j];
        }
      }
    }
  }
  return Tensor::record(
      {bs, m, n}, std::move(y), {a, b},
      [=](Node& self) {
        const auto& g = self.grad;
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        auto* ga = sink(self, 0);
        auto* gb = sink(self, 1);
        for (std::size_t q = 0; q < bs; ++q) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* gr = g.data() + ((q * m + i) * n);
            const double* ar = av.data() + ((q * m + i) * k);
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                acc += gr[j] * bv[b_index(q, p, j)];
                if (gb) (*gb)[b_index(q, p, j)] += ar[p] * gr[j];
              }
              if (ga) (*ga)[(q * m + i) * k + p] += acc;
            }
          }
        }
      },
      "batched_matmul");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", weight, 2);
  if (x.rank() < 1) mismatch("linear", x, weight);
  const std::size_t in = weight.dim(1), out = weight.dim(0);
  if (x.shape().back() != in) mismatch("linear", x, weight);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
    mismatch("linear", weight, bias);
  }
  // Leading dims, so zero-width inputs (fully pruned sites) still work.
  const std::size_t r_count =
      numel(Shape(x.shape().begin(), x.shape().end() - 1));
  Shape yshape = x.shape();
  yshape.back() = out;

  auto xv = x.data();
  auto wv = weight.data();
  std::vector<double> y(numel(yshape), 0.0);
  for (std::size_t r = 0; r < r_count; ++r) {
    const double* xr = xv.data() + r * in;
    double* yr = y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = wv.data() + o * in;
      double acc = bias.defined() ? bias.data()[o] : 0.0;
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      yr[o] = acc;
    }
  }
  return Tensor::record(
      std::move(yshape), std::move(y), {x, weight, bias},
      [=](Node& self) {
        const auto& g = self.grad;
        const auto& xv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        auto* gx = sink(self, 0);
        auto* gw = sink(self, 1);
        auto* gb = self.inputs[2] ? sink(self, 2) : nullptr;
        for (std::size_t r = 0; r < r_count; ++r) {
          const double* gr = g.data() + r * out;
          const double* xr = xv.data() + r * in;
          for (std::size_t o = 0; o < out; ++o) {
            const double go = gr[o];
            if (go == 0.0) continue;
            const double* wr = wv.data() + o * in;
            if (gx) {
              double* gxr = gx->data() + r * in;
              for (std::size_t p = 0; p < in; ++p) gxr[p] += go * wr[p];
            }
            if (gw) {
              double* gwr = gw->data() + o * in;
              for (std::size_t p = 0; p < in; ++p) gwr[p] += go * xr[p];
            }
            if (gb) (*gb)[o] += go;
          }
        }
      },
      "linear");
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto av = a.data();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = av[i * n + j];
  return Tensor::record(
      {n, m}, std::move(y), {a},
      [m, n](Node& self) {
        if (auto* ga = sink(self, 0)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
        }
      },
      "transpose");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError(fmt::format("reshape: cannot view {} as {}",
                                 shape_str(a.shape()), shape_str(shape)));
  }
  std::vector<double> y(a.data().begin(), a.data().end());
  return Tensor::record(
      std::move(shape), std::move(y), {a},
      [](Node& self) {
        if (auto* ga = sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        }
      },
      "reshape");
}

namespace {

// Shared driver for add/sub/mul with scalar-or-equal-shape broadcasting.
// `da`/`db` give the local partials given (a_i, b_i).
template <typename F, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da,
              DB db) {
  const bool same = a.shape() == b.shape();
  if (!same && !is_scalar(a) && !is_scalar(b)) mismatch(name, a, b);
  const Shape& out_shape = (same || is_scalar(b)) ? a.shape() : b.shape();
  const std::size_t n = numel(out_shape);
  const bool a_bc = a.numel() != n || (is_scalar(a) && !same);
  const bool b_bc = b.numel() != n || (is_scalar(b) && !same);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = f(av[a_bc ? 0 : i], bv[b_bc ? 0 : i]);
  return Tensor::record(
      out_shape, std::move(y), {a, b},
      [=](Node& self) {
        const auto& ad = self.inputs[0]->data;
        const auto& bd = self.inputs[1]->data;
        auto* ga = sink(self, 0);
        auto* gb = sink(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = ad[a_bc ? 0 : i];
          const double z = bd[b_bc ? 0 : i];
          if (ga) (*ga)[a_bc ? 0 : i] += self.grad[i] * da(x, z);
          if (gb) (*gb)[b_bc ? 0 : i] += self.grad[i] * db(x, z);
        }
      },
      name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double z) { return x + z; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double z) { return x - z; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double z) { return x * z; },
      [](double, double z) { return z; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; }, "scale");
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; },
      [](double, double) { return 1.0; }, "add_scalar");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  if (x.rank() < 1 || x.shape().back() != bias.dim(0)) mismatch("add_bias", x, bias);
  const std::size_t d = bias.dim(0);
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<double> y(xv.begin(), xv.end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % d];
  return Tensor::record(
      x.shape(), std::move(y), {x, bias},
      [d](Node& self) {
        if (auto* gx = sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
        }
        if (auto* gb = sink(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % d] += self.grad[i];
        }
      },
      "add_bias");
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return sigmoid(v); },
      [](double, double s) { return s * (1.0 - s); }, "sigmoid");
}

Tensor swish(const Tensor& x) {
  return unary(
      x, [](double v) { return v * sigmoid(v); },
      [](double v, double) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      },
      "swish");
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; }, "exp");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::record(
      {}, {acc}, {x},
      [](Node& self) {
        if (auto* gx = sink(self, 0)) {
          for (auto& g : *gx) g += self.grad[0];
        }
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_squares(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  return Tensor::record(
      {}, {acc}, {x},
      [](Node& self) {
        if (auto* gx = sink(self, 0)) {
          const auto& xv = self.inputs[0]->data;
          for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += 2.0 * xv[i] * self.grad[0];
        }
      },
      "sum_squares");
}

Tensor softmax_lastdim(const Tensor& x, double scale) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError(fmt::format("softmax_lastdim: empty last dim in {}",
                                 shape_str(x.shape())));
  }
  if (!(scale > 0.0)) throw std::invalid_argument("softmax_lastdim: scale must be > 0");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + (r * d);
    double* yr = y.data() + (r * d);
    double mx = xr[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = std::exp(scale * (xr[j] - mx));
      z += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
  }
  return Tensor::record(
      x.shape(), std::move(y), {x},
      [d, rows, scale](Node& self) {
        auto* gx = sink(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = self.data.data() + (r * d);
          const double* gr = self.grad.data() + (r * d);
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < d; ++j) {
            (*gx)[r * d + j] += scale * yr[j] * (gr[j] - dot);
          }
        }
      },
      "softmax_lastdim");
}

Tensor depthwise_conv1d(const Tensor& z, const Tensor& w) {
  if (z.rank() != 2 && z.rank() != 3) {
    throw ShapeError(fmt::format("depthwise_conv1d: expected [T,D] or [B,T,D], got {}",
                                 shape_str(z.shape())));
  }
  require_rank("depthwise_conv1d", w, 2);
  const std::size_t k = w.dim(1);
  if (k % 2 == 0) {
    throw ShapeError(fmt::format("depthwise_conv1d: kernel size {} must be odd", k));
  }
  const std::size_t bs = z.rank() == 3 ? z.dim(0) : 1;
  const std::size_t t_len = z.dim(z.rank() - 2);
  const std::size_t d = z.dim(z.rank() - 1);
  if (w.dim(0) != d) mismatch("depthwise_conv1d", z, w);
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto tl = static_cast<std::ptrdiff_t>(t_len);

  auto zv = z.data();
  auto wv = w.data();
  std::vector<double> y(z.numel(), 0.0);
  for (std::size_t q = 0; q < bs; ++q) {
    const std::size_t base = q * t_len * d;
    for (std::ptrdiff_t t = 0; t < tl; ++t) {
      double* yr = y.data() + (base + static_cast<std::size_t>(t) * d);
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(j) - pad;
        if (src < 0 || src >= tl) continue;
        const double* zr = zv.data() + (base + static_cast<std::size_t>(src) * d);
        for (std::size_t c = 0; c < d; ++c) yr[c] += wv[c * k + j] * zr[c];
      }
    }
  }
  return Tensor::record(
      z.shape(), std::move(y), {z, w},
      [=](Node& self) {
        const auto& zv = self.inputs[0]->data;
        const auto& wv = self.inputs[1]->data;
        auto* gz = sink(self, 0);
        auto* gw = sink(self, 1);
        for (std::size_t q = 0; q < bs; ++q) {
          const std::size_t base = q * t_len * d;
          for (std::ptrdiff_t t = 0; t < tl; ++t) {
            const double* gr = self.grad.data() + (base + static_cast<std::size_t>(t) * d);
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(j) - pad;
              if (src < 0 || src >= tl) continue;
              const std::size_t off = base + static_cast<std::size_t>(src) * d;
              for (std::size_t c = 0; c < d; ++c) {
                if (gz) (*gz)[off + c] += wv[c * k + j] * gr[c];
                if (gw) (*gw)[c * k + j] += zv[off + c] * gr[c];
              }
            }
          }
        }
      },
      "depthwise_conv1d");
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_rank("layernorm", gain, 1);
  require_rank("layernorm", bias, 1);
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError(fmt::format("layernorm: empty last dim in {}", shape_str(x.shape())));
  }
  const std::size_t d = x.shape().back();
  if (gain.dim(0) != d) mismatch("layernorm", x, gain);
  if (bias.dim(0) != d) mismatch("layernorm", x, bias);
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> y(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + (r * d);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::record(
      x.shape(), std::move(y), {x, gain, bias},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = self.inputs[1]->data;
        auto* gx = sink(self, 0);
        auto* gg = sink(self, 1);
        auto* gb = sink(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = self.grad.data() + (r * d);
          const double* hr = xhat.data() + (r * d);
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = gr[j] * gv[j];
              m1 += gh;
              m2 += gh * hr[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              (*gx)[r * d + j] += inv_std[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
            }
          }
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) (*gg)[j] += gr[j] * hr[j];
            if (gb) (*gb)[j] += gr[j];
          }
        }
      },
      "layernorm");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError(fmt::format("cross_entropy: {} labels for {} rows", labels.size(), n));
  }
  if (n == 0 || c == 0) throw ShapeError("cross_entropy: empty logits");
  auto lv = logits.data();
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw std::out_of_range(fmt::format("cross_entropy: label {} not in [0, {})", label, c));
    }
    const double* lr = lv.data() + (i * c);
    const double mx = *std::max_element(lr, lr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(lr[j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += std::log(z) + mx - lr[label];
  }
  loss /= static_cast<double>(n);
  std::vector<int> saved(labels.begin(), labels.end());
  return Tensor::record(
      {}, {loss}, {logits},
      [n, c, probs = std::move(probs), saved = std::move(saved)](Node& self) {
        auto* gl = sink(self, 0);
        if (!gl) return;
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = static_cast<int>(j) == saved[i] ? 1.0 : 0.0;
            (*gl)[i * c + j] += g * (probs[i * c + j] - onehot);
          }
        }
      },
      "cross_entropy");
}

}  // namespace adlprune::ops
