#include "recursor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "recursor/errors.hpp"

namespace recursor {

namespace {

using detail::Node;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::vector<double>* grad_of(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->ensure_grad() : nullptr;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return Tensor::make_result(a.shape(), std::move(out), name, {a}, [deriv](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i] += self.grad[i] * deriv(xv[i], self.value[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor::make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const auto& g = self.grad;
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[kk * n + j];
          (*ga)[i * k + kk] += acc;
        }
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double aik = av[i * k + kk];
          for (std::size_t j = 0; j < n; ++j) (*gb)[kk * n + j] += aik * g[i * n + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return Tensor::make_result({n, m}, std::move(out), "transpose", {a}, [m, n](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (std::size_t s = 0; s < 2; ++s)
      if (auto* g = grad_of(self, s))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& yv = self.inputs[1]->value;
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * yv[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * xv[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "scale_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (s.numel() != m) throw DimensionError("scale_rows: need one scale per row");
  const auto xv = x.data(), sv = s.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = sv[i] * xv[i * n + j];
  return Tensor::make_result({m, n}, std::move(out), "scale_rows", {x, s}, [m, n](Node& self) {
    const auto& xv2 = self.inputs[0]->value;
    const auto& sv2 = self.inputs[1]->value;
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += sv2[i] * self.grad[i * n + j];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += xv2[i * n + j] * self.grad[i * n + j];
        (*g)[i] += acc;
      }
  });
}

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return Tensor::make_result({1}, {acc}, "sum", {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (auto& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Tensor mean_rows(const Tensor& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (m == 0) throw DimensionError("mean_rows of empty matrix");
  const auto x = a.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return Tensor::make_result({n}, std::move(out), "mean_rows", {a}, [m, n](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j] / static_cast<double>(m);
  });
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), a.to_vector(), "reshape", {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor select_column(const Tensor& a, std::size_t column) {
  require_rank(a, 2, "select_column");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (column >= n) throw IndexError("select_column: column out of range");
  const auto x = a.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = x[i * n + column];
  return Tensor::make_result({m}, std::move(out), "select_column", {a}, [m, n, column](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i) (*g)[i * n + column] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> rows) {
  require_rank(table, 2, "gather_rows");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  for (int r : idx)
    if (r < 0 || static_cast<std::size_t>(r) >= v)
      throw IndexError("gather_rows: row " + std::to_string(r) + " outside [0," +
                       std::to_string(v) + ")");
  const auto x = table.data();
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + i * d);
  return Tensor::make_result({idx.size(), d}, std::move(out), "gather_rows", {table},
                             [idx, d](Node& self) {
                               if (auto* g = grad_of(self, 0))
                                 for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                     (*g)[idx[i] * d + j] += self.grad[i * d + j];
                             });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) { return gather_rows(table, ids); }

Tensor scatter_rows(const Tensor& base, std::span<const int> rows, const Tensor& values) {
  require_rank(base, 2, "scatter_rows");
  require_rank(values, 2, "scatter_rows");
  const std::size_t m = base.dim(0), d = base.dim(1);
  if (values.dim(1) != d || values.dim(0) != rows.size())
    throw DimensionError("scatter_rows: values shape " + shape_str(values.shape()));
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<bool> replaced(m, false);
  for (int r : idx) {
    if (r < 0 || static_cast<std::size_t>(r) >= m) throw IndexError("scatter_rows: bad row");
    if (replaced[r]) throw IndexError("scatter_rows: duplicate row");
    replaced[r] = true;
  }
  std::vector<double> out = base.to_vector();
  const auto vv = values.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(vv.begin() + static_cast<std::ptrdiff_t>(i * d), d, out.begin() + idx[i] * d);
  return Tensor::make_result({m, d}, std::move(out), "scatter_rows", {base, values},
                             [idx, replaced, m, d](Node& self) {
                               if (auto* g = grad_of(self, 0))
                                 for (std::size_t i = 0; i < m; ++i)
                                   if (!replaced[i])
                                     for (std::size_t j = 0; j < d; ++j)
                                       (*g)[i * d + j] += self.grad[i * d + j];
                               if (auto* g = grad_of(self, 1))
                                 for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                     (*g)[i * d + j] += self.grad[idx[i] * d + j];
                             });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t d = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != d) throw DimensionError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  if (parts.size() == 1) return parts[0];
  std::vector<double> out;
  out.reserve(rows * d);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    auto x = p.data();
    out.insert(out.end(), x.begin(), x.end());
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result({rows, d}, std::move(out), "concat_rows", std::move(inputs),
                             [offsets](Node& self) {
                               for (std::size_t s = 0; s < offsets.size(); ++s)
                                 if (auto* g = grad_of(self, s))
                                   for (std::size_t i = 0; i < g->size(); ++i)
                                     (*g)[i] += self.grad[offsets[s] + i];
                             });
}

Tensor softmax(const Tensor& x, int axis) {
  const auto& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  if (rank == 0) throw DimensionError("softmax of rank-0 tensor");
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) throw DimensionError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= shape[i];
  for (int i = ax + 1; i < rank; ++i) inner *= shape[i];
  const std::size_t n = shape[ax];
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  return Tensor::make_result(shape, std::move(out), "softmax", {x}, [outer, inner, n](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          (*g)[p] += y[p] * (self.grad[p] - s);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lz;
  }
  return Tensor::make_result(x.shape(), std::move(out), "log_softmax", {x}, [m, n](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        (*g)[i * n + j] += self.grad[i * n + j] - std::exp(self.value[i * n + j]) * gs;
    }
  });
}

Tensor logsumexp_rows(const Tensor& x) {
  require_rank(x, 2, "logsumexp_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xv = x.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    out[i] = mx + std::log(z);
  }
  return Tensor::make_result({m}, std::move(out), "logsumexp_rows", {x}, [m, n](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& xv2 = self.inputs[0]->value;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        (*g)[i * n + j] += self.grad[i] * std::exp(xv2[i * n + j] - self.value[i]);
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("rmsnorm: empty feature axis");
  if (weight.numel() != d) throw DimensionError("rmsnorm: weight length mismatch");
  const std::size_t m = x.numel() / d;
  const auto xv = x.data(), wv = weight.data();
  std::vector<double> out(xv.size());
  std::vector<double> inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xv[i * d + j] * xv[i * d + j];
    ms /= static_cast<double>(d);
    inv[i] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv[i] * wv[j];
  }
  return Tensor::make_result(x.shape(), std::move(out), "rmsnorm", {x, weight},
                             [m, d, inv](Node& self) {
                               const auto& xv2 = self.inputs[0]->value;
                               const auto& wv2 = self.inputs[1]->value;
                               auto* gx = grad_of(self, 0);
                               auto* gw = grad_of(self, 1);
                               for (std::size_t i = 0; i < m; ++i) {
                                 double proj = 0.0;
                                 for (std::size_t j = 0; j < d; ++j)
                                   proj += self.grad[i * d + j] * wv2[j] * xv2[i * d + j] * inv[i];
                                 proj /= static_cast<double>(d);
                                 for (std::size_t j = 0; j < d; ++j) {
                                   const double xhat = xv2[i * d + j] * inv[i];
                                   if (gw) (*gw)[j] += self.grad[i * d + j] * xhat;
                                   if (gx)
                                     (*gx)[i * d + j] +=
                                         inv[i] * (self.grad[i * d + j] * wv2[j] - xhat * proj);
                                 }
                               }
                             });
}

namespace {

void rope_rotate(std::span<const double> in, std::span<double> out, std::span<const int> positions,
                 std::size_t rows, std::size_t width, int n_heads, double base, double sign) {
  const std::size_t d_head = width / static_cast<std::size_t>(n_heads);
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = positions[r];
    for (int h = 0; h < n_heads; ++h) {
      const std::size_t off = r * width + static_cast<std::size_t>(h) * d_head;
      for (std::size_t i = 0; i < d_head / 2; ++i) {
        const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / d_head);
        const double c = std::cos(theta), s = sign * std::sin(theta);
        const double x0 = in[off + 2 * i], x1 = in[off + 2 * i + 1];
        out[off + 2 * i] = x0 * c - x1 * s;
        out[off + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace

Tensor rope(const Tensor& x, std::span<const int> positions, int n_heads, double base) {
  require_rank(x, 2, "rope");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (n_heads <= 0 || width % static_cast<std::size_t>(n_heads) != 0 ||
      (width / n_heads) % 2 != 0)
    throw DimensionError("rope: width must split into heads of even size");
  if (positions.size() != rows) throw DimensionError("rope: one position per row required");
  std::vector<int> pos(positions.begin(), positions.end());
  std::vector<double> out(x.numel());
  rope_rotate(x.data(), out, pos, rows, width, n_heads, base, 1.0);
  return Tensor::make_result(x.shape(), std::move(out), "rope", {x},
                             [pos, rows, width, n_heads, base](Node& self) {
                               auto* g = grad_of(self, 0);
                               if (!g) return;
                               std::vector<double> back(self.grad.size());
                               rope_rotate(self.grad, back, pos, rows, width, n_heads, base, -1.0);
                               for (std::size_t i = 0; i < back.size(); ++i) (*g)[i] += back[i];
                             });
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const int> query_pos, std::span<const int> key_pos, int n_heads,
                        int n_kv_heads) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  if (n_heads <= 0 || n_kv_heads <= 0 || n_heads % n_kv_heads != 0)
    throw DimensionError("attention: n_heads must be a multiple of n_kv_heads");
  const std::size_t tq = q.dim(0), tk = k.dim(0);
  const std::size_t hq = static_cast<std::size_t>(n_heads);
  const std::size_t hk = static_cast<std::size_t>(n_kv_heads);
  if (q.dim(1) % hq != 0) throw DimensionError("attention: query width not divisible by heads");
  const std::size_t dh = q.dim(1) / hq;
  if (k.dim(1) != hk * dh || v.dim(1) != hk * dh || v.dim(0) != tk)
    throw DimensionError("attention: key/value shapes " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()) + " incompatible with query " +
                         shape_str(q.shape()));
  if (query_pos.size() != tq || key_pos.size() != tk)
    throw DimensionError("attention: position lists must match row counts");
  const std::size_t group = hq / hk;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t qw = hq * dh, kw = hk * dh;
  const auto qv = q.data(), kvv = k.data(), vv = v.data();
  // probs[h][i][j], zero where masked.
  std::vector<double> probs(hq * tq * tk, 0.0);
  std::vector<double> out(tq * qw, 0.0);
  for (std::size_t h = 0; h < hq; ++h) {
    const std::size_t kh = h / group;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = probs.data() + (h * tq + i) * tk;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j) {
        if (key_pos[j] > query_pos[i]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qv[i * qw + h * dh + c] * kvv[j * kw + kh * dh + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
        any = true;
      }
      if (!any)
        throw CacheError("attention: query at position " + std::to_string(query_pos[i]) +
                         " has no visible key");
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (key_pos[j] > query_pos[i]) continue;
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < tk; ++j) {
        if (key_pos[j] > query_pos[i]) continue;
        p[j] /= z;
        for (std::size_t c = 0; c < dh; ++c) out[i * qw + h * dh + c] += p[j] * vv[j * kw + kh * dh + c];
      }
    }
  }
  return Tensor::make_result(
      {tq, qw}, std::move(out), "attention", {q, k, v},
      [probs = std::move(probs), tq, tk, hq, group, dh, qw, kw, inv_sqrt](Node& self) {
        const auto& qv2 = self.inputs[0]->value;
        const auto& kv2 = self.inputs[1]->value;
        const auto& vv2 = self.inputs[2]->value;
        auto* gq = grad_of(self, 0);
        auto* gk = grad_of(self, 1);
        auto* gv = grad_of(self, 2);
        const auto& go = self.grad;
        std::vector<double> dp(tk);
        for (std::size_t h = 0; h < hq; ++h) {
          const std::size_t kh = h / group;
          for (std::size_t i = 0; i < tq; ++i) {
            const double* p = probs.data() + (h * tq + i) * tk;
            double row_dot = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
              if (p[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += go[i * qw + h * dh + c] * vv2[j * kw + kh * dh + c];
              dp[j] = s;
              row_dot += s * p[j];
              if (gv)
                for (std::size_t c = 0; c < dh; ++c)
                  (*gv)[j * kw + kh * dh + c] += p[j] * go[i * qw + h * dh + c];
            }
            for (std::size_t j = 0; j < tk; ++j) {
              if (p[j] == 0.0) continue;
              const double ds = p[j] * (dp[j] - row_dot) * inv_sqrt;
              if (gq)
                for (std::size_t c = 0; c < dh; ++c)
                  (*gq)[i * qw + h * dh + c] += ds * kv2[j * kw + kh * dh + c];
              if (gk)
                for (std::size_t c = 0; c < dh; ++c)
                  (*gk)[j * kw + kh * dh + c] += ds * qv2[i * qw + h * dh + c];
            }
          }
        }
      });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int position_offset) {
  require_rank(q, 2, "causal_attention");
  require_rank(k, 2, "causal_attention");
  const int tq = static_cast<int>(q.dim(0));
  const int tk = static_cast<int>(k.dim(0));
  if (position_offset < 0 || tk < position_offset + 1)
    throw CacheError("causal_attention: cache underrun (" + std::to_string(tk) +
                     " keys for query offset " + std::to_string(position_offset) + ")");
  std::vector<int> qpos(tq), kpos(tk);
  for (int i = 0; i < tq; ++i) qpos[i] = position_offset + i;
  for (int j = 0; j < tk; ++j) kpos[j] = j;
  const Tensor qr = rope(q, qpos, 1);
  const Tensor kr = rope(k, kpos, 1);
  return masked_attention(qr, kr, v, qpos, kpos, 1, 1);
}

namespace {

Tensor nll_rows(const Tensor& logits, std::span<const int> targets, const std::vector<bool>& mask,
                const char* name) {
  require_rank(logits, 2, name);
  const std::size_t t = logits.dim(0), vsz = logits.dim(1);
  if (targets.size() != t) throw DimensionError(std::string(name) + ": one target per row");
  std::vector<int> tg(targets.begin(), targets.end());
  std::size_t counted = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    if (tg[i] < 0 || static_cast<std::size_t>(tg[i]) >= vsz)
      throw IndexError(std::string(name) + ": target " + std::to_string(tg[i]) + " outside [0," +
                       std::to_string(vsz) + ")");
    ++counted;
  }
  if (counted == 0) throw DimensionError(std::string(name) + ": no rows selected");
  const auto x = logits.data();
  std::vector<double> probs(t * vsz, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    const double* row = x.data() + i * vsz;
    const double mx = *std::max_element(row, row + vsz);
    double z = 0.0;
    for (std::size_t j = 0; j < vsz; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    loss += lz - row[tg[i]];
    for (std::size_t j = 0; j < vsz; ++j) probs[i * vsz + j] = std::exp(row[j] - lz);
  }
  const double n = static_cast<double>(counted);
  return Tensor::make_result({1}, {loss / n}, name, {logits},
                             [probs = std::move(probs), tg, mask, t, vsz, n](Node& self) {
                               auto* g = grad_of(self, 0);
                               if (!g) return;
                               const double s = self.grad[0] / n;
                               for (std::size_t i = 0; i < t; ++i) {
                                 if (!mask[i]) continue;
                                 for (std::size_t j = 0; j < vsz; ++j)
                                   (*g)[i * vsz + j] += s * probs[i * vsz + j];
                                 (*g)[i * vsz + tg[i]] -= s;
                               }
                             });
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  return nll_rows(logits, targets, std::vector<bool>(logits.dim(0), true), "cross_entropy");
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            const std::vector<bool>& mask) {
  require_rank(logits, 2, "cross_entropy_masked");
  if (mask.size() != logits.dim(0)) throw DimensionError("cross_entropy_masked: mask length");
  return nll_rows(logits, targets, mask, "cross_entropy_masked");
}

Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> targets, double eps) {
  const std::size_t n = probs.numel();
  if (targets.size() != n) throw DimensionError("binary_cross_entropy: target count");
  if (n == 0) throw DimensionError("binary_cross_entropy: empty input");
  std::vector<double> tg(targets.begin(), targets.end());
  const auto p = probs.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(p[i], eps, 1.0 - eps);
    loss -= tg[i] * std::log(pc) + (1.0 - tg[i]) * std::log(1.0 - pc);
  }
  return Tensor::make_result({1}, {loss / static_cast<double>(n)}, "bce", {probs},
                             [tg, eps, n](Node& self) {
                               auto* g = grad_of(self, 0);
                               if (!g) return;
                               const auto& pv = self.inputs[0]->value;
                               const double s = self.grad[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (pv[i] < eps || pv[i] > 1.0 - eps) continue;
                                 (*g)[i] += s * (-tg[i] / pv[i] + (1.0 - tg[i]) / (1.0 - pv[i]));
                               }
                             });
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

Tensor forward_kl(const Tensor& teacher_logits, const Tensor& student_logits) {
  require_same_shape(teacher_logits, student_logits, "forward_kl");
  require_rank(student_logits, 2, "forward_kl");
  const Tensor teacher = teacher_logits.detach();
  const Tensor log_pt = log_softmax(teacher);
  const Tensor pt = softmax(teacher);
  const Tensor log_ps = log_softmax(student_logits);
  const double rows = static_cast<double>(student_logits.dim(0));
  return scale(sum(mul(pt, sub(log_pt, log_ps))), 1.0 / rows);
}

std::vector<int> argmax_rows(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  const auto v = x.data();
  std::vector<int> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = v.data() + i * n;
    out[i] = static_cast<int>(std::max_element(row, row + n) - row);
  }
  return out;
}

bool all_finite(const Tensor& x) {
  for (double v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace recursor
