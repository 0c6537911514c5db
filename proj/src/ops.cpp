#include "gnmt/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gnmt/error.hpp"

namespace gnmt {

using detail::make_result;
using detail::Node;

namespace {

// Single-threaded BLAS keeps results independent of the machine's core count.
void ensure_blas_single_threaded() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  ensure_blas_single_threaded();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), 1.0, c, static_cast<int>(n));
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  ensure_blas_single_threaded();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              1.0, a, static_cast<int>(k), b, static_cast<int>(k), 1.0, c, static_cast<int>(n));
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  ensure_blas_single_threaded();
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              1.0, a, static_cast<int>(m), b, static_cast<int>(n), 1.0, c, static_cast<int>(n));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

// Accumulates g into the parent's grad when it requires one.
template <typename F>
void with_grad(Node& parent, F&& f) {
  if (parent.requires_grad) f(parent.ensure_grad());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      with_grad(*p, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    with_grad(*self.parents[1], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    with_grad(pa, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    });
    with_grad(pb, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    });
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  const std::size_t n = bias.dim(0);
  if (x.shape().back() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const auto xd = x.data();
  const auto bd = bias.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + bd[i % n];
  return make_result(x.shape(), std::move(out), {x, bias}, [n](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    with_grad(*self.parents[1], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    });
  });
}

Tensor scale(const Tensor& x, double factor) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + value;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

Tensor sigmoid(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    // Split by sign so exp never overflows.
    if (v >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = self.data[i];
        g[i] += self.grad[i] * y * (1.0 - y);
      }
    });
  });
}

Tensor relu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      const auto& in = self.parents[0]->data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in[i] > 0.0) g[i] += self.grad[i];
      }
    });
  });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be in [0,1)");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const auto xd = x.data();
  std::vector<double> keep(xd.size());
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    keep[i] = uniform(rng) < rate ? 0.0 : keep_scale;
    out[i] = xd[i] * keep[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [keep = std::move(keep)](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    with_grad(pa, [&](std::vector<double>& g) { gemm_nt(self.grad.data(), pb.data.data(), g.data(), m, n, k); });
    with_grad(pb, [&](std::vector<double>& g) { gemm_tn(pa.data.data(), self.grad.data(), g.data(), m, k, n); });
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear");
  const std::size_t k = w.dim(0), n = w.dim(1);
  if (x.shape().back() != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != n)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t m = x.numel() / k;
  std::vector<double> out(m * n, 0.0);
  if (b.defined()) {
    const auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bd.begin(), bd.end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result(std::move(shape), std::move(out), std::move(parents), [m, k, n](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    with_grad(px, [&](std::vector<double>& g) { gemm_nt(self.grad.data(), pw.data.data(), g.data(), m, n, k); });
    with_grad(pw, [&](std::vector<double>& g) { gemm_tn(px.data.data(), self.grad.data(), g.data(), m, k, n); });
    if (self.parents.size() > 2) {
      with_grad(*self.parents[2], [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = self.grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) g[j] += row[j];
        }
      });
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != groups || bk != k) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(groups * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    if (transpose_b) {
      gemm_nt(ad + g * m * k, bd + g * n * k, out.data() + g * m * n, m, k, n);
    } else {
      gemm_nn(ad + g * m * k, bd + g * k * n, out.data() + g * m * n, m, k, n);
    }
  }
  return make_result({groups, m, n}, std::move(out), {a, b}, [groups, m, k, n, transpose_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* dc = self.grad.data();
    with_grad(pa, [&](std::vector<double>& ga) {
      for (std::size_t g = 0; g < groups; ++g) {
        if (transpose_b) {
          // dA = dC * B, with B stored [n,k]
          gemm_nn(dc + g * m * n, pb.data.data() + g * n * k, ga.data() + g * m * k, m, n, k);
        } else {
          gemm_nt(dc + g * m * n, pb.data.data() + g * k * n, ga.data() + g * m * k, m, n, k);
        }
      }
    });
    with_grad(pb, [&](std::vector<double>& gb) {
      for (std::size_t g = 0; g < groups; ++g) {
        if (transpose_b) {
          // dB[n,k] = dC^T * A
          gemm_tn(dc + g * m * n, pa.data.data() + g * m * k, gb.data() + g * n * k, m, n, k);
        } else {
          gemm_tn(pa.data.data() + g * m * k, dc + g * m * n, gb.data() + g * k * n, m, k, n);
        }
      }
    });
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) throw DimensionError("softmax: axis out of range for " + shape_str(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result(shape, std::move(out), {x}, [outer, inner, len](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            g[idx] += self.data[idx] * (self.grad[idx] - dot);
          }
        }
      }
    });
  });
}

Tensor masked_softmax(const Tensor& x, const AttentionMask& mask) {
  require_rank(x, 3, "masked_softmax");
  const std::size_t groups = x.dim(0), q = x.dim(1), k = x.dim(2);
  if (mask.query_len != q || mask.key_len != k || mask.batch == 0 || groups % mask.batch != 0 ||
      mask.allowed.size() != mask.batch * q * k) {
    throw DimensionError("masked_softmax: mask does not match scores " + shape_str(x.shape()));
  }
  const std::size_t heads = groups / mask.batch;
  const auto xd = x.data();
  std::vector<double> out(xd.size(), 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t b = g / heads;
    for (std::size_t i = 0; i < q; ++i) {
      const double* row = xd.data() + (g * q + i) * k;
      double* orow = out.data() + (g * q + i) * k;
      const std::uint8_t* allow = mask.allowed.data() + (b * q + i) * k;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        if (allow[j]) mx = std::max(mx, row[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double total = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        if (allow[j]) {
          orow[j] = std::exp(row[j] - mx);
          total += orow[j];
        }
      }
      for (std::size_t j = 0; j < k; ++j) orow[j] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [groups, q, k](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < groups * q; ++r) {
        const double* y = self.data.data() + r * k;
        const double* dy = self.grad.data() + r * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += dy[j] * y[j];
        double* gx = g.data() + r * k;
        for (std::size_t j = 0; j < k; ++j) gx[j] += y[j] * (dy[j] - dot);
      }
    });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  const std::size_t n = x.shape().back();
  if (gain.dim(0) != n || bias.dim(0) != n) {
    throw DimensionError("layer_norm: gain/bias do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> out(xd.size());
  // Normalised activations and inverse std-devs, kept for backward.
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       with_grad(pg, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * xhat[i];
                       });
                       with_grad(pb, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
                       });
                       with_grad(px, [&](std::vector<double>& g) {
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (std::size_t r = 0; r < rows; ++r) {
                           const double* dy = self.grad.data() + r * n;
                           const double* h = xhat.data() + r * n;
                           double sum_dh = 0.0, sum_dh_h = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dh = dy[j] * pg.data[j];
                             sum_dh += dh;
                             sum_dh_h += dh * h[j];
                           }
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dh = dy[j] * pg.data[j];
                             g[r * n + j] += inv_std[r] * (dh - inv_n * sum_dh - h[j] * inv_n * sum_dh_h);
                           }
                         }
                       });
                     });
}

Tensor concat_last_axis(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0) throw DimensionError("concat_last_axis: rank mismatch");
  for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw DimensionError("concat_last_axis: leading shapes differ " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
  }
  const std::size_t na = a.shape().back(), nb = b.shape().back();
  const std::size_t rows = a.numel() / na;
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(rows * (na + nb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.begin() + r * na, na, out.begin() + r * (na + nb));
    std::copy_n(bd.begin() + r * nb, nb, out.begin() + r * (na + nb) + na);
  }
  Shape shape = a.shape();
  shape.back() = na + nb;
  return make_result(std::move(shape), std::move(out), {a, b}, [rows, na, nb](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < na; ++j) g[r * na + j] += self.grad[r * (na + nb) + j];
      }
    });
    with_grad(*self.parents[1], [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < nb; ++j) g[r * nb + j] += self.grad[r * (na + nb) + na + j];
      }
    });
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding_lookup");
  if (ids.empty()) throw DimensionError("embedding_lookup: no ids");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const auto td = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw BoundsError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                        std::to_string(vocab));
    }
    std::copy_n(td.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [d, idx = std::move(idx)](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* row = g.data() + static_cast<std::size_t>(idx[i]) * d;
        const double* src = self.grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
      }
    });
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, const CrossEntropyOptions& options) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " rows");
  }
  const double eps = options.label_smoothing;
  const auto ld = logits.data();
  // Softmax probabilities per row, kept for backward.
  std::vector<double> probs(ld.size());
  std::vector<double> weight(n, 0.0);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t == options.ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw BoundsError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of size " +
                        std::to_string(vocab));
    }
    const double* row = ld.data() + r * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    double mean_logp = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - log_z);
      mean_logp += row[j] - log_z;
    }
    mean_logp /= static_cast<double>(vocab);
    const double logp_target = row[t] - log_z;
    total += -(1.0 - eps) * logp_target - eps * mean_logp;
    weight[r] = 1.0;
    ++counted;
  }
  double norm = 1.0;
  if (options.reduction == Reduction::kMean) norm = counted > 0 ? 1.0 / static_cast<double>(counted) : 0.0;
  for (double& w : weight) w *= norm;
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result({1}, {total * norm}, {logits},
                     [n, vocab, eps, probs = std::move(probs), weight = std::move(weight),
                      tgt = std::move(tgt)](Node& self) {
                       with_grad(*self.parents[0], [&](std::vector<double>& g) {
                         const double up = self.grad[0];
                         const double uniform = eps / static_cast<double>(vocab);
                         for (std::size_t r = 0; r < n; ++r) {
                           if (weight[r] == 0.0) continue;
                           const double w = up * weight[r];
                           for (std::size_t j = 0; j < vocab; ++j) {
                             g[r * vocab + j] += w * (probs[r * vocab + j] - uniform);
                           }
                           g[r * vocab + static_cast<std::size_t>(tgt[r])] -= w * (1.0 - eps);
                         }
                       });
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, {x}, [](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (double& v : g) v += self.grad[0];
    });
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const auto xd = x.data();
  return make_result(std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x}, [](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

namespace {

// Index map between [b, t, h, e] (merged layout) and [b, h, t, e] (split).
template <typename F>
void for_each_head_index(std::size_t batch, std::size_t len, std::size_t heads, std::size_t dh, F&& f) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t merged = ((b * len + t) * heads + h) * dh;
        const std::size_t split = ((b * heads + h) * len + t) * dh;
        f(merged, split);
      }
    }
  }
}

}  // namespace

Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t d = x.shape().back();
  if (heads == 0 || d % heads != 0 || x.numel() != batch * len * d) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t dh = d / heads;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for_each_head_index(batch, len, heads, dh, [&](std::size_t merged, std::size_t split) {
    std::copy_n(xd.begin() + merged, dh, out.begin() + split);
  });
  return make_result({batch * heads, len, dh}, std::move(out), {x}, [batch, len, heads, dh](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for_each_head_index(batch, len, heads, dh, [&](std::size_t merged, std::size_t split) {
        for (std::size_t e = 0; e < dh; ++e) g[merged + e] += self.grad[split + e];
      });
    });
  });
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads) {
  require_rank(x, 3, "merge_heads");
  if (x.dim(0) != batch * heads || x.dim(1) != len) {
    throw DimensionError("merge_heads: unexpected shape " + shape_str(x.shape()));
  }
  const std::size_t dh = x.dim(2);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for_each_head_index(batch, len, heads, dh, [&](std::size_t merged, std::size_t split) {
    std::copy_n(xd.begin() + split, dh, out.begin() + merged);
  });
  return make_result({batch, len, heads * dh}, std::move(out), {x}, [batch, len, heads, dh](Node& self) {
    with_grad(*self.parents[0], [&](std::vector<double>& g) {
      for_each_head_index(batch, len, heads, dh, [&](std::size_t merged, std::size_t split) {
        for (std::size_t e = 0; e < dh; ++e) g[split + e] += self.grad[merged + e];
      });
    });
  });
}

}  // namespace gnmt
