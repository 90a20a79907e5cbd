#include "promptlab/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace promptlab {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

#ifndef NDEBUG
void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value after ") + op);
  }
}
#define PL_CHECK_FINITE(t, op) check_finite(t, op)
#else
#define PL_CHECK_FINITE(t, op) ((void)0)
#endif

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_string(a) +
                              " and " + shape_string(b));
}

}  // namespace

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

std::string shape_string(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

TensorPtr Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data.assign(shape_product(t->shape), 0.0);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

TensorPtr Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

TensorPtr Tensor::from_vector(std::vector<double> values, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = {values.size()};
  t->data = std::move(values);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

TensorPtr Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> values,
                         bool requires_grad) {
  if (values.size() != r * c) throw std::invalid_argument("matrix: value count does not match shape");
  auto t = std::make_shared<Tensor>();
  t->shape = {r, c};
  t->data = std::move(values);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

TensorPtr Tensor::gaussian(std::vector<std::size_t> shape, Rng& rng, double std_dev,
                           bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  for (auto& v : t->data) v = rng.next_gaussian() * std_dev;
  return t;
}

TensorPtr Tape::make_output(std::vector<std::size_t> shape, bool requires_grad) {
  auto t = Tensor::zeros(std::move(shape), false);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  t->node_id = static_cast<int>(nodes_.size());
  return t;
}

void Tape::record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

namespace {

// std::fma pins the rounding of every multiply-accumulate, so the wide and
// matrix-vector forms of the same product stay bit-identical per element.

// Matrix-vector product C = A B. Four rows at a time keeps four independent
// fma chains in flight; each row's chain is unchanged.
void kernel_matvec(const double* __restrict A, const double* __restrict B, double* __restrict C,
                   std::size_t p, std::size_t q) {
  std::size_t i = 0;
  for (; i + 4 <= p; i += 4) {
    const double* A0 = A + i * q;
    const double* A1 = A0 + q;
    const double* A2 = A1 + q;
    const double* A3 = A2 + q;
    double c0 = 0.0, c1 = 0.0, c2 = 0.0, c3 = 0.0;
    for (std::size_t k = 0; k < q; ++k) {
      const double bk = B[k];
      c0 = std::fma(A0[k], bk, c0);
      c1 = std::fma(A1[k], bk, c1);
      c2 = std::fma(A2[k], bk, c2);
      c3 = std::fma(A3[k], bk, c3);
    }
    C[i] = c0;
    C[i + 1] = c1;
    C[i + 2] = c2;
    C[i + 3] = c3;
  }
  for (; i < p; ++i) {
    const double* Ai = A + i * q;
    double acc = 0.0;
    for (std::size_t k = 0; k < q; ++k) acc = std::fma(Ai[k], B[k], acc);
    C[i] = acc;
  }
}

// C += A B in ikj order, blocked 4x4 over (i, k) so each loaded B row feeds
// four C rows. Every C element still accumulates over k ascending in a single
// fma chain, so the result is bit-identical to the naive ikj loop.
void kernel_matmul_acc(const double* __restrict A, const double* __restrict B,
                       double* __restrict C, std::size_t p, std::size_t q, std::size_t r) {
  std::size_t i = 0;
  for (; i + 4 <= p; i += 4) {
    double* __restrict C0 = C + i * r;
    double* __restrict C1 = C0 + r;
    double* __restrict C2 = C1 + r;
    double* __restrict C3 = C2 + r;
    std::size_t k = 0;
    for (; k + 4 <= q; k += 4) {
      const double* B0 = B + k * r;
      const double* B1 = B0 + r;
      const double* B2 = B1 + r;
      const double* B3 = B2 + r;
      const double a00 = A[i * q + k], a01 = A[i * q + k + 1];
      const double a02 = A[i * q + k + 2], a03 = A[i * q + k + 3];
      const double a10 = A[(i + 1) * q + k], a11 = A[(i + 1) * q + k + 1];
      const double a12 = A[(i + 1) * q + k + 2], a13 = A[(i + 1) * q + k + 3];
      const double a20 = A[(i + 2) * q + k], a21 = A[(i + 2) * q + k + 1];
      const double a22 = A[(i + 2) * q + k + 2], a23 = A[(i + 2) * q + k + 3];
      const double a30 = A[(i + 3) * q + k], a31 = A[(i + 3) * q + k + 1];
      const double a32 = A[(i + 3) * q + k + 2], a33 = A[(i + 3) * q + k + 3];
      for (std::size_t j = 0; j < r; ++j) {
        const double b0 = B0[j], b1 = B1[j], b2 = B2[j], b3 = B3[j];
        C0[j] = std::fma(a03, b3, std::fma(a02, b2, std::fma(a01, b1, std::fma(a00, b0, C0[j]))));
        C1[j] = std::fma(a13, b3, std::fma(a12, b2, std::fma(a11, b1, std::fma(a10, b0, C1[j]))));
        C2[j] = std::fma(a23, b3, std::fma(a22, b2, std::fma(a21, b1, std::fma(a20, b0, C2[j]))));
        C3[j] = std::fma(a33, b3, std::fma(a32, b2, std::fma(a31, b1, std::fma(a30, b0, C3[j]))));
      }
    }
    for (; k < q; ++k) {
      const double* Bk = B + k * r;
      const double a0 = A[i * q + k], a1 = A[(i + 1) * q + k];
      const double a2 = A[(i + 2) * q + k], a3 = A[(i + 3) * q + k];
      for (std::size_t j = 0; j < r; ++j) {
        const double bj = Bk[j];
        C0[j] = std::fma(a0, bj, C0[j]);
        C1[j] = std::fma(a1, bj, C1[j]);
        C2[j] = std::fma(a2, bj, C2[j]);
        C3[j] = std::fma(a3, bj, C3[j]);
      }
    }
  }
  for (; i < p; ++i) {
    double* __restrict Ci = C + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = A[i * q + k];
      const double* Bk = B + k * r;
      for (std::size_t j = 0; j < r; ++j) Ci[j] = std::fma(aik, Bk[j], Ci[j]);
    }
  }
}

// dA[i][k] += dC[i] . B[k]; four independent dot chains hide fma latency and
// reuse the loaded dC row.
void kernel_matmul_grad_a(const double* __restrict dC, const double* __restrict B,
                          double* __restrict dA, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    const double* dCi = dC + i * r;
    std::size_t k = 0;
    for (; k + 4 <= q; k += 4) {
      const double* B0 = B + k * r;
      const double* B1 = B0 + r;
      const double* B2 = B1 + r;
      const double* B3 = B2 + r;
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      for (std::size_t j = 0; j < r; ++j) {
        const double d = dCi[j];
        a0 = std::fma(d, B0[j], a0);
        a1 = std::fma(d, B1[j], a1);
        a2 = std::fma(d, B2[j], a2);
        a3 = std::fma(d, B3[j], a3);
      }
      dA[i * q + k] += a0;
      dA[i * q + k + 1] += a1;
      dA[i * q + k + 2] += a2;
      dA[i * q + k + 3] += a3;
    }
    for (; k < q; ++k) {
      const double* Bk = B + k * r;
      double acc = 0.0;
      for (std::size_t j = 0; j < r; ++j) acc = std::fma(dCi[j], Bk[j], acc);
      dA[i * q + k] += acc;
    }
  }
}

// dB[k] += sum_i A[i][k] dC[i]; blocked 4x4 over (k, i) so each loaded dC row
// feeds four dB rows.
void kernel_matmul_grad_b(const double* __restrict dC, const double* __restrict A,
                          double* __restrict dB, std::size_t p, std::size_t q, std::size_t r) {
  std::size_t k = 0;
  for (; k + 4 <= q; k += 4) {
    double* __restrict dB0 = dB + k * r;
    double* __restrict dB1 = dB0 + r;
    double* __restrict dB2 = dB1 + r;
    double* __restrict dB3 = dB2 + r;
    std::size_t i = 0;
    for (; i + 4 <= p; i += 4) {
      const double* dC0 = dC + i * r;
      const double* dC1 = dC0 + r;
      const double* dC2 = dC1 + r;
      const double* dC3 = dC2 + r;
      const double a00 = A[i * q + k], a01 = A[i * q + k + 1];
      const double a02 = A[i * q + k + 2], a03 = A[i * q + k + 3];
      const double a10 = A[(i + 1) * q + k], a11 = A[(i + 1) * q + k + 1];
      const double a12 = A[(i + 1) * q + k + 2], a13 = A[(i + 1) * q + k + 3];
      const double a20 = A[(i + 2) * q + k], a21 = A[(i + 2) * q + k + 1];
      const double a22 = A[(i + 2) * q + k + 2], a23 = A[(i + 2) * q + k + 3];
      const double a30 = A[(i + 3) * q + k], a31 = A[(i + 3) * q + k + 1];
      const double a32 = A[(i + 3) * q + k + 2], a33 = A[(i + 3) * q + k + 3];
      for (std::size_t j = 0; j < r; ++j) {
        const double d0 = dC0[j], d1 = dC1[j], d2 = dC2[j], d3 = dC3[j];
        dB0[j] = std::fma(a30, d3, std::fma(a20, d2, std::fma(a10, d1, std::fma(a00, d0, dB0[j]))));
        dB1[j] = std::fma(a31, d3, std::fma(a21, d2, std::fma(a11, d1, std::fma(a01, d0, dB1[j]))));
        dB2[j] = std::fma(a32, d3, std::fma(a22, d2, std::fma(a12, d1, std::fma(a02, d0, dB2[j]))));
        dB3[j] = std::fma(a33, d3, std::fma(a23, d2, std::fma(a13, d1, std::fma(a03, d0, dB3[j]))));
      }
    }
    for (; i < p; ++i) {
      const double* dCi = dC + i * r;
      const double a0 = A[i * q + k], a1 = A[i * q + k + 1];
      const double a2 = A[i * q + k + 2], a3 = A[i * q + k + 3];
      for (std::size_t j = 0; j < r; ++j) {
        const double d = dCi[j];
        dB0[j] = std::fma(a0, d, dB0[j]);
        dB1[j] = std::fma(a1, d, dB1[j]);
        dB2[j] = std::fma(a2, d, dB2[j]);
        dB3[j] = std::fma(a3, d, dB3[j]);
      }
    }
  }
  for (; k < q; ++k) {
    double* __restrict dBk = dB + k * r;
    for (std::size_t i = 0; i < p; ++i) {
      const double aik = A[i * q + k];
      const double* dCi = dC + i * r;
      for (std::size_t j = 0; j < r; ++j) dBk[j] = std::fma(aik, dCi[j], dBk[j]);
    }
  }
}

}  // namespace

TensorPtr Tape::matmul(const TensorPtr& a, const TensorPtr& b) {
  const bool b_is_vec = b->shape.size() == 1;
  if (a->shape.size() != 2) shape_error("matmul", *a, *b);
  const std::size_t p = a->shape[0], q = a->shape[1];
  const std::size_t r = b_is_vec ? 1 : b->shape[1];
  const std::size_t bq = b->shape[0];
  if (q != bq) shape_error("matmul", *a, *b);

  auto out = make_output(b_is_vec ? std::vector<std::size_t>{p}
                                  : std::vector<std::size_t>{p, r},
                         a->requires_grad || b->requires_grad);
  if (r == 1) {
    kernel_matvec(a->data.data(), b->data.data(), out->data.data(), p, q);
  } else {
    kernel_matmul_acc(a->data.data(), b->data.data(), out->data.data(), p, q, r);
  }
  PL_CHECK_FINITE(*out, "matmul");
  if (out->requires_grad) {
    record([a, b, out, p, q, r]() {
      const double* dC = out->grad.data();
      if (r == 1) {
        if (a->requires_grad) {
          a->ensure_grad();
          double* dA = a->grad.data();
          const double* B = b->data.data();
          for (std::size_t i = 0; i < p; ++i) {
            const double d = dC[i];
            double* dAi = dA + i * q;
            for (std::size_t k = 0; k < q; ++k) dAi[k] += d * B[k];
          }
        }
        if (b->requires_grad) {
          b->ensure_grad();
          double* dB = b->grad.data();
          const double* A = a->data.data();
          for (std::size_t i = 0; i < p; ++i) {
            const double d = dC[i];
            const double* Ai = A + i * q;
            for (std::size_t k = 0; k < q; ++k) dB[k] += d * Ai[k];
          }
        }
        return;
      }
      if (a->requires_grad) {
        a->ensure_grad();
        kernel_matmul_grad_a(dC, b->data.data(), a->grad.data(), p, q, r);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        kernel_matmul_grad_b(dC, a->data.data(), b->grad.data(), p, q, r);
      }
    });
  }
  return out;
}

TensorPtr Tape::transpose(const TensorPtr& a) {
  if (a->shape.size() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
  const std::size_t p = a->shape[0], q = a->shape[1];
  auto out = make_output({q, p}, a->requires_grad);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out->data[j * p + i] = a->data[i * q + j];
  if (out->requires_grad) {
    record([a, out, p, q]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) a->grad[i * q + j] += out->grad[j * p + i];
    });
  }
  return out;
}

TensorPtr Tape::add(const TensorPtr& a, const TensorPtr& b) {
  if (!same_shape(*a, *b)) shape_error("add", *a, *b);
  auto out = make_output(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad) {
    record([a, b, out]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Tape::sub(const TensorPtr& a, const TensorPtr& b) {
  return add(a, scale(b, -1.0));
}

TensorPtr Tape::add_col_broadcast(const TensorPtr& m, const TensorPtr& v) {
  if (m->shape.size() != 2 || v->shape.size() != 1 || m->shape[0] != v->shape[0])
    shape_error("add_col_broadcast", *m, *v);
  const std::size_t p = m->shape[0], q = m->shape[1];
  auto out = make_output({p, q}, m->requires_grad || v->requires_grad);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out->data[i * q + j] = m->data[i * q + j] + v->data[i];
  if (out->requires_grad) {
    record([m, v, out, p, q]() {
      if (m->requires_grad) {
        m->ensure_grad();
        for (std::size_t i = 0; i < p * q; ++i) m->grad[i] += out->grad[i];
      }
      if (v->requires_grad) {
        v->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j) v->grad[i] += out->grad[i * q + j];
      }
    });
  }
  return out;
}

TensorPtr Tape::scale(const TensorPtr& a, double c) {
  auto out = make_output(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * c;
  if (out->requires_grad) {
    record([a, out, c]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

TensorPtr Tape::mul(const TensorPtr& a, const TensorPtr& b) {
  if (!same_shape(*a, *b)) shape_error("mul", *a, *b);
  auto out = make_output(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
  if (out->requires_grad) {
    record([a, b, out]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
      }
    });
  }
  return out;
}

TensorPtr Tape::relu(const TensorPtr& a) {
  auto out = make_output(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
  if (out->requires_grad) {
    record([a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i)
        if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

TensorPtr Tape::softmax_columns(const TensorPtr& a) {
  const std::size_t p = a->shape[0];
  const std::size_t q = a->cols();
  auto out = make_output(a->shape, a->requires_grad);
  for (std::size_t j = 0; j < q; ++j) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < p; ++i) mx = std::max(mx, a->data[i * q + j]);
    double denom = 0.0;
    for (std::size_t i = 0; i < p; ++i) denom += std::exp(a->data[i * q + j] - mx);
    for (std::size_t i = 0; i < p; ++i) out->data[i * q + j] = std::exp(a->data[i * q + j] - mx) / denom;
  }
  PL_CHECK_FINITE(*out, "softmax_columns");
  if (out->requires_grad) {
    record([a, out, p, q]() {
      a->ensure_grad();
      for (std::size_t j = 0; j < q; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < p; ++i) dot += out->grad[i * q + j] * out->data[i * q + j];
        for (std::size_t i = 0; i < p; ++i)
          a->grad[i * q + j] += out->data[i * q + j] * (out->grad[i * q + j] - dot);
      }
    });
  }
  return out;
}

TensorPtr Tape::layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                           double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t d = x->shape[0];
  const std::size_t q = x->cols();
  if (gain->size() != d || bias->size() != d)
    throw std::invalid_argument("layer_norm: gain/bias length must match normalized dimension");
  auto out = make_output(x->shape, x->requires_grad || gain->requires_grad || bias->requires_grad);
  // xhat is saved column-by-column for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(d * q);
  auto inv_std = std::make_shared<std::vector<double>>(q);
  for (std::size_t j = 0; j < q; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x->data[i * q + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = x->data[i * q + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[j] = istd;
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (x->data[i * q + j] - mean) * istd;
      (*xhat)[i * q + j] = xh;
      out->data[i * q + j] = gain->data[i] * xh + bias->data[i];
    }
  }
  if (out->requires_grad) {
    record([x, gain, bias, out, xhat, inv_std, d, q]() {
      for (std::size_t j = 0; j < q; ++j) {
        if (gain->requires_grad) {
          gain->ensure_grad();
          for (std::size_t i = 0; i < d; ++i)
            gain->grad[i] += out->grad[i * q + j] * (*xhat)[i * q + j];
        }
        if (bias->requires_grad) {
          bias->ensure_grad();
          for (std::size_t i = 0; i < d; ++i) bias->grad[i] += out->grad[i * q + j];
        }
        if (x->requires_grad) {
          x->ensure_grad();
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const double g = out->grad[i * q + j] * gain->data[i];
            mean_g += g;
            mean_gx += g * (*xhat)[i * q + j];
          }
          mean_g /= static_cast<double>(d);
          mean_gx /= static_cast<double>(d);
          for (std::size_t i = 0; i < d; ++i) {
            const double g = out->grad[i * q + j] * gain->data[i];
            x->grad[i * q + j] += (g - mean_g - (*xhat)[i * q + j] * mean_gx) * (*inv_std)[j];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Tape::dropout(const TensorPtr& x, double p, bool training) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;  // eval mode and p=0 are bit-exact identities
  auto out = make_output(x->shape, x->requires_grad);
  auto mask = std::make_shared<std::vector<double>>(x->size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x->size(); ++i) {
    (*mask)[i] = rng_.next_bernoulli(p) ? 0.0 : keep_scale;
    out->data[i] = x->data[i] * (*mask)[i];
  }
  if (out->requires_grad) {
    record([x, out, mask]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i) x->grad[i] += out->grad[i] * (*mask)[i];
    });
  }
  return out;
}

TensorPtr Tape::cross_entropy(const TensorPtr& logits, std::size_t target) {
  const std::size_t v = logits->size();
  if (target >= v) throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                                           " out of range for " + std::to_string(v) + " logits");
  double mx = -INFINITY;
  for (double z : logits->data) mx = std::max(mx, z);
  double denom = 0.0;
  for (double z : logits->data) denom += std::exp(z - mx);
  const double lse = mx + std::log(denom);
  auto out = make_output({1}, logits->requires_grad);
  out->data[0] = lse - logits->data[target];
  PL_CHECK_FINITE(*out, "cross_entropy");
  if (out->requires_grad) {
    record([logits, out, target, mx, denom, v]() {
      logits->ensure_grad();
      const double d = out->grad[0];
      for (std::size_t i = 0; i < v; ++i) {
        const double soft = std::exp(logits->data[i] - mx) / denom;
        logits->grad[i] += d * (soft - (i == target ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

TensorPtr Tape::sum(const TensorPtr& a) {
  auto out = make_output({1}, a->requires_grad);
  out->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
  if (out->requires_grad) {
    record([a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
    });
  }
  return out;
}

TensorPtr Tape::mean_columns(const TensorPtr& a) {
  if (a->shape.size() != 2) throw std::invalid_argument("mean_columns: rank-2 tensor required");
  const std::size_t p = a->shape[0], q = a->shape[1];
  auto out = make_output({p}, a->requires_grad);
  const double inv_q = 1.0 / static_cast<double>(q);
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < q; ++j) acc += a->data[i * q + j];
    out->data[i] = acc * inv_q;
  }
  if (out->requires_grad) {
    record([a, out, p, q, inv_q]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) a->grad[i * q + j] += out->grad[i] * inv_q;
    });
  }
  return out;
}

TensorPtr Tape::slice_rows(const TensorPtr& a, std::size_t r0, std::size_t r1) {
  if (a->shape.size() != 2 || r0 >= r1 || r1 > a->shape[0])
    throw std::invalid_argument("slice_rows: bad row range");
  const std::size_t q = a->shape[1];
  auto out = make_output({r1 - r0, q}, a->requires_grad);
  std::copy(a->data.begin() + r0 * q, a->data.begin() + r1 * q, out->data.begin());
  if (out->requires_grad) {
    record([a, out, r0, q]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->size(); ++i) a->grad[r0 * q + i] += out->grad[i];
    });
  }
  return out;
}

TensorPtr Tape::slice_cols(const TensorPtr& a, std::size_t c0, std::size_t c1) {
  if (a->shape.size() != 2 || c0 >= c1 || c1 > a->shape[1])
    throw std::invalid_argument("slice_cols: bad column range");
  const std::size_t p = a->shape[0], q = a->shape[1], w = c1 - c0;
  auto out = make_output({p, w}, a->requires_grad);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < w; ++j) out->data[i * w + j] = a->data[i * q + c0 + j];
  if (out->requires_grad) {
    record([a, out, p, q, w, c0]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < w; ++j) a->grad[i * q + c0 + j] += out->grad[i * w + j];
    });
  }
  return out;
}

TensorPtr Tape::concat_cols(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[0] != b->shape[0])
    shape_error("concat_cols", *a, *b);
  const std::size_t p = a->shape[0], qa = a->shape[1], qb = b->shape[1];
  auto out = make_output({p, qa + qb}, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < p; ++i) {
    std::copy(a->data.begin() + i * qa, a->data.begin() + (i + 1) * qa,
              out->data.begin() + i * (qa + qb));
    std::copy(b->data.begin() + i * qb, b->data.begin() + (i + 1) * qb,
              out->data.begin() + i * (qa + qb) + qa);
  }
  if (out->requires_grad) {
    record([a, b, out, p, qa, qb]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < qa; ++j) a->grad[i * qa + j] += out->grad[i * (qa + qb) + j];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < qb; ++j)
            b->grad[i * qb + j] += out->grad[i * (qa + qb) + qa + j];
      }
    });
  }
  return out;
}

TensorPtr Tape::concat_cols_many(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols_many: no parts");
  if (parts.size() == 1) return parts[0];  // identity, no copy
  const std::size_t p = parts[0]->shape[0];
  std::size_t q = 0;
  bool rg = false;
  for (const auto& t : parts) {
    if (t->shape.size() != 2 || t->shape[0] != p) shape_error("concat_cols_many", *parts[0], *t);
    q += t->shape[1];
    rg = rg || t->requires_grad;
  }
  auto out = make_output({p, q}, rg);
  std::size_t col = 0;
  for (const auto& t : parts) {
    const std::size_t w = t->shape[1];
    for (std::size_t i = 0; i < p; ++i)
      std::copy(t->data.begin() + i * w, t->data.begin() + (i + 1) * w,
                out->data.begin() + i * q + col);
    col += w;
  }
  if (out->requires_grad) {
    record([parts, out, p, q]() {
      std::size_t col = 0;
      for (const auto& t : parts) {
        const std::size_t w = t->shape[1];
        if (t->requires_grad) {
          t->ensure_grad();
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < w; ++j) t->grad[i * w + j] += out->grad[i * q + col + j];
        }
        col += w;
      }
    });
  }
  return out;
}

TensorPtr Tape::concat_rows(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t q = parts[0]->cols();
  std::size_t p = 0;
  bool rg = false;
  for (const auto& t : parts) {
    if (t->cols() != q) shape_error("concat_rows", *parts[0], *t);
    p += t->shape[0];
    rg = rg || t->requires_grad;
  }
  auto out = make_output({p, q}, rg);
  std::size_t row = 0;
  for (const auto& t : parts) {
    std::copy(t->data.begin(), t->data.end(), out->data.begin() + row * q);
    row += t->shape[0];
  }
  if (out->requires_grad) {
    record([parts, out, q]() {
      std::size_t row = 0;
      for (const auto& t : parts) {
        if (t->requires_grad) {
          t->ensure_grad();
          for (std::size_t i = 0; i < t->size(); ++i) t->grad[i] += out->grad[row * q + i];
        }
        row += t->shape[0];
      }
    });
  }
  return out;
}

TensorPtr Tape::stack_cols(const std::vector<TensorPtr>& columns) {
  if (columns.empty()) throw std::invalid_argument("stack_cols: no columns");
  const std::size_t p = columns[0]->size();
  const std::size_t n = columns.size();
  bool rg = false;
  for (const auto& c : columns) {
    if (c->shape.size() != 1 || c->size() != p) shape_error("stack_cols", *columns[0], *c);
    rg = rg || c->requires_grad;
  }
  auto out = make_output({p, n}, rg);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < p; ++i) out->data[i * n + j] = columns[j]->data[i];
  if (out->requires_grad) {
    record([columns, out, p, n]() {
      for (std::size_t j = 0; j < n; ++j) {
        if (!columns[j]->requires_grad) continue;
        columns[j]->ensure_grad();
        for (std::size_t i = 0; i < p; ++i) columns[j]->grad[i] += out->grad[i * n + j];
      }
    });
  }
  return out;
}

TensorPtr Tape::embed_tokens(const TensorPtr& table, std::span<const int> ids) {
  if (table->shape.size() != 2) throw std::invalid_argument("embed_tokens: table must be rank 2");
  const std::size_t v = table->shape[0], e = table->shape[1];
  const std::size_t l = ids.size();
  if (l == 0) throw std::invalid_argument("embed_tokens: empty token sequence");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::out_of_range("embed_tokens: token id " + std::to_string(id) +
                              " out of range for vocab " + std::to_string(v));
  auto out = make_output({e, l}, table->requires_grad);
  for (std::size_t j = 0; j < l; ++j) {
    const std::size_t t = static_cast<std::size_t>(ids[j]);
    for (std::size_t i = 0; i < e; ++i) out->data[i * l + j] = table->data[t * e + i];
  }
  if (out->requires_grad) {
    std::vector<int> saved(ids.begin(), ids.end());
    record([table, out, saved = std::move(saved), e, l]() {
      table->ensure_grad();
      for (std::size_t j = 0; j < l; ++j) {
        const std::size_t t = static_cast<std::size_t>(saved[j]);
        for (std::size_t i = 0; i < e; ++i) table->grad[t * e + i] += out->grad[i * l + j];
      }
    });
  }
  return out;
}

TensorPtr Tape::batched_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                                  const std::vector<std::size_t>& offsets,
                                  const std::vector<std::size_t>& widths, std::size_t heads,
                                  double dropout_p, bool training) {
  if (q->shape.size() != 2 || !same_shape(*q, *k) || !same_shape(*q, *v))
    shape_error("batched_attention", *q, *k);
  const std::size_t e = q->shape[0], total = q->shape[1];
  if (heads == 0 || e % heads != 0)
    throw std::invalid_argument("batched_attention: head count must divide rows");
  if (offsets.size() != widths.size() || offsets.empty())
    throw std::invalid_argument("batched_attention: bad batch layout");
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw std::invalid_argument("batched_attention: dropout_p must be in [0, 1)");
  const std::size_t hd = e / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool drop = training && dropout_p > 0.0;
  const double keep_scale = drop ? 1.0 / (1.0 - dropout_p) : 1.0;
  const std::size_t n_ex = offsets.size();

  const bool rg = q->requires_grad || k->requires_grad || v->requires_grad;
  auto out = make_output({e, total}, rg);
  // Attention weights (and dropout masks) per example x head, saved for the
  // backward pass. probs holds the post-softmax, pre-dropout matrix [T x T]
  // with rows indexing keys and columns indexing queries.
  auto probs = std::make_shared<std::vector<std::vector<double>>>(n_ex * heads);
  auto masks = std::make_shared<std::vector<std::vector<double>>>(drop ? n_ex * heads : 0);

  const double* Q = q->data.data();
  const double* K = k->data.data();
  const double* V = v->data.data();
  double* O = out->data.data();
  for (std::size_t ex = 0; ex < n_ex; ++ex) {
    const std::size_t off = offsets[ex], T = widths[ex];
    if (off + T > total) throw std::invalid_argument("batched_attention: layout exceeds columns");
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t hb = h * hd;
      std::vector<double>& P = (*probs)[ex * heads + h];
      P.assign(T * T, 0.0);
      // Scores: P[jk][jq] = (1/sqrt(hd)) * sum_d K[d][jk] Q[d][jq].
      for (std::size_t d = 0; d < hd; ++d) {
        const double* Kr = K + (hb + d) * total + off;
        const double* Qr = Q + (hb + d) * total + off;
        for (std::size_t jk = 0; jk < T; ++jk) {
          const double kv = Kr[jk];
          double* Pr = P.data() + jk * T;
          for (std::size_t jq = 0; jq < T; ++jq) Pr[jq] += kv * Qr[jq];
        }
      }
      // Column-wise softmax of the scaled scores.
      for (std::size_t jq = 0; jq < T; ++jq) {
        double mx = -INFINITY;
        for (std::size_t jk = 0; jk < T; ++jk) mx = std::max(mx, P[jk * T + jq] * inv_sqrt);
        double denom = 0.0;
        for (std::size_t jk = 0; jk < T; ++jk)
          denom += std::exp(P[jk * T + jq] * inv_sqrt - mx);
        for (std::size_t jk = 0; jk < T; ++jk)
          P[jk * T + jq] = std::exp(P[jk * T + jq] * inv_sqrt - mx) / denom;
      }
      const double* M = nullptr;
      if (drop) {
        std::vector<double>& mask = (*masks)[ex * heads + h];
        mask.resize(T * T);
        for (std::size_t i = 0; i < T * T; ++i)
          mask[i] = rng_.next_bernoulli(dropout_p) ? 0.0 : keep_scale;
        M = mask.data();
      }
      // Context: O[d][jq] = sum_jk V[d][jk] P'[jk][jq].
      for (std::size_t d = 0; d < hd; ++d) {
        const double* Vr = V + (hb + d) * total + off;
        double* Or = O + (hb + d) * total + off;
        for (std::size_t jk = 0; jk < T; ++jk) {
          const double vv = Vr[jk];
          const double* Pr = P.data() + jk * T;
          if (M) {
            const double* Mr = M + jk * T;
            for (std::size_t jq = 0; jq < T; ++jq) Or[jq] += vv * (Pr[jq] * Mr[jq]);
          } else {
            for (std::size_t jq = 0; jq < T; ++jq) Or[jq] += vv * Pr[jq];
          }
        }
      }
    }
  }
  PL_CHECK_FINITE(*out, "batched_attention");

  if (rg) {
    record([q, k, v, out, offsets, widths, heads, hd, total, inv_sqrt, probs, masks, drop]() {
      q->ensure_grad();
      k->ensure_grad();
      v->ensure_grad();
      const double* Q = q->data.data();
      const double* K = k->data.data();
      const double* V = v->data.data();
      double* dQ = q->grad.data();
      double* dK = k->grad.data();
      double* dV = v->grad.data();
      const double* dO = out->grad.data();
      std::vector<double> Pp, dP, dS;
      for (std::size_t ex = 0; ex < offsets.size(); ++ex) {
        const std::size_t off = offsets[ex], T = widths[ex];
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t hb = h * hd;
          const std::vector<double>& P = (*probs)[ex * heads + h];
          const double* M = drop ? (*masks)[ex * heads + h].data() : nullptr;
          Pp.assign(P.begin(), P.end());  // post-dropout attention weights
          if (M)
            for (std::size_t i = 0; i < T * T; ++i) Pp[i] *= M[i];
          // dV[d][jk] += sum_jq dO[d][jq] P'[jk][jq]
          for (std::size_t d = 0; d < hd; ++d) {
            const double* dOr = dO + (hb + d) * total + off;
            double* dVr = dV + (hb + d) * total + off;
            for (std::size_t jk = 0; jk < T; ++jk) {
              const double* Pr = Pp.data() + jk * T;
              double acc = 0.0;
              for (std::size_t jq = 0; jq < T; ++jq) acc += dOr[jq] * Pr[jq];
              dVr[jk] += acc;
            }
          }
          // dP'[jk][jq] = sum_d V[d][jk] dO[d][jq]
          dP.assign(T * T, 0.0);
          for (std::size_t d = 0; d < hd; ++d) {
            const double* Vr = V + (hb + d) * total + off;
            const double* dOr = dO + (hb + d) * total + off;
            for (std::size_t jk = 0; jk < T; ++jk) {
              const double vv = Vr[jk];
              double* dPr = dP.data() + jk * T;
              for (std::size_t jq = 0; jq < T; ++jq) dPr[jq] += vv * dOr[jq];
            }
          }
          if (M)
            for (std::size_t i = 0; i < T * T; ++i) dP[i] *= M[i];
          // Softmax backward per column, then the score scale.
          dS.assign(T * T, 0.0);
          for (std::size_t jq = 0; jq < T; ++jq) {
            double dot = 0.0;
            for (std::size_t jk = 0; jk < T; ++jk) dot += P[jk * T + jq] * dP[jk * T + jq];
            for (std::size_t jk = 0; jk < T; ++jk)
              dS[jk * T + jq] = P[jk * T + jq] * (dP[jk * T + jq] - dot) * inv_sqrt;
          }
          // dQ[d][jq] += sum_jk K[d][jk] dS[jk][jq]; dK[d][jk] += sum_jq Q[d][jq] dS[jk][jq]
          for (std::size_t d = 0; d < hd; ++d) {
            const double* Kr = K + (hb + d) * total + off;
            const double* Qr = Q + (hb + d) * total + off;
            double* dQr = dQ + (hb + d) * total + off;
            double* dKr = dK + (hb + d) * total + off;
            for (std::size_t jk = 0; jk < T; ++jk) {
              const double kv = Kr[jk];
              const double* dSr = dS.data() + jk * T;
              double acc = 0.0;
              for (std::size_t jq = 0; jq < T; ++jq) {
                dQr[jq] += kv * dSr[jq];
                acc += Qr[jq] * dSr[jq];
              }
              dKr[jk] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

void Tape::backward(const TensorPtr& loss) {
  if (loss->size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_string(*loss));
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void backpropagate(const TensorPtr& loss, Tape& tape) { tape.backward(loss); }

std::vector<double> finite_difference_gradient(const std::function<double()>& f, Tensor& x,
                                               double epsilon) {
  if (epsilon <= 0.0) throw std::invalid_argument("finite_difference_gradient: epsilon must be positive");
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x.data[i];
    x.data[i] = saved + epsilon;
    const double fp = f();
    x.data[i] = saved - epsilon;
    const double fm = f();
    x.data[i] = saved;
    g[i] = (fp - fm) / (2.0 * epsilon);
  }
  return g;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace promptlab
