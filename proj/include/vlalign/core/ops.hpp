#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "vlalign/core/autograd.hpp"

// Differentiable tensor operations. Shapes are written as [B,L,d] for
// batched sequences; most ops treat leading dimensions as flattened rows
// over the last dimension.

namespace vlalign {

namespace detail {

inline long rows_of(const Tensor& t) { return t.numel() / t.dim(t.rank() - 1); }

inline std::vector<long> drop_last(const std::vector<long>& s) {
  return std::vector<long>(s.begin(), s.end() - 1);
}

}  // namespace detail

// ---- elementwise ----

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_shape(a->value.same_shape(b->value),
              "add: shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
  Tensor y = a->value;
  for (long i = 0; i < y.numel(); ++i) y[i] += b->value[i];
  return make_node(std::move(y), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = ensure_grad(*a);
      for (long i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = ensure_grad(*b);
      for (long i = 0; i < gb.numel(); ++i) gb[i] += n.grad[i];
    }
  });
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_shape(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor y = a->value;
  for (long i = 0; i < y.numel(); ++i) y[i] -= b->value[i];
  return make_node(std::move(y), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = ensure_grad(*a);
      for (long i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = ensure_grad(*b);
      for (long i = 0; i < gb.numel(); ++i) gb[i] -= n.grad[i];
    }
  });
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_shape(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor y = a->value;
  for (long i = 0; i < y.numel(); ++i) y[i] *= b->value[i];
  return make_node(std::move(y), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = ensure_grad(*a);
      for (long i = 0; i < ga.numel(); ++i) ga[i] += b->value[i] * n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = ensure_grad(*b);
      for (long i = 0; i < gb.numel(); ++i) gb[i] += a->value[i] * n.grad[i];
    }
  });
}

inline NodePtr scale(const NodePtr& a, real c) {
  Tensor y = a->value;
  for (long i = 0; i < y.numel(); ++i) y[i] *= c;
  return make_node(std::move(y), {a}, [a, c](Node& n) {
    Tensor& ga = ensure_grad(*a);
    for (long i = 0; i < ga.numel(); ++i) ga[i] += c * n.grad[i];
  });
}

inline NodePtr neg(const NodePtr& a) { return scale(a, -1.0); }

// y = s * x with s a scalar node (shape [1]).
inline NodePtr mul_scalar(const NodePtr& x, const NodePtr& s) {
  check_shape(s->value.numel() == 1, "mul_scalar: s must be scalar");
  real sv = s->value[0];
  Tensor y = x->value;
  for (long i = 0; i < y.numel(); ++i) y[i] *= sv;
  return make_node(std::move(y), {x, s}, [x, s, sv](Node& n) {
    if (x->requires_grad) {
      Tensor& gx = ensure_grad(*x);
      for (long i = 0; i < gx.numel(); ++i) gx[i] += sv * n.grad[i];
    }
    if (s->requires_grad) {
      Tensor& gs = ensure_grad(*s);
      real acc = 0.0;
      for (long i = 0; i < x->value.numel(); ++i) acc += x->value[i] * n.grad[i];
      gs[0] += acc;
    }
  });
}

inline NodePtr vexp(const NodePtr& a) {
  Tensor y = a->value;
  for (long i = 0; i < y.numel(); ++i) y[i] = std::exp(y[i]);
  return make_node(std::move(y), {a}, [a](Node& n) {
    Tensor& ga = ensure_grad(*a);
    for (long i = 0; i < ga.numel(); ++i) ga[i] += n.value[i] * n.grad[i];
  });
}

inline NodePtr gelu(const NodePtr& a) {
  // exact form: x * Phi(x)
  Tensor y = a->value;
  for (long i = 0; i < y.numel(); ++i) {
    real x = y[i];
    y[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  return make_node(std::move(y), {a}, [a](Node& n) {
    Tensor& ga = ensure_grad(*a);
    for (long i = 0; i < ga.numel(); ++i) {
      real x = a->value[i];
      real phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      real pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      ga[i] += (phi + x * pdf) * n.grad[i];
    }
  });
}

// ---- broadcast adds ----

// x[..., d] + b[d]
inline NodePtr add_bias(const NodePtr& x, const NodePtr& b) {
  long d = x->value.dim(x->value.rank() - 1);
  check_shape(b->value.rank() == 1 && b->value.dim(0) == d, "add_bias: bias dim mismatch");
  long rows = detail::rows_of(x->value);
  Tensor y = x->value;
  for (long r = 0; r < rows; ++r)
    for (long k = 0; k < d; ++k) y[r * d + k] += b->value[k];
  return make_node(std::move(y), {x, b}, [x, b, rows, d](Node& n) {
    if (x->requires_grad) {
      Tensor& gx = ensure_grad(*x);
      for (long i = 0; i < gx.numel(); ++i) gx[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = ensure_grad(*b);
      for (long r = 0; r < rows; ++r)
        for (long k = 0; k < d; ++k) gb[k] += n.grad[r * d + k];
    }
  });
}

// x[B,L,d] + v[B,d] broadcast over sequence positions
inline NodePtr add_bcast_vec(const NodePtr& x, const NodePtr& v) {
  check_shape(x->value.rank() == 3 && v->value.rank() == 2 &&
                  x->value.dim(0) == v->value.dim(0) && x->value.dim(2) == v->value.dim(1),
              "add_bcast_vec: expected x[B,L,d], v[B,d]");
  long B = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2);
  Tensor y = x->value;
  for (long b = 0; b < B; ++b)
    for (long l = 0; l < L; ++l)
      for (long k = 0; k < d; ++k) y.at(b, l, k) += v->value.at(b, k);
  return make_node(std::move(y), {x, v}, [x, v, B, L, d](Node& n) {
    if (x->requires_grad) {
      Tensor& gx = ensure_grad(*x);
      for (long i = 0; i < gx.numel(); ++i) gx[i] += n.grad[i];
    }
    if (v->requires_grad) {
      Tensor& gv = ensure_grad(*v);
      for (long b = 0; b < B; ++b)
        for (long l = 0; l < L; ++l)
          for (long k = 0; k < d; ++k) gv.at(b, k) += n.grad[(b * L + l) * d + k];
    }
  });
}

// ---- linear algebra ----

// x[..., K] @ w[K, M]; leading dims flattened to rows.
inline NodePtr matmul(const NodePtr& x, const NodePtr& w) {
  check_shape(w->value.rank() == 2, "matmul: weight must be rank-2");
  long K = w->value.dim(0), M = w->value.dim(1);
  check_shape(x->value.dim(x->value.rank() - 1) == K,
              "matmul: inner dim mismatch, x " + x->value.shape_str() + " w " + w->value.shape_str());
  long R = detail::rows_of(x->value);
  std::vector<long> yshape = detail::drop_last(x->value.shape());
  yshape.push_back(M);
  Tensor y(yshape);
  const real* xd = x->value.data();
  const real* wd = w->value.data();
  real* yd = y.data();
  for (long r = 0; r < R; ++r)
    for (long k = 0; k < K; ++k) {
      real xv = xd[r * K + k];
      if (xv == 0.0) continue;
      const real* wrow = wd + k * M;
      real* yrow = yd + r * M;
      for (long m = 0; m < M; ++m) yrow[m] += xv * wrow[m];
    }
  return make_node(std::move(y), {x, w}, [x, w, R, K, M](Node& n) {
    const real* gy = n.grad.data();
    if (x->requires_grad) {
      Tensor& gx = ensure_grad(*x);
      const real* wd = w->value.data();
      for (long r = 0; r < R; ++r)
        for (long k = 0; k < K; ++k) {
          real acc = 0.0;
          const real* wrow = wd + k * M;
          const real* gyrow = gy + r * M;
          for (long m = 0; m < M; ++m) acc += gyrow[m] * wrow[m];
          gx[r * K + k] += acc;
        }
    }
    if (w->requires_grad) {
      Tensor& gw = ensure_grad(*w);
      const real* xd = x->value.data();
      for (long r = 0; r < R; ++r)
        for (long k = 0; k < K; ++k) {
          real xv = xd[r * K + k];
          if (xv == 0.0) continue;
          real* gwrow = gw.data() + k * M;
          const real* gyrow = gy + r * M;
          for (long m = 0; m < M; ++m) gwrow[m] += xv * gyrow[m];
        }
    }
  });
}

// a[B,N,K] @ b[B,K,M]
inline NodePtr bmm(const NodePtr& a, const NodePtr& b) {
  check_shape(a->value.rank() == 3 && b->value.rank() == 3 && a->value.dim(0) == b->value.dim(0) &&
                  a->value.dim(2) == b->value.dim(1),
              "bmm: shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
  long B = a->value.dim(0), N = a->value.dim(1), K = a->value.dim(2), M = b->value.dim(2);
  Tensor y({B, N, M});
  const real* ad = a->value.data();
  const real* bd = b->value.data();
  real* yd = y.data();
  for (long bb = 0; bb < B; ++bb)
    for (long i = 0; i < N; ++i) {
      const real* arow = ad + (bb * N + i) * K;
      real* yrow = yd + (bb * N + i) * M;
      for (long k = 0; k < K; ++k) {
        real av = arow[k];
        if (av == 0.0) continue;
        const real* brow = bd + (bb * K + k) * M;
        for (long j = 0; j < M; ++j) yrow[j] += av * brow[j];
      }
    }
  return make_node(std::move(y), {a, b}, [a, b, B, N, K, M](Node& n) {
    const real* gy = n.grad.data();
    if (a->requires_grad) {
      Tensor& ga = ensure_grad(*a);
      const real* bd = b->value.data();
      for (long bb = 0; bb < B; ++bb)
        for (long i = 0; i < N; ++i) {
          const real* gyrow = gy + (bb * N + i) * M;
          real* garow = ga.data() + (bb * N + i) * K;
          for (long k = 0; k < K; ++k) {
            const real* brow = bd + (bb * K + k) * M;
            real acc = 0.0;
            for (long j = 0; j < M; ++j) acc += gyrow[j] * brow[j];
            garow[k] += acc;
          }
        }
    }
    if (b->requires_grad) {
      Tensor& gb = ensure_grad(*b);
      const real* ad = a->value.data();
      for (long bb = 0; bb < B; ++bb)
        for (long i = 0; i < N; ++i) {
          const real* arow = ad + (bb * N + i) * K;
          const real* gyrow = gy + (bb * N + i) * M;
          for (long k = 0; k < K; ++k) {
            real av = arow[k];
            if (av == 0.0) continue;
            real* gbrow = gb.data() + (bb * K + k) * M;
            for (long j = 0; j < M; ++j) gbrow[j] += av * gyrow[j];
          }
        }
    }
  });
}

// y[b,i,j] = sum_t a[b,i,t] * c[b,j,t]  (both operands row-major over t;
// the attention score pattern without materializing a transpose)
inline NodePtr bmm_nt(const NodePtr& a, const NodePtr& c) {
  check_shape(a->value.rank() == 3 && c->value.rank() == 3 && a->value.dim(0) == c->value.dim(0) &&
                  a->value.dim(2) == c->value.dim(2),
              "bmm_nt: shape mismatch " + a->value.shape_str() + " vs " + c->value.shape_str());
  long B = a->value.dim(0), N = a->value.dim(1), M = c->value.dim(1), T = a->value.dim(2);
  Tensor y({B, N, M});
  const real* ad = a->value.data();
  const real* cd = c->value.data();
  real* yd = y.data();
  for (long bb = 0; bb < B; ++bb)
    for (long i = 0; i < N; ++i) {
      const real* arow = ad + (bb * N + i) * T;
      real* yrow = yd + (bb * N + i) * M;
      for (long j = 0; j < M; ++j) {
        const real* crow = cd + (bb * M + j) * T;
        real acc = 0.0;
        for (long t = 0; t < T; ++t) acc += arow[t] * crow[t];
        yrow[j] = acc;
      }
    }
  return make_node(std::move(y), {a, c}, [a, c, B, N, M, T](Node& n) {
    const real* gy = n.grad.data();
    if (a->requires_grad) {
      Tensor& ga = ensure_grad(*a);
      const real* cd = c->value.data();
      for (long bb = 0; bb < B; ++bb)
        for (long i = 0; i < N; ++i) {
          const real* gyrow = gy + (bb * N + i) * M;
          real* garow = ga.data() + (bb * N + i) * T;
          for (long j = 0; j < M; ++j) {
            real g = gyrow[j];
            if (g == 0.0) continue;
            const real* crow = cd + (bb * M + j) * T;
            for (long t = 0; t < T; ++t) garow[t] += g * crow[t];
          }
        }
    }
    if (c->requires_grad) {
      Tensor& gc = ensure_grad(*c);
      const real* ad = a->value.data();
      for (long bb = 0; bb < B; ++bb)
        for (long i = 0; i < N; ++i) {
          const real* arow = ad + (bb * N + i) * T;
          const real* gyrow = gy + (bb * N + i) * M;
          for (long j = 0; j < M; ++j) {
            real g = gyrow[j];
            if (g == 0.0) continue;
            real* gcrow = gc.data() + (bb * M + j) * T;
            for (long t = 0; t < T; ++t) gcrow[t] += g * arow[t];
          }
        }
    }
  });
}

inline NodePtr transpose_last2(const NodePtr& x) {
  check_shape(x->value.rank() == 3, "transpose_last2: expected rank-3");
  long B = x->value.dim(0), N = x->value.dim(1), M = x->value.dim(2);
  Tensor y({B, M, N});
  for (long b = 0; b < B; ++b)
    for (long i = 0; i < N; ++i)
      for (long j = 0; j < M; ++j) y.at(b, j, i) = x->value.at(b, i, j);
  return make_node(std::move(y), {x}, [x, B, N, M](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long i = 0; i < N; ++i)
        for (long j = 0; j < M; ++j) gx.at(b, i, j) += n.grad.at(b, j, i);
  });
}

inline NodePtr transpose2d(const NodePtr& x) {
  check_shape(x->value.rank() == 2, "transpose2d: expected rank-2");
  long N = x->value.dim(0), M = x->value.dim(1);
  Tensor y({M, N});
  for (long i = 0; i < N; ++i)
    for (long j = 0; j < M; ++j) y.at(j, i) = x->value.at(i, j);
  return make_node(std::move(y), {x}, [x, N, M](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long i = 0; i < N; ++i)
      for (long j = 0; j < M; ++j) gx.at(i, j) += n.grad.at(j, i);
  });
}

// ---- normalization / activations over last dim ----

inline NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                          real eps = 1e-5) {
  long d = x->value.dim(x->value.rank() - 1);
  check_shape(gamma->value.numel() == d && beta->value.numel() == d, "layer_norm: affine dim mismatch");
  long R = detail::rows_of(x->value);
  Tensor y = x->value;
  Tensor xhat({R, d});
  Tensor inv_std({R});
  for (long r = 0; r < R; ++r) {
    const real* xr = x->value.data() + r * d;
    real mean = 0.0;
    for (long k = 0; k < d; ++k) mean += xr[k];
    mean /= static_cast<real>(d);
    real var = 0.0;
    for (long k = 0; k < d; ++k) var += (xr[k] - mean) * (xr[k] - mean);
    var /= static_cast<real>(d);
    real is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (long k = 0; k < d; ++k) {
      real xh = (xr[k] - mean) * is;
      xhat.at(r, k) = xh;
      y[r * d + k] = gamma->value[k] * xh + beta->value[k];
    }
  }
  return make_node(std::move(y), {x, gamma, beta},
                   [x, gamma, beta, xhat, inv_std, R, d](Node& n) {
                     if (x->requires_grad) {
                       Tensor& gx = ensure_grad(*x);
                       for (long r = 0; r < R; ++r) {
                         real sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                         for (long k = 0; k < d; ++k) {
                           real dxh = n.grad[r * d + k] * gamma->value[k];
                           sum_dxhat += dxh;
                           sum_dxhat_xhat += dxh * xhat.at(r, k);
                         }
                         real is = inv_std[r];
                         for (long k = 0; k < d; ++k) {
                           real dxh = n.grad[r * d + k] * gamma->value[k];
                           gx[r * d + k] += is * (dxh - sum_dxhat / d - xhat.at(r, k) * sum_dxhat_xhat / d);
                         }
                       }
                     }
                     if (gamma->requires_grad) {
                       Tensor& gg = ensure_grad(*gamma);
                       for (long r = 0; r < R; ++r)
                         for (long k = 0; k < d; ++k) gg[k] += n.grad[r * d + k] * xhat.at(r, k);
                     }
                     if (beta->requires_grad) {
                       Tensor& gb = ensure_grad(*beta);
                       for (long r = 0; r < R; ++r)
                         for (long k = 0; k < d; ++k) gb[k] += n.grad[r * d + k];
                     }
                   });
}

inline NodePtr softmax_last(const NodePtr& x) {
  long d = x->value.dim(x->value.rank() - 1);
  long R = detail::rows_of(x->value);
  Tensor y = x->value;
  for (long r = 0; r < R; ++r) {
    real* yr = y.data() + r * d;
    real mx = yr[0];
    for (long k = 1; k < d; ++k) mx = std::max(mx, yr[k]);
    real sum = 0.0;
    for (long k = 0; k < d; ++k) {
      yr[k] = std::exp(yr[k] - mx);
      sum += yr[k];
    }
    for (long k = 0; k < d; ++k) yr[k] /= sum;
  }
  return make_node(std::move(y), {x}, [x, R, d](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long r = 0; r < R; ++r) {
      real dot = 0.0;
      for (long k = 0; k < d; ++k) dot += n.grad[r * d + k] * n.value[r * d + k];
      for (long k = 0; k < d; ++k)
        gx[r * d + k] += n.value[r * d + k] * (n.grad[r * d + k] - dot);
    }
  });
}

// y = x / sqrt(sum(x^2) + eps) per row
inline NodePtr l2norm_last(const NodePtr& x, real eps = 1e-12) {
  long d = x->value.dim(x->value.rank() - 1);
  long R = detail::rows_of(x->value);
  Tensor y = x->value;
  Tensor inv_norm({R});
  for (long r = 0; r < R; ++r) {
    real* yr = y.data() + r * d;
    real ss = eps;
    for (long k = 0; k < d; ++k) ss += yr[k] * yr[k];
    real in = 1.0 / std::sqrt(ss);
    inv_norm[r] = in;
    for (long k = 0; k < d; ++k) yr[k] *= in;
  }
  return make_node(std::move(y), {x}, [x, inv_norm, R, d](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long r = 0; r < R; ++r) {
      real in = inv_norm[r];
      const real* xr = x->value.data() + r * d;
      real dot = 0.0;
      for (long k = 0; k < d; ++k) dot += n.grad[r * d + k] * xr[k];
      for (long k = 0; k < d; ++k)
        gx[r * d + k] += in * n.grad[r * d + k] - in * in * in * dot * xr[k];
    }
  });
}

// ---- shaping ----

inline NodePtr reshape(const NodePtr& x, std::vector<long> shape) {
  Tensor y = x->value.reshaped(std::move(shape));
  return make_node(std::move(y), {x}, [x](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long i = 0; i < gx.numel(); ++i) gx[i] += n.grad[i];
  });
}

// rows [start, start+len) along axis 1 of x[B,L,d]
inline NodePtr slice_seq(const NodePtr& x, long start, long len) {
  check_shape(x->value.rank() == 3, "slice_seq: expected rank-3");
  long B = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2);
  check_shape(start >= 0 && len >= 0 && start + len <= L, "slice_seq: range out of bounds");
  Tensor y({B, len, d});
  for (long b = 0; b < B; ++b)
    for (long l = 0; l < len; ++l)
      for (long k = 0; k < d; ++k) y.at(b, l, k) = x->value.at(b, start + l, k);
  return make_node(std::move(y), {x, }, [x, B, len, d, start](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long l = 0; l < len; ++l)
        for (long k = 0; k < d; ++k) gx.at(b, start + l, k) += n.grad.at(b, l, k);
  });
}

// rows [start, start+len) along axis 0 of x[B,L,d]
inline NodePtr slice_batch(const NodePtr& x, long start, long len) {
  check_shape(x->value.rank() == 3, "slice_batch: expected rank-3");
  long B = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2);
  check_shape(start >= 0 && len >= 0 && start + len <= B, "slice_batch: range out of bounds");
  long S = L * d;
  Tensor y({len, L, d});
  for (long b = 0; b < len; ++b)
    for (long i = 0; i < S; ++i) y[b * S + i] = x->value[(start + b) * S + i];
  return make_node(std::move(y), {x}, [x, start, len, S](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < len; ++b)
      for (long i = 0; i < S; ++i) gx[(start + b) * S + i] += n.grad[b * S + i];
  });
}

inline NodePtr concat_seq(const std::vector<NodePtr>& parts) {
  check_shape(!parts.empty(), "concat_seq: empty input");
  long B = parts[0]->value.dim(0), d = parts[0]->value.dim(2);
  long L = 0;
  for (const auto& p : parts) {
    check_shape(p->value.rank() == 3 && p->value.dim(0) == B && p->value.dim(2) == d,
                "concat_seq: incompatible part shape");
    L += p->value.dim(1);
  }
  Tensor y({B, L, d});
  long off = 0;
  for (const auto& p : parts) {
    long pl = p->value.dim(1);
    for (long b = 0; b < B; ++b)
      for (long l = 0; l < pl; ++l)
        for (long k = 0; k < d; ++k) y.at(b, off + l, k) = p->value.at(b, l, k);
    off += pl;
  }
  return make_node(std::move(y), parts, [parts, B, d](Node& n) {
    long off = 0;
    for (const auto& p : parts) {
      long pl = p->value.dim(1);
      if (p->requires_grad) {
        Tensor& gp = ensure_grad(*p);
        for (long b = 0; b < B; ++b)
          for (long l = 0; l < pl; ++l)
            for (long k = 0; k < d; ++k) gp.at(b, l, k) += n.grad.at(b, off + l, k);
      }
      off += pl;
    }
  });
}

// [B,L,H*dh] -> [B*H,L,dh]
inline NodePtr split_heads(const NodePtr& x, long H) {
  check_shape(x->value.rank() == 3 && x->value.dim(2) % H == 0, "split_heads: dim not divisible by heads");
  long B = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2), dh = d / H;
  Tensor y({B * H, L, dh});
  for (long b = 0; b < B; ++b)
    for (long h = 0; h < H; ++h)
      for (long l = 0; l < L; ++l)
        for (long k = 0; k < dh; ++k) y.at(b * H + h, l, k) = x->value.at(b, l, h * dh + k);
  return make_node(std::move(y), {x}, [x, B, H, L, dh](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long h = 0; h < H; ++h)
        for (long l = 0; l < L; ++l)
          for (long k = 0; k < dh; ++k) gx.at(b, l, h * dh + k) += n.grad.at(b * H + h, l, k);
  });
}

// [B*H,L,dh] -> [B,L,H*dh]
inline NodePtr merge_heads(const NodePtr& x, long H) {
  check_shape(x->value.rank() == 3 && x->value.dim(0) % H == 0, "merge_heads: batch not divisible by heads");
  long B = x->value.dim(0) / H, L = x->value.dim(1), dh = x->value.dim(2);
  Tensor y({B, L, H * dh});
  for (long b = 0; b < B; ++b)
    for (long h = 0; h < H; ++h)
      for (long l = 0; l < L; ++l)
        for (long k = 0; k < dh; ++k) y.at(b, l, h * dh + k) = x->value.at(b * H + h, l, k);
  return make_node(std::move(y), {x}, [x, B, H, L, dh](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long h = 0; h < H; ++h)
        for (long l = 0; l < L; ++l)
          for (long k = 0; k < dh; ++k) gx.at(b * H + h, l, k) += n.grad.at(b, l, h * dh + k);
  });
}

// repeat whole batch block: y[t*B+b] = x[b]
inline NodePtr tile_batch(const NodePtr& x, long times) {
  check_shape(x->value.rank() == 3, "tile_batch: expected rank-3");
  long B = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2);
  Tensor y({B * times, L, d});
  for (long t = 0; t < times; ++t)
    for (long i = 0; i < B * L * d; ++i) y[t * B * L * d + i] = x->value[i];
  return make_node(std::move(y), {x}, [x, B, L, d, times](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long t = 0; t < times; ++t)
      for (long i = 0; i < B * L * d; ++i) gx[i] += n.grad[t * B * L * d + i];
  });
}

// repeat each sample consecutively: y[b*times+t] = x[b]
inline NodePtr repeat_batch(const NodePtr& x, long times) {
  check_shape(x->value.rank() == 3, "repeat_batch: expected rank-3");
  long B = x->value.dim(0), L = x->value.dim(1), d = x->value.dim(2);
  long S = L * d;
  Tensor y({B * times, L, d});
  for (long b = 0; b < B; ++b)
    for (long t = 0; t < times; ++t)
      for (long i = 0; i < S; ++i) y[(b * times + t) * S + i] = x->value[b * S + i];
  return make_node(std::move(y), {x, }, [x, B, S, times](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long t = 0; t < times; ++t)
        for (long i = 0; i < S; ++i) gx[b * S + i] += n.grad[(b * times + t) * S + i];
  });
}

// ---- gathers ----

// table[V,d] indexed by ids[B,L] -> [B,L,d]
inline NodePtr embed(const NodePtr& table, const std::vector<long>& ids, long B, long L) {
  check_shape(table->value.rank() == 2, "embed: table must be rank-2");
  check_shape(static_cast<long>(ids.size()) == B * L, "embed: ids size mismatch");
  long V = table->value.dim(0), d = table->value.dim(1);
  for (long id : ids)
    check_shape(id >= 0 && id < V, "embed: id out of range");
  Tensor y({B, L, d});
  const real* td = table->value.data();
  real* yd = y.data();
  for (long i = 0; i < B * L; ++i) {
    const real* row = td + ids[static_cast<std::size_t>(i)] * d;
    real* yrow = yd + i * d;
    for (long k = 0; k < d; ++k) yrow[k] = row[k];
  }
  return make_node(std::move(y), {table}, [table, ids, B, L, d](Node& n) {
    Tensor& gt = ensure_grad(*table);
    const real* gy = n.grad.data();
    for (long i = 0; i < B * L; ++i) {
      real* grow = gt.data() + ids[static_cast<std::size_t>(i)] * d;
      const real* gyrow = gy + i * d;
      for (long k = 0; k < d; ++k) grow[k] += gyrow[k];
    }
  });
}

// y[B,L,d]: every row starts as fill[1,d]; row (b, pos[b][i]) is
// overwritten with src[b,i]. Positions must be unique per sample.
inline NodePtr scatter_rows(const NodePtr& src, const NodePtr& fill,
                            const std::vector<std::vector<long>>& pos, long L) {
  check_shape(src->value.rank() == 3, "scatter_rows: expected src[B,m,d]");
  check_shape(fill->value.rank() == 2 && fill->value.dim(0) == 1 &&
                  fill->value.dim(1) == src->value.dim(2),
              "scatter_rows: fill must be [1,d]");
  long B = src->value.dim(0), m = src->value.dim(1), d = src->value.dim(2);
  check_shape(static_cast<long>(pos.size()) == B, "scatter_rows: positions per sample mismatch");
  Tensor y({B, L, d});
  std::vector<char> taken(static_cast<std::size_t>(B * L), 0);
  for (long b = 0; b < B; ++b) {
    check_shape(static_cast<long>(pos[static_cast<std::size_t>(b)].size()) == m,
                "scatter_rows: position count mismatch");
    for (long l = 0; l < L; ++l)
      for (long k = 0; k < d; ++k) y.at(b, l, k) = fill->value.at(0, k);
    for (long i = 0; i < m; ++i) {
      long l = pos[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
      check_shape(l >= 0 && l < L && !taken[static_cast<std::size_t>(b * L + l)],
                  "scatter_rows: bad or duplicate position");
      taken[static_cast<std::size_t>(b * L + l)] = 1;
      for (long k = 0; k < d; ++k) y.at(b, l, k) = src->value.at(b, i, k);
    }
  }
  return make_node(std::move(y), {src, fill}, [src, fill, pos, B, m, d, L](Node& n) {
    std::vector<char> filled(static_cast<std::size_t>(B * L), 1);
    for (long b = 0; b < B; ++b)
      for (long i = 0; i < m; ++i)
        filled[static_cast<std::size_t>(b * L + pos[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)])] = 0;
    if (src->requires_grad) {
      Tensor& gs = ensure_grad(*src);
      for (long b = 0; b < B; ++b)
        for (long i = 0; i < m; ++i) {
          long l = pos[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
          for (long k = 0; k < d; ++k) gs.at(b, i, k) += n.grad.at(b, l, k);
        }
    }
    if (fill->requires_grad) {
      Tensor& gf = ensure_grad(*fill);
      for (long b = 0; b < B; ++b)
        for (long l = 0; l < L; ++l)
          if (filled[static_cast<std::size_t>(b * L + l)])
            for (long k = 0; k < d; ++k) gf.at(0, k) += n.grad.at(b, l, k);
    }
  });
}

// pick rows (b,l) from x[B,L,d] -> [K,d]
inline NodePtr gather_positions(const NodePtr& x, const std::vector<std::pair<long, long>>& pos) {
  check_shape(x->value.rank() == 3, "gather_positions: expected rank-3");
  long L = x->value.dim(1), d = x->value.dim(2);
  long K = static_cast<long>(pos.size());
  Tensor y({K, d});
  for (long i = 0; i < K; ++i) {
    auto [b, l] = pos[static_cast<std::size_t>(i)];
    for (long k = 0; k < d; ++k) y.at(i, k) = x->value.at(b, l, k);
  }
  (void)L;
  return make_node(std::move(y), {x}, [x, pos, d](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      auto [b, l] = pos[i];
      for (long k = 0; k < d; ++k) gx.at(b, l, k) += n.grad.at(static_cast<long>(i), k);
    }
  });
}

// ---- attention mask ----

// scores[B*H,Lq,Lk] + mask[B,Lk] (0 to keep, large negative to drop)
inline NodePtr add_key_mask(const NodePtr& scores, const Tensor& mask, long H) {
  check_shape(scores->value.rank() == 3 && mask.rank() == 2, "add_key_mask: bad ranks");
  long BH = scores->value.dim(0), Lq = scores->value.dim(1), Lk = scores->value.dim(2);
  check_shape(BH == mask.dim(0) * H && mask.dim(1) == Lk, "add_key_mask: shape mismatch");
  Tensor y = scores->value;
  for (long bh = 0; bh < BH; ++bh) {
    long b = bh / H;
    for (long q = 0; q < Lq; ++q)
      for (long k = 0; k < Lk; ++k) y.at(bh, q, k) += mask.at(b, k);
  }
  return make_node(std::move(y), {scores}, [scores](Node& n) {
    Tensor& gs = ensure_grad(*scores);
    for (long i = 0; i < gs.numel(); ++i) gs[i] += n.grad[i];
  });
}

// ---- reductions / losses ----

inline NodePtr sum_last(const NodePtr& x) {
  long d = x->value.dim(x->value.rank() - 1);
  long R = detail::rows_of(x->value);
  Tensor y(detail::drop_last(x->value.shape()));
  for (long r = 0; r < R; ++r) {
    real acc = 0.0;
    for (long k = 0; k < d; ++k) acc += x->value[r * d + k];
    y[r] = acc;
  }
  return make_node(std::move(y), {x}, [x, R, d](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long r = 0; r < R; ++r)
      for (long k = 0; k < d; ++k) gx[r * d + k] += n.grad[r];
  });
}

inline NodePtr mean_all(const NodePtr& x) {
  long N = x->value.numel();
  real acc = 0.0;
  for (long i = 0; i < N; ++i) acc += x->value[i];
  Tensor y = Tensor::scalar(acc / static_cast<real>(N));
  return make_node(std::move(y), {x}, [x, N](Node& n) {
    Tensor& gx = ensure_grad(*x);
    real g = n.grad[0] / static_cast<real>(N);
    for (long i = 0; i < N; ++i) gx[i] += g;
  });
}

inline NodePtr sum_all(const NodePtr& x) {
  long N = x->value.numel();
  real acc = 0.0;
  for (long i = 0; i < N; ++i) acc += x->value[i];
  Tensor y = Tensor::scalar(acc);
  return make_node(std::move(y), {x}, [x, N](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long i = 0; i < N; ++i) gx[i] += n.grad[0];
  });
}

// elementwise product with a constant weight tensor
inline NodePtr mul_const(const NodePtr& x, const Tensor& w) {
  check_shape(x->value.same_shape(w), "mul_const: shape mismatch");
  Tensor y = x->value;
  for (long i = 0; i < y.numel(); ++i) y[i] *= w[i];
  return make_node(std::move(y), {x}, [x, w](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long i = 0; i < gx.numel(); ++i) gx[i] += w[i] * n.grad[i];
  });
}

// mean cross-entropy of logits[R,V] against integer targets
inline NodePtr cross_entropy_rows(const NodePtr& logits, const std::vector<long>& targets) {
  check_shape(logits->value.rank() == 2, "cross_entropy_rows: expected rank-2 logits");
  long R = logits->value.dim(0), V = logits->value.dim(1);
  check_shape(static_cast<long>(targets.size()) == R, "cross_entropy_rows: target count mismatch");
  Tensor probs({R, V});
  real loss = 0.0;
  for (long r = 0; r < R; ++r) {
    const real* lr = logits->value.data() + r * V;
    long t = targets[static_cast<std::size_t>(r)];
    check_shape(t >= 0 && t < V, "cross_entropy_rows: target out of range");
    real mx = lr[0];
    for (long k = 1; k < V; ++k) mx = std::max(mx, lr[k]);
    real sum = 0.0;
    for (long k = 0; k < V; ++k) sum += std::exp(lr[k] - mx);
    real lse = mx + std::log(sum);
    loss += lse - lr[t];
    for (long k = 0; k < V; ++k) probs.at(r, k) = std::exp(lr[k] - lse);
  }
  Tensor y = Tensor::scalar(loss / static_cast<real>(R));
  return make_node(std::move(y), {logits}, [logits, probs, targets, R, V](Node& n) {
    Tensor& gl = ensure_grad(*logits);
    real g = n.grad[0] / static_cast<real>(R);
    for (long r = 0; r < R; ++r) {
      long t = targets[static_cast<std::size_t>(r)];
      for (long k = 0; k < V; ++k)
        gl.at(r, k) += g * (probs.at(r, k) - (k == t ? 1.0 : 0.0));
    }
  });
}

// mean squared error against a constant target
inline NodePtr mse_const(const NodePtr& pred, const Tensor& target) {
  check_shape(pred->value.same_shape(target), "mse_const: shape mismatch");
  long N = pred->value.numel();
  check_shape(N > 0, "mse_const: empty prediction");
  real acc = 0.0;
  for (long i = 0; i < N; ++i) {
    real e = pred->value[i] - target[i];
    acc += e * e;
  }
  Tensor y = Tensor::scalar(acc / static_cast<real>(N));
  return make_node(std::move(y), {pred}, [pred, target, N](Node& n) {
    Tensor& gp = ensure_grad(*pred);
    real g = 2.0 * n.grad[0] / static_cast<real>(N);
    for (long i = 0; i < N; ++i) gp[i] += g * (pred->value[i] - target[i]);
  });
}

// log(sum(exp(x))) over axis 1 of x[B,L] -> [B]
inline NodePtr logsumexp_axis1(const NodePtr& x) {
  check_shape(x->value.rank() == 2, "logsumexp_axis1: expected rank-2");
  long B = x->value.dim(0), L = x->value.dim(1);
  Tensor y({B});
  Tensor soft({B, L});
  for (long b = 0; b < B; ++b) {
    const real* xr = x->value.data() + b * L;
    real mx = xr[0];
    for (long l = 1; l < L; ++l) mx = std::max(mx, xr[l]);
    real sum = 0.0;
    for (long l = 0; l < L; ++l) sum += std::exp(xr[l] - mx);
    y[b] = mx + std::log(sum);
    for (long l = 0; l < L; ++l) soft.at(b, l) = std::exp(xr[l] - mx) / sum;
  }
  return make_node(std::move(y), {x}, [x, soft, B, L](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long l = 0; l < L; ++l) gx.at(b, l) += soft.at(b, l) * n.grad[b];
  });
}

inline NodePtr mean_axis1(const NodePtr& x) {
  check_shape(x->value.rank() == 2, "mean_axis1: expected rank-2");
  long B = x->value.dim(0), L = x->value.dim(1);
  Tensor y({B});
  for (long b = 0; b < B; ++b) {
    real acc = 0.0;
    for (long l = 0; l < L; ++l) acc += x->value.at(b, l);
    y[b] = acc / static_cast<real>(L);
  }
  return make_node(std::move(y), {x}, [x, B, L](Node& n) {
    Tensor& gx = ensure_grad(*x);
    for (long b = 0; b < B; ++b)
      for (long l = 0; l < L; ++l) gx.at(b, l) += n.grad[b] / static_cast<real>(L);
  });
}

}  // namespace vlalign
