#include "svam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace svam {

using detail::Buf;
using detail::Node;

namespace {

thread_local Dtype g_dtype = Dtype::f32;
thread_local bool g_grad_enabled = true;

template <class T>
const T* cptr(const Buf& b);
template <>
const float* cptr<float>(const Buf& b) { return b.f.data(); }
template <>
const double* cptr<double>(const Buf& b) { return b.d.data(); }

template <class T>
T* mptr(Buf& b);
template <>
float* mptr<float>(Buf& b) { return b.f.data(); }
template <>
double* mptr<double>(Buf& b) { return b.d.data(); }

#define SVAM_DISPATCH(DT, FN, ...) \
  ((DT) == Dtype::f32 ? FN<float>(__VA_ARGS__) : FN<double>(__VA_ARGS__))

std::shared_ptr<Node> make_leaf(const Shape& s, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data.alloc(g_dtype, shape_numel(s));
  n->requires_grad = requires_grad;
  n->is_leaf = true;
  return n;
}

std::shared_ptr<Node> make_result(const Shape& s, const char* op,
                                  std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->data.alloc(g_dtype, shape_numel(s), /*zero=*/false);
  n->is_leaf = false;
  n->op = op;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) n->parents = std::move(parents);
  }
  return n;
}

// exp/tanh in the operand's own precision. The 32-bit training path uses a
// polynomial 2^f approximation (relative error ~3e-6, below f32 rounding
// noise at these magnitudes); the 64-bit mode keeps full-accuracy libm calls
// so finite-difference checks see the exact function.
// Branchless so loops over spans auto-vectorize; inputs clamp to the finite
// range (softmax feeds values <= 0, gelu clamps its tanh argument).
inline float p_exp(float x) {
  float t = std::min(std::max(x, -87.0f), 88.0f) * 1.442695041f;
  float fi = std::floor(t);
  float f = t - fi;
  float poly = 1.0f + f * (0.693147181f +
                           f * (0.240226507f +
                                f * (0.0555041087f + f * (0.00961812911f + f * 0.00133335581f))));
  uint32_t bits = (uint32_t)((int)fi + 127) << 23;
  float scl;
  std::memcpy(&scl, &bits, 4);
  return poly * scl;
}
inline double p_exp(double x) { return std::exp(x); }
inline float p_tanh(float x) {
  float c = std::min(std::max(x, -9.0f), 9.0f);
  return 1.0f - 2.0f / (p_exp(2.0f * c) + 1.0f);
}
inline double p_tanh(double x) { return std::tanh(x); }

template <class T>
bool finite_impl(const Buf& b, int64_t n) {
  const T* p = cptr<T>(b);
  // x - x is zero for every finite value and NaN for inf/NaN; this form
  // vectorizes where std::isfinite does not.
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += p[i] - p[i];
  return acc == T(0);
}

void check_finite(Node& n, const char* op) {
  if (!SVAM_DISPATCH(n.data.dt, finite_impl, n.data, n.numel())) {
    throw NumericError(std::string("op '") + op + "' produced a non-finite value");
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw Error(Status::error, std::string(op) + ": undefined tensor");
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw Error(Status::error, std::string(op) + ": mixed 32/64-bit operands");
  }
}

struct DimSplit {
  int64_t outer, len, inner;
};

DimSplit split_at(const Shape& s, int dim) {
  DimSplit d{1, s[dim], 1};
  for (int i = 0; i < dim; ++i) d.outer *= s[i];
  for (int i = dim + 1; i < (int)s.size(); ++i) d.inner *= s[i];
  return d;
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

template <class T>
void k_ew2(const Buf& a, const Buf& b, Buf& y, int64_t n, int mode) {
  const T* pa = cptr<T>(a);
  const T* pb = cptr<T>(b);
  T* py = mptr<T>(y);
  switch (mode) {
    case 0: for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i]; break;
    case 1: for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i]; break;
    case 2: for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i]; break;
  }
}

template <class T>
void k_acc(Buf& dst, const Buf& src, int64_t n, double factor) {
  T* pd = mptr<T>(dst);
  const T* ps = cptr<T>(src);
  T f = (T)factor;
  for (int64_t i = 0; i < n; ++i) pd[i] += f * ps[i];
}

template <class T>
void k_acc_mul(Buf& dst, const Buf& g, const Buf& other, int64_t n) {
  T* pd = mptr<T>(dst);
  const T* pg = cptr<T>(g);
  const T* po = cptr<T>(other);
  for (int64_t i = 0; i < n; ++i) pd[i] += pg[i] * po[i];
}

template <class T>
void k_scale(const Buf& a, Buf& y, int64_t n, double c) {
  const T* pa = cptr<T>(a);
  T* py = mptr<T>(y);
  T cc = (T)c;
  for (int64_t i = 0; i < n; ++i) py[i] = cc * pa[i];
}

// C (m×n) = A (m×k) @ B (k×n); optionally accumulate.
template <class T>
void k_mm_nn(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c,
             int64_t m, int64_t k, int64_t n, bool acc) {
  int64_t i = 0;
  for (; i + 1 < m; i += 2) {  // two output rows per pass halve the B traffic
    T* __restrict__ c0 = c + i * n;
    T* __restrict__ c1 = c0 + n;
    if (!acc) {
      std::fill(c0, c0 + n, T(0));
      std::fill(c1, c1 + n, T(0));
    }
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    for (int64_t p = 0; p < k; ++p) {
      T av0 = a0[p];
      T av1 = a1[p];
      const T* __restrict__ bp = b + p * n;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) {
        c0[j] += av0 * bp[j];
        c1[j] += av1 * bp[j];
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict__ ci = c + i * n;
    if (!acc) std::fill(ci, ci + n, T(0));
    const T* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      T av = ai[p];
      const T* __restrict__ bp = b + p * n;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C (k×n) (+)= A^T (k×m) @ B (m×n) with A given as m×k.
template <class T>
void k_mm_tn(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c,
             int64_t m, int64_t k, int64_t n, bool acc) {
  if (!acc) std::fill(c, c + k * n, T(0));
  for (int64_t p = 0; p < m; ++p) {
    const T* ap = a + p * k;
    const T* bp = b + p * n;
    for (int64_t i = 0; i < k; ++i) {
      T av = ap[i];
      T* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C (m×r) (+)= A (m×n) @ B^T with B given as r×n.
template <class T>
void k_mm_nt(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c,
             int64_t m, int64_t n, int64_t r, bool acc) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * n;
    T* ci = c + i * r;
    for (int64_t j = 0; j < r; ++j) {
      const T* __restrict__ bj = b + j * n;
      T s = 0;
#pragma omp simd reduction(+ : s)
      for (int64_t p = 0; p < n; ++p) s += ai[p] * bj[p];
      if (acc) ci[j] += s; else ci[j] = s;
    }
  }
}

template <class T>
void k_matmul(const Buf& a, const Buf& b, Buf& y, int64_t m, int64_t k, int64_t n) {
  k_mm_nn(cptr<T>(a), cptr<T>(b), mptr<T>(y), m, k, n, false);
}

template <class T>
void k_bias_bwd(Buf& db, const Buf& g, int64_t rows, int64_t m) {
  T* __restrict__ pd = mptr<T>(db);
  const T* __restrict__ pg = cptr<T>(g);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = pg + r * m;
#pragma omp simd
    for (int64_t j = 0; j < m; ++j) pd[j] += row[j];
  }
}

template <class T>
void k_linear_fwd(const Buf& x, const Buf& w, const Buf& b, Buf& y, int64_t rows, int64_t k,
                  int64_t m) {
  k_mm_nn(cptr<T>(x), cptr<T>(w), mptr<T>(y), rows, k, m, false);
  const T* pb = cptr<T>(b);
  T* py = mptr<T>(y);
  for (int64_t r = 0; r < rows; ++r) {
    T* row = py + r * m;
    for (int64_t j = 0; j < m; ++j) row[j] += pb[j];
  }
}

template <class T>
void k_relu_fwd(const Buf& x, Buf& y, int64_t n) {
  const T* px = cptr<T>(x);
  T* py = mptr<T>(y);
  for (int64_t i = 0; i < n; ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
}

template <class T>
void k_relu_bwd(const Buf& x, const Buf& g, Buf& dx, int64_t n) {
  const T* px = cptr<T>(x);
  const T* pg = cptr<T>(g);
  T* pd = mptr<T>(dx);
  for (int64_t i = 0; i < n; ++i) {
    if (px[i] > T(0)) pd[i] += pg[i];
  }
}

// Tanh-form gelu: 0.5 x (1 + tanh(c1 (x + c2 x^3))).
constexpr double kGeluC1 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC2 = 0.044715;

template <class T>
void k_gelu_fwd(const Buf& x, Buf& y, int64_t n) {
  const T* px = cptr<T>(x);
  T* py = mptr<T>(y);
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) {
    T v = px[i];
    T u = (T)kGeluC1 * (v + (T)kGeluC2 * v * v * v);
    py[i] = T(0.5) * v * (T(1) + p_tanh(u));
  }
}

template <class T>
void k_gelu_bwd(const Buf& x, const Buf& g, Buf& dx, int64_t n) {
  const T* px = cptr<T>(x);
  const T* pg = cptr<T>(g);
  T* pd = mptr<T>(dx);
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) {
    T v = px[i];
    T u = (T)kGeluC1 * (v + (T)kGeluC2 * v * v * v);
    T th = p_tanh(u);
    T sech2 = T(1) - th * th;
    T du = (T)kGeluC1 * (T(1) + T(3) * (T)kGeluC2 * v * v);
    pd[i] += (T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * du) * pg[i];
  }
}

template <class T>
void k_softmax_fwd(const Buf& x, Buf& y, DimSplit d) {
  const T* px = cptr<T>(x);
  T* py = mptr<T>(y);
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int64_t i = 0; i < d.inner; ++i) {
      const T* xs = px + o * d.len * d.inner + i;
      T* ys = py + o * d.len * d.inner + i;
      T mx = xs[0];
      for (int64_t l = 1; l < d.len; ++l) mx = std::max(mx, xs[l * d.inner]);
      for (int64_t l = 0; l < d.len; ++l) ys[l * d.inner] = p_exp(xs[l * d.inner] - mx);
      T z = T(0);
      for (int64_t l = 0; l < d.len; ++l) z += ys[l * d.inner];
      T inv = T(1) / z;
      for (int64_t l = 0; l < d.len; ++l) ys[l * d.inner] *= inv;
    }
  }
}

template <class T>
void k_softmax_bwd(const Buf& y, const Buf& g, Buf& dx, DimSplit d) {
  const T* py = cptr<T>(y);
  const T* pg = cptr<T>(g);
  T* pd = mptr<T>(dx);
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int64_t i = 0; i < d.inner; ++i) {
      int64_t base = o * d.len * d.inner + i;
      double dot = 0.0;
      for (int64_t l = 0; l < d.len; ++l) {
        int64_t ix = base + l * d.inner;
        dot += (double)py[ix] * (double)pg[ix];
      }
      for (int64_t l = 0; l < d.len; ++l) {
        int64_t ix = base + l * d.inner;
        pd[ix] += (T)((double)py[ix] * ((double)pg[ix] - dot));
      }
    }
  }
}

constexpr double kLnEps = 1e-5;

template <class T>
void k_layernorm_fwd(const Buf& x, const Buf* gain, const Buf* bias, Buf& y, Buf& stats,
                     DimSplit d) {
  const T* px = cptr<T>(x);
  T* py = mptr<T>(y);
  double* ps = mptr<double>(stats);  // stats always f64: [mean, invstd] per slice
  const T* pgain = gain ? cptr<T>(*gain) : nullptr;
  const T* pbias = bias ? cptr<T>(*bias) : nullptr;
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int64_t i = 0; i < d.inner; ++i) {
      int64_t base = o * d.len * d.inner + i;
      double mean = 0.0;
      for (int64_t l = 0; l < d.len; ++l) mean += (double)px[base + l * d.inner];
      mean /= (double)d.len;
      double var = 0.0;
      for (int64_t l = 0; l < d.len; ++l) {
        double c = (double)px[base + l * d.inner] - mean;
        var += c * c;
      }
      var /= (double)d.len;
      double invstd = 1.0 / std::sqrt(var + kLnEps);
      int64_t slice = o * d.inner + i;
      ps[2 * slice] = mean;
      ps[2 * slice + 1] = invstd;
      for (int64_t l = 0; l < d.len; ++l) {
        double xn = ((double)px[base + l * d.inner] - mean) * invstd;
        if (pgain) xn = xn * (double)pgain[l] + (double)pbias[l];
        py[base + l * d.inner] = (T)xn;
      }
    }
  }
}

template <class T>
void k_layernorm_bwd(const Buf& x, const Buf* gain, const Buf& stats, const Buf& g, Buf* dx,
                     Buf* dgain, Buf* dbias, DimSplit d) {
  const T* px = cptr<T>(x);
  const T* pg = cptr<T>(g);
  const double* ps = cptr<double>(stats);
  const T* pgain = gain ? cptr<T>(*gain) : nullptr;
  T* pdx = dx ? mptr<T>(*dx) : nullptr;
  T* pdg = dgain ? mptr<T>(*dgain) : nullptr;
  T* pdb = dbias ? mptr<T>(*dbias) : nullptr;
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int64_t i = 0; i < d.inner; ++i) {
      int64_t base = o * d.len * d.inner + i;
      int64_t slice = o * d.inner + i;
      double mean = ps[2 * slice];
      double invstd = ps[2 * slice + 1];
      double sum_dxn = 0.0, sum_dxn_xn = 0.0;
      for (int64_t l = 0; l < d.len; ++l) {
        int64_t ix = base + l * d.inner;
        double xn = ((double)px[ix] - mean) * invstd;
        double go = (double)pg[ix];
        if (pdg) pdg[l] += (T)(go * xn);
        if (pdb) pdb[l] += (T)go;
        double dxn = pgain ? go * (double)pgain[l] : go;
        sum_dxn += dxn;
        sum_dxn_xn += dxn * xn;
      }
      if (!pdx) continue;
      double inv_len = 1.0 / (double)d.len;
      for (int64_t l = 0; l < d.len; ++l) {
        int64_t ix = base + l * d.inner;
        double xn = ((double)px[ix] - mean) * invstd;
        double dxn = pgain ? (double)pg[ix] * (double)pgain[l] : (double)pg[ix];
        pdx[ix] += (T)(invstd * (dxn - inv_len * sum_dxn - xn * inv_len * sum_dxn_xn));
      }
    }
  }
}

template <class T>
double k_mse_fwd(const Buf& a, const Buf& b, int64_t n) {
  const T* pa = cptr<T>(a);
  const T* pb = cptr<T>(b);
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double diff = (double)pa[i] - (double)pb[i];
    acc += diff * diff;
  }
  return acc / (double)n;
}

template <class T>
void k_mse_bwd(const Buf& a, const Buf& b, Buf& da, int64_t n, double gscale, double sign) {
  const T* pa = cptr<T>(a);
  const T* pb = cptr<T>(b);
  T* pd = mptr<T>(da);
  double f = sign * 2.0 * gscale / (double)n;
  for (int64_t i = 0; i < n; ++i) pd[i] += (T)(f * ((double)pa[i] - (double)pb[i]));
}

template <class T>
double k_sum(const Buf& a, int64_t n) {
  const T* pa = cptr<T>(a);
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += (double)pa[i];
  return acc;
}

template <class T>
void k_fill_add(Buf& dst, int64_t n, double v) {
  T* pd = mptr<T>(dst);
  T vv = (T)v;
  for (int64_t i = 0; i < n; ++i) pd[i] += vv;
}

template <class T>
void k_gather_fwd(const Buf& x, Buf& y, const std::vector<int64_t>& idx) {
  const T* px = cptr<T>(x);
  T* py = mptr<T>(y);
  for (size_t i = 0; i < idx.size(); ++i) py[i] = px[idx[i]];
}

template <class T>
void k_gather_bwd(Buf& dx, const Buf& g, const std::vector<int64_t>& idx) {
  T* pd = mptr<T>(dx);
  const T* pg = cptr<T>(g);
  for (size_t i = 0; i < idx.size(); ++i) pd[idx[i]] += pg[i];
}

struct InterpAxis {
  std::vector<int> lo, hi;
  std::vector<double> w;  // weight of hi sample
};

InterpAxis interp_axis(int in, int out) {
  InterpAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.w.resize(out);
  for (int i = 0; i < out; ++i) {
    double src = (out == 1) ? 0.0 : (double)i * (double)(in - 1) / (double)(out - 1);
    int lo = (int)std::floor(src);
    lo = std::min(lo, in - 1);
    int hi = std::min(lo + 1, in - 1);
    a.lo[i] = lo;
    a.hi[i] = hi;
    a.w[i] = src - (double)lo;
  }
  return a;
}

template <class T>
void k_interp_fwd(const Buf& x, Buf& y, int64_t planes, int h1, int w1, int h2, int w2,
                  const InterpAxis& ra, const InterpAxis& ca) {
  const T* px = cptr<T>(x);
  T* py = mptr<T>(y);
  for (int64_t p = 0; p < planes; ++p) {
    const T* in = px + p * h1 * w1;
    T* out = py + p * (int64_t)h2 * w2;
    for (int i = 0; i < h2; ++i) {
      const T* r0 = in + (int64_t)ra.lo[i] * w1;
      const T* r1 = in + (int64_t)ra.hi[i] * w1;
      double wr = ra.w[i];
      for (int j = 0; j < w2; ++j) {
        double wc = ca.w[j];
        double v00 = (double)r0[ca.lo[j]], v01 = (double)r0[ca.hi[j]];
        double v10 = (double)r1[ca.lo[j]], v11 = (double)r1[ca.hi[j]];
        double top = v00 + wc * (v01 - v00);
        double bot = v10 + wc * (v11 - v10);
        out[(int64_t)i * w2 + j] = (T)(top + wr * (bot - top));
      }
    }
  }
}

template <class T>
void k_interp_bwd(Buf& dx, const Buf& g, int64_t planes, int h1, int w1, int h2, int w2,
                  const InterpAxis& ra, const InterpAxis& ca) {
  T* pd = mptr<T>(dx);
  const T* pg = cptr<T>(g);
  for (int64_t p = 0; p < planes; ++p) {
    T* din = pd + p * h1 * w1;
    const T* gout = pg + p * (int64_t)h2 * w2;
    for (int i = 0; i < h2; ++i) {
      double wr = ra.w[i];
      for (int j = 0; j < w2; ++j) {
        double wc = ca.w[j];
        double gv = (double)gout[(int64_t)i * w2 + j];
        din[(int64_t)ra.lo[i] * w1 + ca.lo[j]] += (T)(gv * (1 - wr) * (1 - wc));
        din[(int64_t)ra.lo[i] * w1 + ca.hi[j]] += (T)(gv * (1 - wr) * wc);
        din[(int64_t)ra.hi[i] * w1 + ca.lo[j]] += (T)(gv * wr * (1 - wc));
        din[(int64_t)ra.hi[i] * w1 + ca.hi[j]] += (T)(gv * wr * wc);
      }
    }
  }
}

// Attention with per-(batch, head) packing: key slices transpose into dk
// contiguous rows of nk so score and mix loops run as axpy over contiguous
// spans.
template <class T>
void k_attn_fwd(const Buf& q, const Buf& k, const Buf& v, Buf& y, Buf& weights, int64_t batch,
                int heads, int64_t nq, int64_t nk, int64_t dq, int64_t dv) {
  const T* pq = cptr<T>(q);
  const T* pk = cptr<T>(k);
  const T* pv = cptr<T>(v);
  T* py = mptr<T>(y);
  T* pw = mptr<T>(weights);
  int64_t dk = dq / heads;
  int64_t dvh = dv / heads;
  T scl = (T)(1.0 / std::sqrt((double)dk));
  std::vector<T> kt(dk * nk), vp(nk * dvh);
  for (int64_t b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const T* qb = pq + b * nq * dq + h * dk;
      const T* kb = pk + b * nk * dq + h * dk;
      const T* vb = pv + b * nk * dv + h * dvh;
      T* yb = py + b * nq * dv + h * dvh;
      T* wb = pw + (b * heads + h) * nq * nk;
      for (int64_t j = 0; j < nk; ++j) {
        const T* kj = kb + j * dq;
        for (int64_t c = 0; c < dk; ++c) kt[c * nk + j] = kj[c];
        const T* vj = vb + j * dv;
        T* vpj = vp.data() + j * dvh;
        for (int64_t c = 0; c < dvh; ++c) vpj[c] = vj[c];
      }
      for (int64_t i = 0; i < nq; ++i) {
        const T* __restrict__ qi = qb + i * dq;
        T* __restrict__ wi = wb + i * nk;
        std::fill(wi, wi + nk, T(0));
        const T* __restrict__ ktp = kt.data();
        for (int64_t c = 0; c < dk; ++c) {
          T qv = qi[c] * scl;
          const T* __restrict__ ktc = ktp + c * nk;
#pragma omp simd
          for (int64_t j = 0; j < nk; ++j) wi[j] += qv * ktc[j];
        }
        T mx = wi[0];
        for (int64_t j = 1; j < nk; ++j) mx = std::max(mx, wi[j]);
#pragma omp simd
        for (int64_t j = 0; j < nk; ++j) wi[j] = p_exp(wi[j] - mx);
        T z = T(0);
        for (int64_t j = 0; j < nk; ++j) z += wi[j];
        T inv = T(1) / z;
#pragma omp simd
        for (int64_t j = 0; j < nk; ++j) wi[j] *= inv;
        T acc[128];
        std::fill(acc, acc + dvh, T(0));
        const T* __restrict__ vpp = vp.data();
        for (int64_t j = 0; j < nk; ++j) {
          T a = wi[j];
          const T* __restrict__ vpj = vpp + j * dvh;
#pragma omp simd
          for (int64_t c = 0; c < dvh; ++c) acc[c] += a * vpj[c];
        }
        T* yi = yb + i * dv;
        std::copy(acc, acc + dvh, yi);
      }
    }
  }
}

template <class T>
void k_attn_bwd(const Buf& q, const Buf& k, const Buf& v, const Buf& weights, const Buf& g,
                Buf* dq_b, Buf* dk_b, Buf* dv_b, int64_t batch, int heads, int64_t nq, int64_t nk,
                int64_t dq, int64_t dv) {
  const T* pq = cptr<T>(q);
  const T* pk = cptr<T>(k);
  const T* pv = cptr<T>(v);
  const T* pw = cptr<T>(weights);
  const T* pg = cptr<T>(g);
  T* pdq = dq_b ? mptr<T>(*dq_b) : nullptr;
  T* pdk = dk_b ? mptr<T>(*dk_b) : nullptr;
  T* pdv = dv_b ? mptr<T>(*dv_b) : nullptr;
  int64_t dk = dq / heads;
  int64_t dvh = dv / heads;
  T scl = (T)(1.0 / std::sqrt((double)dk));
  // Packed per-(batch, head) slices keep every inner loop contiguous.
  std::vector<T> da(nk), vp(nk * dvh), kp(nk * dk), qp(nq * dk), dspack(nk);
  for (int64_t b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const T* qb = pq + b * nq * dq + h * dk;
      const T* kb = pk + b * nk * dq + h * dk;
      const T* vb = pv + b * nk * dv + h * dvh;
      const T* gb = pg + b * nq * dv + h * dvh;
      const T* wb = pw + (b * heads + h) * nq * nk;
      for (int64_t j = 0; j < nk; ++j) {
        const T* vj = vb + j * dv;
        T* vpj = vp.data() + j * dvh;
        for (int64_t c = 0; c < dvh; ++c) vpj[c] = vj[c];
        const T* kj = kb + j * dq;
        T* kpj = kp.data() + j * dk;
        for (int64_t c = 0; c < dk; ++c) kpj[c] = kj[c];
      }
      for (int64_t i = 0; i < nq; ++i) {
        const T* qi = qb + i * dq;
        T* qpi = qp.data() + i * dk;
        for (int64_t c = 0; c < dk; ++c) qpi[c] = qi[c];
      }
      for (int64_t i = 0; i < nq; ++i) {
        const T* __restrict__ gi = gb + i * dv;
        const T* __restrict__ wi = wb + i * nk;
        if (pdv) {
          for (int64_t j = 0; j < nk; ++j) {
            T a = wi[j];
            T* __restrict__ dvj = pdv + b * nk * dv + j * dv + h * dvh;
#pragma omp simd
            for (int64_t c = 0; c < dvh; ++c) dvj[c] += a * gi[c];
          }
        }
        if (!pdq && !pdk) continue;
        T rowdot = T(0);
        for (int64_t j = 0; j < nk; ++j) {
          const T* __restrict__ vpj = vp.data() + j * dvh;
          T s = 0;
#pragma omp simd reduction(+ : s)
          for (int64_t c = 0; c < dvh; ++c) s += gi[c] * vpj[c];
          da[j] = s;
          rowdot += s * wi[j];
        }
#pragma omp simd
        for (int64_t j = 0; j < nk; ++j) dspack[j] = wi[j] * (da[j] - rowdot) * scl;
        if (pdq) {
          T* __restrict__ dqi = pdq + b * nq * dq + i * dq + h * dk;
          for (int64_t j = 0; j < nk; ++j) {
            T ds = dspack[j];
            const T* __restrict__ kpj = kp.data() + j * dk;
#pragma omp simd
            for (int64_t c = 0; c < dk; ++c) dqi[c] += ds * kpj[c];
          }
        }
        if (pdk) {
          const T* __restrict__ qpi = qp.data() + i * dk;
          for (int64_t j = 0; j < nk; ++j) {
            T ds = dspack[j];
            T* __restrict__ dkj = pdk + b * nk * dq + j * dq + h * dk;
#pragma omp simd
            for (int64_t c = 0; c < dk; ++c) dkj[c] += ds * qpi[c];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Buf / Node
// ---------------------------------------------------------------------------

namespace detail {

void Buf::alloc(Dtype t, int64_t n, bool zero) {
  dt = t;
  if (t == Dtype::f32) {
    d.clear();
    if (zero) f.assign(n, 0.f); else f.resize(n);
  } else {
    f.clear();
    if (zero) d.assign(n, 0.0); else d.resize(n);
  }
}

void Node::ensure_grad() {
  if (grad.size() != numel()) grad.alloc(data.dt, numel());
}

}  // namespace detail

Dtype active_dtype() { return g_dtype; }
void set_active_dtype(Dtype dt) { g_dtype = dt; }
bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return Tensor(make_leaf(s, requires_grad));
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  auto n = make_leaf(s, requires_grad);
  int64_t cnt = n->numel();
  for (int64_t i = 0; i < cnt; ++i) n->data.set(i, v);
  return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, const std::vector<double>& vals, bool requires_grad) {
  if ((int64_t)vals.size() != shape_numel(s)) {
    throw ShapeError("from_data", shape_str(s), "flat size " + std::to_string(vals.size()));
  }
  auto n = make_leaf(s, requires_grad);
  for (size_t i = 0; i < vals.size(); ++i) n->data.set((int64_t)i, vals[i]);
  return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, const std::vector<float>& vals, bool requires_grad) {
  if ((int64_t)vals.size() != shape_numel(s)) {
    throw ShapeError("from_data", shape_str(s), "flat size " + std::to_string(vals.size()));
  }
  auto n = make_leaf(s, requires_grad);
  for (size_t i = 0; i < vals.size(); ++i) n->data.set((int64_t)i, vals[i]);
  return Tensor(n);
}

Tensor Tensor::randn(const Shape& s, rng::Stream& g, double mean, double stddev,
                     bool requires_grad) {
  auto n = make_leaf(s, requires_grad);
  int64_t cnt = n->numel();
  for (int64_t i = 0; i < cnt; ++i) n->data.set(i, mean + stddev * g.normal());
  return Tensor(n);
}

Tensor Tensor::uniform(const Shape& s, rng::Stream& g, double lo, double hi, bool requires_grad) {
  auto n = make_leaf(s, requires_grad);
  int64_t cnt = n->numel();
  for (int64_t i = 0; i < cnt; ++i) n->data.set(i, g.uniform(lo, hi));
  return Tensor(n);
}

Tensor Tensor::identity(int n) {
  auto node = make_leaf({n, n}, false);
  for (int i = 0; i < n; ++i) node->data.set((int64_t)i * n + i, 1.0);
  return Tensor(node);
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return node_->numel(); }
Dtype Tensor::dtype() const { return node_->data.dt; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw Error(Status::error, "set_requires_grad: not a leaf tensor");
  node_->requires_grad = on;
}

double Tensor::at(int64_t i) const { return node_->data.get(i); }

void Tensor::set_at(int64_t i, double v) {
  if (!node_->is_leaf) throw Error(Status::error, "set_at: not a leaf tensor");
  node_->data.set(i, v);
}

std::vector<double> Tensor::to_vector() const {
  int64_t n = numel();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = node_->data.get(i);
  return out;
}

std::vector<float> Tensor::to_f32() const {
  int64_t n = numel();
  std::vector<float> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = (float)node_->data.get(i);
  return out;
}

void Tensor::copy_from(const std::vector<double>& vals) {
  if ((int64_t)vals.size() != numel()) {
    throw ShapeError("copy_from", shape_str(shape()), "flat size " + std::to_string(vals.size()));
  }
  if (!node_->is_leaf) throw Error(Status::error, "copy_from: not a leaf tensor");
  for (size_t i = 0; i < vals.size(); ++i) node_->data.set((int64_t)i, vals[i]);
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

double Tensor::grad_at(int64_t i) const {
  if (!has_grad()) throw Error(Status::error, "grad_at: no gradient present");
  return node_->grad.get(i);
}

std::vector<double> Tensor::grad_to_vector() const {
  if (!has_grad()) throw Error(Status::error, "grad_to_vector: no gradient present");
  int64_t n = numel();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = node_->grad.get(i);
  return out;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::scale_grad(double factor) {
  if (!has_grad()) return;
  int64_t n = numel();
  for (int64_t i = 0; i < n; ++i) node_->grad.set(i, node_->grad.get(i) * factor);
}

Tensor Tensor::detach() const {
  auto n = make_leaf(shape(), false);
  if (n->data.dt == node_->data.dt) {
    n->data = node_->data;
    n->data.dt = node_->data.dt;
  } else {
    int64_t cnt = numel();
    for (int64_t i = 0; i < cnt; ++i) n->data.set(i, node_->data.get(i));
  }
  return Tensor(n);
}

uint64_t Tensor::data_hash() const {
  auto v = to_f32();
  return rng::fnv1a(v.data(), v.size() * sizeof(float));
}

bool Tensor::all_finite() const {
  return SVAM_DISPATCH(node_->data.dt, finite_impl, node_->data, numel());
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

namespace {

Tensor ew2(const Tensor& a, const Tensor& b, int mode, const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  require_same_dtype(a, b, name);
  if (a.shape() != b.shape()) throw ShapeError(name, shape_str(a.shape()), shape_str(b.shape()));
  auto y = make_result(a.shape(), name, {a.node_ptr(), b.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_ew2, a.node()->data, b.node()->data, y->data, y->numel(), mode);
  check_finite(*y, name);
  if (y->requires_grad) {
    y->backward_fn = [mode](Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      int64_t n = self.numel();
      if (mode == 2) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          SVAM_DISPATCH(self.grad.dt, k_acc_mul, pa->grad, self.grad, pb->data, n);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          SVAM_DISPATCH(self.grad.dt, k_acc_mul, pb->grad, self.grad, pa->data, n);
        }
      } else {
        if (pa->requires_grad) {
          pa->ensure_grad();
          SVAM_DISPATCH(self.grad.dt, k_acc, pa->grad, self.grad, n, 1.0);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          SVAM_DISPATCH(self.grad.dt, k_acc, pb->grad, self.grad, n, mode == 1 ? -1.0 : 1.0);
        }
      }
    };
  }
  return Tensor(y);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return ew2(a, b, 0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return ew2(a, b, 1, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return ew2(a, b, 2, "mul"); }

Tensor scale(const Tensor& a, double c) {
  require_defined(a, "scale");
  auto y = make_result(a.shape(), "scale", {a.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_scale, a.node()->data, y->data, y->numel(), c);
  check_finite(*y, "scale");
  if (y->requires_grad) {
    y->backward_fn = [c](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_acc, p->grad, self.grad, self.numel(), c);
    };
  }
  return Tensor(y);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_same_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul", "(m×k)·(k×n)", shape_str(a.shape()) + "·" + shape_str(b.shape()));
  }
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto y = make_result({(int)m, (int)n}, "matmul", {a.node_ptr(), b.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_matmul, a.node()->data, b.node()->data, y->data, m, k, n);
  check_finite(*y, "matmul");
  if (y->requires_grad) {
    y->backward_fn = [m, k, n](Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        if (self.grad.dt == Dtype::f32) {
          k_mm_nt(cptr<float>(self.grad), cptr<float>(pb->data), mptr<float>(pa->grad), m, n, k, true);
        } else {
          k_mm_nt(cptr<double>(self.grad), cptr<double>(pb->data), mptr<double>(pa->grad), m, n, k, true);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        if (self.grad.dt == Dtype::f32) {
          k_mm_tn(cptr<float>(pa->data), cptr<float>(self.grad), mptr<float>(pb->grad), m, k, n, true);
        } else {
          k_mm_tn(cptr<double>(pa->data), cptr<double>(self.grad), mptr<double>(pb->grad), m, k, n, true);
        }
      }
    };
  }
  return Tensor(y);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require_defined(b, "linear");
  require_same_dtype(x, w, "linear");
  require_same_dtype(x, b, "linear");
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0) || b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw ShapeError("linear", "x[..., k], w[k, m], b[m]",
                     shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  int64_t k = w.dim(0), m = w.dim(1);
  int64_t rows = x.numel() / k;
  Shape out = x.shape();
  out.back() = (int)m;
  auto y = make_result(out, "linear", {x.node_ptr(), w.node_ptr(), b.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_linear_fwd, x.node()->data, w.node()->data, b.node()->data, y->data,
                rows, k, m);
  check_finite(*y, "linear");
  if (y->requires_grad) {
    y->backward_fn = [rows, k, m](Node& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto& pb = self.parents[2];
      if (px->requires_grad) {
        px->ensure_grad();
        if (self.grad.dt == Dtype::f32) {
          k_mm_nt(cptr<float>(self.grad), cptr<float>(pw->data), mptr<float>(px->grad), rows, m, k, true);
        } else {
          k_mm_nt(cptr<double>(self.grad), cptr<double>(pw->data), mptr<double>(px->grad), rows, m, k, true);
        }
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        if (self.grad.dt == Dtype::f32) {
          k_mm_tn(cptr<float>(px->data), cptr<float>(self.grad), mptr<float>(pw->grad), rows, k, m, true);
        } else {
          k_mm_tn(cptr<double>(px->data), cptr<double>(self.grad), mptr<double>(pw->grad), rows, k, m, true);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        SVAM_DISPATCH(self.grad.dt, k_bias_bwd, pb->grad, self.grad, rows, m);
      }
    };
  }
  return Tensor(y);
}

Tensor concat(const std::vector<Tensor>& xs, int dim) {
  if (xs.empty()) throw Error(Status::error, "concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (dim < 0 || dim >= (int)s0.size()) throw Error(Status::error, "concat: bad dim");
  Shape out = s0;
  int total = 0;
  for (const auto& x : xs) {
    require_defined(x, "concat");
    require_same_dtype(xs[0], x, "concat");
    if (x.rank() != (int)s0.size()) throw ShapeError("concat", shape_str(s0), shape_str(x.shape()));
    for (int i = 0; i < (int)s0.size(); ++i) {
      if (i != dim && x.shape()[i] != s0[i]) {
        throw ShapeError("concat", shape_str(s0), shape_str(x.shape()));
      }
    }
    total += x.dim(dim);
  }
  out[dim] = total;
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) parents.push_back(x.node_ptr());
  auto y = make_result(out, "concat", parents);
  DimSplit d = split_at(out, dim);
  int64_t off = 0;
  std::vector<int64_t> lens;
  for (const auto& x : xs) {
    int64_t len_i = x.dim(dim);
    lens.push_back(len_i);
    for (int64_t o = 0; o < d.outer; ++o) {
      int64_t src = o * len_i * d.inner;
      int64_t dst = o * d.len * d.inner + off * d.inner;
      for (int64_t t = 0; t < len_i * d.inner; ++t) {
        y->data.set(dst + t, x.node()->data.get(src + t));
      }
    }
    off += len_i;
  }
  check_finite(*y, "concat");
  if (y->requires_grad) {
    y->saved_i = lens;
    y->saved_i.push_back(d.outer);
    y->saved_i.push_back(d.len);
    y->saved_i.push_back(d.inner);
    y->backward_fn = [](Node& self) {
      size_t np = self.parents.size();
      int64_t outer = self.saved_i[np];
      int64_t len = self.saved_i[np + 1];
      int64_t inner = self.saved_i[np + 2];
      int64_t off = 0;
      for (size_t pi = 0; pi < np; ++pi) {
        int64_t len_i = self.saved_i[pi];
        auto& p = self.parents[pi];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            int64_t src = o * len * inner + off * inner;
            int64_t dst = o * len_i * inner;
            for (int64_t t = 0; t < len_i * inner; ++t) {
              p->grad.set(dst + t, p->grad.get(dst + t) + self.grad.get(src + t));
            }
          }
        }
        off += len_i;
      }
    };
  }
  return Tensor(y);
}

Tensor slice(const Tensor& x, int dim, int start, int len) {
  require_defined(x, "slice");
  const Shape& s = x.shape();
  if (dim < 0 || dim >= (int)s.size() || start < 0 || len <= 0 || start + len > s[dim]) {
    throw ShapeError("slice", "dim " + std::to_string(dim) + " range", shape_str(s));
  }
  Shape out = s;
  out[dim] = len;
  DimSplit d = split_at(s, dim);
  std::vector<int64_t> idx(shape_numel(out));
  int64_t w = 0;
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int64_t l = 0; l < len; ++l) {
      int64_t base = (o * d.len + start + l) * d.inner;
      for (int64_t i = 0; i < d.inner; ++i) idx[w++] = base + i;
    }
  }
  auto y = make_result(out, "slice", {x.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_gather_fwd, x.node()->data, y->data, idx);
  if (y->requires_grad) {
    y->backward_fn = [idx = std::move(idx)](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_gather_bwd, p->grad, self.grad, idx);
    };
  }
  return Tensor(y);
}

namespace {

Tensor gather_op(const Tensor& x, const Shape& out, std::vector<int64_t> idx, const char* name) {
  auto y = make_result(out, name, {x.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_gather_fwd, x.node()->data, y->data, idx);
  if (y->requires_grad) {
    y->backward_fn = [idx = std::move(idx)](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_gather_bwd, p->grad, self.grad, idx);
    };
  }
  return Tensor(y);
}

}  // namespace

Tensor reshape(const Tensor& x, const Shape& s) {
  require_defined(x, "reshape");
  if (shape_numel(s) != x.numel()) throw ShapeError("reshape", shape_str(s), shape_str(x.shape()));
  auto y = make_result(s, "reshape", {x.node_ptr()});
  y->data = x.node()->data;
  if (y->requires_grad) {
    y->backward_fn = [](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_acc, p->grad, self.grad, self.numel(), 1.0);
    };
  }
  return Tensor(y);
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  require_defined(x, "permute");
  const Shape& s = x.shape();
  if (order.size() != s.size()) throw ShapeError("permute", "rank match", shape_str(s));
  int r = (int)s.size();
  Shape out(r);
  for (int i = 0; i < r; ++i) out[i] = s[order[i]];
  std::vector<int64_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * s[i + 1];
  // Source strides in output-coordinate order; the odometer walk keeps a
  // running source index instead of re-deriving it per element.
  std::vector<int64_t> step(r), wrap(r);
  for (int i = 0; i < r; ++i) {
    step[i] = in_stride[order[i]];
    wrap[i] = step[i] * out[i];
  }
  std::vector<int64_t> idx(x.numel());
  std::vector<int64_t> coord(r, 0);
  int64_t src = 0;
  for (int64_t w = 0; w < x.numel(); ++w) {
    idx[w] = src;
    for (int i = r - 1; i >= 0; --i) {
      src += step[i];
      if (++coord[i] < out[i]) break;
      coord[i] = 0;
      src -= wrap[i];
    }
  }
  return gather_op(x, out, std::move(idx), "permute");
}

Tensor repeat_dim(const Tensor& x, int dim, int times) {
  require_defined(x, "repeat_dim");
  const Shape& s = x.shape();
  if (dim < 0 || dim >= (int)s.size() || s[dim] != 1) {
    throw ShapeError("repeat_dim", "size-1 dim " + std::to_string(dim), shape_str(s));
  }
  Shape out = s;
  out[dim] = times;
  DimSplit d = split_at(s, dim);
  std::vector<int64_t> idx(shape_numel(out));
  int64_t w = 0;
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int t = 0; t < times; ++t) {
      for (int64_t i = 0; i < d.inner; ++i) idx[w++] = o * d.inner + i;
    }
  }
  return gather_op(x, out, std::move(idx), "repeat_dim");
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  auto y = make_result(x.shape(), "relu", {x.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_relu_fwd, x.node()->data, y->data, y->numel());
  if (y->requires_grad) {
    y->backward_fn = [](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_relu_bwd, p->data, self.grad, p->grad, self.numel());
    };
  }
  return Tensor(y);
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  auto y = make_result(x.shape(), "gelu", {x.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_gelu_fwd, x.node()->data, y->data, y->numel());
  check_finite(*y, "gelu");
  if (y->requires_grad) {
    y->backward_fn = [](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_gelu_bwd, p->data, self.grad, p->grad, self.numel());
    };
  }
  return Tensor(y);
}

Tensor softmax(const Tensor& x, int dim) {
  require_defined(x, "softmax");
  if (dim < 0 || dim >= x.rank()) throw Error(Status::error, "softmax: bad dim");
  DimSplit d = split_at(x.shape(), dim);
  auto y = make_result(x.shape(), "softmax", {x.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_softmax_fwd, x.node()->data, y->data, d);
  check_finite(*y, "softmax");
  if (y->requires_grad) {
    y->backward_fn = [d](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_softmax_bwd, self.data, self.grad, p->grad, d);
    };
  }
  return Tensor(y);
}

namespace {

Tensor layer_norm_impl(const Tensor& x, int dim, const Tensor* gain, const Tensor* bias) {
  require_defined(x, "layer_norm");
  if (dim < 0 || dim >= x.rank()) throw Error(Status::error, "layer_norm: bad dim");
  DimSplit d = split_at(x.shape(), dim);
  if (gain) {
    if (gain->rank() != 1 || gain->dim(0) != (int)d.len || bias->rank() != 1 ||
        bias->dim(0) != (int)d.len) {
      throw ShapeError("layer_norm", "gain/bias of length " + std::to_string(d.len),
                       shape_str(gain->shape()) + "/" + shape_str(bias->shape()));
    }
  }
  std::vector<std::shared_ptr<Node>> parents{x.node_ptr()};
  if (gain) {
    parents.push_back(gain->node_ptr());
    parents.push_back(bias->node_ptr());
  }
  auto y = make_result(x.shape(), "layer_norm", parents);
  y->saved.alloc(Dtype::f64, 2 * d.outer * d.inner, false);
  const Buf* gb = gain ? &gain->node()->data : nullptr;
  const Buf* bb = bias ? &bias->node()->data : nullptr;
  SVAM_DISPATCH(y->data.dt, k_layernorm_fwd, x.node()->data, gb, bb, y->data, y->saved, d);
  check_finite(*y, "layer_norm");
  if (y->requires_grad) {
    bool affine = gain != nullptr;
    y->backward_fn = [d, affine](Node& self) {
      auto& px = self.parents[0];
      Buf* dgain = nullptr;
      Buf* dbias = nullptr;
      const Buf* gaind = nullptr;
      if (affine) {
        gaind = &self.parents[1]->data;
        if (self.parents[1]->requires_grad) {
          self.parents[1]->ensure_grad();
          dgain = &self.parents[1]->grad;
        }
        if (self.parents[2]->requires_grad) {
          self.parents[2]->ensure_grad();
          dbias = &self.parents[2]->grad;
        }
      }
      Buf* dx = nullptr;
      if (px->requires_grad) {
        px->ensure_grad();
        dx = &px->grad;
      }
      SVAM_DISPATCH(self.grad.dt, k_layernorm_bwd, px->data, gaind, self.saved, self.grad, dx,
                    dgain, dbias, d);
    };
  }
  return Tensor(y);
}

}  // namespace

Tensor layer_norm(const Tensor& x, int dim) { return layer_norm_impl(x, dim, nullptr, nullptr); }

Tensor layer_norm(const Tensor& x, int dim, const Tensor& gain, const Tensor& bias) {
  return layer_norm_impl(x, dim, &gain, &bias);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_defined(a, "mse");
  require_defined(b, "mse");
  require_same_dtype(a, b, "mse");
  if (a.shape() != b.shape()) throw ShapeError("mse", shape_str(a.shape()), shape_str(b.shape()));
  auto y = make_result({1}, "mse", {a.node_ptr(), b.node_ptr()});
  double v = SVAM_DISPATCH(y->data.dt, k_mse_fwd, a.node()->data, b.node()->data, a.numel());
  y->data.set(0, v);
  check_finite(*y, "mse");
  if (y->requires_grad) {
    int64_t n = a.numel();
    y->backward_fn = [n](Node& self) {
      double g = self.grad.get(0);
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        SVAM_DISPATCH(self.grad.dt, k_mse_bwd, pa->data, pb->data, pa->grad, n, g, 1.0);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        SVAM_DISPATCH(self.grad.dt, k_mse_bwd, pb->data, pa->data, pb->grad, n, g, 1.0);
      }
    };
  }
  return Tensor(y);
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  auto y = make_result({1}, "sum", {x.node_ptr()});
  y->data.set(0, SVAM_DISPATCH(y->data.dt, k_sum, x.node()->data, x.numel()));
  check_finite(*y, "sum");
  if (y->requires_grad) {
    y->backward_fn = [](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_fill_add, p->grad, p->numel(), self.grad.get(0));
    };
  }
  return Tensor(y);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / (double)x.numel()); }

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 Tensor* weights_out) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  require_same_dtype(q, k, "attention");
  require_same_dtype(q, v, "attention");
  bool rank2 = q.rank() == 2;
  if ((rank2 && (k.rank() != 2 || v.rank() != 2)) || (!rank2 && (q.rank() != 3 || k.rank() != 3 || v.rank() != 3))) {
    throw ShapeError("attention", "matching rank 2 or 3",
                     shape_str(q.shape()) + "/" + shape_str(k.shape()) + "/" + shape_str(v.shape()));
  }
  int64_t batch = rank2 ? 1 : q.dim(0);
  int64_t nq = q.dim(rank2 ? 0 : 1);
  int64_t nk = k.dim(rank2 ? 0 : 1);
  int64_t dq = q.dim(rank2 ? 1 : 2);
  int64_t dv = v.dim(rank2 ? 1 : 2);
  if (nk == 0) throw Error(Status::error, "attention: empty key set");
  if (k.dim(rank2 ? 1 : 2) != dq || v.dim(rank2 ? 0 : 1) != nk ||
      (!rank2 && (k.dim(0) != batch || v.dim(0) != batch))) {
    throw ShapeError("attention", "q[B,nq,d] k[B,nk,d] v[B,nk,dv]",
                     shape_str(q.shape()) + "/" + shape_str(k.shape()) + "/" + shape_str(v.shape()));
  }
  if (heads < 1 || dq % heads != 0 || dv % heads != 0) {
    throw Error(Status::error, "attention: width not divisible by heads");
  }
  Shape out = rank2 ? Shape{(int)nq, (int)dv} : Shape{(int)batch, (int)nq, (int)dv};
  auto y = make_result(out, "attention", {q.node_ptr(), k.node_ptr(), v.node_ptr()});
  // Weights persist on the node only when the backward pass or the caller
  // needs them; inference reuses one scratch buffer.
  thread_local Buf weight_scratch;
  Buf* wbuf = (y->requires_grad || weights_out) ? &y->saved : &weight_scratch;
  if (wbuf->dt != y->data.dt || wbuf->size() < batch * heads * nq * nk) {
    wbuf->alloc(y->data.dt, batch * heads * nq * nk, false);
  }
  SVAM_DISPATCH(y->data.dt, k_attn_fwd, q.node()->data, k.node()->data, v.node()->data, y->data,
                *wbuf, batch, heads, nq, nk, dq, dv);
  check_finite(*y, "attention");
  if (weights_out) {
    Tensor w = Tensor::zeros({(int)(batch * heads), (int)nq, (int)nk});
    int64_t n = w.numel();
    for (int64_t i = 0; i < n; ++i) w.set_at(i, wbuf->get(i));
    *weights_out = w;
  }
  if (y->requires_grad) {
    // Weights are needed by the backward pass; keep a handle so the saved
    // buffer survives if callers drop the output early (they cannot; saved
    // lives on the node itself).
    y->backward_fn = [batch, heads, nq, nk, dq, dv](Node& self) {
      auto& pq = self.parents[0];
      auto& pk = self.parents[1];
      auto& pv = self.parents[2];
      Buf* dq_b = nullptr;
      Buf* dk_b = nullptr;
      Buf* dv_b = nullptr;
      if (pq->requires_grad) { pq->ensure_grad(); dq_b = &pq->grad; }
      if (pk->requires_grad) { pk->ensure_grad(); dk_b = &pk->grad; }
      if (pv->requires_grad) { pv->ensure_grad(); dv_b = &pv->grad; }
      SVAM_DISPATCH(self.grad.dt, k_attn_bwd, pq->data, pk->data, pv->data, self.saved, self.grad,
                    dq_b, dk_b, dv_b, batch, heads, nq, nk, dq, dv);
    };
  }
  return Tensor(y);
}

Tensor interpolate_bilinear(const Tensor& x, int out_h, int out_w) {
  require_defined(x, "interpolate_bilinear");
  if (x.rank() != 4) throw ShapeError("interpolate_bilinear", "T×C×h×w", shape_str(x.shape()));
  if (out_h < 1 || out_w < 1 || x.dim(2) < 1 || x.dim(3) < 1) {
    throw Error(Status::error, "interpolate_bilinear: zero extent");
  }
  int h1 = x.dim(2), w1 = x.dim(3);
  if (h1 == out_h && w1 == out_w) {
    // Exact identity when sizes already match.
    auto y = make_result(x.shape(), "interpolate_bilinear", {x.node_ptr()});
    y->data = x.node()->data;
    if (y->requires_grad) {
      y->backward_fn = [](Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        SVAM_DISPATCH(self.grad.dt, k_acc, p->grad, self.grad, self.numel(), 1.0);
      };
    }
    return Tensor(y);
  }
  int64_t planes = (int64_t)x.dim(0) * x.dim(1);
  InterpAxis ra = interp_axis(h1, out_h);
  InterpAxis ca = interp_axis(w1, out_w);
  auto y = make_result({x.dim(0), x.dim(1), out_h, out_w}, "interpolate_bilinear", {x.node_ptr()});
  SVAM_DISPATCH(y->data.dt, k_interp_fwd, x.node()->data, y->data, planes, h1, w1, out_h, out_w,
                ra, ca);
  check_finite(*y, "interpolate_bilinear");
  if (y->requires_grad) {
    y->backward_fn = [planes, h1, w1, out_h, out_w, ra, ca](Node& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      SVAM_DISPATCH(self.grad.dt, k_interp_bwd, p->grad, self.grad, planes, h1, w1, out_h, out_w,
                    ra, ca);
    };
  }
  return Tensor(y);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw Error(Status::error, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS for a reverse topological order.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.set(0, root->grad.get(0) + 1.0);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Intermediate gradients are transient; only leaves accumulate across calls.
  for (Node* n : topo) {
    if (!n->is_leaf) n->grad.clear();
  }
}

// ---------------------------------------------------------------------------
// ParamStore / Adam / grad_check
// ---------------------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (find(name)) throw Error(Status::error, "ParamStore: duplicate parameter " + name);
  t.set_requires_grad(true);
  items_.emplace_back(name, t);
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [n, t] : items_) t.zero_grad();
}

void ParamStore::freeze() {
  for (auto& [n, t] : items_) t.set_requires_grad(false);
}

uint64_t ParamStore::content_hash() const {
  uint64_t h = 14695981039346656037ull;
  for (const auto& [n, t] : items_) {
    h = rng::fnv1a(n.data(), n.size(), h);
    auto v = t.to_f32();
    h = rng::fnv1a(v.data(), v.size() * sizeof(float), h);
  }
  return h;
}

void ParamStore::append_all(ParamStore& other, const std::string& prefix) {
  for (auto& [n, t] : other.items_) {
    if (find(prefix + n)) throw Error(Status::error, "ParamStore: duplicate parameter " + prefix + n);
    items_.emplace_back(prefix + n, t);
  }
}

Adam::Slot& Adam::slot_for(const std::string& name, int64_t n) {
  for (auto& [k, s] : slots_) {
    if (k == name) return s;
  }
  slots_.emplace_back(name, Slot{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  return slots_.back().second;
}

std::vector<double>& Adam::first_moment(const std::string& name) {
  for (auto& [k, s] : slots_) {
    if (k == name) return s.m;
  }
  throw Error(Status::error, "adam: no state for " + name);
}

std::vector<double>& Adam::second_moment(const std::string& name) {
  for (auto& [k, s] : slots_) {
    if (k == name) return s.v;
  }
  throw Error(Status::error, "adam: no state for " + name);
}

bool Adam::has_state(const std::string& name) const {
  for (const auto& [k, s] : slots_) {
    if (k == name) return true;
  }
  return false;
}

void Adam::init_state(const std::string& name, std::vector<double> m, std::vector<double> v) {
  Slot& s = slot_for(name, (int64_t)m.size());
  s.m = std::move(m);
  s.v = std::move(v);
}

namespace {

template <class T>
void k_adam(Buf& data, const Buf& grad, double* __restrict__ m, double* __restrict__ v, int64_t n,
            const AdamConfig& cfg, double bc1, double bc2) {
  T* __restrict__ pd = mptr<T>(data);
  const T* __restrict__ pg = cptr<T>(grad);
  for (int64_t i = 0; i < n; ++i) {
    double g = (double)pg[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    pd[i] = (T)((double)pd[i] - cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps));
  }
}

}  // namespace

void Adam::step(ParamStore& params) {
  int64_t t = step_count_ + 1;
  double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t);
  double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t);
  for (auto& [name, p] : params.items()) {
    if (!p.has_grad()) throw Error(Status::error, "adam_step: missing gradient for parameter " + name);
    Tensor& param = const_cast<Tensor&>(p);
    int64_t n = param.numel();
    Slot& s = slot_for(name, n);
    if ((int64_t)s.m.size() != n) throw Error(Status::error, "adam_step: state size mismatch for " + name);
    detail::Node* node = param.node();
    SVAM_DISPATCH(node->data.dt, k_adam, node->data, node->grad, s.m.data(), s.v.data(), n, cfg_,
                  bc1, bc2);
  }
  step_count_ = t;
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_err);
  return w;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, ParamStore& params, double tol,
                           double fd_step, double corrupt_factor) {
  if (active_dtype() != Dtype::f64) {
    throw Error(Status::error, "grad_check requires the 64-bit mode");
  }
  GradCheckReport report;
  report.tol = tol;
  params.zero_grads();
  Tensor loss = loss_fn();
  backward(loss);

  for (auto& [name, p] : params.items()) {
    Tensor& param = const_cast<Tensor&>(p);
    GradCheckEntry entry;
    entry.name = name;
    entry.elements = param.numel();
    std::vector<double> analytic =
        param.has_grad() ? param.grad_to_vector() : std::vector<double>(param.numel(), 0.0);
    for (auto& a : analytic) a *= corrupt_factor;
    for (int64_t i = 0; i < param.numel(); ++i) {
      double orig = param.at(i);
      param.set_at(i, orig + fd_step);
      double lp = loss_fn().at(0);
      param.set_at(i, orig - fd_step);
      double lm = loss_fn().at(0);
      param.set_at(i, orig);
      double fd = (lp - lm) / (2.0 * fd_step);
      double denom = std::max(std::abs(analytic[i]) + std::abs(fd), 1e-6);
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(analytic[i] - fd) / denom);
    }
    report.entries.push_back(entry);
  }
  report.pass = report.worst() < tol;
  return report;
}

}  // namespace svam
