#pragma once

// Row-major matrix of Real plus the handful of kernels everything else uses.
//
// Determinism contract: each output element is produced by one fixed-order
// accumulation (16 independent lanes, then a fixed lane reduction), no matter
// which higher-level routine calls the kernel. Incremental decoding therefore
// reproduces full-sequence forwards bit for bit.

#include <algorithm>
#include <cmath>
#include <vector>

#include "flowlm/common.hpp"

namespace flowlm {

template <class Real>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<Real> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(size_t(r) * size_t(c), Real(0)) {}

    Real* row(int r) { return v.data() + size_t(r) * size_t(cols); }
    const Real* row(int r) const { return v.data() + size_t(r) * size_t(cols); }
    Real& at(int r, int c) { return v[size_t(r) * size_t(cols) + size_t(c)]; }
    Real at(int r, int c) const { return v[size_t(r) * size_t(cols) + size_t(c)]; }
    size_t size() const { return v.size(); }
    Real* data() { return v.data(); }
    const Real* data() const { return v.data(); }

    void zero() { std::fill(v.begin(), v.end(), Real(0)); }
    void resize(int r, int c) {
        rows = r;
        cols = c;
        v.assign(size_t(r) * size_t(c), Real(0));
    }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

template <class Real>
inline Real dot(const Real* a, const Real* b, int n) {
    constexpr int L = 16;
    Real acc[L] = {};
    int k = 0;
    for (; k + L <= n; k += L)
        for (int j = 0; j < L; ++j) acc[j] += a[k + j] * b[k + j];
    Real tail = Real(0);
    for (; k < n; ++k) tail += a[k] * b[k];
    Real s = tail;
    for (int j = 0; j < L; ++j) s += acc[j];
    return s;
}

template <class Real>
inline void axpy(Real* y, Real a, const Real* x, int n) {
    for (int k = 0; k < n; ++k) y[k] += a * x[k];
}

template <class Real>
inline void scale(Real* y, Real a, int n) {
    for (int k = 0; k < n; ++k) y[k] *= a;
}

// y[o] = sum_k w[o][k] x[k] + b[o]; w is [out x in]
template <class Real>
inline void linear_row(Real* y, const Real* x, const Mat<Real>& w, const Mat<Real>& b) {
    for (int o = 0; o < w.rows; ++o) y[o] = dot(w.row(o), x, w.cols) + b.v[size_t(o)];
}

// Y = X W^T + b, rows of X are positions
template <class Real>
inline void linear_forward(Mat<Real>& y, const Mat<Real>& x, const Mat<Real>& w,
                           const Mat<Real>& b) {
    for (int m = 0; m < x.rows; ++m) linear_row(y.row(m), x.row(m), w, b);
}

// dX += dY W ; dW += dY^T X ; db += column sums of dY.
// Any of the gradient outputs may be null to skip that accumulation.
template <class Real>
inline void linear_backward(const Mat<Real>& x, const Mat<Real>& w, const Mat<Real>& dy,
                            Mat<Real>* dx, Mat<Real>* dw, Mat<Real>* db) {
    const int out = w.rows, in = w.cols;
    for (int m = 0; m < dy.rows; ++m) {
        const Real* g = dy.row(m);
        if (dx) {
            Real* dxm = dx->row(m);
            for (int o = 0; o < out; ++o)
                if (g[o] != Real(0)) axpy(dxm, g[o], w.row(o), in);
        }
        if (dw) {
            const Real* xm = x.row(m);
            for (int o = 0; o < out; ++o)
                if (g[o] != Real(0)) axpy(dw->row(o), g[o], xm, in);
        }
        if (db)
            for (int o = 0; o < out; ++o) db->v[size_t(o)] += g[o];
    }
}

// ---------------------------------------------------------------------------
// layernorm
// ---------------------------------------------------------------------------

template <class Real>
struct LnStats {
    Real mean = Real(0);
    Real rstd = Real(0);
};

template <class Real>
inline LnStats<Real> layernorm_row(Real* y, const Real* x, const Real* g, const Real* b,
                                   int n, Real eps) {
    Real mean = Real(0);
    for (int k = 0; k < n; ++k) mean += x[k];
    mean /= Real(n);
    Real var = Real(0);
    for (int k = 0; k < n; ++k) {
        Real d = x[k] - mean;
        var += d * d;
    }
    var /= Real(n);
    Real rstd = Real(1) / std::sqrt(var + eps);
    for (int k = 0; k < n; ++k) y[k] = (x[k] - mean) * rstd * g[k] + b[k];
    return {mean, rstd};
}

// dx += backward of layernorm; dg/db accumulated when non-null
template <class Real>
inline void layernorm_backward_row(const Real* x, const Real* g, const LnStats<Real>& st,
                                   const Real* dy, Real* dx, Real* dg, Real* db, int n) {
    // xhat = (x - mean) * rstd; y = xhat * g + b
    Real sum_dxh = Real(0), sum_dxh_xh = Real(0);
    for (int k = 0; k < n; ++k) {
        Real xh = (x[k] - st.mean) * st.rstd;
        Real dxh = dy[k] * g[k];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        if (dg) dg[k] += dy[k] * xh;
        if (db) db[k] += dy[k];
    }
    Real inv_n = Real(1) / Real(n);
    for (int k = 0; k < n; ++k) {
        Real xh = (x[k] - st.mean) * st.rstd;
        Real dxh = dy[k] * g[k];
        dx[k] += (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh) * st.rstd;
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <class Real>
inline Real gelu(Real x) {
    const Real inv_sqrt2 = Real(0.70710678118654752440);
    return Real(0.5) * x * (Real(1) + std::erf(x * inv_sqrt2));
}

template <class Real>
inline Real gelu_grad(Real x) {
    const Real inv_sqrt2 = Real(0.70710678118654752440);
    const Real inv_sqrt2pi = Real(0.39894228040143267794);
    return Real(0.5) * (Real(1) + std::erf(x * inv_sqrt2)) +
           x * inv_sqrt2pi * std::exp(Real(-0.5) * x * x);
}

// softmax over y[0..n) in place, max-subtracted
template <class Real>
inline void softmax_inplace(Real* y, int n) {
    Real mx = y[0];
    for (int k = 1; k < n; ++k) mx = std::max(mx, y[k]);
    Real sum = Real(0);
    for (int k = 0; k < n; ++k) {
        y[k] = std::exp(y[k] - mx);
        sum += y[k];
    }
    Real inv = Real(1) / sum;
    for (int k = 0; k < n; ++k) y[k] *= inv;
}

// log(sum(exp(y))) without mutating input
template <class Real>
inline Real logsumexp(const Real* y, int n) {
    Real mx = y[0];
    for (int k = 1; k < n; ++k) mx = std::max(mx, y[k]);
    Real sum = Real(0);
    for (int k = 0; k < n; ++k) sum += std::exp(y[k] - mx);
    return mx + std::log(sum);
}

// ---------------------------------------------------------------------------
// init helpers
// ---------------------------------------------------------------------------

template <class Real>
inline void fill_normal(Mat<Real>& m, Rng& rng, double std_dev) {
    for (auto& x : m.v) x = Real(rng.gauss() * std_dev);
}

template <class Real>
inline void fill_const(Mat<Real>& m, Real c) {
    std::fill(m.v.begin(), m.v.end(), c);
}

// widen/narrow a float matrix into the working precision
template <class Real>
inline Mat<Real> to_real(const Mat<float>& m) {
    Mat<Real> out(m.rows, m.cols);
    for (size_t i = 0; i < m.size(); ++i) out.v[i] = Real(m.v[i]);
    return out;
}

}  // namespace flowlm
