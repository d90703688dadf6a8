#pragma once

// Causal pre-norm Transformer with learned absolute positions, a KV-cache for
// exact incremental decoding, and a hand-written backward pass.
//
// Mask modes: `causal` conditions position t on inputs <= t. `self_exclusive`
// conditions strictly on inputs < t, realized by shifting the inputs right by
// one slot and feeding a learned start vector at slot 0; the attention itself
// stays plainly causal in both modes, so one cache implementation serves both
// (incremental callers pass the start vector as the first embedded input).
//
// Full-sequence and single-step forwards share every per-position kernel, so
// a stepped prefix reproduces the full forward bit for bit.

#include <vector>

#include "flowlm/common.hpp"
#include "flowlm/mat.hpp"

namespace flowlm {

struct BackboneConfig {
    int layers = 2;
    int width = 32;
    int heads = 4;
    int ff_mult = 4;
    int max_seq = 64;

    int head_dim() const { return width / heads; }
    int ff_dim() const { return width * ff_mult; }

    void validate() const {
        require(layers >= 1 && width >= 1 && heads >= 1 && ff_mult >= 1 && max_seq >= 1,
                ErrorKind::config, "backbone counts must be >= 1");
        require(width % heads == 0, ErrorKind::config, "width must be divisible by heads");
    }
};

enum class MaskMode { causal, self_exclusive };

constexpr double kLnEps = 1e-5;

template <class Real>
struct LayerParams {
    Mat<Real> ln1_g, ln1_b;
    Mat<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    Mat<Real> ln2_g, ln2_b;
    Mat<Real> w1, b1, w2, b2;
};

template <class Real>
struct BackboneParams {
    BackboneConfig cfg;
    Mat<Real> pos_emb;  // max_seq x width
    Mat<Real> start;    // 1 x width, self-exclusive shift vector
    std::vector<LayerParams<Real>> layers;
    Mat<Real> lnf_g, lnf_b;

    void init(const BackboneConfig& c, Rng& rng) {
        c.validate();
        cfg = c;
        const int w = c.width, f = c.ff_dim();
        pos_emb.resize(c.max_seq, w);
        fill_normal(pos_emb, rng, 0.01);
        start.resize(1, w);
        fill_normal(start, rng, 0.02);
        const double resid_std = 0.02 / std::sqrt(2.0 * c.layers);
        layers.assign(size_t(c.layers), {});
        for (auto& l : layers) {
            l.ln1_g.resize(1, w);
            fill_const(l.ln1_g, Real(1));
            l.ln1_b.resize(1, w);
            l.wq.resize(w, w);
            fill_normal(l.wq, rng, 0.02);
            l.bq.resize(1, w);
            l.wk.resize(w, w);
            fill_normal(l.wk, rng, 0.02);
            l.bk.resize(1, w);
            l.wv.resize(w, w);
            fill_normal(l.wv, rng, 0.02);
            l.bv.resize(1, w);
            l.wo.resize(w, w);
            fill_normal(l.wo, rng, resid_std);
            l.bo.resize(1, w);
            l.ln2_g.resize(1, w);
            fill_const(l.ln2_g, Real(1));
            l.ln2_b.resize(1, w);
            l.w1.resize(f, w);
            fill_normal(l.w1, rng, 0.02);
            l.b1.resize(1, f);
            l.w2.resize(w, f);
            fill_normal(l.w2, rng, resid_std);
            l.b2.resize(1, w);
        }
        lnf_g.resize(1, w);
        fill_const(lnf_g, Real(1));
        lnf_b.resize(1, w);
    }

    // same shapes, zeroed; used as a gradient holder
    BackboneParams<Real> zeros_like() const {
        BackboneParams<Real> g = *this;
        g.pos_emb.zero();
        g.start.zero();
        for (auto& l : g.layers) {
            l.ln1_g.zero(); l.ln1_b.zero();
            l.wq.zero(); l.bq.zero(); l.wk.zero(); l.bk.zero();
            l.wv.zero(); l.bv.zero(); l.wo.zero(); l.bo.zero();
            l.ln2_g.zero(); l.ln2_b.zero();
            l.w1.zero(); l.b1.zero(); l.w2.zero(); l.b2.zero();
        }
        g.lnf_g.zero();
        g.lnf_b.zero();
        return g;
    }
};

// ---------------------------------------------------------------------------
// tapes
// ---------------------------------------------------------------------------

template <class Real>
struct LayerTape {
    Mat<Real> ln1_out;  // T x W
    std::vector<LnStats<Real>> ln1_st;
    Mat<Real> q, k, v;   // T x W
    Mat<Real> att_p;     // T x (heads * T), probs; zero beyond the causal bound
    Mat<Real> att_mix;   // T x W, pre-projection head mix
    Mat<Real> x_mid;     // T x W, residual stream after attention
    std::vector<LnStats<Real>> ln2_st;
    Mat<Real> ln2_out;   // T x W
    Mat<Real> ff_pre;    // T x F
    Mat<Real> ff_act;    // T x F
    Mat<Real> x_out;     // T x W, residual stream after the block
};

template <class Real>
struct BackboneTape {
    bool valid = false;
    MaskMode mode = MaskMode::causal;
    int t_len = 0;
    Mat<Real> x0;  // layer-0 input (shift and positions applied)
    std::vector<LayerTape<Real>> layers;
    std::vector<LnStats<Real>> lnf_st;
    Mat<Real> y;   // T x W final hidden states
};

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

template <class Real>
struct KVCache {
    int filled = 0;
    std::vector<Mat<Real>> k, v;  // per layer, max_seq x width

    void reset(const BackboneConfig& cfg) {
        filled = 0;
        k.assign(size_t(cfg.layers), Mat<Real>(cfg.max_seq, cfg.width));
        v.assign(size_t(cfg.layers), Mat<Real>(cfg.max_seq, cfg.width));
    }
    bool initialized() const { return !k.empty(); }
    KVCache snapshot() const { return *this; }
};

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace detail {

// attention for one query row; k/v hold at least t+1 rows
template <class Real>
inline void attend_row(const BackboneConfig& cfg, const Real* q_row, const Mat<Real>& k,
                       const Mat<Real>& v, int t, Real* mix_row, Real* probs_scratch,
                       Real* probs_out = nullptr, int probs_stride = 0) {
    const int hd = cfg.head_dim();
    const Real inv_sqrt_hd = Real(1) / std::sqrt(Real(hd));
    for (int h = 0; h < cfg.heads; ++h) {
        const int off = h * hd;
        Real* p = probs_scratch;
        for (int j = 0; j <= t; ++j)
            p[j] = dot(q_row + off, k.row(j) + off, hd) * inv_sqrt_hd;
        softmax_inplace(p, t + 1);
        Real* m = mix_row + off;
        for (int d = 0; d < hd; ++d) m[d] = Real(0);
        for (int j = 0; j <= t; ++j) axpy(m, p[j], v.row(j) + off, hd);
        if (probs_out)
            for (int j = 0; j <= t; ++j) probs_out[h * probs_stride + j] = p[j];
    }
}

}  // namespace detail

// Full forward. Returns final hidden states (T x width); fills `tape` when
// given (required for backward).
template <class Real>
inline Mat<Real> backbone_forward(const BackboneParams<Real>& p, const Mat<Real>& x_emb,
                                  MaskMode mode, BackboneTape<Real>* tape = nullptr) {
    const auto& cfg = p.cfg;
    const int t_len = x_emb.rows, w = cfg.width, f = cfg.ff_dim();
    require(t_len >= 1, ErrorKind::shape, "empty input");
    require(x_emb.cols == w, ErrorKind::shape, "input width mismatch");
    require(t_len <= cfg.max_seq, ErrorKind::capacity, "sequence exceeds max_seq");
    require(all_finite(x_emb.data(), x_emb.size()), ErrorKind::numeric,
            "non-finite backbone input");

    Mat<Real> x(t_len, w);
    for (int t = 0; t < t_len; ++t) {
        const Real* src = mode == MaskMode::causal
                              ? x_emb.row(t)
                              : (t == 0 ? p.start.row(0) : x_emb.row(t - 1));
        const Real* pos = p.pos_emb.row(t);
        Real* dst = x.row(t);
        for (int i = 0; i < w; ++i) dst[i] = src[i] + pos[i];
    }

    if (tape) {
        tape->valid = true;
        tape->mode = mode;
        tape->t_len = t_len;
        tape->x0 = x;
        tape->layers.assign(size_t(cfg.layers), {});
        tape->lnf_st.assign(size_t(t_len), {});
    }

    std::vector<Real> scratch(static_cast<size_t>(t_len));
    Mat<Real> ln1(t_len, w), q(t_len, w), k(t_len, w), v(t_len, w), mix(t_len, w);
    Mat<Real> ln2(t_len, w), ffp(t_len, f), ffa(t_len, f);

    for (int li = 0; li < cfg.layers; ++li) {
        const auto& L = p.layers[size_t(li)];
        LayerTape<Real>* lt = tape ? &tape->layers[size_t(li)] : nullptr;
        if (lt) {
            lt->ln1_st.assign(size_t(t_len), {});
            lt->ln2_st.assign(size_t(t_len), {});
            lt->att_p.resize(t_len, cfg.heads * t_len);
        }
        for (int t = 0; t < t_len; ++t) {
            auto st = layernorm_row(ln1.row(t), x.row(t), L.ln1_g.row(0), L.ln1_b.row(0),
                                    w, Real(kLnEps));
            if (lt) lt->ln1_st[size_t(t)] = st;
        }
        linear_forward(q, ln1, L.wq, L.bq);
        linear_forward(k, ln1, L.wk, L.bk);
        linear_forward(v, ln1, L.wv, L.bv);
        for (int t = 0; t < t_len; ++t)
            detail::attend_row(cfg, q.row(t), k, v, t, mix.row(t), scratch.data(),
                               lt ? lt->att_p.row(t) : nullptr, t_len);
        if (lt) {
            lt->ln1_out = ln1;
            lt->q = q;
            lt->k = k;
            lt->v = v;
            lt->att_mix = mix;
        }
        // attention out-projection + residual
        for (int t = 0; t < t_len; ++t) {
            Real* xr = x.row(t);
            const Real* mr = mix.row(t);
            for (int o = 0; o < w; ++o)
                xr[o] += dot(L.wo.row(o), mr, w) + L.bo.v[size_t(o)];
        }
        if (lt) lt->x_mid = x;
        for (int t = 0; t < t_len; ++t) {
            auto st = layernorm_row(ln2.row(t), x.row(t), L.ln2_g.row(0), L.ln2_b.row(0),
                                    w, Real(kLnEps));
            if (lt) lt->ln2_st[size_t(t)] = st;
        }
        linear_forward(ffp, ln2, L.w1, L.b1);
        for (size_t i = 0; i < ffp.size(); ++i) ffa.v[i] = gelu(ffp.v[i]);
        for (int t = 0; t < t_len; ++t) {
            Real* xr = x.row(t);
            const Real* ar = ffa.row(t);
            for (int o = 0; o < w; ++o)
                xr[o] += dot(L.w2.row(o), ar, f) + L.b2.v[size_t(o)];
        }
        if (lt) {
            lt->ln2_out = ln2;
            lt->ff_pre = ffp;
            lt->ff_act = ffa;
            lt->x_out = x;
        }
    }

    Mat<Real> y(t_len, w);
    for (int t = 0; t < t_len; ++t) {
        auto st = layernorm_row(y.row(t), x.row(t), p.lnf_g.row(0), p.lnf_b.row(0), w,
                                Real(kLnEps));
        if (tape) tape->lnf_st[size_t(t)] = st;
    }
    if (tape) tape->y = y;
    return y;
}

// One incremental position against a KV cache (causal attention over the
// cache plus this position). In a self-exclusive stream the caller passes
// `params.start` as the first input row. Returns the final hidden state row.
template <class Real>
inline std::vector<Real> backbone_step(const BackboneParams<Real>& p, KVCache<Real>& cache,
                                       const Real* x_row) {
    const auto& cfg = p.cfg;
    const int w = cfg.width, f = cfg.ff_dim();
    require(cache.initialized(), ErrorKind::state, "cache not initialized");
    require(cache.filled < cfg.max_seq, ErrorKind::capacity, "KV cache full");
    const int t = cache.filled;

    std::vector<Real> x(static_cast<size_t>(w));
    {
        const Real* pos = p.pos_emb.row(t);
        for (int i = 0; i < w; ++i) x[size_t(i)] = x_row[i] + pos[i];
    }
    std::vector<Real> ln(static_cast<size_t>(w)), qrow(static_cast<size_t>(w)), mix(static_cast<size_t>(w)), ffp(static_cast<size_t>(f)),
        ffa(static_cast<size_t>(f)), scratch(static_cast<size_t>(t + 1)), tmp(static_cast<size_t>(w));
    for (int li = 0; li < cfg.layers; ++li) {
        const auto& L = p.layers[size_t(li)];
        layernorm_row(ln.data(), x.data(), L.ln1_g.row(0), L.ln1_b.row(0), w, Real(kLnEps));
        linear_row(qrow.data(), ln.data(), L.wq, L.bq);
        linear_row(cache.k[size_t(li)].row(t), ln.data(), L.wk, L.bk);
        linear_row(cache.v[size_t(li)].row(t), ln.data(), L.wv, L.bv);
        detail::attend_row(cfg, qrow.data(), cache.k[size_t(li)], cache.v[size_t(li)], t,
                           mix.data(), scratch.data());
        for (int o = 0; o < w; ++o)
            x[size_t(o)] += dot(L.wo.row(o), mix.data(), w) + L.bo.v[size_t(o)];
        layernorm_row(ln.data(), x.data(), L.ln2_g.row(0), L.ln2_b.row(0), w, Real(kLnEps));
        linear_row(ffp.data(), ln.data(), L.w1, L.b1);
        for (int i = 0; i < f; ++i) ffa[size_t(i)] = gelu(ffp[size_t(i)]);
        for (int o = 0; o < w; ++o)
            x[size_t(o)] += dot(L.w2.row(o), ffa.data(), f) + L.b2.v[size_t(o)];
    }
    layernorm_row(tmp.data(), x.data(), p.lnf_g.row(0), p.lnf_b.row(0), w, Real(kLnEps));
    cache.filled = t + 1;
    return tmp;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// dy: T x width gradient at the final hidden states. Accumulates parameter
// gradients into `grads` (when non-null) and input-embedding gradients into
// `dx_emb` (when non-null; aligned with the original x_emb, shift-aware).
template <class Real>
inline void backbone_backward(const BackboneParams<Real>& p, const BackboneTape<Real>& tape,
                              const Mat<Real>& dy, BackboneParams<Real>* grads,
                              Mat<Real>* dx_emb) {
    require(tape.valid, ErrorKind::state, "backward without a recorded forward");
    const auto& cfg = p.cfg;
    const int t_len = tape.t_len, w = cfg.width, f = cfg.ff_dim();
    require(dy.rows == t_len && dy.cols == w, ErrorKind::shape, "dy shape mismatch");

    // through final layernorm
    Mat<Real> dx(t_len, w);
    {
        const Mat<Real>& x_in =
            cfg.layers > 0 ? tape.layers[size_t(cfg.layers - 1)].x_out : tape.x0;
        for (int t = 0; t < t_len; ++t)
            layernorm_backward_row(x_in.row(t), p.lnf_g.row(0), tape.lnf_st[size_t(t)],
                                   dy.row(t), dx.row(t),
                                   grads ? grads->lnf_g.row(0) : nullptr,
                                   grads ? grads->lnf_b.row(0) : nullptr, w);
    }

    Mat<Real> d_mix(t_len, w), d_q(t_len, w), d_k(t_len, w), d_v(t_len, w);
    Mat<Real> d_ln(t_len, w), d_ffa(t_len, f), d_ffp(t_len, f);
    std::vector<Real> dp(static_cast<size_t>(t_len));

    for (int li = cfg.layers - 1; li >= 0; --li) {
        const auto& L = p.layers[size_t(li)];
        const auto& lt = tape.layers[size_t(li)];
        const Mat<Real>& x_in = li > 0 ? tape.layers[size_t(li - 1)].x_out : tape.x0;

        // ff block: x_out = x_mid + w2 gelu(w1 ln2(x_mid) + b1) + b2
        d_ffa.zero();
        linear_backward(lt.ff_act, L.w2, dx, &d_ffa, grads ? &grads->layers[size_t(li)].w2 : nullptr,
                        grads ? &grads->layers[size_t(li)].b2 : nullptr);
        for (size_t i = 0; i < d_ffp.size(); ++i)
            d_ffp.v[i] = d_ffa.v[i] * gelu_grad(lt.ff_pre.v[i]);
        d_ln.zero();
        linear_backward(lt.ln2_out, L.w1, d_ffp, &d_ln,
                        grads ? &grads->layers[size_t(li)].w1 : nullptr,
                        grads ? &grads->layers[size_t(li)].b1 : nullptr);
        for (int t = 0; t < t_len; ++t)
            layernorm_backward_row(lt.x_mid.row(t), L.ln2_g.row(0), lt.ln2_st[size_t(t)],
                                   d_ln.row(t), dx.row(t),
                                   grads ? grads->layers[size_t(li)].ln2_g.row(0) : nullptr,
                                   grads ? grads->layers[size_t(li)].ln2_b.row(0) : nullptr, w);

        // attention block: x_mid = x_in + wo mix + bo
        d_mix.zero();
        linear_backward(lt.att_mix, L.wo, dx, &d_mix,
                        grads ? &grads->layers[size_t(li)].wo : nullptr,
                        grads ? &grads->layers[size_t(li)].bo : nullptr);
        d_q.zero();
        d_k.zero();
        d_v.zero();
        const int hd = cfg.head_dim();
        const Real inv_sqrt_hd = Real(1) / std::sqrt(Real(hd));
        for (int t = 0; t < t_len; ++t) {
            for (int h = 0; h < cfg.heads; ++h) {
                const int off = h * hd;
                const Real* probs = lt.att_p.row(t) + h * t_len;
                const Real* dm = d_mix.row(t) + off;
                Real dot_pp = Real(0);
                for (int j = 0; j <= t; ++j) {
                    axpy(d_v.row(j) + off, probs[j], dm, hd);
                    dp[size_t(j)] = dot(dm, lt.v.row(j) + off, hd);
                    dot_pp += dp[size_t(j)] * probs[j];
                }
                Real* dq = d_q.row(t) + off;
                const Real* q_row = lt.q.row(t) + off;
                for (int j = 0; j <= t; ++j) {
                    Real ds = probs[j] * (dp[size_t(j)] - dot_pp) * inv_sqrt_hd;
                    if (ds != Real(0)) {
                        axpy(dq, ds, lt.k.row(j) + off, hd);
                        axpy(d_k.row(j) + off, ds, q_row, hd);
                    }
                }
            }
        }
        d_ln.zero();
        linear_backward(lt.ln1_out, L.wq, d_q, &d_ln,
                        grads ? &grads->layers[size_t(li)].wq : nullptr,
                        grads ? &grads->layers[size_t(li)].bq : nullptr);
        linear_backward(lt.ln1_out, L.wk, d_k, &d_ln,
                        grads ? &grads->layers[size_t(li)].wk : nullptr,
                        grads ? &grads->layers[size_t(li)].bk : nullptr);
        linear_backward(lt.ln1_out, L.wv, d_v, &d_ln,
                        grads ? &grads->layers[size_t(li)].wv : nullptr,
                        grads ? &grads->layers[size_t(li)].bv : nullptr);
        for (int t = 0; t < t_len; ++t)
            layernorm_backward_row(x_in.row(t), L.ln1_g.row(0), lt.ln1_st[size_t(t)],
                                   d_ln.row(t), dx.row(t),
                                   grads ? grads->layers[size_t(li)].ln1_g.row(0) : nullptr,
                                   grads ? grads->layers[size_t(li)].ln1_b.row(0) : nullptr, w);
    }

    // x0[t] = (shifted input)[t] + pos[t]
    for (int t = 0; t < t_len; ++t) {
        if (grads) axpy(grads->pos_emb.row(t), Real(1), dx.row(t), w);
        if (tape.mode == MaskMode::causal) {
            if (dx_emb) axpy(dx_emb->row(t), Real(1), dx.row(t), w);
        } else {
            if (t == 0) {
                if (grads) axpy(grads->start.row(0), Real(1), dx.row(0), w);
            } else if (dx_emb) {
                axpy(dx_emb->row(t - 1), Real(1), dx.row(t), w);
            }
        }
    }
}

}  // namespace flowlm
