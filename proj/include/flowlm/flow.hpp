#pragma once

// Normalizing-flow machinery: affine autoregressive blocks parameterized by
// small causal Transformers, the visual-only shallow stack with alternating
// scan directions, and exact log-likelihood assembly.
//
// Latent vectors (D dims) enter each block's Transformer by zero-padding into
// the block width, so the literal "x_n plus projected context" form of the
// fused flow input holds at the vector level.

#include <vector>

#include "flowlm/backbone.hpp"
#include "flowlm/common.hpp"
#include "flowlm/mat.hpp"

namespace flowlm {

constexpr double kLogSigmaMin = -5.0;
constexpr double kLogSigmaMax = 5.0;
constexpr double kLog2Pi = 1.8378770664093454836;

// The scale heads emit log_sigma = kLogSigmaHeadScale * (w y + b). Keeping
// this gain below one slows sigma's drift relative to mu under Adam, which
// otherwise starves the mean of gradient (d loss / d mu ~ 1 / sigma^2) as
// sigma races up to match still-unexplained variance.
constexpr double kLogSigmaHeadScale = 0.1;

template <class Real>
struct FlowParams {
    Mat<Real> mu;         // N x D
    Mat<Real> log_sigma;  // N x D, clamped to [-5, 5]
};

template <class Real>
struct FlowPassResult {
    Mat<Real> output;  // z (forward) or x (inverse)
    Real logdet = Real(0);
};

struct ClampStats {
    long clamped = 0;
    long total = 0;
    double rate() const { return total ? double(clamped) / double(total) : 0.0; }
    void operator+=(const ClampStats& o) {
        clamped += o.clamped;
        total += o.total;
    }
};

template <class Real>
inline Real clamp_log_sigma(Real raw, ClampStats* stats = nullptr) {
    if (stats) ++stats->total;
    if (raw < Real(kLogSigmaMin)) {
        if (stats) ++stats->clamped;
        return Real(kLogSigmaMin);
    }
    if (raw > Real(kLogSigmaMax)) {
        if (stats) ++stats->clamped;
        return Real(kLogSigmaMax);
    }
    return raw;
}

// ---------------------------------------------------------------------------
// pure affine application (the elementwise core of every AF block)
// ---------------------------------------------------------------------------

template <class Real>
inline void check_sigma(const FlowParams<Real>& p) {
    require(all_finite(p.mu.data(), p.mu.size()) &&
                all_finite(p.log_sigma.data(), p.log_sigma.size()),
            ErrorKind::numeric, "non-finite affine parameters");
    for (Real ls : p.log_sigma.v)
        require(ls >= Real(kLogSigmaMin) && ls <= Real(kLogSigmaMax), ErrorKind::numeric,
                "log-sigma outside clamp range");
}

// z = (x - mu) / sigma, logdet = -sum(log sigma)
template <class Real>
inline FlowPassResult<Real> apply_affine_forward(const Mat<Real>& x,
                                                 const FlowParams<Real>& p) {
    require(x.same_shape(p.mu) && x.same_shape(p.log_sigma), ErrorKind::shape,
            "affine parameter shape mismatch");
    check_sigma(p);
    FlowPassResult<Real> r;
    r.output.resize(x.rows, x.cols);
    Real sum_ls = Real(0);
    for (size_t i = 0; i < x.size(); ++i) {
        Real ls = p.log_sigma.v[i];
        r.output.v[i] = (x.v[i] - p.mu.v[i]) * std::exp(-ls);
        sum_ls += ls;
    }
    r.logdet = -sum_ls;
    return r;
}

// x = mu + sigma * z
template <class Real>
inline Mat<Real> apply_affine_inverse(const Mat<Real>& z, const FlowParams<Real>& p) {
    require(z.same_shape(p.mu) && z.same_shape(p.log_sigma), ErrorKind::shape,
            "affine parameter shape mismatch");
    require(all_finite(z.data(), z.size()), ErrorKind::numeric, "non-finite input");
    check_sigma(p);
    Mat<Real> x(z.rows, z.cols);
    for (size_t i = 0; i < z.size(); ++i)
        x.v[i] = p.mu.v[i] + std::exp(p.log_sigma.v[i]) * z.v[i];
    return x;
}

// ---------------------------------------------------------------------------
// AF block: self-exclusive causal Transformer predicting (mu, log sigma)
// ---------------------------------------------------------------------------

template <class Real>
struct AfBlock {
    BackboneParams<Real> bb;
    Mat<Real> head_w;  // 2D x width, zero-init => identity transform
    Mat<Real> head_b;  // 1 x 2D
    int d_latent = 0;
    bool reversed = false;

    void init(const BackboneConfig& cfg, int d, bool rev, Rng& rng) {
        bb.init(cfg, rng);
        d_latent = d;
        head_w.resize(2 * d, cfg.width);
        head_b.resize(1, 2 * d);
        reversed = rev;
    }
};

template <class Real>
struct AfBlockTape {
    Mat<Real> xp;        // scan-ordered input, N x D
    Mat<Real> emb;       // N x width (zero-padded latents)
    BackboneTape<Real> bb;
    Mat<Real> raw;       // N x 2D head output (pre-clamp)
    FlowParams<Real> params;
    Mat<Real> zp;        // scan-ordered output
};

namespace detail {

template <class Real>
inline Mat<Real> reverse_rows(const Mat<Real>& m) {
    Mat<Real> r(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) r.at(i, j) = m.at(m.rows - 1 - i, j);
    return r;
}

template <class Real>
inline Mat<Real> pad_rows(const Mat<Real>& m, int width) {
    Mat<Real> out(m.rows, width);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) out.at(i, j) = m.at(i, j);
    return out;
}

}  // namespace detail

// Teacher-forced normalization pass of one AF block.
template <class Real>
inline FlowPassResult<Real> af_forward(const AfBlock<Real>& blk, const Mat<Real>& x,
                                       AfBlockTape<Real>* tape = nullptr,
                                       ClampStats* clamp = nullptr) {
    require(x.cols == blk.d_latent, ErrorKind::shape, "latent dim mismatch");
    const int n = x.rows, d = blk.d_latent;
    Mat<Real> xp = blk.reversed ? detail::reverse_rows(x) : x;
    Mat<Real> emb = detail::pad_rows(xp, blk.bb.cfg.width);
    BackboneTape<Real> local_tape;
    Mat<Real> h = backbone_forward(blk.bb, emb, MaskMode::self_exclusive,
                                   tape ? &local_tape : nullptr);
    Mat<Real> raw(n, 2 * d);
    linear_forward(raw, h, blk.head_w, blk.head_b);
    FlowParams<Real> p;
    p.mu.resize(n, d);
    p.log_sigma.resize(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            p.mu.at(i, j) = raw.at(i, j);
            p.log_sigma.at(i, j) =
                clamp_log_sigma(Real(kLogSigmaHeadScale) * raw.at(i, d + j), clamp);
        }
    FlowPassResult<Real> r = apply_affine_forward(xp, p);
    Mat<Real> zp = r.output;
    if (blk.reversed) r.output = detail::reverse_rows(r.output);
    if (tape) {
        tape->xp = std::move(xp);
        tape->emb = std::move(emb);
        tape->bb = std::move(local_tape);
        tape->raw = std::move(raw);
        tape->params = std::move(p);
        tape->zp = std::move(zp);
    }
    return r;
}

// Sequential inverse: reconstructs positions in the block's scan order.
template <class Real>
inline Mat<Real> af_inverse(const AfBlock<Real>& blk, const Mat<Real>& z) {
    require(z.cols == blk.d_latent, ErrorKind::shape, "latent dim mismatch");
    require(all_finite(z.data(), z.size()), ErrorKind::numeric, "non-finite input");
    const int n = z.rows, d = blk.d_latent, w = blk.bb.cfg.width;
    Mat<Real> zp = blk.reversed ? detail::reverse_rows(z) : z;
    Mat<Real> xp(n, d);
    KVCache<Real> cache;
    cache.reset(blk.bb.cfg);
    std::vector<Real> in(size_t(w), Real(0));
    std::vector<Real> raw(static_cast<size_t>(2 * d));
    for (int i = 0; i < n; ++i) {
        const Real* row = i == 0 ? blk.bb.start.row(0) : in.data();
        auto h = backbone_step(blk.bb, cache, row);
        linear_row(raw.data(), h.data(), blk.head_w, blk.head_b);
        for (int j = 0; j < d; ++j) {
            Real ls = clamp_log_sigma(Real(kLogSigmaHeadScale) * raw[size_t(d + j)]);
            xp.at(i, j) = raw[size_t(j)] + std::exp(ls) * zp.at(i, j);
        }
        require(all_finite(xp.row(i), size_t(d)), ErrorKind::numeric,
                "non-finite intermediate during inversion");
        // next step consumes this reconstructed position, zero-padded
        std::fill(in.begin(), in.end(), Real(0));
        for (int j = 0; j < d; ++j) in[size_t(j)] = xp.at(i, j);
    }
    return blk.reversed ? detail::reverse_rows(xp) : xp;
}

// Backward through af_forward given dz and the gradient of the scalar logdet.
// Accumulates into `grads` (same-shape AfBlock, may be null) and `dx`.
template <class Real>
inline void af_backward(const AfBlock<Real>& blk, const AfBlockTape<Real>& tape,
                        const Mat<Real>& dz, Real dlogdet, AfBlock<Real>* grads,
                        Mat<Real>* dx) {
    const int n = tape.xp.rows, d = blk.d_latent;
    Mat<Real> dzp = blk.reversed ? detail::reverse_rows(dz) : dz;
    Mat<Real> draw(n, 2 * d);
    Mat<Real> dxp(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            Real ls = tape.params.log_sigma.at(i, j);
            Real inv_sigma = std::exp(-ls);
            Real g = dzp.at(i, j);
            dxp.at(i, j) += g * inv_sigma;
            draw.at(i, j) = -g * inv_sigma;  // d mu
            Real dls = -g * tape.zp.at(i, j) - dlogdet;  // z and logdet paths
            Real pre = Real(kLogSigmaHeadScale) * tape.raw.at(i, d + j);
            bool active = pre > Real(kLogSigmaMin) && pre < Real(kLogSigmaMax);
            draw.at(i, d + j) = active ? Real(kLogSigmaHeadScale) * dls : Real(0);
        }
    Mat<Real> dh(n, blk.bb.cfg.width);
    linear_backward(tape.bb.y, blk.head_w, draw, &dh, grads ? &grads->head_w : nullptr,
                    grads ? &grads->head_b : nullptr);
    Mat<Real> demb(n, blk.bb.cfg.width);
    backbone_backward(blk.bb, tape.bb, dh, grads ? &grads->bb : nullptr, &demb);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) dxp.at(i, j) += demb.at(i, j);
    Mat<Real> dx_local = blk.reversed ? detail::reverse_rows(dxp) : dxp;
    for (size_t i = 0; i < dx->size(); ++i) dx->v[i] += dx_local.v[i];
}

// ---------------------------------------------------------------------------
// shallow stack
// ---------------------------------------------------------------------------

template <class Real>
struct ShallowStack {
    std::vector<AfBlock<Real>> blocks;

    // scan orders strictly alternate starting with raster
    void init(int n_blocks, const BackboneConfig& cfg, int d, Rng& rng) {
        blocks.assign(size_t(n_blocks), {});
        for (int b = 0; b < n_blocks; ++b)
            blocks[size_t(b)].init(cfg, d, b % 2 == 1, rng);
    }
};

template <class Real>
struct ShallowTape {
    std::vector<AfBlockTape<Real>> blocks;
};

template <class Real>
inline FlowPassResult<Real> shallow_forward(const ShallowStack<Real>& stack,
                                            const Mat<Real>& x,
                                            ShallowTape<Real>* tape = nullptr,
                                            ClampStats* clamp = nullptr) {
    FlowPassResult<Real> r;
    r.output = x;
    r.logdet = Real(0);
    if (tape) tape->blocks.assign(stack.blocks.size(), {});
    for (size_t b = 0; b < stack.blocks.size(); ++b) {
        auto br = af_forward(stack.blocks[b], r.output, tape ? &tape->blocks[b] : nullptr,
                             clamp);
        r.output = std::move(br.output);
        r.logdet += br.logdet;
    }
    return r;
}

template <class Real>
inline Mat<Real> shallow_inverse(const ShallowStack<Real>& stack, const Mat<Real>& u) {
    Mat<Real> x = u;
    for (size_t b = stack.blocks.size(); b-- > 0;) x = af_inverse(stack.blocks[b], x);
    return x;
}

// du accumulated with upstream (d output, d logdet); dx returned via out-param.
template <class Real>
inline void shallow_backward(const ShallowStack<Real>& stack, const ShallowTape<Real>& tape,
                             const Mat<Real>& du, Real dlogdet,
                             std::vector<AfBlock<Real>>* grads, Mat<Real>* dx) {
    Mat<Real> g = du;
    for (size_t b = stack.blocks.size(); b-- > 0;) {
        Mat<Real> gin(g.rows, g.cols);
        af_backward(stack.blocks[b], tape.blocks[b], g, dlogdet,
                    grads ? &(*grads)[b] : nullptr, &gin);
        g = std::move(gin);
    }
    if (dx)
        for (size_t i = 0; i < dx->size(); ++i) dx->v[i] += g.v[i];
}

// ---------------------------------------------------------------------------
// likelihood assembly
// ---------------------------------------------------------------------------

// log density of v under the standard normal prior
template <class Real>
inline Real gaussian_log_p0(const Mat<Real>& v) {
    Real ss = Real(0);
    for (Real x : v.v) ss += x * x;
    return Real(-0.5) * ss - Real(0.5) * Real(v.size()) * Real(kLog2Pi);
}

template <class Real>
struct VisualNll {
    Real total = Real(0);    // nats, full constant included
    Real per_dim = Real(0);
    Mat<Real> z;             // (u - mu) / sigma, kept for backward
};

// sum_n [ 1/2 ||z_n||^2 + sum_d log sigma + (D/2) log 2pi ] - logdet_S
template <class Real>
inline VisualNll<Real> nll_visual(const Mat<Real>& u, const FlowParams<Real>& p,
                                  Real logdet_shallow) {
    require(u.same_shape(p.mu) && u.same_shape(p.log_sigma), ErrorKind::shape,
            "nll shape mismatch");
    VisualNll<Real> r;
    r.z.resize(u.rows, u.cols);
    Real acc = Real(0);
    for (size_t i = 0; i < u.size(); ++i) {
        Real ls = p.log_sigma.v[i];
        Real z = (u.v[i] - p.mu.v[i]) * std::exp(-ls);
        r.z.v[i] = z;
        acc += Real(0.5) * z * z + ls + Real(0.5) * Real(kLog2Pi);
    }
    r.total = acc - logdet_shallow;
    r.per_dim = r.total / Real(u.size());
    return r;
}

// Independent assembly route: -[ log p0(z) + logdet_deep + logdet_shallow ].
template <class Real>
inline Real nll_from_parts(const Mat<Real>& z, Real logdet_deep, Real logdet_shallow) {
    return -(gaussian_log_p0(z) + logdet_deep + logdet_shallow);
}

}  // namespace flowlm
