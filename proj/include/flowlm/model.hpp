#pragma once

// The dual-stream fusion model: a frozen language/vision stub stream and a
// trainable flow stream over one shared causal sequence, coupled by
// zero-initialized skip projections.
//
//   flow-stream input  c_hat_t = pad(u_t) + W_vlm y_vlm_t   (visual)
//                      c_hat_t = y_vlm_t                    (text)
//   text logits for position p = lm_head(y_vlm[p-1] + W_d y_d[p])
//   flow params for position p = ngp_head(y_d[p])
//
// The flow stream is self-exclusive: its slot p conditions on c_hat[<p] via a
// one-slot input shift with a learned start vector, so both streams consume
// the identical position ordering under one causal mask.

#include <vector>

#include "flowlm/backbone.hpp"
#include "flowlm/codec.hpp"
#include "flowlm/common.hpp"
#include "flowlm/flow.hpp"
#include "flowlm/mat.hpp"
#include "flowlm/sequence.hpp"
#include "flowlm/vocab.hpp"

namespace flowlm {

struct ModelConfig {
    BackboneConfig vlm{.layers = 4, .width = 128, .heads = 4, .ff_mult = 4, .max_seq = 96};
    BackboneConfig deep{.layers = 6, .width = 128, .heads = 4, .ff_mult = 4, .max_seq = 96};
    BackboneConfig shallow{.layers = 2, .width = 64, .heads = 4, .ff_mult = 4, .max_seq = 16};
    int shallow_blocks = 2;
    int n_latents = kLatentTokens;
    int d_latent = kLatentDim;
    int vocab_size = 48;
    int adapter_hidden = 128;

    void validate() const {
        vlm.validate();
        deep.validate();
        shallow.validate();
        require(deep.width == vlm.width, ErrorKind::config,
                "stream widths must match for text skip fusion");
        require(deep.max_seq == vlm.max_seq, ErrorKind::config,
                "streams must share max_seq");
        require(shallow.max_seq >= n_latents, ErrorKind::config,
                "shallow max_seq must cover the latent block");
        require(shallow_blocks >= 1 && n_latents >= 1 && d_latent >= 1, ErrorKind::config,
                "bad latent geometry");
        require(d_latent <= shallow.width && d_latent <= deep.width, ErrorKind::config,
                "latent dim exceeds stream width");
        require(vocab_size >= 6, ErrorKind::config, "vocab too small");
    }
};

template <class Real>
struct AdapterParams {
    Mat<Real> w1, b1;      // hidden x D
    Mat<Real> w2, b2;      // width_vlm x hidden
    Mat<Real> film_scale;  // 1 x width_vlm; scale = 1 + s * film_scale
    Mat<Real> film_shift;  // 1 x width_vlm; shift = s * film_shift
};

template <class Real>
struct ModelParams {
    ModelConfig cfg;

    // group "stub": frozen after stage 0
    Mat<Real> tok_emb;    // vocab x width_vlm
    BackboneParams<Real> vlm;
    Mat<Real> lm_head_w;  // vocab x width_vlm
    Mat<Real> lm_head_b;  // 1 x vocab
    Mat<Real> native_w;   // width_vlm x D, the stub's own visual input map
    Mat<Real> native_b;   // 1 x width_vlm

    // group "adapter"
    AdapterParams<Real> adapter;

    // group "flow_deep"
    BackboneParams<Real> deep;

    // group "ngp": zero-init => mu = 0, sigma = 1
    Mat<Real> ngp_w;  // 2D x width_flow
    Mat<Real> ngp_b;  // 1 x 2D

    // group "shallow"
    ShallowStack<Real> shallow;

    // group "skips": exactly zero until stage-3 activation
    Mat<Real> w_vlm;  // width_flow x width_vlm
    Mat<Real> w_d;    // width_vlm x width_flow

    void init(const ModelConfig& c, uint64_t seed) {
        c.validate();
        cfg = c;
        Rng r_stub(derive_seed(seed, "stub"));
        tok_emb.resize(c.vocab_size, c.vlm.width);
        fill_normal(tok_emb, r_stub, 0.02);
        vlm.init(c.vlm, r_stub);
        lm_head_w.resize(c.vocab_size, c.vlm.width);
        fill_normal(lm_head_w, r_stub, 0.02);
        lm_head_b.resize(1, c.vocab_size);
        native_w.resize(c.vlm.width, c.d_latent);
        fill_normal(native_w, r_stub, 0.05);
        native_b.resize(1, c.vlm.width);

        Rng r_adp(derive_seed(seed, "adapter"));
        adapter.w1.resize(c.adapter_hidden, c.d_latent);
        fill_normal(adapter.w1, r_adp, 0.05);
        adapter.b1.resize(1, c.adapter_hidden);
        adapter.w2.resize(c.vlm.width, c.adapter_hidden);
        fill_normal(adapter.w2, r_adp, 0.02);
        adapter.b2.resize(1, c.vlm.width);
        adapter.film_scale.resize(1, c.vlm.width);
        adapter.film_shift.resize(1, c.vlm.width);

        Rng r_deep(derive_seed(seed, "deep"));
        deep.init(c.deep, r_deep);
        ngp_w.resize(2 * c.d_latent, c.deep.width);
        ngp_b.resize(1, 2 * c.d_latent);

        Rng r_sh(derive_seed(seed, "shallow"));
        shallow.init(c.shallow_blocks, c.shallow, c.d_latent, r_sh);

        w_vlm.resize(c.deep.width, c.vlm.width);
        w_d.resize(c.vlm.width, c.deep.width);
    }
};

// ---------------------------------------------------------------------------
// parameter registry (checkpointing, optimizer, freezing, checksums)
// ---------------------------------------------------------------------------

template <class Real>
struct TensorEntry {
    std::string name;
    std::string group;
    Mat<Real>* mat;
};

template <class Real>
inline void collect_backbone(const std::string& prefix, const std::string& group,
                             BackboneParams<Real>& b, std::vector<TensorEntry<Real>>& out) {
    out.push_back({prefix + ".pos_emb", group, &b.pos_emb});
    out.push_back({prefix + ".start", group, &b.start});
    for (size_t i = 0; i < b.layers.size(); ++i) {
        auto& l = b.layers[i];
        std::string p = prefix + ".l" + std::to_string(i);
        out.push_back({p + ".ln1_g", group, &l.ln1_g});
        out.push_back({p + ".ln1_b", group, &l.ln1_b});
        out.push_back({p + ".wq", group, &l.wq});
        out.push_back({p + ".bq", group, &l.bq});
        out.push_back({p + ".wk", group, &l.wk});
        out.push_back({p + ".bk", group, &l.bk});
        out.push_back({p + ".wv", group, &l.wv});
        out.push_back({p + ".bv", group, &l.bv});
        out.push_back({p + ".wo", group, &l.wo});
        out.push_back({p + ".bo", group, &l.bo});
        out.push_back({p + ".ln2_g", group, &l.ln2_g});
        out.push_back({p + ".ln2_b", group, &l.ln2_b});
        out.push_back({p + ".w1", group, &l.w1});
        out.push_back({p + ".b1", group, &l.b1});
        out.push_back({p + ".w2", group, &l.w2});
        out.push_back({p + ".b2", group, &l.b2});
    }
    out.push_back({prefix + ".lnf_g", group, &b.lnf_g});
    out.push_back({prefix + ".lnf_b", group, &b.lnf_b});
}

template <class Real>
inline std::vector<TensorEntry<Real>> collect_tensors(ModelParams<Real>& m) {
    std::vector<TensorEntry<Real>> out;
    out.push_back({"stub.tok_emb", "stub", &m.tok_emb});
    collect_backbone<Real>("stub.vlm", "stub", m.vlm, out);
    out.push_back({"stub.lm_head_w", "stub", &m.lm_head_w});
    out.push_back({"stub.lm_head_b", "stub", &m.lm_head_b});
    out.push_back({"stub.native_w", "stub", &m.native_w});
    out.push_back({"stub.native_b", "stub", &m.native_b});
    out.push_back({"adapter.w1", "adapter", &m.adapter.w1});
    out.push_back({"adapter.b1", "adapter", &m.adapter.b1});
    out.push_back({"adapter.w2", "adapter", &m.adapter.w2});
    out.push_back({"adapter.b2", "adapter", &m.adapter.b2});
    out.push_back({"adapter.film_scale", "adapter", &m.adapter.film_scale});
    out.push_back({"adapter.film_shift", "adapter", &m.adapter.film_shift});
    collect_backbone<Real>("deep", "flow_deep", m.deep, out);
    out.push_back({"ngp.w", "ngp", &m.ngp_w});
    out.push_back({"ngp.b", "ngp", &m.ngp_b});
    for (size_t b = 0; b < m.shallow.blocks.size(); ++b) {
        std::string p = "shallow.b" + std::to_string(b);
        collect_backbone<Real>(p + ".bb", "shallow", m.shallow.blocks[b].bb, out);
        out.push_back({p + ".head_w", "shallow", &m.shallow.blocks[b].head_w});
        out.push_back({p + ".head_b", "shallow", &m.shallow.blocks[b].head_b});
    }
    out.push_back({"skips.w_vlm", "skips", &m.w_vlm});
    out.push_back({"skips.w_d", "skips", &m.w_d});
    return out;
}

inline const std::vector<std::string>& param_groups() {
    static const std::vector<std::string> g = {"stub",    "adapter", "flow_deep",
                                               "ngp",     "shallow", "skips"};
    return g;
}

template <class Real>
inline uint64_t group_checksum(ModelParams<Real>& m, const std::string& group) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& e : collect_tensors(m))
        if (e.group == group)
            h = fnv1a64(e.mat->data(), e.mat->size() * sizeof(Real), h);
    return h;
}

template <class Real>
inline ModelParams<Real> zeros_like(const ModelParams<Real>& m) {
    ModelParams<Real> g = m;
    for (auto& e : collect_tensors(g)) e.mat->zero();
    return g;
}

// ---------------------------------------------------------------------------
// adapter
// ---------------------------------------------------------------------------

template <class Real>
struct AdapterTape {
    Mat<Real> in;    // rows of u (or x for the native path; no tape needed there)
    Mat<Real> a1, act, a2, h;  // pre/post activations, pre/post layernorm
    std::vector<LnStats<Real>> ln_st;
    Real s = Real(0);
};

// out = ln(mlp(u)) * (1 + s*film_scale) + s*film_shift, rows independent
template <class Real>
inline void adapter_forward(const AdapterParams<Real>& a, const Mat<Real>& u, Real s,
                            Mat<Real>& out, int out_row0, AdapterTape<Real>* tape) {
    const int n = u.rows, h_dim = a.w1.rows, w = a.w2.rows;
    Mat<Real> a1(n, h_dim), act(n, h_dim), a2(n, w), hm(n, w);
    std::vector<LnStats<Real>> st(static_cast<size_t>(n));
    std::vector<Real> ones(size_t(w), Real(1)), zerosb(size_t(w), Real(0));
    linear_forward(a1, u, a.w1, a.b1);
    for (size_t i = 0; i < a1.size(); ++i) act.v[i] = gelu(a1.v[i]);
    linear_forward(a2, act, a.w2, a.b2);
    for (int i = 0; i < n; ++i) {
        st[size_t(i)] = layernorm_row(hm.row(i), a2.row(i), ones.data(), zerosb.data(), w,
                                      Real(kLnEps));
        Real* dst = out.row(out_row0 + i);
        const Real* hr = hm.row(i);
        for (int j = 0; j < w; ++j)
            dst[j] = hr[j] * (Real(1) + s * a.film_scale.v[size_t(j)]) +
                     s * a.film_shift.v[size_t(j)];
    }
    if (tape) {
        tape->in = u;
        tape->a1 = std::move(a1);
        tape->act = std::move(act);
        tape->a2 = std::move(a2);
        tape->h = std::move(hm);
        tape->ln_st = std::move(st);
        tape->s = s;
    }
}

template <class Real>
inline void adapter_backward(const AdapterParams<Real>& a, const AdapterTape<Real>& tape,
                             const Mat<Real>& dout, int row0, AdapterParams<Real>* grads,
                             Mat<Real>* du) {
    const int n = tape.in.rows, w = a.w2.rows;
    const Real s = tape.s;
    Mat<Real> dh(n, w), da2(n, w), dact(n, tape.act.cols), da1(n, tape.act.cols);
    std::vector<Real> ones(size_t(w), Real(1));
    for (int i = 0; i < n; ++i) {
        const Real* g = dout.row(row0 + i);
        const Real* hr = tape.h.row(i);
        Real* dhr = dh.row(i);
        for (int j = 0; j < w; ++j) {
            dhr[j] = g[j] * (Real(1) + s * a.film_scale.v[size_t(j)]);
            if (grads) {
                grads->film_scale.v[size_t(j)] += g[j] * hr[j] * s;
                grads->film_shift.v[size_t(j)] += g[j] * s;
            }
        }
        layernorm_backward_row(tape.a2.row(i), ones.data(), tape.ln_st[size_t(i)], dhr,
                               da2.row(i), static_cast<Real*>(nullptr),
                               static_cast<Real*>(nullptr), w);
    }
    dact.zero();
    linear_backward(tape.act, a.w2, da2, &dact, grads ? &grads->w2 : nullptr,
                    grads ? &grads->b2 : nullptr);
    for (size_t i = 0; i < dact.size(); ++i)
        da1.v[i] = dact.v[i] * gelu_grad(tape.a1.v[i]);
    linear_backward(tape.in, a.w1, da1, du, grads ? &grads->w1 : nullptr,
                    grads ? &grads->b1 : nullptr);
}

// ---------------------------------------------------------------------------
// teacher-forced fused forward
// ---------------------------------------------------------------------------

// `none` zeroes the stub stream's visual inputs; usable when no consumer of
// the stub's outputs sits at or after a visual position (stage-1 t2i loss).
enum class VisualPathway { adapter, native, none };

struct FusedOptions {
    bool use_skips = false;   // include W_vlm / W_d terms
    bool want_flow = true;    // run flow stream + NLL pieces
    bool want_text = true;    // text logits + cross-entropy pieces
    VisualPathway pathway = VisualPathway::adapter;
    bool record = false;      // keep tapes for backward
    bool skip_stats = false;  // collect contribution ratios / alignments
    double noise_level = 0.0; // adapter modulation input s
};

// per-position skip diagnostics at the fusion point
template <class Real>
struct SkipRecord {
    int position = 0;
    bool visual = false;
    Real base_norm = Real(0);
    Real proj_norm = Real(0);
    Real r = Real(0);  // |proj| / (|base| + |proj|)
    Real s = Real(0);  // cos(base, proj)
    bool degenerate = false;  // both norms zero
};

// base may be shorter than proj (a zero-padded latent): the dot product runs
// over the shorter length, norms over each vector's own length
template <class Real>
inline SkipRecord<Real> make_skip_record(int position, bool visual, const Real* base,
                                         int nb, const Real* proj, int np) {
    SkipRecord<Real> rec;
    rec.position = position;
    rec.visual = visual;
    Real bn = Real(0), pn = Real(0), dp = Real(0);
    for (int i = 0; i < nb; ++i) bn += base[i] * base[i];
    for (int i = 0; i < np; ++i) pn += proj[i] * proj[i];
    const int nd = std::min(nb, np);
    for (int i = 0; i < nd; ++i) dp += base[i] * proj[i];
    bn = std::sqrt(bn);
    pn = std::sqrt(pn);
    rec.base_norm = bn;
    rec.proj_norm = pn;
    if (bn + pn > Real(0)) {
        rec.r = pn / (bn + pn);
        rec.s = (bn > Real(0) && pn > Real(0)) ? dp / (bn * pn) : Real(0);
    } else {
        rec.degenerate = true;
    }
    return rec;
}

template <class Real>
struct FusedForward {
    int t_len = 0;
    std::vector<int> visual_pos;   // global position of stacked visual row m
    Mat<Real> u_stack;             // (sum N) x D intermediate latents
    Real logdet_shallow = Real(0);
    Mat<Real> y_vlm;               // T x Wv
    Mat<Real> y_d;                 // T x Wf (when flow stream ran)
    bool deep_ran = false;
    FlowParams<Real> flow;         // stacked over visual rows
    Mat<Real> ngp_raw;             // pre-clamp head output
    VisualNll<Real> nll;           // includes z
    ClampStats clamp;
    std::vector<int> text_targets; // positions p >= 1 predicted by the text head
    Mat<Real> text_logits;         // |targets| x vocab
    Mat<Real> text_probs;          // softmax rows (for backward)
    Real ntp_total = Real(0);      // sum of -log p over targets
    std::vector<SkipRecord<Real>> skip_records;

    // tapes
    FusedOptions opts;
    std::vector<ShallowTape<Real>> shallow_tapes;
    std::vector<AdapterTape<Real>> adapter_tapes;
    Mat<Real> vlm_in;
    BackboneTape<Real> vlm_tape;
    Mat<Real> chat;                // flow-stream inputs c_hat, T x Wf
    BackboneTape<Real> deep_tape;
    Mat<Real> text_pre;            // fused pre-logit rows (y_vlm + W_d y_d)
};

template <class Real>
inline FusedForward<Real> fused_forward(const ModelParams<Real>& m,
                                        const MultimodalSequence<Real>& seq,
                                        const FusedOptions& opts) {
    const auto& cfg = m.cfg;
    validate_sequence(seq, cfg.n_latents, cfg.d_latent);
    const int t_len = seq.length();
    require(t_len <= cfg.vlm.max_seq, ErrorKind::capacity, "sequence exceeds max_seq");

    FusedForward<Real> f;
    f.opts = opts;
    f.t_len = t_len;

    const int n_img = int(seq.images.size());
    const int n_vis = n_img * cfg.n_latents;

    // shallow stack per image -> u
    std::vector<Mat<Real>> u(static_cast<size_t>(n_img));
    f.u_stack.resize(n_vis, cfg.d_latent);
    if (opts.record) f.shallow_tapes.assign(size_t(n_img), {});
    for (int i = 0; i < n_img; ++i) {
        auto r = shallow_forward(m.shallow, seq.images[size_t(i)],
                                 opts.record ? &f.shallow_tapes[size_t(i)] : nullptr,
                                 &f.clamp);
        u[size_t(i)] = std::move(r.output);
        f.logdet_shallow += r.logdet;
        for (int n = 0; n < cfg.n_latents; ++n)
            for (int d = 0; d < cfg.d_latent; ++d)
                f.u_stack.at(i * cfg.n_latents + n, d) = u[size_t(i)].at(n, d);
    }
    for (const auto& s : seq.spans)
        for (int n = 0; n < s.n; ++n) f.visual_pos.push_back(s.start + n);

    // stub-stream inputs
    f.vlm_in.resize(t_len, cfg.vlm.width);
    if (opts.record) f.adapter_tapes.assign(size_t(n_img), {});
    for (int t = 0; t < t_len; ++t)
        if (!seq.is_visual(t)) {
            const Real* e = m.tok_emb.row(seq.tokens[size_t(t)]);
            std::copy(e, e + cfg.vlm.width, f.vlm_in.row(t));
        }
    for (int i = 0; i < n_img; ++i) {
        const auto& span = seq.spans[size_t(i)];
        if (opts.pathway == VisualPathway::adapter) {
            adapter_forward(m.adapter, u[size_t(i)], Real(opts.noise_level), f.vlm_in,
                            span.start, opts.record ? &f.adapter_tapes[size_t(i)] : nullptr);
        } else if (opts.pathway == VisualPathway::native) {
            for (int n = 0; n < span.n; ++n)
                linear_row(f.vlm_in.row(span.start + n), seq.images[size_t(i)].row(n),
                           m.native_w, m.native_b);
        }
    }

    f.y_vlm = backbone_forward(m.vlm, f.vlm_in, MaskMode::causal,
                               opts.record ? &f.vlm_tape : nullptr);

    // flow stream runs when visual targets exist or the text head needs W_d
    f.deep_ran = opts.want_flow || (opts.want_text && opts.use_skips);
    if (f.deep_ran) {
        f.chat.resize(t_len, cfg.deep.width);
        for (int t = 0; t < t_len; ++t) {
            Real* c = f.chat.row(t);
            if (!seq.is_visual(t)) {
                std::copy(f.y_vlm.row(t), f.y_vlm.row(t) + cfg.deep.width, c);
            } else {
                int span_i = seq.span_of(t);
                const auto& span = seq.spans[size_t(span_i)];
                const Real* ur = u[size_t(span_i)].row(t - span.start);
                for (int d = 0; d < cfg.d_latent; ++d) c[d] = ur[d];
                if (opts.use_skips)
                    for (int o = 0; o < cfg.deep.width; ++o)
                        c[o] += dot(m.w_vlm.row(o), f.y_vlm.row(t), cfg.vlm.width);
                if (opts.skip_stats) {
                    std::vector<Real> proj(size_t(cfg.deep.width), Real(0));
                    if (opts.use_skips)
                        for (int o = 0; o < cfg.deep.width; ++o)
                            proj[size_t(o)] = dot(m.w_vlm.row(o), f.y_vlm.row(t), cfg.vlm.width);
                    f.skip_records.push_back(make_skip_record(t, true, ur, cfg.d_latent,
                                                              proj.data(), cfg.deep.width));
                }
            }
        }
        f.y_d = backbone_forward(m.deep, f.chat, MaskMode::self_exclusive,
                                 opts.record ? &f.deep_tape : nullptr);
    }

    // flow params + NLL at visual positions
    if (opts.want_flow && n_vis > 0) {
        f.ngp_raw.resize(n_vis, 2 * cfg.d_latent);
        f.flow.mu.resize(n_vis, cfg.d_latent);
        f.flow.log_sigma.resize(n_vis, cfg.d_latent);
        for (int v = 0; v < n_vis; ++v) {
            linear_row(f.ngp_raw.row(v), f.y_d.row(f.visual_pos[size_t(v)]), m.ngp_w,
                       m.ngp_b);
            for (int d = 0; d < cfg.d_latent; ++d) {
                f.flow.mu.at(v, d) = f.ngp_raw.at(v, d);
                f.flow.log_sigma.at(v, d) = clamp_log_sigma(
                    Real(kLogSigmaHeadScale) * f.ngp_raw.at(v, cfg.d_latent + d), &f.clamp);
            }
        }
        f.nll = nll_visual(f.u_stack, f.flow, f.logdet_shallow);
    }

    // text head
    if (opts.want_text) {
        for (int p = 1; p < t_len; ++p)
            if (!seq.is_visual(p)) f.text_targets.push_back(p);
        const int n_tgt = int(f.text_targets.size());
        f.text_logits.resize(n_tgt, cfg.vocab_size);
        f.text_probs.resize(n_tgt, cfg.vocab_size);
        f.text_pre.resize(n_tgt, cfg.vlm.width);
        for (int i = 0; i < n_tgt; ++i) {
            const int p = f.text_targets[size_t(i)];
            Real* pre = f.text_pre.row(i);
            std::copy(f.y_vlm.row(p - 1), f.y_vlm.row(p - 1) + cfg.vlm.width, pre);
            if (opts.use_skips) {
                std::vector<Real> corr(static_cast<size_t>(cfg.vlm.width));
                for (int o = 0; o < cfg.vlm.width; ++o)
                    corr[size_t(o)] = dot(m.w_d.row(o), f.y_d.row(p), cfg.deep.width);
                for (int o = 0; o < cfg.vlm.width; ++o) pre[o] += corr[size_t(o)];
                if (opts.skip_stats)
                    f.skip_records.push_back(make_skip_record(p, false, f.y_vlm.row(p - 1),
                                                              cfg.vlm.width, corr.data(),
                                                              cfg.vlm.width));
            }
            linear_row(f.text_logits.row(i), pre, m.lm_head_w, m.lm_head_b);
            // cross entropy
            const Real* lg = f.text_logits.row(i);
            Real lse = logsumexp(lg, cfg.vocab_size);
            const int target = seq.tokens[size_t(p)];
            f.ntp_total += lse - lg[target];
            Real* pr = f.text_probs.row(i);
            for (int k = 0; k < cfg.vocab_size; ++k) pr[k] = std::exp(lg[k] - lse);
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// fused backward
// ---------------------------------------------------------------------------

struct GradMask {
    bool stub = false;
    bool adapter = false;
    bool flow_deep = false;
    bool ngp = false;
    bool shallow = false;
    bool skips = false;
};

// helper: accumulate into the per-image d_u layout
template <class Real>
inline void accum_du(std::vector<Mat<Real>>& d_u, int n_latents, int v, int d, Real g) {
    d_u[size_t(v / n_latents)].at(v % n_latents, d) += g;
}

// helper: single-row dW/db accumulation for the native visual map
template <class Real>
inline void linear_backward_row(const Real* x, const Mat<Real>& w, const Real* dy,
                                Mat<Real>& dw, Mat<Real>& db) {
    for (int o = 0; o < w.rows; ++o) {
        if (dy[o] == Real(0)) continue;
        axpy(dw.row(o), dy[o], x, w.cols);
        db.v[size_t(o)] += dy[o];
    }
}

// Accumulates d(loss)/d(params) into `grads` for the unmasked groups, where
// loss = w_nf * nll.total + w_ntp * ntp_total for this sequence. Batch-level
// normalizations are folded into the weights by the caller.
template <class Real>
inline void fused_backward(const ModelParams<Real>& m, const MultimodalSequence<Real>& seq,
                           const FusedForward<Real>& f, Real w_nf, Real w_ntp,
                           ModelParams<Real>& grads, const GradMask& mask) {
    require(f.opts.record, ErrorKind::state, "backward without a recorded forward");
    const auto& cfg = m.cfg;
    const int t_len = f.t_len;
    const int n_img = int(seq.images.size());
    const int n_vis = n_img * cfg.n_latents;

    Mat<Real> d_y_vlm(t_len, cfg.vlm.width);
    Mat<Real> d_y_d;
    if (f.deep_ran) d_y_d.resize(t_len, cfg.deep.width);
    std::vector<Mat<Real>> d_u(static_cast<size_t>(n_img));
    for (auto& g : d_u) g.resize(cfg.n_latents, cfg.d_latent);

    // text cross-entropy path
    if (f.opts.want_text && w_ntp != Real(0)) {
        const int n_tgt = int(f.text_targets.size());
        Mat<Real> dlogits(n_tgt, cfg.vocab_size);
        for (int i = 0; i < n_tgt; ++i) {
            const int p = f.text_targets[size_t(i)];
            const Real* pr = f.text_probs.row(i);
            Real* dl = dlogits.row(i);
            for (int k = 0; k < cfg.vocab_size; ++k) dl[k] = w_ntp * pr[k];
            dl[seq.tokens[size_t(p)]] -= w_ntp;
        }
        Mat<Real> d_pre(n_tgt, cfg.vlm.width);
        linear_backward(f.text_pre, m.lm_head_w, dlogits, &d_pre,
                        mask.stub ? &grads.lm_head_w : nullptr,
                        mask.stub ? &grads.lm_head_b : nullptr);
        for (int i = 0; i < n_tgt; ++i) {
            const int p = f.text_targets[size_t(i)];
            axpy(d_y_vlm.row(p - 1), Real(1), d_pre.row(i), cfg.vlm.width);
            if (f.opts.use_skips) {
                // pre = y_vlm[p-1] + w_d y_d[p]
                const Real* g = d_pre.row(i);
                if (mask.skips)
                    for (int o = 0; o < cfg.vlm.width; ++o)
                        if (g[o] != Real(0))
                            axpy(grads.w_d.row(o), g[o], f.y_d.row(p), cfg.deep.width);
                Real* dyd = d_y_d.row(p);
                for (int o = 0; o < cfg.vlm.width; ++o)
                    if (g[o] != Real(0)) axpy(dyd, g[o], m.w_d.row(o), cfg.deep.width);
            }
        }
    }

    // visual NLL path
    if (f.opts.want_flow && n_vis > 0 && w_nf != Real(0)) {
        Mat<Real> draw(n_vis, 2 * cfg.d_latent);
        for (int v = 0; v < n_vis; ++v) {
            for (int d = 0; d < cfg.d_latent; ++d) {
                Real z = f.nll.z.at(v, d);
                Real inv_sigma = std::exp(-f.flow.log_sigma.at(v, d));
                Real du_direct = w_nf * z * inv_sigma;
                accum_du(d_u, cfg.n_latents, v, d, du_direct);
                draw.at(v, d) = -du_direct;  // d mu
                Real pre = Real(kLogSigmaHeadScale) * f.ngp_raw.at(v, cfg.d_latent + d);
                bool active = pre > Real(kLogSigmaMin) && pre < Real(kLogSigmaMax);
                draw.at(v, cfg.d_latent + d) =
                    active ? Real(kLogSigmaHeadScale) * w_nf * (Real(1) - z * z) : Real(0);
            }
        }
        // ngp head backward into d_y_d
        for (int v = 0; v < n_vis; ++v) {
            const int p = f.visual_pos[size_t(v)];
            const Real* g = draw.row(v);
            Real* dyd = d_y_d.row(p);
            for (int o = 0; o < 2 * cfg.d_latent; ++o) {
                if (g[o] == Real(0)) continue;
                axpy(dyd, g[o], m.ngp_w.row(o), cfg.deep.width);
                if (mask.ngp) {
                    axpy(grads.ngp_w.row(o), g[o], f.y_d.row(p), cfg.deep.width);
                    grads.ngp_b.v[size_t(o)] += g[o];
                }
            }
        }
    }

    // flow-stream backbone backward
    if (f.deep_ran) {
        Mat<Real> d_chat(t_len, cfg.deep.width);
        backbone_backward(m.deep, f.deep_tape, d_y_d,
                          mask.flow_deep ? &grads.deep : nullptr, &d_chat);
        for (int t = 0; t < t_len; ++t) {
            const Real* g = d_chat.row(t);
            if (!seq.is_visual(t)) {
                axpy(d_y_vlm.row(t), Real(1), g, cfg.vlm.width);
            } else {
                int si = seq.span_of(t);
                int r = t - seq.spans[size_t(si)].start;
                for (int d = 0; d < cfg.d_latent; ++d) d_u[size_t(si)].at(r, d) += g[d];
                if (f.opts.use_skips) {
                    if (mask.skips)
                        for (int o = 0; o < cfg.deep.width; ++o)
                            if (g[o] != Real(0))
                                axpy(grads.w_vlm.row(o), g[o], f.y_vlm.row(t), cfg.vlm.width);
                    Real* dy = d_y_vlm.row(t);
                    for (int o = 0; o < cfg.deep.width; ++o)
                        if (g[o] != Real(0)) axpy(dy, g[o], m.w_vlm.row(o), cfg.vlm.width);
                }
            }
        }
    }

    // stub-stream backward: needed when the stub trains, or when gradients
    // must pass through it into the adapter / shallow stack
    const bool adapter_path_live =
        f.opts.pathway == VisualPathway::adapter && n_img > 0 &&
        (mask.adapter || mask.shallow);
    if (mask.stub || adapter_path_live) {
        Mat<Real> d_vlm_in(t_len, cfg.vlm.width);
        backbone_backward(m.vlm, f.vlm_tape, d_y_vlm, mask.stub ? &grads.vlm : nullptr,
                          &d_vlm_in);
        for (int t = 0; t < t_len; ++t)
            if (!seq.is_visual(t) && mask.stub)
                axpy(grads.tok_emb.row(seq.tokens[size_t(t)]), Real(1), d_vlm_in.row(t),
                     cfg.vlm.width);
        for (int i = 0; i < n_img; ++i) {
            const auto& span = seq.spans[size_t(i)];
            if (f.opts.pathway == VisualPathway::adapter) {
                adapter_backward(m.adapter, f.adapter_tapes[size_t(i)], d_vlm_in,
                                 span.start, mask.adapter ? &grads.adapter : nullptr,
                                 &d_u[size_t(i)]);
            } else if (f.opts.pathway == VisualPathway::native && mask.stub) {
                for (int n = 0; n < span.n; ++n)
                    linear_backward_row(seq.images[size_t(i)].row(n), m.native_w,
                                        d_vlm_in.row(span.start + n), grads.native_w,
                                        grads.native_b);
            }
        }
    }

    // shallow stack backward per image; upstream d logdet_S = -w_nf
    if (mask.shallow && f.opts.want_flow) {
        for (int i = 0; i < n_img; ++i)
            shallow_backward(m.shallow, f.shallow_tapes[size_t(i)], d_u[size_t(i)],
                             -w_nf, &grads.shallow.blocks, static_cast<Mat<Real>*>(nullptr));
    }
}

}  // namespace flowlm
