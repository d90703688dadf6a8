#pragma once

// Incremental decoding over both streams with shared position indexing.
//
// Protocol: consuming position t advances the stub cache by one and tops the
// flow cache up through slot t (slot s attends to c_hat[<s]; slot 0 takes the
// learned start vector). Predicting position t+1 advances the flow cache one
// slot further, so every sequence position costs exactly one step per stream
// and nothing is ever recomputed or re-encoded.

#include <vector>

#include "flowlm/codec.hpp"
#include "flowlm/model.hpp"

namespace flowlm {

struct GenCounters {
    long vlm_steps = 0;
    long deep_steps = 0;
    long full_prefix_forwards = 0;
};

template <class Real>
class GenSession {
public:
    GenSession(const ModelParams<Real>& m, bool use_deep = true,
               VisualPathway pathway = VisualPathway::adapter)
        : m_(&m), use_deep_(use_deep), pathway_(pathway) {
        vlm_cache_.reset(m.cfg.vlm);
        if (use_deep_) {
            deep_cache_.reset(m.cfg.deep);
            chat_.resize(m.cfg.deep.max_seq, m.cfg.deep.width);
        }
        y_vlm_last_.assign(size_t(m.cfg.vlm.width), Real(0));
        y_d_pred_.assign(size_t(m.cfg.deep.width), Real(0));
    }

    int consumed() const { return consumed_; }
    const GenCounters& counters() const { return counters_; }
    const std::vector<Real>& last_hidden() const { return y_vlm_last_; }

    void consume_token(int token_id) {
        require(token_id >= 0 && token_id < m_->cfg.vocab_size, ErrorKind::tokenization,
                "token id out of range");
        step_vlm_(m_->tok_emb.row(token_id));
        finish_consume_(nullptr);
    }

    // u_row: intermediate latent (D); x_row: codec latent, required only for
    // the native pathway
    void consume_visual(const Real* u_row, const Real* x_row = nullptr) {
        const auto& cfg = m_->cfg;
        std::vector<Real> e(size_t(cfg.vlm.width), Real(0));
        if (pathway_ == VisualPathway::adapter) {
            Mat<Real> u1(1, cfg.d_latent);
            std::copy(u_row, u_row + cfg.d_latent, u1.row(0));
            Mat<Real> out(1, cfg.vlm.width);
            adapter_forward(m_->adapter, u1, Real(0), out, 0,
                            static_cast<AdapterTape<Real>*>(nullptr));
            std::copy(out.row(0), out.row(0) + cfg.vlm.width, e.begin());
        } else if (pathway_ == VisualPathway::native) {
            require(x_row != nullptr, ErrorKind::state, "native pathway needs codec latents");
            linear_row(e.data(), x_row, m_->native_w, m_->native_b);
        }
        step_vlm_(e.data());
        finish_consume_(u_row);
    }

    // logits for the next position; requires at least one consumed position
    std::vector<Real> predict_text_logits() {
        require(consumed_ >= 1, ErrorKind::state, "predict before any consumed position");
        std::vector<Real> pre(y_vlm_last_);
        if (use_deep_) {
            advance_deep_(consumed_);
            for (int o = 0; o < m_->cfg.vlm.width; ++o)
                pre[size_t(o)] += dot(m_->w_d.row(o), y_d_pred_.data(), m_->cfg.deep.width);
        }
        std::vector<Real> logits(static_cast<size_t>(m_->cfg.vocab_size));
        linear_row(logits.data(), pre.data(), m_->lm_head_w, m_->lm_head_b);
        return logits;
    }

    // (mu, log_sigma) for the next position as a visual latent
    void predict_flow_params(Real* mu, Real* log_sigma) {
        require(use_deep_, ErrorKind::state, "flow prediction requires the flow stream");
        advance_deep_(consumed_);
        const int d = m_->cfg.d_latent;
        std::vector<Real> raw(static_cast<size_t>(2 * d));
        linear_row(raw.data(), y_d_pred_.data(), m_->ngp_w, m_->ngp_b);
        for (int j = 0; j < d; ++j) {
            mu[j] = raw[size_t(j)];
            log_sigma[j] = clamp_log_sigma(Real(kLogSigmaHeadScale) * raw[size_t(d + j)]);
        }
    }

    GenSession snapshot() const { return *this; }

private:
    void step_vlm_(const Real* e) {
        auto y = backbone_step(m_->vlm, vlm_cache_, e);
        std::swap(y_vlm_last_, y);
        ++counters_.vlm_steps;
    }

    void finish_consume_(const Real* u_row) {
        const auto& cfg = m_->cfg;
        if (use_deep_) {
            Real* c = chat_.row(consumed_);
            if (u_row) {
                for (int o = 0; o < cfg.deep.width; ++o) c[o] = Real(0);
                for (int j = 0; j < cfg.d_latent; ++j) c[j] = u_row[j];
                for (int o = 0; o < cfg.deep.width; ++o)
                    c[o] += dot(m_->w_vlm.row(o), y_vlm_last_.data(), cfg.vlm.width);
            } else {
                std::copy(y_vlm_last_.begin(), y_vlm_last_.end(), c);
            }
        }
        ++consumed_;
        if (use_deep_) advance_deep_(consumed_ - 1);
    }

    // step flow slots until `slot` has been processed (filled > slot)
    void advance_deep_(int slot) {
        while (deep_cache_.filled <= slot) {
            const int s = deep_cache_.filled;
            const Real* in = s == 0 ? m_->deep.start.row(0) : chat_.row(s - 1);
            auto y = backbone_step(m_->deep, deep_cache_, in);
            std::swap(y_d_pred_, y);
            ++counters_.deep_steps;
        }
    }

    const ModelParams<Real>* m_;
    bool use_deep_;
    VisualPathway pathway_;
    KVCache<Real> vlm_cache_, deep_cache_;
    Mat<Real> chat_;
    std::vector<Real> y_vlm_last_, y_d_pred_;
    int consumed_ = 0;
    GenCounters counters_;
};

// ---------------------------------------------------------------------------
// sampling / decoding entry points
// ---------------------------------------------------------------------------

// greedy argmax, lowest id wins ties
template <class Real>
inline int argmax_token(const std::vector<Real>& logits) {
    int best = 0;
    for (int k = 1; k < int(logits.size()); ++k)
        if (logits[size_t(k)] > logits[size_t(best)]) best = k;
    return best;
}

// Draw one image span: N flow predictions, each fed straight back as context.
template <class Real>
inline Mat<Real> sample_image_span(GenSession<Real>& session, const ModelConfig& cfg,
                                   Rng& rng, double temperature) {
    Mat<Real> u(cfg.n_latents, cfg.d_latent);
    std::vector<Real> mu(static_cast<size_t>(cfg.d_latent)), ls(static_cast<size_t>(cfg.d_latent));
    for (int n = 0; n < cfg.n_latents; ++n) {
        session.predict_flow_params(mu.data(), ls.data());
        Real* row = u.row(n);
        for (int d = 0; d < cfg.d_latent; ++d) {
            Real z = Real(temperature) * Real(rng.gauss());
            row[d] = mu[size_t(d)] + std::exp(ls[size_t(d)]) * z;
        }
        session.consume_visual(row);
    }
    return u;
}

// consume an existing sequence (prompt) into a session
template <class Real>
inline void consume_sequence(GenSession<Real>& session, const ModelParams<Real>& m,
                             const MultimodalSequence<Real>& seq) {
    std::vector<Mat<Real>> u(seq.images.size());
    for (size_t i = 0; i < seq.images.size(); ++i)
        u[i] = shallow_forward(m.shallow, seq.images[i]).output;
    for (int t = 0; t < seq.length(); ++t) {
        if (seq.is_visual(t)) {
            int si = seq.span_of(t);
            int r = t - seq.spans[size_t(si)].start;
            session.consume_visual(u[size_t(si)].row(r), seq.images[size_t(si)].row(r));
        } else {
            session.consume_token(seq.tokens[size_t(t)]);
        }
    }
}

struct GenerateResult {
    GenCounters counters;
    long segment_positions = 0;  // positions appended by the last image segment
};

// Interleaved greedy generation: text via argmax; emitting <img> switches to
// flow sampling for exactly N latents, then </img> closes the span. Generated
// latents feed back through the caches only; the codec encoder is never
// touched.
template <class Real>
inline MultimodalSequence<Real> generate_interleaved(const ModelParams<Real>& m,
                                                     const MultimodalSequence<Real>& prompt,
                                                     Rng& rng, int max_tokens,
                                                     double temperature,
                                                     GenerateResult* info = nullptr) {
    const auto& cfg = m.cfg;
    GenSession<Real> session(m, true, VisualPathway::adapter);
    consume_sequence(session, m, prompt);
    MultimodalSequence<Real> seq = prompt;
    int emitted = 0;

    // prompts may end just inside an image: "... <img>"
    bool pending_image = !seq.tokens.empty() && seq.tokens.back() == Vocab::img_begin;
    while (emitted < max_tokens) {
        if (pending_image) {
            pending_image = false;
            long before = session.counters().vlm_steps;
            ImageSpan span{int(seq.tokens.size()), cfg.n_latents};
            Mat<Real> u = sample_image_span(session, cfg, rng, temperature);
            for (int n = 0; n < cfg.n_latents; ++n) seq.tokens.push_back(-1);
            seq.tokens.push_back(Vocab::img_end);
            session.consume_token(Vocab::img_end);
            seq.spans.push_back(span);
            seq.images.push_back(shallow_inverse(m.shallow, u));
            emitted += cfg.n_latents + 1;
            if (info) info->segment_positions = session.counters().vlm_steps - before;
            continue;
        }
        int tok = argmax_token(session.predict_text_logits());
        seq.tokens.push_back(tok);
        ++emitted;
        if (tok == Vocab::eos) break;
        session.consume_token(tok);
        if (tok == Vocab::img_begin) pending_image = true;
    }
    if (emitted >= max_tokens &&
        (seq.tokens.empty() || seq.tokens.back() != Vocab::eos))
        seq.truncated = true;
    if (info) info->counters = session.counters();
    return seq;
}

// caption -> one sampled latent block (codec space) and its decoded image
template <class Real>
struct T2iResult {
    Mat<Real> u;
    Mat<Real> x;
    ToyImage image;
    GenCounters counters;
};

template <class Real>
inline T2iResult<Real> generate_t2i(const ModelParams<Real>& m, const PatchCodec<Real>& codec,
                                    const std::vector<int>& caption_ids, Rng& rng,
                                    double temperature) {
    const auto& cfg = m.cfg;
    GenSession<Real> session(m, true, VisualPathway::adapter);
    session.consume_token(Vocab::bos);
    for (int id : caption_ids) session.consume_token(id);
    session.consume_token(Vocab::img_begin);
    T2iResult<Real> r;
    r.u = sample_image_span(session, cfg, rng, temperature);
    session.consume_token(Vocab::img_end);
    r.x = shallow_inverse(m.shallow, r.u);
    r.image = codec.decode(r.x);
    r.counters = session.counters();
    return r;
}

// greedy answer decoding; `use_deep` false evaluates the bare stub pathway
template <class Real>
inline std::vector<int> answer_question(const ModelParams<Real>& m, const Mat<Real>& x,
                                        const std::vector<int>& question_ids,
                                        VisualPathway pathway, bool use_deep,
                                        int max_answer = 4) {
    MultimodalSequence<Real> prompt;
    prompt.tokens.push_back(Vocab::bos);
    append_image(prompt, x);
    prompt.tokens.insert(prompt.tokens.end(), question_ids.begin(), question_ids.end());
    GenSession<Real> session(m, use_deep, pathway);
    consume_sequence(session, m, prompt);
    std::vector<int> out;
    for (int i = 0; i < max_answer; ++i) {
        int tok = argmax_token(session.predict_text_logits());
        if (tok == Vocab::eos) break;
        out.push_back(tok);
        session.consume_token(tok);
    }
    return out;
}

}  // namespace flowlm
