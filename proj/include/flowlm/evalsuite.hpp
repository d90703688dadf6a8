#pragma once

// Evaluation harnesses: classify-scored text-to-image generation and
// stub-understanding accuracy (teacher-forced captioning + greedy QA).

#include <filesystem>
#include <fstream>
#include <vector>

#include "flowlm/dataset.hpp"
#include "flowlm/generation.hpp"
#include "flowlm/model.hpp"

namespace flowlm {

// ---------------------------------------------------------------------------
// generation suite
// ---------------------------------------------------------------------------

struct GenEvalRow {
    int index = 0;
    ToyScene truth;
    ToyScene predicted;
    bool shape_ok = false, color_ok = false, pos_ok = false, exact = false;
};

struct GenEvalSummary {
    int n = 0;
    double shape_acc = 0, color_acc = 0, pos_acc = 0, exact_acc = 0;
};

// deterministic single-object prompt set shared across checkpoints
inline std::vector<ToyScene> gen_eval_prompts(int n, uint64_t seed) {
    Rng rng(derive_seed(seed, "gen-eval"));
    std::vector<ToyScene> out(static_cast<size_t>(n));
    for (auto& s : out) s = sample_single_object_scene(rng);
    return out;
}

template <class Real>
inline GenEvalSummary eval_generation(const ModelParams<Real>& m,
                                      const PatchCodec<Real>& codec,
                                      const std::vector<ToyScene>& prompts,
                                      uint64_t seed, double temperature, int threads,
                                      std::vector<GenEvalRow>* rows_out = nullptr) {
    const auto& v = vocab();
    std::vector<GenEvalRow> rows(prompts.size());
    const int n_chunks = std::max(1, threads);
    const size_t per = (prompts.size() + size_t(n_chunks) - 1) / size_t(n_chunks);
    run_chunks(n_chunks, threads, [&](int c) {
        for (size_t i = size_t(c) * per; i < std::min(prompts.size(), (size_t(c) + 1) * per);
             ++i) {
            Rng rng(derive_seed(seed, "gen-eval-sample", i));
            auto caption = v.encode(caption_words(prompts[i]));
            auto res = generate_t2i(m, codec, caption, rng, temperature);
            GenEvalRow row;
            row.index = int(i);
            row.truth = prompts[i];
            row.predicted = classify(res.image);
            const auto& t = prompts[i].objects[0];
            for (const auto& o : row.predicted.objects) {
                if (o.shape == t.shape) row.shape_ok = true;
                if (o.color == t.color) row.color_ok = true;
                if (o.cell == t.cell) row.pos_ok = true;
            }
            row.exact = row.predicted == prompts[i];
            rows[i] = row;
        }
    });
    GenEvalSummary s;
    s.n = int(rows.size());
    for (const auto& r : rows) {
        s.shape_acc += r.shape_ok;
        s.color_acc += r.color_ok;
        s.pos_acc += r.pos_ok;
        s.exact_acc += r.exact;
    }
    if (s.n) {
        s.shape_acc /= s.n;
        s.color_acc /= s.n;
        s.pos_acc /= s.n;
        s.exact_acc /= s.n;
    }
    if (rows_out) *rows_out = std::move(rows);
    return s;
}

inline void write_gen_eval_csv(const std::filesystem::path& path,
                               const std::vector<GenEvalRow>& rows,
                               const GenEvalSummary& s) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    os << "index,true_shape,true_color,true_cell,shape_ok,color_ok,pos_ok,exact\n";
    for (const auto& r : rows) {
        const auto& t = r.truth.objects[0];
        os << r.index << ',' << shape_word(t.shape) << ',' << color_word(t.color) << ','
           << t.cell << ',' << int(r.shape_ok) << ',' << int(r.color_ok) << ','
           << int(r.pos_ok) << ',' << int(r.exact) << "\n";
    }
    os << "summary," << s.n << ",," << s.shape_acc << ',' << s.color_acc << ','
       << s.pos_acc << ',' << s.exact_acc << "\n";
}

// ---------------------------------------------------------------------------
// understanding suite
// ---------------------------------------------------------------------------

struct UndEvalSummary {
    double caption_acc = 0;  // teacher-forced next-token accuracy on caption words
    double qa_acc = 0;       // greedy exact-match answer accuracy
    long caption_tokens = 0;
    long questions = 0;
};

template <class Real>
inline UndEvalSummary eval_understanding(const ModelParams<Real>& m,
                                         const std::vector<DataRecord>& held, int n,
                                         VisualPathway pathway, bool use_deep,
                                         int threads) {
    const auto& v = vocab();
    const int count = std::min<int>(n, int(held.size()));
    struct Cell {
        long cap_ok = 0, cap_n = 0, qa_ok = 0, qa_n = 0;
    };
    const int n_chunks = std::max(1, threads);
    std::vector<Cell> cells(static_cast<size_t>(n_chunks));
    const size_t per = (size_t(count) + size_t(n_chunks) - 1) / size_t(n_chunks);
    run_chunks(n_chunks, threads, [&](int c) {
        auto& cell = cells[size_t(c)];
        for (size_t i = size_t(c) * per; i < std::min(size_t(count), (size_t(c) + 1) * per);
             ++i) {
            const auto& rec = held[i];
            auto x = to_real<Real>(rec.latents);
            // teacher-forced caption accuracy
            auto seq = seq_i2t(x, rec.caption_tokens);
            FusedOptions o;
            o.want_flow = false;
            o.use_skips = use_deep;
            o.pathway = pathway;
            auto f = fused_forward(m, seq, o);
            const int cap_start = seq.spans[0].start + seq.spans[0].n + 1;  // after </img>
            for (size_t k = 0; k < f.text_targets.size(); ++k) {
                int p = f.text_targets[k];
                if (p < cap_start || p >= cap_start + int(rec.caption_tokens.size()))
                    continue;
                int best = 0;
                const Real* lg = f.text_logits.row(int(k));
                for (int t = 1; t < m.cfg.vocab_size; ++t)
                    if (lg[t] > lg[best]) best = t;
                cell.cap_ok += best == seq.tokens[size_t(p)];
                ++cell.cap_n;
            }
            // greedy QA
            for (const auto& qa : qa_pairs(rec.scene)) {
                auto ans = answer_question(m, x, v.encode(qa.question), pathway, use_deep);
                cell.qa_ok += !ans.empty() && ans[0] == v.id(qa.answer);
                ++cell.qa_n;
            }
        }
    });
    Cell total;
    for (const auto& c : cells) {
        total.cap_ok += c.cap_ok;
        total.cap_n += c.cap_n;
        total.qa_ok += c.qa_ok;
        total.qa_n += c.qa_n;
    }
    UndEvalSummary s;
    s.caption_tokens = total.cap_n;
    s.questions = total.qa_n;
    s.caption_acc = total.cap_n ? double(total.cap_ok) / double(total.cap_n) : 0.0;
    s.qa_acc = total.qa_n ? double(total.qa_ok) / double(total.qa_n) : 0.0;
    return s;
}

inline void write_und_eval_csv(const std::filesystem::path& path, const UndEvalSummary& s,
                               const std::string& label) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    os << "metric,value\n";
    os << "pathway," << label << "\n";
    os << "caption_acc," << s.caption_acc << "\n";
    os << "qa_acc," << s.qa_acc << "\n";
    os << "caption_tokens," << s.caption_tokens << "\n";
    os << "questions," << s.questions << "\n";
}

// mean visual NLL over records, optionally with captions shuffled against
// latents (the conditioning probe)
template <class Real>
inline double mean_nll_per_dim(const ModelParams<Real>& m,
                               const std::vector<DataRecord>& recs, int n, bool shuffle,
                               uint64_t seed) {
    const int count = std::min<int>(n, int(recs.size()));
    std::vector<int> caption_of(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) caption_of[size_t(i)] = i;
    if (shuffle) {
        Rng rng(derive_seed(seed, "caption-shuffle"));
        rng.shuffle(caption_of);
    }
    double total = 0;
    long dims = 0;
    for (int i = 0; i < count; ++i) {
        auto seq = seq_t2i(recs[size_t(caption_of[size_t(i)])].caption_tokens,
                           to_real<Real>(recs[size_t(i)].latents));
        FusedOptions o;
        o.want_text = false;
        o.pathway = VisualPathway::none;
        auto f = fused_forward(m, seq, o);
        total += double(f.nll.total);
        dims += long(f.u_stack.size());
    }
    return total / double(dims);
}

}  // namespace flowlm
