#pragma once

// Skip-connection diagnostics at the fusion points:
//   visual: r = |W_vlm y_vlm| / (|u| + |W_vlm y_vlm|), s = cos(u, W_vlm y_vlm)
//   text:   r = |W_d y_d| / (|y_vlm| + |W_d y_d|),     s = cos(y_vlm, W_d y_d)
// collected by teacher-forcing the model over generated sequences.

#include <array>
#include <filesystem>
#include <fstream>
#include <vector>

#include "flowlm/generation.hpp"
#include "flowlm/model.hpp"

namespace flowlm {

struct SkipStatsSummary {
    long count = 0;
    long skipped = 0;  // degenerate records (both norms zero)
    double mean_r = 0;
    double mean_s = 0;
    std::array<long, 16> hist_r{};  // bins over [0, 1]
    std::array<long, 16> hist_s{};  // bins over [-1, 1]
};

template <class Real>
struct SkipStatsReport {
    std::vector<SkipRecord<Real>> vis;
    std::vector<SkipRecord<Real>> txt;
    SkipStatsSummary vis_summary;
    SkipStatsSummary txt_summary;
};

template <class Real>
inline SkipStatsSummary summarize_records(const std::vector<SkipRecord<Real>>& recs) {
    SkipStatsSummary s;
    for (const auto& r : recs) {
        if (r.degenerate) {
            ++s.skipped;
            continue;
        }
        ++s.count;
        s.mean_r += double(r.r);
        s.mean_s += double(r.s);
        int br = std::min(15, int(double(r.r) * 16.0));
        int bs = std::min(15, std::max(0, int((double(r.s) + 1.0) * 8.0)));
        ++s.hist_r[size_t(br)];
        ++s.hist_s[size_t(bs)];
    }
    if (s.count) {
        s.mean_r /= double(s.count);
        s.mean_s /= double(s.count);
    }
    return s;
}

// Generate one image per prompt, then teacher-force the completed sequence
// with stat collection on (cache parity makes this identical to the values
// seen during generation).
template <class Real>
inline SkipStatsReport<Real> collect_skip_stats(const ModelParams<Real>& m,
                                                const std::vector<ToyScene>& prompts,
                                                uint64_t seed, double temperature) {
    const auto& v = vocab();
    SkipStatsReport<Real> rep;
    for (size_t i = 0; i < prompts.size(); ++i) {
        Rng rng(derive_seed(seed, "analyze", i));
        auto caption = v.encode(caption_words(prompts[i]));
        GenSession<Real> session(m, true, VisualPathway::adapter);
        session.consume_token(Vocab::bos);
        for (int id : caption) session.consume_token(id);
        session.consume_token(Vocab::img_begin);
        Mat<Real> u = sample_image_span(session, m.cfg, rng, temperature);
        Mat<Real> x = shallow_inverse(m.shallow, u);

        MultimodalSequence<Real> seq;
        seq.tokens.push_back(Vocab::bos);
        seq.tokens.insert(seq.tokens.end(), caption.begin(), caption.end());
        append_image(seq, x);

        FusedOptions o;
        o.use_skips = true;
        o.skip_stats = true;
        auto f = fused_forward(m, seq, o);
        for (auto rec : f.skip_records) {
            rec.position = int(i) * 1000 + rec.position;  // prompt-tagged position
            (rec.visual ? rep.vis : rep.txt).push_back(rec);
        }
    }
    rep.vis_summary = summarize_records(rep.vis);
    rep.txt_summary = summarize_records(rep.txt);
    return rep;
}

template <class Real>
inline void write_skip_stats_csv(const std::filesystem::path& path,
                                 const std::vector<SkipRecord<Real>>& recs,
                                 const SkipStatsSummary& s) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    os << "kind,prompt,position,r,s,extra\n";
    for (const auto& r : recs)
        os << (r.visual ? "vis" : "txt") << ',' << r.position / 1000 << ','
           << r.position % 1000 << ',' << double(r.r) << ',' << double(r.s) << ','
           << (r.degenerate ? "degenerate" : "") << "\n";
    os << "summary," << s.count << ',' << s.skipped << ',' << s.mean_r << ',' << s.mean_s
       << ',';
    os << "hist_r:";
    for (size_t i = 0; i < s.hist_r.size(); ++i) os << (i ? "|" : "") << s.hist_r[i];
    os << ";hist_s:";
    for (size_t i = 0; i < s.hist_s.size(); ++i) os << (i ? "|" : "") << s.hist_s[i];
    os << "\n";
}

}  // namespace flowlm
