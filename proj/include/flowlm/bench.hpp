#pragma once

// Decoding benchmark: cached single-pass interleaved generation against a
// re-encode baseline that decodes each finished image, encodes it back, and
// rebuilds the whole prefix (the workflow the cached path makes unnecessary).

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowlm/generation.hpp"

namespace flowlm {

struct BenchReport {
    std::string mode;
    int turns = 0;
    int images = 0;
    long backbone_steps = 0;
    long full_prefix_forwards = 0;
    long codec_encode_calls = 0;
    double wall_ms = 0;
};

enum class BenchMode { cached_single_pass, reencode_baseline };

// scripted interleaved workload: each turn forces a caption, and image turns
// sample one image span
template <class Real>
inline BenchReport bench_decode(const ModelParams<Real>& m, const PatchCodec<Real>& codec,
                                int turns, int images, BenchMode mode, uint64_t seed,
                                double temperature) {
    require(turns >= 1 && images >= 0, ErrorKind::config, "bad workload");
    const auto& v = vocab();
    Rng scene_rng(derive_seed(seed, "bench-scenes"));
    Rng sample_rng(derive_seed(seed, "bench-sampling"));
    std::vector<std::vector<int>> captions(static_cast<size_t>(turns));
    for (auto& c : captions) c = v.encode(caption_words(sample_scene(scene_rng)));
    std::vector<int> images_in_turn(size_t(turns), images / turns);
    for (int k = 0; k < images % turns; ++k) ++images_in_turn[size_t(k)];

    BenchReport rep;
    rep.mode = mode == BenchMode::cached_single_pass ? "cached" : "reencode";
    rep.turns = turns;
    rep.images = images;
    const long encode_before = g_encode_calls;
    auto t0 = std::chrono::steady_clock::now();

    MultimodalSequence<Real> seq;
    seq.tokens.push_back(Vocab::bos);
    GenSession<Real> session(m, true, VisualPathway::adapter);
    session.consume_token(Vocab::bos);
    GenCounters totals;

    auto flush_counters = [&](GenSession<Real>& s) {
        totals.vlm_steps += s.counters().vlm_steps;
        totals.deep_steps += s.counters().deep_steps;
    };

    for (int turn = 0; turn < turns; ++turn) {
        for (int id : captions[size_t(turn)]) {
            seq.tokens.push_back(id);
            session.consume_token(id);
        }
        for (int j = 0; j < images_in_turn[size_t(turn)]; ++j) {
            seq.tokens.push_back(Vocab::img_begin);
            session.consume_token(Vocab::img_begin);
            ImageSpan span{int(seq.tokens.size()), m.cfg.n_latents};
            Mat<Real> u = sample_image_span(session, m.cfg, sample_rng, temperature);
            for (int n = 0; n < m.cfg.n_latents; ++n) seq.tokens.push_back(-1);
            seq.tokens.push_back(Vocab::img_end);
            session.consume_token(Vocab::img_end);
            seq.spans.push_back(span);
            Mat<Real> x = shallow_inverse(m.shallow, u);
            if (mode == BenchMode::cached_single_pass) {
                seq.images.push_back(std::move(x));
            } else {
                // decode -> re-encode -> replace latents -> rebuild the prefix
                ToyImage img = codec.decode(x);
                seq.images.push_back(to_real<Real>(codec.encode(img).latents));
                flush_counters(session);
                session = GenSession<Real>(m, true, VisualPathway::adapter);
                consume_sequence(session, m, seq);
                ++rep.full_prefix_forwards;
            }
        }
    }
    flush_counters(session);
    rep.backbone_steps = totals.vlm_steps + totals.deep_steps;
    rep.codec_encode_calls = g_encode_calls - encode_before;
    rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return rep;
}

inline void write_bench_csv(const std::filesystem::path& path,
                            const std::vector<BenchReport>& reports) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    os << "mode,turns,images,backbone_steps,full_prefix_forwards,codec_encode_calls,"
          "wall_ms\n";
    for (const auto& r : reports)
        os << r.mode << ',' << r.turns << ',' << r.images << ',' << r.backbone_steps << ','
           << r.full_prefix_forwards << ',' << r.codec_encode_calls << ',' << r.wall_ms
           << "\n";
}

inline std::string bench_summary_line(const BenchReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "%-8s turns=%d images=%d steps=%ld full_forwards=%ld encodes=%ld "
                  "wall=%.1fms",
                  r.mode.c_str(), r.turns, r.images, r.backbone_steps,
                  r.full_prefix_forwards, r.codec_encode_calls, r.wall_ms);
    return buf;
}

}  // namespace flowlm
