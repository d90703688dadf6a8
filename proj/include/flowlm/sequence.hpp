#pragma once

// Interleaved multimodal sequences: text token ids plus contiguous visual
// spans of exactly N latent positions, delimited by <img> / </img> tokens.

#include <vector>

#include "flowlm/common.hpp"
#include "flowlm/mat.hpp"
#include "flowlm/vocab.hpp"

namespace flowlm {

struct ImageSpan {
    int start = 0;  // first visual position
    int n = 0;
};

template <class Real>
struct MultimodalSequence {
    std::vector<int> tokens;        // token id per position, -1 at visual positions
    std::vector<ImageSpan> spans;   // ordered, non-overlapping
    std::vector<Mat<Real>> images;  // codec latents (N x D) per span
    bool truncated = false;         // generation hit max_tokens

    int length() const { return int(tokens.size()); }

    bool is_visual(int t) const { return tokens[size_t(t)] < 0; }

    // span index for a visual position, -1 for text
    int span_of(int t) const {
        for (int i = 0; i < int(spans.size()); ++i) {
            const auto& s = spans[size_t(i)];
            if (t >= s.start && t < s.start + s.n) return i;
        }
        return -1;
    }
};

template <class Real>
inline void validate_sequence(const MultimodalSequence<Real>& seq, int n_latents,
                              int d_latent) {
    const int t_len = seq.length();
    require(t_len > 0, ErrorKind::shape, "empty sequence");
    require(seq.spans.size() == seq.images.size(), ErrorKind::shape,
            "span/latent count mismatch");
    int prev_end = -1;
    for (size_t i = 0; i < seq.spans.size(); ++i) {
        const auto& s = seq.spans[i];
        require(s.n == n_latents, ErrorKind::shape, "image span must hold exactly N latents");
        require(s.start > prev_end, ErrorKind::shape, "overlapping or unordered spans");
        require(s.start >= 1 && s.start + s.n < t_len, ErrorKind::shape,
                "span must leave room for <img>/</img> delimiters");
        require(seq.tokens[size_t(s.start - 1)] == Vocab::img_begin, ErrorKind::shape,
                "span must be preceded by <img>");
        require(seq.tokens[size_t(s.start + s.n)] == Vocab::img_end, ErrorKind::shape,
                "span must be followed by </img>");
        for (int t = s.start; t < s.start + s.n; ++t)
            require(seq.tokens[size_t(t)] == -1, ErrorKind::shape,
                    "visual position holds a token id");
        require(seq.images[i].rows == n_latents && seq.images[i].cols == d_latent,
                ErrorKind::shape, "latent block shape mismatch");
        prev_end = s.start + s.n;
    }
    for (int t = 0; t < t_len; ++t)
        if (seq.tokens[size_t(t)] < 0)
            require(seq.span_of(t) >= 0, ErrorKind::shape,
                    "visual marker outside any span");
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

template <class Real>
inline void append_image(MultimodalSequence<Real>& seq, const Mat<Real>& x) {
    seq.tokens.push_back(Vocab::img_begin);
    ImageSpan span{int(seq.tokens.size()), x.rows};
    for (int i = 0; i < x.rows; ++i) seq.tokens.push_back(-1);
    seq.tokens.push_back(Vocab::img_end);
    seq.spans.push_back(span);
    seq.images.push_back(x);
}

template <class Real>
inline MultimodalSequence<Real> seq_text_only(const std::vector<int>& caption) {
    MultimodalSequence<Real> s;
    s.tokens.push_back(Vocab::bos);
    s.tokens.insert(s.tokens.end(), caption.begin(), caption.end());
    s.tokens.push_back(Vocab::eos);
    return s;
}

// <bos> caption <img> latents </img> <eos>
template <class Real>
inline MultimodalSequence<Real> seq_t2i(const std::vector<int>& caption, const Mat<Real>& x) {
    MultimodalSequence<Real> s;
    s.tokens.push_back(Vocab::bos);
    s.tokens.insert(s.tokens.end(), caption.begin(), caption.end());
    append_image(s, x);
    s.tokens.push_back(Vocab::eos);
    return s;
}

// <bos> <img> latents </img> text <eos>
template <class Real>
inline MultimodalSequence<Real> seq_i2t(const Mat<Real>& x, const std::vector<int>& text) {
    MultimodalSequence<Real> s;
    s.tokens.push_back(Vocab::bos);
    append_image(s, x);
    s.tokens.insert(s.tokens.end(), text.begin(), text.end());
    s.tokens.push_back(Vocab::eos);
    return s;
}

// <bos> cap1 <img> x1 </img> and cap2 <img> x2 </img> <eos>
template <class Real>
inline MultimodalSequence<Real> seq_interleaved(const std::vector<int>& cap1,
                                                const Mat<Real>& x1,
                                                const std::vector<int>& cap2,
                                                const Mat<Real>& x2) {
    MultimodalSequence<Real> s;
    s.tokens.push_back(Vocab::bos);
    s.tokens.insert(s.tokens.end(), cap1.begin(), cap1.end());
    append_image(s, x1);
    s.tokens.push_back(vocab().id("and"));
    s.tokens.insert(s.tokens.end(), cap2.begin(), cap2.end());
    append_image(s, x2);
    s.tokens.push_back(Vocab::eos);
    return s;
}

}  // namespace flowlm
