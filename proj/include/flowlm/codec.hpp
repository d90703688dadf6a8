#pragma once

// Linear patch autoencoder over 24x24 toy images: 16 patches of 6x6x3 pixels,
// each projected to 8 channels by a shared PCA basis, then normalized per
// channel to roughly zero mean / unit variance over the fit corpus.

#include <cmath>
#include <vector>

#include "flowlm/common.hpp"
#include "flowlm/mat.hpp"
#include "flowlm/scene.hpp"

namespace flowlm {

constexpr int kLatentTokens = 16;  // 4x4 patch grid
constexpr int kLatentDim = 8;
constexpr int kPatchSize = 6;
constexpr int kPatchDim = kPatchSize * kPatchSize * 3;  // 108

template <class Real>
struct LatentBlock {
    Mat<Real> latents;  // N x D, raster patch order
    int src_h = kImageSize;
    int src_w = kImageSize;
};

namespace detail {

// Jacobi eigendecomposition of a symmetric matrix; deterministic sweep order.
template <class Real>
inline void jacobi_eigen(Mat<Real>& a, Mat<Real>& vecs, std::vector<Real>& vals) {
    const int n = a.rows;
    vecs.resize(n, n);
    for (int i = 0; i < n; ++i) vecs.at(i, i) = Real(1);
    for (int sweep = 0; sweep < 64; ++sweep) {
        Real off = Real(0);
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < Real(1e-22)) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                Real apq = a.at(p, q);
                if (std::abs(apq) < Real(1e-30)) continue;
                Real app = a.at(p, p), aqq = a.at(q, q);
                Real theta = (aqq - app) / (Real(2) * apq);
                Real t = (theta >= Real(0) ? Real(1) : Real(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + Real(1)));
                Real c = Real(1) / std::sqrt(t * t + Real(1));
                Real s = t * c;
                for (int k = 0; k < n; ++k) {
                    Real akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    Real apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    Real vkp = vecs.at(k, p), vkq = vecs.at(k, q);
                    vecs.at(k, p) = c * vkp - s * vkq;
                    vecs.at(k, q) = s * vkp + c * vkq;
                }
            }
    }
    vals.assign(size_t(n), Real(0));
    for (int i = 0; i < n; ++i) vals[size_t(i)] = a.at(i, i);
}

template <class Real>
inline void extract_patch(const ToyImage& img, int patch, Real* out) {
    int pr = (patch / 4) * kPatchSize;
    int pc = (patch % 4) * kPatchSize;
    int k = 0;
    for (int r = 0; r < kPatchSize; ++r)
        for (int c = 0; c < kPatchSize; ++c)
            for (int ch = 0; ch < 3; ++ch) out[k++] = Real(img.at(pr + r, pc + c, ch));
}

}  // namespace detail

template <class Real>
struct PatchCodec {
    Mat<Real> basis;      // D x 108, orthonormal rows (top principal directions)
    Mat<Real> patch_mean; // 1 x 108
    Mat<Real> ch_mean;    // 1 x D, latent-channel affine normalization
    Mat<Real> ch_std;     // 1 x D

    bool fitted() const { return basis.rows == kLatentDim; }

    // Least-squares fit on rendered scenes: shared patch PCA + channel stats.
    void fit(const std::vector<ToyScene>& scenes) {
        require(!scenes.empty(), ErrorKind::config, "codec fit needs scenes");
        patch_mean.resize(1, kPatchDim);
        double mean[kPatchDim] = {};
        double cov[kPatchDim][kPatchDim] = {};
        Real patch[kPatchDim];
        size_t count = 0;
        for (const auto& s : scenes) {
            ToyImage img = render_scene(s);
            for (int p = 0; p < kLatentTokens; ++p) {
                detail::extract_patch(img, p, patch);
                for (int i = 0; i < kPatchDim; ++i) mean[i] += double(patch[i]);
                ++count;
            }
        }
        for (int i = 0; i < kPatchDim; ++i) {
            mean[i] /= double(count);
            patch_mean.v[size_t(i)] = Real(mean[i]);
        }
        for (const auto& s : scenes) {
            ToyImage img = render_scene(s);
            for (int p = 0; p < kLatentTokens; ++p) {
                detail::extract_patch(img, p, patch);
                double d[kPatchDim];
                for (int i = 0; i < kPatchDim; ++i) d[i] = double(patch[i]) - mean[i];
                for (int i = 0; i < kPatchDim; ++i)
                    for (int j = i; j < kPatchDim; ++j) cov[i][j] += d[i] * d[j];
            }
        }
        Mat<Real> c(kPatchDim, kPatchDim);
        for (int i = 0; i < kPatchDim; ++i)
            for (int j = i; j < kPatchDim; ++j) {
                Real v = Real(cov[i][j] / double(count));
                c.at(i, j) = v;
                c.at(j, i) = v;
            }
        Mat<Real> vecs;
        std::vector<Real> vals;
        detail::jacobi_eigen(c, vecs, vals);
        // top-D eigenvectors by eigenvalue, sign-fixed for determinism
        std::vector<int> order(kPatchDim);
        for (int i = 0; i < kPatchDim; ++i) order[size_t(i)] = i;
        std::sort(order.begin(), order.end(),
                  [&](int a, int b) { return vals[size_t(a)] > vals[size_t(b)]; });
        basis.resize(kLatentDim, kPatchDim);
        for (int d = 0; d < kLatentDim; ++d) {
            int col = order[size_t(d)];
            int arg = 0;
            Real best = Real(0);
            for (int i = 0; i < kPatchDim; ++i) {
                Real v = vecs.at(i, col);
                if (std::abs(v) > std::abs(best)) {
                    best = v;
                    arg = i;
                }
            }
            Real sgn = vecs.at(arg, col) >= Real(0) ? Real(1) : Real(-1);
            for (int i = 0; i < kPatchDim; ++i) basis.at(d, i) = sgn * vecs.at(i, col);
        }
        // channel statistics of the raw projections
        ch_mean.resize(1, kLatentDim);
        ch_std.resize(1, kLatentDim);
        double cm[kLatentDim] = {}, cs[kLatentDim] = {};
        for (const auto& s : scenes) {
            ToyImage img = render_scene(s);
            for (int p = 0; p < kLatentTokens; ++p) {
                detail::extract_patch(img, p, patch);
                for (int i = 0; i < kPatchDim; ++i) patch[i] -= patch_mean.v[size_t(i)];
                for (int d = 0; d < kLatentDim; ++d) {
                    double y = double(dot(basis.row(d), patch, kPatchDim));
                    cm[d] += y;
                    cs[d] += y * y;
                }
            }
        }
        for (int d = 0; d < kLatentDim; ++d) {
            double m = cm[d] / double(count);
            double var = cs[d] / double(count) - m * m;
            ch_mean.v[size_t(d)] = Real(m);
            ch_std.v[size_t(d)] = Real(std::sqrt(std::max(var, 1e-12)));
        }
    }

    LatentBlock<Real> encode(const ToyImage& img) const {
        require(fitted(), ErrorKind::state, "codec not fitted");
        ++g_encode_calls;
        LatentBlock<Real> out;
        out.latents.resize(kLatentTokens, kLatentDim);
        Real patch[kPatchDim];
        for (int p = 0; p < kLatentTokens; ++p) {
            detail::extract_patch(img, p, patch);
            for (int i = 0; i < kPatchDim; ++i) patch[i] -= patch_mean.v[size_t(i)];
            Real* z = out.latents.row(p);
            for (int d = 0; d < kLatentDim; ++d)
                z[d] = (dot(basis.row(d), patch, kPatchDim) - ch_mean.v[size_t(d)]) /
                       ch_std.v[size_t(d)];
        }
        return out;
    }

    ToyImage decode(const Mat<Real>& latents) const {
        require(fitted(), ErrorKind::state, "codec not fitted");
        require(latents.rows == kLatentTokens && latents.cols == kLatentDim,
                ErrorKind::shape, "latent block must be 16x8");
        require(all_finite(latents.data(), latents.size()), ErrorKind::numeric,
                "latents contain non-finite values");
        ToyImage img;
        for (int p = 0; p < kLatentTokens; ++p) {
            const Real* z = latents.row(p);
            int pr = (p / 4) * kPatchSize;
            int pc = (p % 4) * kPatchSize;
            for (int i = 0; i < kPatchDim; ++i) {
                Real acc = patch_mean.v[size_t(i)];
                for (int d = 0; d < kLatentDim; ++d)
                    acc += basis.at(d, i) *
                           (z[d] * ch_std.v[size_t(d)] + ch_mean.v[size_t(d)]);
                int r = i / (kPatchSize * 3);
                int rem = i % (kPatchSize * 3);
                float v = float(acc);
                img.at(pr + r, pc + rem / 3, rem % 3) =
                    v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
            }
        }
        return img;
    }

    ToyImage decode(const LatentBlock<Real>& block) const { return decode(block.latents); }
};

}  // namespace flowlm
