// scene / vocab / codec / rng / kernels

#include <doctest.h>

#include <cmath>
#include <set>

#include "flowlm/codec.hpp"
#include "flowlm/common.hpp"
#include "flowlm/mat.hpp"
#include "flowlm/scene.hpp"
#include "flowlm/vocab.hpp"

using namespace flowlm;

TEST_CASE("rng is deterministic and reasonable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng g(7);
    double mean = 0, var = 0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = g.gauss();
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("base64 round trip") {
    Rng rng(3);
    for (int len : {0, 1, 2, 3, 4, 17, 100}) {
        std::vector<unsigned char> data(static_cast<size_t>(len));
        for (auto& b : data) b = (unsigned char)rng.below(256);
        auto enc = base64_encode(data.data(), data.size());
        auto dec = base64_decode(enc);
        CHECK(dec == data);
    }
}

TEST_CASE("dot kernel matches naive reference") {
    Rng rng(5);
    for (int n : {1, 7, 16, 33, 128}) {
        const auto len = static_cast<size_t>(n);
        std::vector<double> a(len), b(len);
        for (int i = 0; i < n; ++i) {
            a[size_t(i)] = rng.gauss();
            b[size_t(i)] = rng.gauss();
        }
        double ref = 0;
        for (int i = 0; i < n; ++i) ref += a[size_t(i)] * b[size_t(i)];
        CHECK(std::abs(dot(a.data(), b.data(), n) - ref) < 1e-12);
    }
}

TEST_CASE("vocab has 48 entries and round trips") {
    const auto& v = vocab();
    CHECK(v.size() == 48);
    CHECK(v.id("<bos>") == Vocab::bos);
    CHECK(v.id("</img>") == Vocab::img_end);
    auto ids = v.encode_text("a red square at top-left");
    CHECK(v.decode(ids) == "a red square at top-left");
    CHECK_THROWS_AS((void)v.encode_text("a purple square"), Error);
}

TEST_CASE("renderer draws inside cells and is pure") {
    ToyScene s;
    s.objects = {{Shape::square, Color::red, 4}};
    ToyImage a = render_scene(s);
    ToyImage b = render_scene(s);
    CHECK(a.pix == b.pix);  // bit-identical
    // red pixels only inside the center cell
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
            bool in_cell = r >= 8 && r < 16 && c >= 8 && c < 16;
            if (!in_cell) {
                CHECK(a.at(r, c, 0) == 0.f);
                CHECK(a.at(r, c, 1) == 0.f);
                CHECK(a.at(r, c, 2) == 0.f);
            }
        }
    ToyScene bad;
    bad.objects = {{Shape::square, Color::red, 0}, {Shape::circle, Color::blue, 0}};
    CHECK_THROWS_AS((void)render_scene(bad), Error);
    ToyScene empty;
    CHECK_THROWS_AS((void)render_scene(empty), Error);
}

TEST_CASE("captions follow the template") {
    ToyScene s;
    s.objects = {{Shape::square, Color::red, 0}};
    auto w = caption_words(s);
    CHECK(w == std::vector<std::string>{"a", "red", "square", "at", "top-left"});
    ToyScene two;
    two.objects = {{Shape::circle, Color::blue, 4}, {Shape::triangle, Color::green, 8}};
    auto w2 = caption_words(two);
    CHECK(w2 == std::vector<std::string>{"a", "blue", "circle", "at", "center", "and", "a",
                                         "green", "triangle", "at", "bottom-right"});
}

TEST_CASE("classify inverts render on 10k sampled scenes") {
    Rng rng(11);
    for (int i = 0; i < 10000; ++i) {
        ToyScene s = sample_scene(rng);
        ToyScene got = classify(render_scene(s));
        CHECK(got == s);
        if (!(got == s)) break;
    }
    ToyImage black{};
    CHECK(classify(black).objects.empty());
}

TEST_CASE("codec: fit, round trip, statistics") {
    Rng rng(123);
    std::vector<ToyScene> train(2000), held(500);
    for (auto& s : train) s = sample_scene(rng);
    for (auto& s : held) s = sample_scene(rng);
    PatchCodec<float> codec;
    codec.fit(train);

    // constant input -> identical latents at every position
    ToyImage black{};
    auto lb = codec.encode(black);
    for (int p = 1; p < kLatentTokens; ++p)
        for (int d = 0; d < kLatentDim; ++d)
            CHECK(lb.latents.at(p, d) == lb.latents.at(0, d));

    // determinism
    ToyScene s0 = held[0];
    auto e1 = codec.encode(render_scene(s0));
    auto e2 = codec.encode(render_scene(s0));
    CHECK(e1.latents.v == e2.latents.v);

    // held-out statistics: per-channel mean near 0, std near 1
    double mean[kLatentDim] = {}, sq[kLatentDim] = {};
    size_t count = 0;
    double mse_sum = 0;
    int classified_ok = 0;
    for (const auto& s : held) {
        ToyImage img = render_scene(s);
        auto enc = codec.encode(img);
        for (int p = 0; p < kLatentTokens; ++p)
            for (int d = 0; d < kLatentDim; ++d) {
                mean[d] += enc.latents.at(p, d);
                sq[d] += double(enc.latents.at(p, d)) * enc.latents.at(p, d);
            }
        count += kLatentTokens;
        ToyImage rec = codec.decode(enc);
        double mse = 0;
        for (size_t i = 0; i < img.pix.size(); ++i) {
            double diff = double(rec.pix[i]) - double(img.pix[i]);
            mse += diff * diff;
        }
        mse_sum += mse / double(img.pix.size());
        classified_ok += classify(rec) == s;
    }
    for (int d = 0; d < kLatentDim; ++d) {
        double m = mean[d] / double(count);
        double sd = std::sqrt(sq[d] / double(count) - m * m);
        CHECK(std::abs(m) < 0.1);
        CHECK(sd > 0.8);
        CHECK(sd < 1.2);
    }
    CHECK(mse_sum / double(held.size()) < 0.01);
    CHECK(classified_ok >= int(0.99 * double(held.size())));

    // zero latents decode to the tiled corpus-mean patch
    Mat<float> zeros(kLatentTokens, kLatentDim);
    ToyImage mean_img = codec.decode(zeros);
    for (int p = 0; p < 2; ++p) {
        float v00 = mean_img.at((p / 4) * 6, (p % 4) * 6, 0);
        CHECK(v00 == doctest::Approx(codec.patch_mean.v[0]).epsilon(1e-3));
    }

    // NaN latents rejected
    Mat<float> bad(kLatentTokens, kLatentDim);
    bad.at(0, 0) = std::nanf("");
    CHECK_THROWS_AS((void)codec.decode(bad), Error);

    // encode counter instrumentation
    long before = g_encode_calls;
    (void)codec.encode(black);
    CHECK(g_encode_calls == before + 1);
}

TEST_CASE("qa pairs are answerable and deterministic") {
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        ToyScene s = sample_scene(rng);
        auto qs = qa_pairs(s);
        CHECK(!qs.empty());
        auto qs2 = qa_pairs(s);
        CHECK(qs.size() == qs2.size());
        const auto& v = vocab();
        for (const auto& q : qs) {
            (void)v.encode(q.question);
            (void)v.id(q.answer);
        }
    }
}
