#pragma once

// Toy scene world: 3x3 grid of colored shapes on a 24x24 canvas, with a
// deterministic renderer, template captions, QA pairs and a nearest-template
// classifier that doubles as the generation scorer.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowlm/common.hpp"

namespace flowlm {

enum class Shape : int { square = 0, circle = 1, triangle = 2 };
enum class Color : int { red = 0, green = 1, blue = 2, yellow = 3 };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 4;
constexpr int kGridCells = 9;
constexpr int kImageSize = 24;
constexpr int kCellSize = 8;  // 3x3 grid of 8x8 cells

inline const char* shape_word(Shape s) {
    static const char* w[] = {"square", "circle", "triangle"};
    return w[int(s)];
}
inline const char* color_word(Color c) {
    static const char* w[] = {"red", "green", "blue", "yellow"};
    return w[int(c)];
}
inline const char* cell_word(int cell) {
    static const char* w[] = {"top-left",    "top-center",    "top-right",
                              "middle-left", "center",        "middle-right",
                              "bottom-left", "bottom-center", "bottom-right"};
    return w[cell];
}

struct SceneObject {
    Shape shape = Shape::square;
    Color color = Color::red;
    int cell = 0;  // 0..8, row-major on the 3x3 grid
};

struct ToyScene {
    std::vector<SceneObject> objects;
    uint64_t seed = 0;  // provenance only; rendering ignores it

    bool operator==(const ToyScene& o) const {
        if (objects.size() != o.objects.size()) return false;
        for (size_t i = 0; i < objects.size(); ++i) {
            if (objects[i].shape != o.objects[i].shape ||
                objects[i].color != o.objects[i].color ||
                objects[i].cell != o.objects[i].cell)
                return false;
        }
        return true;
    }
};

inline void validate_scene(const ToyScene& s) {
    require(!s.objects.empty() && s.objects.size() <= 3, ErrorKind::invalid_scene,
            "scene must contain 1..3 objects");
    uint32_t used = 0;
    for (const auto& o : s.objects) {
        require(o.cell >= 0 && o.cell < kGridCells, ErrorKind::invalid_scene,
                "object cell out of range");
        require(!(used & (1u << o.cell)), ErrorKind::invalid_scene,
                "two objects share a cell");
        used |= 1u << o.cell;
    }
}

// 24x24 RGB image, unit-interval floats, row-major, channel-last
struct ToyImage {
    std::array<float, kImageSize * kImageSize * 3> pix{};

    float& at(int r, int c, int ch) { return pix[size_t((r * kImageSize + c) * 3 + ch)]; }
    float at(int r, int c, int ch) const { return pix[size_t((r * kImageSize + c) * 3 + ch)]; }
};

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

// 4x4 shape glyphs; drawn at per-cell anchors chosen so a glyph always sits
// inside one cell and never straddles the codec's 6x6 patch grid
inline const std::array<const char*, 4>& shape_mask(Shape s) {
    static const std::array<const char*, 4> square = {"XXXX", "XXXX", "XXXX", "XXXX"};
    static const std::array<const char*, 4> circle = {".XX.", "XXXX", "XXXX", ".XX."};
    static const std::array<const char*, 4> triangle = {"X...", "XX..", "XXX.", "XXXX"};
    switch (s) {
        case Shape::square: return square;
        case Shape::circle: return circle;
        default: return triangle;
    }
}

constexpr int kGlyphSize = 4;

// image-coordinate origin of the glyph for grid index 0/1/2 (same for rows
// and columns); each anchor is inside its 8-pixel cell and inside one patch
inline int glyph_origin(int grid_index) {
    static const int origins[3] = {2, 8, 20};
    return origins[grid_index];
}

inline std::array<float, 3> color_rgb(Color c) {
    switch (c) {
        case Color::red: return {1.f, 0.f, 0.f};
        case Color::green: return {0.f, 1.f, 0.f};
        case Color::blue: return {0.f, 0.f, 1.f};
        default: return {1.f, 1.f, 0.f};
    }
}

inline ToyImage render_scene(const ToyScene& scene) {
    validate_scene(scene);
    ToyImage img;
    for (const auto& o : scene.objects) {
        const auto& mask = shape_mask(o.shape);
        const auto rgb = color_rgb(o.color);
        int r0 = glyph_origin(o.cell / 3);
        int c0 = glyph_origin(o.cell % 3);
        for (int r = 0; r < kGlyphSize; ++r)
            for (int c = 0; c < kGlyphSize; ++c)
                if (mask[size_t(r)][c] == 'X')
                    for (int ch = 0; ch < 3; ++ch) img.at(r0 + r, c0 + c, ch) = rgb[size_t(ch)];
    }
    return img;
}

// ---------------------------------------------------------------------------
// captions (word level; vocab.hpp maps words to ids)
// ---------------------------------------------------------------------------

// "a {color} {shape} at {position}" clauses joined by "and"
inline std::vector<std::string> caption_words(const ToyScene& scene) {
    validate_scene(scene);
    std::vector<std::string> w;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i > 0) w.push_back("and");
        w.push_back("a");
        w.push_back(color_word(o.color));
        w.push_back(shape_word(o.shape));
        w.push_back("at");
        w.push_back(cell_word(o.cell));
    }
    return w;
}

// ---------------------------------------------------------------------------
// classification: per-cell nearest template over (shape, color, empty)
// ---------------------------------------------------------------------------

namespace detail {

using CellPixels = std::array<float, kCellSize * kCellSize * 3>;

inline CellPixels crop_cell(const ToyImage& img, int cell) {
    CellPixels out{};
    int r0 = (cell / 3) * kCellSize;
    int c0 = (cell % 3) * kCellSize;
    for (int r = 0; r < kCellSize; ++r)
        for (int c = 0; c < kCellSize; ++c)
            for (int ch = 0; ch < 3; ++ch)
                out[size_t((r * kCellSize + c) * 3 + ch)] = img.at(r0 + r, c0 + c, ch);
    return out;
}

// 13 templates per cell (empty + shape x color), built from actual renders so
// the classifier always agrees with the renderer's geometry
inline const std::vector<CellPixels>& cell_templates(int cell) {
    static const auto all = [] {
        std::vector<std::vector<CellPixels>> t(kGridCells);
        for (int cell = 0; cell < kGridCells; ++cell) {
            t[size_t(cell)].emplace_back();  // empty
            for (int s = 0; s < kNumShapes; ++s)
                for (int c = 0; c < kNumColors; ++c) {
                    ToyScene one;
                    one.objects.push_back({Shape(s), Color(c), cell});
                    t[size_t(cell)].push_back(crop_cell(render_scene(one), cell));
                }
        }
        return t;
    }();
    return all[size_t(cell)];
}

inline float dist2(const CellPixels& a, const CellPixels& b) {
    float d2 = 0.f;
    for (size_t i = 0; i < a.size(); ++i) {
        float d = a[i] - b[i];
        d2 += d * d;
    }
    return d2;
}

}  // namespace detail

inline ToyScene classify(const ToyImage& img) {
    ToyScene out;
    for (int cell = 0; cell < kGridCells; ++cell) {
        const auto& tpls = detail::cell_templates(cell);
        auto crop = detail::crop_cell(img, cell);
        int best = 0;
        float best_d = detail::dist2(crop, tpls[0]);
        for (int t = 1; t < int(tpls.size()); ++t) {
            float d = detail::dist2(crop, tpls[size_t(t)]);
            if (d < best_d) {
                best_d = d;
                best = t;
            }
        }
        if (best > 0) {
            int s = (best - 1) / kNumColors;
            int c = (best - 1) % kNumColors;
            out.objects.push_back({Shape(s), Color(c), cell});
        }
    }
    return out;  // may be empty or >3 objects; callers compare against truth
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

// object count 1/2/3 with weights 0.5/0.3/0.2; distinct cells, sorted
inline ToyScene sample_scene(Rng& rng) {
    ToyScene s;
    double u = rng.uniform();
    int k = u < 0.5 ? 1 : (u < 0.8 ? 2 : 3);
    std::vector<int> cells(kGridCells);
    for (int i = 0; i < kGridCells; ++i) cells[size_t(i)] = i;
    rng.shuffle(cells);
    cells.resize(static_cast<size_t>(k));
    std::sort(cells.begin(), cells.end());
    for (int i = 0; i < k; ++i) {
        SceneObject o;
        o.cell = cells[size_t(i)];
        o.shape = Shape(int(rng.below(kNumShapes)));
        o.color = Color(int(rng.below(kNumColors)));
        s.objects.push_back(o);
    }
    return s;
}

inline ToyScene sample_single_object_scene(Rng& rng) {
    ToyScene s;
    SceneObject o;
    o.cell = int(rng.below(kGridCells));
    o.shape = Shape(int(rng.below(kNumShapes)));
    o.color = Color(int(rng.below(kNumColors)));
    s.objects.push_back(o);
    return s;
}

// ---------------------------------------------------------------------------
// QA pairs
// ---------------------------------------------------------------------------

struct QaPair {
    std::vector<std::string> question;  // words, including trailing "?"
    std::string answer;                 // single word
};

// Deterministic set of unambiguous questions for a scene.
inline std::vector<QaPair> qa_pairs(const ToyScene& scene) {
    validate_scene(scene);
    std::vector<QaPair> out;
    auto count_shape = [&](Shape s) {
        int n = 0;
        for (const auto& o : scene.objects) n += o.shape == s;
        return n;
    };
    auto count_color = [&](Color c) {
        int n = 0;
        for (const auto& o : scene.objects) n += o.color == c;
        return n;
    };
    for (const auto& o : scene.objects) {
        if (count_shape(o.shape) == 1) {
            out.push_back({{"what", "color", "is", "the", shape_word(o.shape), "?"},
                           color_word(o.color)});
            out.push_back({{"where", "is", "the", shape_word(o.shape), "?"},
                           cell_word(o.cell)});
        }
        if (count_color(o.color) == 1)
            out.push_back({{"what", "shape", "is", "the", color_word(o.color), "thing", "?"},
                           shape_word(o.shape)});
    }
    static const char* counts[] = {"zero", "one", "two", "three"};
    out.push_back({{"how", "many", "objects", "?"}, counts[scene.objects.size()]});
    // one positive and one deterministic negative presence probe
    const auto& first = scene.objects.front();
    out.push_back({{"is", "there", "a", color_word(first.color), shape_word(first.shape),
                    "in", "the", "picture", "?"},
                   "yes"});
    for (int s = 0; s < kNumShapes; ++s)
        for (int c = 0; c < kNumColors; ++c) {
            bool present = false;
            for (const auto& o : scene.objects)
                present |= int(o.shape) == s && int(o.color) == c;
            if (!present) {
                out.push_back({{"is", "there", "a", color_word(Color(c)),
                                shape_word(Shape(s)), "in", "the", "picture", "?"},
                               "no"});
                return out;
            }
        }
    return out;
}

}  // namespace flowlm
