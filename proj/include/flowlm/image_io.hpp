#pragma once

// Binary PPM (P6) read/write for toy images.

#include <filesystem>
#include <fstream>

#include "flowlm/common.hpp"
#include "flowlm/scene.hpp"

namespace flowlm {

inline void write_ppm(const std::filesystem::path& path, const ToyImage& img) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), ErrorKind::io, "cannot write " + path.string());
    os << "P6\n" << kImageSize << " " << kImageSize << "\n255\n";
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                float v = img.at(r, c, ch);
                v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                os.put(char(int(v * 255.f + 0.5f)));
            }
    require(bool(os), ErrorKind::io, "write failed: " + path.string());
}

inline ToyImage read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), ErrorKind::io, "cannot read " + path.string());
    std::string magic;
    is >> magic;
    require(magic == "P6", ErrorKind::io, "not a binary PPM file");
    auto next_int = [&]() {
        int v;
        while (is >> std::ws && is.peek() == '#') {
            std::string comment;
            std::getline(is, comment);
        }
        require(bool(is >> v), ErrorKind::io, "bad PPM header");
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    require(w == kImageSize && h == kImageSize, ErrorKind::shape,
            "image must be 24x24");
    require(maxval == 255, ErrorKind::io, "PPM maxval must be 255");
    is.get();  // single whitespace after header
    ToyImage img;
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                int byte = is.get();
                require(byte != EOF, ErrorKind::io, "PPM pixel data truncated");
                img.at(r, c, ch) = float(byte) / 255.f;
            }
    return img;
}

}  // namespace flowlm
