#pragma once

// Binary PPM (P6) exchange for [3,H,W] images in [-1,1]. PPM/PGM are the
// bit-exact contract formats of the CLI.

#include <fstream>

#include "daft/mask.hpp"

namespace daft {

struct Image {
    int h = 0, w = 0;
    std::vector<double> data;  // [3,H,W] in [-1,1]
};

inline uint8_t to_byte(double v) {
    double u = (v + 1.0) * 0.5 * 255.0;
    long r = std::lround(u);
    return uint8_t(std::min(255l, std::max(0l, r)));
}

inline double from_byte(uint8_t b) { return double(b) / 255.0 * 2.0 - 1.0; }

inline void write_ppm(const Image& img, std::ostream& os) {
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                char b = char(to_byte(img.data[(size_t(c) * img.h + y) * img.w + x]));
                os.write(&b, 1);
            }
}

inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ContractError("cannot open '" + path + "' for writing");
    write_ppm(img, f);
}

inline Image read_ppm(std::istream& is, const std::string& path = "<stream>") {
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw ContractError("'" + path + "' is not a binary PPM (P6) file");
    int w = detail::pnm_next_int(is, path);
    int h = detail::pnm_next_int(is, path);
    int maxval = detail::pnm_next_int(is, path);
    if (maxval != 255) throw ContractError("unsupported PPM maxval in '" + path + "'");
    Image img;
    img.h = h;
    img.w = w;
    img.data.resize(size_t(3) * h * w);
    std::vector<char> buf(size_t(3) * h * w);
    is.read(buf.data(), std::streamsize(buf.size()));
    if (is.gcount() != std::streamsize(buf.size()))
        throw ContractError("truncated PPM pixel data in '" + path + "'");
    size_t k = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.data[(size_t(c) * h + y) * w + x] = from_byte(uint8_t(buf[k++]));
    return img;
}

inline Image read_ppm_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("cannot open image file '" + path + "'");
    return read_ppm(f, path);
}

}  // namespace daft
