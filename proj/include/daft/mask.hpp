#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>

#include "daft/core.hpp"

namespace daft {

// Binary mask over a 2D grid. 0 = valid (unmasked), 1 = invalid (masked).
struct MaskGrid {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> cells;  // row-major, values in {0,1}

    MaskGrid() = default;
    MaskGrid(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), cells(size_t(h_) * w_, fill) {
        if (h_ <= 0 || w_ <= 0) throw ContractError("mask grid must have at least one cell");
    }

    uint8_t& at(int y, int x) { return cells[size_t(y) * w + x]; }
    uint8_t at(int y, int x) const { return cells[size_t(y) * w + x]; }

    size_t count_invalid() const {
        size_t n = 0;
        for (uint8_t c : cells) n += c;
        return n;
    }

    double invalid_fraction() const {
        return cells.empty() ? 0.0 : double(count_invalid()) / double(cells.size());
    }

    bool operator==(const MaskGrid& o) const { return h == o.h && w == o.w && cells == o.cells; }
};

// PGM (P5) exchange format: one byte per cell, 0 = valid, 255 = invalid.
inline void write_pgm(const MaskGrid& m, std::ostream& os) {
    os << "P5\n" << m.w << " " << m.h << "\n255\n";
    for (uint8_t c : m.cells) {
        char b = c ? char(255) : char(0);
        os.write(&b, 1);
    }
}

inline void write_pgm(const MaskGrid& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ContractError("cannot open '" + path + "' for writing");
    write_pgm(m, f);
}

namespace detail {
// skip whitespace and '#' comments in PNM headers
inline int pnm_next_int(std::istream& is, const std::string& path) {
    int ch = is.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = is.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = is.get();
    }
    if (ch == EOF) throw ContractError("truncated PNM header in '" + path + "'");
    std::string tok;
    while (ch != EOF && !std::isspace(ch)) {
        tok.push_back(char(ch));
        ch = is.get();
    }
    try {
        return std::stoi(tok);
    } catch (...) {
        throw ContractError("bad PNM header token '" + tok + "' in '" + path + "'");
    }
}
}  // namespace detail

inline MaskGrid read_pgm(std::istream& is, const std::string& path = "<stream>") {
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '5') throw ContractError("'" + path + "' is not a binary PGM (P5) file");
    int w = detail::pnm_next_int(is, path);
    int h = detail::pnm_next_int(is, path);
    int maxval = detail::pnm_next_int(is, path);
    if (maxval <= 0 || maxval > 255) throw ContractError("unsupported PGM maxval in '" + path + "'");
    MaskGrid m(h, w);
    std::vector<char> buf(size_t(h) * w);
    is.read(buf.data(), std::streamsize(buf.size()));
    if (is.gcount() != std::streamsize(buf.size()))
        throw ContractError("truncated PGM pixel data in '" + path + "'");
    for (size_t i = 0; i < buf.size(); ++i) {
        // threshold at half range: bytes >= maxval/2 count as invalid
        m.cells[i] = (uint8_t(buf[i]) * 2 >= maxval) ? 1 : 0;
    }
    return m;
}

inline MaskGrid read_pgm_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("cannot open mask file '" + path + "'");
    return read_pgm(f, path);
}

}  // namespace daft
