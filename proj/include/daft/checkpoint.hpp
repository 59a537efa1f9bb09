#pragma once

// Self-describing binary checkpoint, little-endian throughout:
//   magic "DAFTCKPT1", u32 version,
//   config text, vocabulary tokens,
//   named parameter table (name, shape, values, Adam moments),
//   optimizer step counters, RNG state, training step.
// Save is fully deterministic, so load -> save round-trips byte-identically.

#include <fstream>

#include "daft/config.hpp"
#include "daft/params.hpp"
#include "daft/text.hpp"

namespace daft {

constexpr char kCheckpointMagic[] = "DAFTCKPT1";
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline void put_str(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    os.write(s.data(), std::streamsize(s.size()));
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ContractError("truncated checkpoint");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw ContractError("truncated checkpoint");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) {
    uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::string get_str(std::istream& is) {
    uint64_t n = get_u64(is);
    if (n > (1ull << 30)) throw ContractError("corrupt checkpoint string length");
    std::string s(size_t(n), '\0');
    is.read(s.data(), std::streamsize(n));
    if (!is) throw ContractError("truncated checkpoint");
    return s;
}

}  // namespace detail

struct CheckpointMeta {
    Config config;
    std::vector<std::string> vocab_tokens;
    int64_t adam_g_t = 0;
    int64_t adam_d_t = 0;
    uint64_t rng_state = 0;
    int64_t step = 0;
};

inline void save_checkpoint(const std::string& path, const Config& cfg, const Vocabulary& vocab,
                            const ParamStore& store, int64_t adam_g_t, int64_t adam_d_t,
                            uint64_t rng_state, int64_t step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic, 9);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_str(os, serialize_config(cfg));
    detail::put_u64(os, uint64_t(vocab.size()));
    for (int i = 0; i < vocab.size(); ++i) detail::put_str(os, vocab.token(i));
    detail::put_u64(os, uint64_t(store.count()));
    for (int i = 0; i < store.count(); ++i) {
        const Param& p = store.at(i);
        detail::put_str(os, p.name);
        detail::put_u32(os, uint32_t(p.shape.size()));
        for (int d : p.shape) detail::put_u64(os, uint64_t(d));
        for (double v : p.value) detail::put_f64(os, v);
        for (double v : p.m) detail::put_f64(os, v);
        for (double v : p.v) detail::put_f64(os, v);
    }
    detail::put_u64(os, uint64_t(adam_g_t));
    detail::put_u64(os, uint64_t(adam_d_t));
    detail::put_u64(os, rng_state);
    detail::put_u64(os, uint64_t(step));
    if (!os) throw ContractError("write failure on '" + path + "'");
}

// Reads the checkpoint into an already-built store; every parameter name and
// shape must match what the config-built models declare.
inline CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("cannot open checkpoint '" + path + "'");
    char magic[9];
    is.read(magic, 9);
    if (!is || std::memcmp(magic, kCheckpointMagic, 9) != 0)
        throw ContractError("'" + path + "' is not a DAFT checkpoint");
    uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw ContractError("unsupported checkpoint version " + std::to_string(version));
    CheckpointMeta meta;
    meta.config = parse_config(detail::get_str(is));
    uint64_t vn = detail::get_u64(is);
    for (uint64_t i = 0; i < vn; ++i) meta.vocab_tokens.push_back(detail::get_str(is));
    uint64_t pn = detail::get_u64(is);
    if (int64_t(pn) != store.count())
        throw ContractError("checkpoint has " + std::to_string(pn) + " parameters, model expects " +
                            std::to_string(store.count()));
    for (uint64_t i = 0; i < pn; ++i) {
        std::string name = detail::get_str(is);
        Param& p = store.at(int(i));
        if (p.name != name)
            throw ContractError("checkpoint parameter '" + name + "' does not match expected '" +
                                p.name + "'");
        uint32_t rank = detail::get_u32(is);
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = int(detail::get_u64(is));
        if (shape != p.shape)
            throw ContractError("checkpoint parameter '" + name + "' has shape " +
                                shape_str(shape) + ", model expects " + shape_str(p.shape));
        for (double& v : p.value) v = detail::get_f64(is);
        for (double& v : p.m) v = detail::get_f64(is);
        for (double& v : p.v) v = detail::get_f64(is);
    }
    meta.adam_g_t = int64_t(detail::get_u64(is));
    meta.adam_d_t = int64_t(detail::get_u64(is));
    meta.rng_state = detail::get_u64(is);
    meta.step = int64_t(detail::get_u64(is));
    return meta;
}

// peek at the embedded config without needing a matching store
inline Config read_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("cannot open checkpoint '" + path + "'");
    char magic[9];
    is.read(magic, 9);
    if (!is || std::memcmp(magic, kCheckpointMagic, 9) != 0)
        throw ContractError("'" + path + "' is not a DAFT checkpoint");
    uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw ContractError("unsupported checkpoint version " + std::to_string(version));
    return parse_config(detail::get_str(is));
}

}  // namespace daft
