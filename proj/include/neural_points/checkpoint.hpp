#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "neural_points/errors.hpp"
#include "neural_points/optimizer.hpp"
#include "neural_points/tensor.hpp"

namespace np {

/// Full training state: parameters, the configuration they were trained
/// under, the iteration counter, and the sampler RNG state. Saving and
/// loading round-trips byte-exactly.
struct Checkpoint {
    std::uint64_t iteration = 0;
    std::string config_json;
    std::string rng_state;
    ParamStore params;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'N', 'P', 'C', 'K', 'P', 'T', '0', '1'};

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
    write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw io_error("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw io_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline std::string read_string(std::istream& is) {
    const std::uint32_t len = read_u32(is);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw io_error("checkpoint: truncated string");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(detail::kCheckpointMagic, 8);
    detail::write_u64(os, ckpt.iteration);
    detail::write_string(os, ckpt.config_json);
    detail::write_string(os, ckpt.rng_state);
    detail::write_u32(os, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) {
        detail::write_string(os, name);
        detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d)
            detail::write_u32(os, static_cast<std::uint32_t>(t.dim(d)));
        for (std::int64_t i = 0, n = t.size(); i < n; ++i) detail::write_f64(os, t.data()[i]);
    }
    if (!os) throw io_error("checkpoint: write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw io_error("checkpoint: '" + path + "' is not a checkpoint file");
    Checkpoint ckpt;
    ckpt.iteration = detail::read_u64(is);
    ckpt.config_json = detail::read_string(is);
    ckpt.rng_state = detail::read_string(is);
    const std::uint32_t count = detail::read_u32(is);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = detail::read_string(is);
        const std::uint32_t rank = detail::read_u32(is);
        if (rank > 8) throw io_error("checkpoint: implausible tensor rank");
        std::vector<int> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d)
            shape[d] = static_cast<int>(detail::read_u32(is));
        Tensor t(shape);
        for (std::int64_t i = 0, n = t.size(); i < n; ++i) t.data()[i] = detail::read_f64(is);
        ckpt.params.set(name, std::move(t));
    }
    return ckpt;
}

}  // namespace np
