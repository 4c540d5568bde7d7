#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "neural_points/errors.hpp"
#include "neural_points/tensor.hpp"

namespace np {

/// Positions with optional unit normals. `normals` is either undefined or an
/// (N,3) tensor row-aligned with `points`.
struct PointCloud {
    Tensor points;   // (N,3)
    Tensor normals;  // (N,3) or undefined

    PointCloud() = default;
    explicit PointCloud(Tensor pts) : points(std::move(pts)) {}
    PointCloud(Tensor pts, Tensor nrm) : points(std::move(pts)), normals(std::move(nrm)) {}

    int size() const { return points.defined() ? points.dim(0) : 0; }
    bool has_normals() const { return normals.defined(); }
};

inline const double* row(const Tensor& t, int r) {
    return t.data() + static_cast<std::int64_t>(r) * t.dim(1);
}
inline double* row(Tensor& t, int r) {
    return t.data() + static_cast<std::int64_t>(r) * t.dim(1);
}

constexpr double kNormalUnitTol = 1e-6;

/// Enforces the container invariants: (N,3) shapes, finite coordinates, and
/// unit-length normals when present.
inline void validate_cloud(const PointCloud& cloud, const std::string& context) {
    if (!cloud.points.defined() || cloud.points.rank() != 2 || cloud.points.dim(1) != 3)
        throw contract_error(context + ": positions must be (N,3)");
    if (!all_finite(cloud.points))
        throw contract_error(context + ": non-finite coordinate");
    if (cloud.has_normals()) {
        if (cloud.normals.rank() != 2 || cloud.normals.dim(1) != 3 ||
            cloud.normals.dim(0) != cloud.points.dim(0))
            throw contract_error(context + ": normals must match positions (N,3)");
        if (!all_finite(cloud.normals))
            throw contract_error(context + ": non-finite normal");
        for (int r = 0; r < cloud.size(); ++r) {
            const double* n = row(cloud.normals, r);
            const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
            if (std::abs(len - 1.0) > kNormalUnitTol)
                throw contract_error(context + ": normal " + std::to_string(r) +
                                     " has length " + std::to_string(len));
        }
    }
}

// ---------------------------------------------------------------------------
// .xyz: one point per line, "x y z" or "x y z nx ny nz"

inline PointCloud load_xyz(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("load_xyz: cannot open '" + path + "'");
    std::vector<double> pts, nrms;
    int fields = 0;  // 3 or 6, fixed by the first data line
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ls(line);
        double v[6];
        int got = 0;
        while (got < 6 && (ls >> v[got])) ++got;
        if (got == 0) continue;  // blank line
        if (got != 3 && got != 6)
            throw io_error("load_xyz: '" + path + "' line " + std::to_string(lineno) +
                           ": expected 3 or 6 values, got " + std::to_string(got));
        if (fields == 0) fields = got;
        if (got != fields)
            throw io_error("load_xyz: '" + path + "' line " + std::to_string(lineno) +
                           ": inconsistent field count");
        pts.insert(pts.end(), v, v + 3);
        if (fields == 6) nrms.insert(nrms.end(), v + 3, v + 6);
    }
    if (pts.empty()) throw io_error("load_xyz: '" + path + "' contains no points");
    const int n = static_cast<int>(pts.size() / 3);
    PointCloud cloud(Tensor({n, 3}, pts));
    if (fields == 6) cloud.normals = Tensor({n, 3}, nrms);
    validate_cloud(cloud, "load_xyz('" + path + "')");
    return cloud;
}

inline void save_xyz(const std::string& path, const PointCloud& cloud) {
    validate_cloud(cloud, "save_xyz('" + path + "')");
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (f == nullptr) throw io_error("save_xyz: cannot open '" + path + "' for writing");
    for (int r = 0; r < cloud.size(); ++r) {
        const double* p = row(cloud.points, r);
        if (cloud.has_normals()) {
            const double* n = row(cloud.normals, r);
            std::fprintf(f, "%.17g %.17g %.17g %.17g %.17g %.17g\n", p[0], p[1], p[2], n[0],
                         n[1], n[2]);
        } else {
            std::fprintf(f, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
        }
    }
    if (std::fclose(f) != 0) throw io_error("save_xyz: write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// PLY: reader handles ascii and binary_little_endian with arbitrary extra
// vertex properties; writer emits ascii with double precision.

namespace detail {

struct PlyProperty {
    std::string name;
    int byte_size = 0;    // for binary skipping
    bool is_float = false;
};

inline int ply_type_size(const std::string& t) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" ||
        t == "float32")
        return 4;
    if (t == "double" || t == "float64") return 8;
    return 0;
}

inline bool ply_type_is_float(const std::string& t) {
    return t == "float" || t == "float32" || t == "double" || t == "float64";
}

inline double ply_read_binary_scalar(std::istream& is, const PlyProperty& prop) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), prop.byte_size);
    if (!is) throw io_error("load_ply: truncated binary payload");
    if (prop.is_float && prop.byte_size == 4) {
        float f;
        std::memcpy(&f, buf, 4);
        return static_cast<double>(f);
    }
    if (prop.is_float && prop.byte_size == 8) {
        double d;
        std::memcpy(&d, buf, 8);
        return d;
    }
    // integer property used as coordinate: widen from little-endian bytes
    std::int64_t v = 0;
    for (int i = prop.byte_size - 1; i >= 0; --i) v = (v << 8) | buf[i];
    return static_cast<double>(v);
}

}  // namespace detail

inline PointCloud load_ply(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("load_ply: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line.substr(0, 3) != "ply")
        throw io_error("load_ply: '" + path + "' is not a PLY file");

    bool binary = false;
    int vertex_count = -1;
    std::vector<detail::PlyProperty> props;
    bool in_vertex_element = false;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "ascii") binary = false;
            else if (fmt == "binary_little_endian") binary = true;
            else throw io_error("load_ply: unsupported format '" + fmt + "'");
        } else if (tok == "element") {
            std::string name;
            int count;
            ls >> name >> count;
            in_vertex_element = (name == "vertex");
            if (in_vertex_element) vertex_count = count;
        } else if (tok == "property" && in_vertex_element) {
            std::string type, name;
            ls >> type >> name;
            if (type == "list") throw io_error("load_ply: list property in vertex element");
            detail::PlyProperty p;
            p.name = name;
            p.byte_size = detail::ply_type_size(type);
            p.is_float = detail::ply_type_is_float(type);
            if (p.byte_size == 0)
                throw io_error("load_ply: unknown property type '" + type + "'");
            props.push_back(p);
        } else if (tok == "end_header") {
            break;
        }
    }
    if (vertex_count < 0) throw io_error("load_ply: no vertex element in '" + path + "'");
    if (vertex_count == 0) throw io_error("load_ply: '" + path + "' contains no points");

    int ix = -1, iy = -1, iz = -1, inx = -1, iny = -1, inz = -1;
    for (int i = 0; i < static_cast<int>(props.size()); ++i) {
        const std::string& n = props[static_cast<std::size_t>(i)].name;
        if (n == "x") ix = i;
        else if (n == "y") iy = i;
        else if (n == "z") iz = i;
        else if (n == "nx") inx = i;
        else if (n == "ny") iny = i;
        else if (n == "nz") inz = i;
    }
    if (ix < 0 || iy < 0 || iz < 0)
        throw io_error("load_ply: '" + path + "' lacks x/y/z vertex properties");
    const bool with_normals = inx >= 0 && iny >= 0 && inz >= 0;

    Tensor pts({vertex_count, 3});
    Tensor nrm = with_normals ? Tensor({vertex_count, 3}) : Tensor();
    std::vector<double> vals(props.size());
    for (int r = 0; r < vertex_count; ++r) {
        if (binary) {
            for (std::size_t c = 0; c < props.size(); ++c)
                vals[c] = detail::ply_read_binary_scalar(is, props[c]);
        } else {
            if (!std::getline(is, line))
                throw io_error("load_ply: truncated vertex data in '" + path + "'");
            std::istringstream ls(line);
            for (std::size_t c = 0; c < props.size(); ++c)
                if (!(ls >> vals[c]))
                    throw io_error("load_ply: bad vertex line in '" + path + "'");
        }
        double* p = row(pts, r);
        p[0] = vals[static_cast<std::size_t>(ix)];
        p[1] = vals[static_cast<std::size_t>(iy)];
        p[2] = vals[static_cast<std::size_t>(iz)];
        if (with_normals) {
            double* n = row(nrm, r);
            n[0] = vals[static_cast<std::size_t>(inx)];
            n[1] = vals[static_cast<std::size_t>(iny)];
            n[2] = vals[static_cast<std::size_t>(inz)];
        }
    }
    PointCloud cloud(std::move(pts));
    if (with_normals) cloud.normals = std::move(nrm);
    validate_cloud(cloud, "load_ply('" + path + "')");
    return cloud;
}

inline void save_ply(const std::string& path, const PointCloud& cloud) {
    validate_cloud(cloud, "save_ply('" + path + "')");
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (f == nullptr) throw io_error("save_ply: cannot open '" + path + "' for writing");
    std::fprintf(f, "ply\nformat ascii 1.0\nelement vertex %d\n", cloud.size());
    std::fprintf(f, "property double x\nproperty double y\nproperty double z\n");
    if (cloud.has_normals())
        std::fprintf(f, "property double nx\nproperty double ny\nproperty double nz\n");
    std::fprintf(f, "end_header\n");
    for (int r = 0; r < cloud.size(); ++r) {
        const double* p = row(cloud.points, r);
        if (cloud.has_normals()) {
            const double* n = row(cloud.normals, r);
            std::fprintf(f, "%.17g %.17g %.17g %.17g %.17g %.17g\n", p[0], p[1], p[2], n[0],
                         n[1], n[2]);
        } else {
            std::fprintf(f, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
        }
    }
    if (std::fclose(f) != 0) throw io_error("save_ply: write to '" + path + "' failed");
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline PointCloud load_cloud(const std::string& path) {
    if (ends_with(path, ".ply")) return load_ply(path);
    return load_xyz(path);
}

inline void save_cloud(const std::string& path, const PointCloud& cloud) {
    if (ends_with(path, ".ply")) save_ply(path, cloud);
    else save_xyz(path, cloud);
}

}  // namespace np
