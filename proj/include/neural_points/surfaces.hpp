#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "neural_points/errors.hpp"
#include "neural_points/knn.hpp"
#include "neural_points/point_cloud.hpp"
#include "neural_points/rng.hpp"
#include "neural_points/sampling.hpp"

namespace np {

/// Analytic ground-truth surface: uniform-in-area sampling with exact
/// normals, plus the exact (or tightly refined) unsigned distance used by the
/// point-to-surface metric. All shipped surfaces fit inside the unit ball.
class AnalyticSurface {
public:
    virtual ~AnalyticSurface() = default;
    virtual std::string name() const = 0;
    virtual PointCloud sample(int n, Rng& rng) const = 0;
    virtual double distance(const double p[3]) const = 0;
    virtual double area() const = 0;
};

class SphereSurface final : public AnalyticSurface {
public:
    explicit SphereSurface(double radius = 1.0) : radius_(radius) {
        if (radius <= 0.0) throw config_error("SphereSurface: radius must be positive");
    }
    std::string name() const override { return "sphere"; }
    double area() const override { return 4.0 * kPi * radius_ * radius_; }

    PointCloud sample(int n, Rng& rng) const override {
        Tensor pts({n, 3}), nrm({n, 3});
        for (int i = 0; i < n; ++i) {
            double d[3], len;
            do {
                d[0] = rng.normal();
                d[1] = rng.normal();
                d[2] = rng.normal();
                len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            } while (len < 1e-12);
            for (int a = 0; a < 3; ++a) {
                row(nrm, i)[a] = d[a] / len;
                row(pts, i)[a] = radius_ * d[a] / len;
            }
        }
        return {std::move(pts), std::move(nrm)};
    }

    double distance(const double p[3]) const override {
        return std::abs(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - radius_);
    }

private:
    static constexpr double kPi = 3.14159265358979323846;
    double radius_;
};

class TorusSurface final : public AnalyticSurface {
public:
    TorusSurface(double major = 0.7, double minor = 0.3) : major_(major), minor_(minor) {
        if (minor <= 0.0 || major <= minor)
            throw config_error("TorusSurface: need major > minor > 0");
    }
    std::string name() const override { return "torus"; }
    double area() const override { return 4.0 * kPi * kPi * major_ * minor_; }

    PointCloud sample(int n, Rng& rng) const override {
        Tensor pts({n, 3}), nrm({n, 3});
        for (int i = 0; i < n; ++i) {
            // area element is proportional to major + minor*cos(theta);
            // rejection against the max keeps the sampling uniform
            double theta;
            for (;;) {
                theta = 2.0 * kPi * rng.uniform();
                const double jac = major_ + minor_ * std::cos(theta);
                if (rng.uniform() * (major_ + minor_) <= jac) break;
            }
            const double phi = 2.0 * kPi * rng.uniform();
            const double ct = std::cos(theta), st = std::sin(theta);
            const double cp = std::cos(phi), sp = std::sin(phi);
            double* p = row(pts, i);
            double* m = row(nrm, i);
            p[0] = (major_ + minor_ * ct) * cp;
            p[1] = (major_ + minor_ * ct) * sp;
            p[2] = minor_ * st;
            m[0] = ct * cp;
            m[1] = ct * sp;
            m[2] = st;
        }
        return {std::move(pts), std::move(nrm)};
    }

    double distance(const double p[3]) const override {
        const double ring = std::sqrt(p[0] * p[0] + p[1] * p[1]) - major_;
        return std::abs(std::sqrt(ring * ring + p[2] * p[2]) - minor_);
    }

private:
    static constexpr double kPi = 3.14159265358979323846;
    double major_, minor_;
};

/// Monge patch z = bend*(x^2 - y^2) over [-extent, extent]^2, sized to stay
/// inside the unit ball with the defaults.
class SaddleSurface final : public AnalyticSurface {
public:
    SaddleSurface(double bend = 0.75, double extent = 0.7) : bend_(bend), extent_(extent) {
        if (bend <= 0.0 || extent <= 0.0)
            throw config_error("SaddleSurface: bend and extent must be positive");
    }
    std::string name() const override { return "saddle"; }

    double area() const override {
        // numeric quadrature of sqrt(1 + |grad|^2); cached after first call
        if (area_ == 0.0) {
            const int g = 256;
            double sum = 0.0;
            for (int i = 0; i < g; ++i)
                for (int j = 0; j < g; ++j) {
                    const double x = -extent_ + (2.0 * extent_) * (i + 0.5) / g;
                    const double y = -extent_ + (2.0 * extent_) * (j + 0.5) / g;
                    sum += jacobian(x, y);
                }
            area_ = sum * (2.0 * extent_ / g) * (2.0 * extent_ / g);
        }
        return area_;
    }

    PointCloud sample(int n, Rng& rng) const override {
        const double max_jac = jacobian(extent_, extent_);
        Tensor pts({n, 3}), nrm({n, 3});
        for (int i = 0; i < n; ++i) {
            double x, y;
            for (;;) {
                x = extent_ * (2.0 * rng.uniform() - 1.0);
                y = extent_ * (2.0 * rng.uniform() - 1.0);
                if (rng.uniform() * max_jac <= jacobian(x, y)) break;
            }
            double* p = row(pts, i);
            double* m = row(nrm, i);
            p[0] = x;
            p[1] = y;
            p[2] = bend_ * (x * x - y * y);
            const double fx = 2.0 * bend_ * x, fy = -2.0 * bend_ * y;
            const double inv = 1.0 / std::sqrt(1.0 + fx * fx + fy * fy);
            m[0] = -fx * inv;
            m[1] = -fy * inv;
            m[2] = inv;
        }
        return {std::move(pts), std::move(nrm)};
    }

    /// Distance by Newton refinement of the foot point, started below the
    /// query and clamped to the patch domain.
    double distance(const double p[3]) const override {
        double u = std::clamp(p[0], -extent_, extent_);
        double v = std::clamp(p[1], -extent_, extent_);
        for (int it = 0; it < 50; ++it) {
            const double f = bend_ * (u * u - v * v);
            const double fu = 2.0 * bend_ * u, fv = -2.0 * bend_ * v;
            const double rx = u - p[0], ry = v - p[1], rz = f - p[2];
            // gradient of 0.5*dist^2 in (u,v)
            const double gu = rx + rz * fu;
            const double gv = ry + rz * fv;
            // Gauss-Newton Hessian with curvature term
            const double huu = 1.0 + fu * fu + rz * 2.0 * bend_;
            const double hvv = 1.0 + fv * fv - rz * 2.0 * bend_;
            const double huv = fu * fv;
            double det = huu * hvv - huv * huv;
            double du, dv;
            if (std::abs(det) < 1e-12) {  // fall back to gradient step
                du = -0.1 * gu;
                dv = -0.1 * gv;
            } else {
                du = -(hvv * gu - huv * gv) / det;
                dv = -(huu * gv - huv * gu) / det;
            }
            u = std::clamp(u + du, -extent_, extent_);
            v = std::clamp(v + dv, -extent_, extent_);
            if (std::abs(du) + std::abs(dv) < 1e-14) break;
        }
        const double rx = u - p[0], ry = v - p[1], rz = bend_ * (u * u - v * v) - p[2];
        return std::sqrt(rx * rx + ry * ry + rz * rz);
    }

private:
    double jacobian(double x, double y) const {
        const double fx = 2.0 * bend_ * x, fy = -2.0 * bend_ * y;
        return std::sqrt(1.0 + fx * fx + fy * fy);
    }
    double bend_, extent_;
    mutable double area_ = 0.0;
};

inline std::unique_ptr<AnalyticSurface> make_surface(const std::string& name) {
    if (name == "sphere") return std::make_unique<SphereSurface>();
    if (name == "torus") return std::make_unique<TorusSurface>();
    if (name == "saddle") return std::make_unique<SaddleSurface>();
    throw config_error("make_surface: unknown surface '" + name + "'");
}

// ---------------------------------------------------------------------------
// triangle meshes

struct TriMesh {
    Tensor vertices;                        // (V,3)
    std::vector<std::array<int, 3>> faces;  // CCW

    double area() const {
        double total = 0.0;
        for (const auto& f : faces) total += face_area(f);
        return total;
    }

    double face_area(const std::array<int, 3>& f) const {
        const double* a = row(vertices, f[0]);
        const double* b = row(vertices, f[1]);
        const double* c = row(vertices, f[2]);
        const double u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
        const double v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
        const double cx = u[1] * v[2] - u[2] * v[1];
        const double cy = u[2] * v[0] - u[0] * v[2];
        const double cz = u[0] * v[1] - u[1] * v[0];
        return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
    }
};

/// Geodesic sphere from a subdivided icosahedron; `subdivisions` quadruples
/// the face count each level (20 * 4^s faces).
inline TriMesh icosphere(int subdivisions, double radius = 1.0) {
    if (subdivisions < 0 || subdivisions > 7)
        throw config_error("icosphere: subdivisions out of range [0,7]");
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<std::array<double, 3>> verts = {
        {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0},
        {0, -1, t}, {0, 1, t}, {0, -1, -t}, {0, 1, -t},
        {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
        {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
        {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
    auto project = [radius](std::array<double, 3>& v) {
        const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        for (int a = 0; a < 3; ++a) v[a] *= radius / len;
    };
    for (auto& v : verts) project(v);

    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            std::array<double, 3> m;
            for (int c = 0; c < 3; ++c)
                m[static_cast<std::size_t>(c)] =
                    0.5 * (verts[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] +
                           verts[static_cast<std::size_t>(b)][static_cast<std::size_t>(c)]);
            project(m);
            verts.push_back(m);
            const int id = static_cast<int>(verts.size()) - 1;
            midpoint.emplace(key, id);
            return id;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const int ab = mid(f[0], f[1]);
            const int bc = mid(f[1], f[2]);
            const int ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    TriMesh mesh;
    mesh.vertices = Tensor({static_cast<int>(verts.size()), 3});
    for (int i = 0; i < static_cast<int>(verts.size()); ++i)
        std::copy(verts[static_cast<std::size_t>(i)].begin(),
                  verts[static_cast<std::size_t>(i)].end(), row(mesh.vertices, i));
    mesh.faces = std::move(faces);
    return mesh;
}

/// Uniform-in-area sampling with per-face normals.
inline PointCloud sample_mesh(const TriMesh& mesh, int n, Rng& rng) {
    if (mesh.faces.empty()) throw contract_error("sample_mesh: empty mesh");
    std::vector<double> cdf(mesh.faces.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
        acc += mesh.face_area(mesh.faces[i]);
        cdf[i] = acc;
    }
    if (acc <= 0.0) throw contract_error("sample_mesh: zero surface area");
    Tensor pts({n, 3}), nrm({n, 3});
    for (int i = 0; i < n; ++i) {
        const double pick = rng.uniform() * acc;
        const std::size_t fidx = static_cast<std::size_t>(
            std::lower_bound(cdf.begin(), cdf.end(), pick) - cdf.begin());
        const auto& f = mesh.faces[std::min(fidx, mesh.faces.size() - 1)];
        const double* a = row(mesh.vertices, f[0]);
        const double* b = row(mesh.vertices, f[1]);
        const double* c = row(mesh.vertices, f[2]);
        double r1 = std::sqrt(rng.uniform());
        double r2 = rng.uniform();
        const double wa = 1.0 - r1, wb = r1 * (1.0 - r2), wc = r1 * r2;
        double* p = row(pts, i);
        for (int k = 0; k < 3; ++k) p[k] = wa * a[k] + wb * b[k] + wc * c[k];
        const double u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
        const double v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
        double nx = u[1] * v[2] - u[2] * v[1];
        double ny = u[2] * v[0] - u[0] * v[2];
        double nz = u[0] * v[1] - u[1] * v[0];
        const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
        double* m = row(nrm, i);
        m[0] = nx / len;
        m[1] = ny / len;
        m[2] = nz / len;
    }
    return {std::move(pts), std::move(nrm)};
}

/// Blue-noise sampling of a mesh: 4x dense uniform candidates, then sample
/// elimination down to m using the exact mesh area.
inline PointCloud poisson_like_sample(const TriMesh& mesh, int m, Rng& rng) {
    if (m < 1) throw contract_error("poisson_like_sample: m must be >= 1");
    const PointCloud dense = sample_mesh(mesh, 4 * m, rng);
    return poisson_like_sample(dense, m, mesh.area());
}

/// Exact distance from p to triangle (a,b,c) (Ericson's region method).
inline double point_triangle_distance(const double* p, const double* a, const double* b,
                                      const double* c) {
    auto dot = [](const double* u, const double* v) {
        return u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    };
    const double ab[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const double ac[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    const double ap[3] = {p[0] - a[0], p[1] - a[1], p[2] - a[2]};
    const double d1 = dot(ab, ap), d2 = dot(ac, ap);
    auto dist_to = [&](double wx, double wy) {
        const double qx = a[0] + wx * ab[0] + wy * ac[0] - p[0];
        const double qy = a[1] + wx * ab[1] + wy * ac[1] - p[1];
        const double qz = a[2] + wx * ab[2] + wy * ac[2] - p[2];
        return std::sqrt(qx * qx + qy * qy + qz * qz);
    };
    if (d1 <= 0.0 && d2 <= 0.0) return dist_to(0.0, 0.0);  // vertex a
    const double bp[3] = {p[0] - b[0], p[1] - b[1], p[2] - b[2]};
    const double d3 = dot(ab, bp), d4 = dot(ac, bp);
    if (d3 >= 0.0 && d4 <= d3) return dist_to(1.0, 0.0);  // vertex b
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0)
        return dist_to(d1 / (d1 - d3), 0.0);  // edge ab
    const double cp[3] = {p[0] - c[0], p[1] - c[1], p[2] - c[2]};
    const double d5 = dot(ab, cp), d6 = dot(ac, cp);
    if (d6 >= 0.0 && d5 <= d6) return dist_to(0.0, 1.0);  // vertex c
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0)
        return dist_to(0.0, d2 / (d2 - d6));  // edge ac
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));  // edge bc
        return dist_to(1.0 - w, w);
    }
    const double denom = 1.0 / (va + vb + vc);
    return dist_to(vb * denom, vc * denom);  // interior
}

/// Accelerated exact point-to-mesh distance: nearest triangle centroids give
/// an upper bound, then every triangle whose centroid could beat that bound
/// is tested exactly.
class MeshDistance {
public:
    explicit MeshDistance(TriMesh mesh) : mesh_(std::move(mesh)) {
        if (mesh_.faces.empty()) throw contract_error("MeshDistance: empty mesh");
        const int f = static_cast<int>(mesh_.faces.size());
        Tensor centroids({f, 3});
        max_spread_ = 0.0;
        for (int i = 0; i < f; ++i) {
            const auto& face = mesh_.faces[static_cast<std::size_t>(i)];
            const double* a = row(mesh_.vertices, face[0]);
            const double* b = row(mesh_.vertices, face[1]);
            const double* c = row(mesh_.vertices, face[2]);
            double* cent = row(centroids, i);
            for (int k = 0; k < 3; ++k) cent[k] = (a[k] + b[k] + c[k]) / 3.0;
            for (const double* v : {a, b, c}) {
                const double dx = v[0] - cent[0], dy = v[1] - cent[1], dz = v[2] - cent[2];
                max_spread_ = std::max(max_spread_, std::sqrt(dx * dx + dy * dy + dz * dz));
            }
        }
        tree_ = std::make_unique<KdTree>(std::move(centroids));
    }

    double distance(const double* p) const {
        const int first = tree_->nearest(p);
        double best = exact(p, first);
        std::vector<Neighbor> in_range;
        tree_->radius_search(p, best + max_spread_, in_range);
        for (const Neighbor& nb : in_range)
            if (nb.index != first) best = std::min(best, exact(p, nb.index));
        return best;
    }

    double brute_force(const double* p) const {
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < static_cast<int>(mesh_.faces.size()); ++i)
            best = std::min(best, exact(p, i));
        return best;
    }

private:
    double exact(const double* p, int face) const {
        const auto& f = mesh_.faces[static_cast<std::size_t>(face)];
        return point_triangle_distance(p, row(mesh_.vertices, f[0]), row(mesh_.vertices, f[1]),
                                       row(mesh_.vertices, f[2]));
    }

    TriMesh mesh_;
    std::unique_ptr<KdTree> tree_;
    double max_spread_;
};

}  // namespace np
