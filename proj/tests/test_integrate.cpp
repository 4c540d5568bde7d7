#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "neural_points/field.hpp"
#include "neural_points/integrate.hpp"
#include "support.hpp"

using namespace np;
using test_support::check_param_grads_fd;
using test_support::quantize;
using test_support::random_cloud;
using test_support::random_tensor;

namespace {

GlobalField hand_field(Tensor centers, Tensor samples, Tensor normals, int per_center,
                       double alpha_blend = 100.0, double alpha_proj = 1000.0, int blend_k = 4,
                       int knn_proj = 4) {
    FieldEvalResult fr;
    fr.centers = centers.dim(0);
    fr.per_center = per_center;
    fr.points = Value(std::move(samples));
    fr.normals = Value(std::move(normals));
    ModelConfig cfg;
    cfg.alpha_blend = alpha_blend;
    cfg.alpha_proj = alpha_proj;
    cfg.blend_k = blend_k;
    cfg.knn_proj = knn_proj;
    return make_global_field(std::move(centers), std::move(fr), cfg);
}

Tensor planar_samples(int r) {  // unit-square corners + grid on z=0 (r<=4 corners)
    Tensor s({r, 3});
    for (int i = 0; i < r; ++i) {
        s.data()[3 * i + 0] = (i % 2 == 0) ? -0.3 : 0.3;
        s.data()[3 * i + 1] = (i / 2 % 2 == 0) ? -0.3 : 0.3;
        s.data()[3 * i + 2] = 0.0;
    }
    return s;
}

Tensor constant_normals(int r, double z) {
    Tensor n({r, 3});
    for (int i = 0; i < r; ++i) n.data()[3 * i + 2] = z;
    return n;
}

void normalize_row(double* v) {
    const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (int k = 0; k < 3; ++k) v[k] /= len;
}

// Brute-force reference for the integrated map: nearest centers by (d2,index),
// per-center chart projection with stabilized weights, then the center blend.
void oracle_rho(const double* x, const Tensor& centers, const Tensor& samples,
                const Tensor& normals, int r, int blend_k, int knn_proj, double a1, double a2,
                double* out_p, double* out_n) {
    const int i_count = centers.dim(0);
    std::vector<Neighbor> cs(static_cast<std::size_t>(i_count));
    for (int c = 0; c < i_count; ++c) {
        double d2 = 0.0;
        for (int k = 0; k < 3; ++k) {
            const double d = x[k] - centers.data()[3 * c + k];
            d2 += d * d;
        }
        cs[static_cast<std::size_t>(c)] = {d2, c};
    }
    std::sort(cs.begin(), cs.end());
    const int bk = std::min(blend_k, i_count);

    std::vector<double> pc(static_cast<std::size_t>(bk) * 3), nc(static_cast<std::size_t>(bk) * 3);
    for (int j = 0; j < bk; ++j) {
        const int c = cs[static_cast<std::size_t>(j)].index;
        std::vector<Neighbor> ss(static_cast<std::size_t>(r));
        for (int s = 0; s < r; ++s) {
            const double* q = samples.data() + 3 * (c * r + s);
            double d2 = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double d = x[k] - q[k];
                d2 += d * d;
            }
            ss[static_cast<std::size_t>(s)] = {d2, c * r + s};
        }
        std::sort(ss.begin(), ss.end());
        const int kk = std::min(knn_proj, r);
        const double dmin = ss[0].d2;
        double wsum = 0.0, pt[3] = {0, 0, 0}, nm[3] = {0, 0, 0};
        const double* nref = normals.data() + 3 * ss[0].index;
        for (int s = 0; s < kk; ++s) {
            const double w = std::exp(-a2 * (ss[static_cast<std::size_t>(s)].d2 - dmin));
            wsum += w;
            const double* q = samples.data() + 3 * ss[static_cast<std::size_t>(s)].index;
            const double* n = normals.data() + 3 * ss[static_cast<std::size_t>(s)].index;
            const double dot = n[0] * nref[0] + n[1] * nref[1] + n[2] * nref[2];
            const double sgn = dot < 0.0 ? -1.0 : 1.0;
            for (int k = 0; k < 3; ++k) {
                pt[k] += w * q[k];
                nm[k] += w * sgn * n[k];
            }
        }
        for (int k = 0; k < 3; ++k) {
            pc[static_cast<std::size_t>(3 * j + k)] = pt[k] / wsum;
            nc[static_cast<std::size_t>(3 * j + k)] = nm[k];
        }
        normalize_row(nc.data() + 3 * j);
    }

    const double cmin = cs[0].d2;
    double wsum = 0.0, pt[3] = {0, 0, 0}, nm[3] = {0, 0, 0};
    const double* nref = nc.data();
    for (int j = 0; j < bk; ++j) {
        const double w = std::exp(-a1 * (cs[static_cast<std::size_t>(j)].d2 - cmin));
        wsum += w;
        const double* n = nc.data() + 3 * j;
        const double dot = n[0] * nref[0] + n[1] * nref[1] + n[2] * nref[2];
        const double sgn = dot < 0.0 ? -1.0 : 1.0;
        for (int k = 0; k < 3; ++k) {
            pt[k] += w * pc[static_cast<std::size_t>(3 * j + k)];
            nm[k] += w * sgn * n[k];
        }
    }
    for (int k = 0; k < 3; ++k) out_p[k] = pt[k] / wsum;
    normalize_row(nm);
    for (int k = 0; k < 3; ++k) out_n[k] = nm[k];
}

double entry(const Value& v, int i) { return v.val.data()[i]; }

}  // namespace

TEST_CASE("global field assembly checks shapes and keeps counts") {
    Rng rng(50);
    Tensor centers = random_cloud(rng, 3, 0.4);
    FieldEvalResult fr;
    fr.centers = 3;
    fr.per_center = 4;
    fr.points = Value(random_cloud(rng, 12, 0.5));
    fr.normals = Value(constant_normals(12, 1.0));
    ModelConfig cfg;
    GlobalField gf = make_global_field(centers, fr, cfg);
    CHECK(gf.samples.val.dim(0) == 12);
    CHECK(gf.per_center == 4);
    CHECK(gf.center_tree != nullptr);
    CHECK(gf.centers.dim(0) == 3);

    FieldEvalResult bad = fr;
    bad.centers = 2;
    CHECK_THROWS_AS(make_global_field(centers, bad, cfg), contract_error);
}

TEST_CASE("raw blend weights match the exponential form") {
    Tensor centers({3, 3}, {0, 0, 0, 0.1, 0, 0, 0, 0.3, 0});
    const double x[3] = {0, 0, 0};
    SECTION("zero distance gives weight one") {
        std::vector<double> w = blend_weights(x, centers, {0, 1}, 100.0);
        CHECK(w[0] == 1.0);
        CHECK(w[1] == Catch::Approx(std::exp(-1.0)).margin(1e-15));
    }
    SECTION("equidistant neighbors weigh equally") {
        Tensor c2({2, 3}, {0.2, 0, 0, -0.2, 0, 0});
        std::vector<double> w = blend_weights(x, c2, {0, 1}, 100.0);
        CHECK(w[0] == w[1]);
    }
    SECTION("total underflow falls back to the nearest neighbor") {
        Tensor far({2, 3}, {5.0, 0, 0, 6.0, 0, 0});
        bool uf = false;
        std::vector<double> w = blend_weights(x, far, {1, 0}, 1e3, &uf);
        CHECK(uf);
        CHECK(w[1] == 1.0);  // index 0 in the list order {1,0} is center 1 (farther)
        CHECK(w[0] == 0.0);
    }
    SECTION("bad input is rejected") {
        CHECK_THROWS_AS(blend_weights(x, centers, {}, 100.0), contract_error);
        CHECK_THROWS_AS(blend_weights(x, centers, {3}, 100.0), contract_error);
    }
}

TEST_CASE("a single chart makes the integrated map equal the chart projection") {
    Rng rng(51);
    Tensor center({1, 3}, {0.05, -0.1, 0.0});
    Tensor samples = random_cloud(rng, 8, 0.3);
    Tensor normals = random_cloud(rng, 8);
    for (int i = 0; i < 8; ++i) normalize_row(normals.data() + 3 * i);
    GlobalField gf = hand_field(center, samples, normals, 8);

    FieldSample patch;
    patch.points = Value(samples);
    patch.normals = Value(normals);
    const double x[3] = {0.12, 0.07, 0.2};
    ProjResult direct = phi_psi(x, patch, 4, 1e3);
    Value via = rho(x, gf);
    Value via_n = rho_normal(x, gf);
    for (int k = 0; k < 3; ++k) {
        CHECK(entry(via, k) == entry(direct.points, k));  // weight-one blend is exact
        CHECK(entry(via_n, k) == Catch::Approx(entry(direct.normals, k)).margin(1e-15));
    }
}

TEST_CASE("coincident charts blend to their common projection") {
    Tensor centers({4, 3});  // all at the origin
    Tensor samples({16, 3});
    Tensor normals({16, 3});
    for (int c = 0; c < 4; ++c) {
        Tensor s = planar_samples(4);
        for (int i = 0; i < 12; ++i) samples.data()[c * 12 + i] = s.data()[i];
        for (int i = 0; i < 4; ++i) normals.data()[(c * 4 + i) * 3 + 2] = 1.0;
    }
    GlobalField gf = hand_field(centers, samples, normals, 4);
    const double x[3] = {0.05, -0.02, 0.3};

    FieldSample patch;
    patch.points = Value(planar_samples(4));
    patch.normals = Value(constant_normals(4, 1.0));
    ProjResult direct = phi_psi(x, patch, 4, 1e3);
    Value via = rho(x, gf);
    for (int k = 0; k < 3; ++k)
        CHECK(entry(via, k) == Catch::Approx(entry(direct.points, k)).margin(1e-14));
    CHECK(entry(via, 2) == 0.0);  // convex combination of in-plane points
    Value n = rho_normal(x, gf);
    CHECK(entry(n, 0) == 0.0);
    CHECK(entry(n, 1) == 0.0);
    CHECK(entry(n, 2) == 1.0);
}

TEST_CASE("opposed chart orientations still blend to a single consistent normal") {
    Tensor centers({2, 3});
    Tensor samples({8, 3});
    Tensor normals({8, 3});
    for (int c = 0; c < 2; ++c) {
        Tensor s = planar_samples(4);
        for (int i = 0; i < 12; ++i) samples.data()[c * 12 + i] = s.data()[i];
        for (int i = 0; i < 4; ++i) normals.data()[(c * 4 + i) * 3 + 2] = (c == 0 ? 1.0 : -1.0);
    }
    GlobalField gf = hand_field(centers, samples, normals, 4);
    const double x[3] = {0.02, 0.01, 0.1};
    Value n = rho_normal(x, gf);
    CHECK(std::abs(entry(n, 2)) == 1.0);
    CHECK(entry(n, 0) == 0.0);
    CHECK(entry(n, 1) == 0.0);
}

TEST_CASE("integrated map matches a brute-force oracle") {
    Rng rng(52);
    const int i_count = 6, r = 5, blend_k = 4, knn_proj = 3;
    for (int trial = 0; trial < 25; ++trial) {
        Tensor centers = random_cloud(rng, i_count, 0.5);
        Tensor samples({i_count * r, 3});
        Tensor normals({i_count * r, 3});
        for (int c = 0; c < i_count; ++c) {
            Tensor local = random_cloud(rng, r, 0.15);
            Tensor ln = random_cloud(rng, r);
            for (int s = 0; s < r; ++s) {
                normalize_row(ln.data() + 3 * s);
                for (int k = 0; k < 3; ++k) {
                    samples.data()[(c * r + s) * 3 + k] =
                        centers.data()[3 * c + k] + local.data()[3 * s + k];
                    normals.data()[(c * r + s) * 3 + k] = ln.data()[3 * s + k];
                }
            }
        }
        GlobalField gf = hand_field(centers, samples, normals, r, 100.0, 1000.0, blend_k,
                                    knn_proj);
        Tensor queries = random_cloud(rng, 4, 0.5);
        RhoResult res = rho_batch(Value(queries), gf);
        for (int i = 0; i < 4; ++i) {
            double op[3], on[3];
            oracle_rho(queries.data() + 3 * i, centers, samples, normals, r, blend_k, knn_proj,
                       100.0, 1000.0, op, on);
            for (int k = 0; k < 3; ++k) {
                CHECK(entry(res.points, 3 * i + k) == Catch::Approx(op[k]).margin(1e-9));
                CHECK(entry(res.normals, 3 * i + k) == Catch::Approx(on[k]).margin(1e-9));
            }
            // Unit normal.
            double len2 = 0.0;
            for (int k = 0; k < 3; ++k)
                len2 += entry(res.normals, 3 * i + k) * entry(res.normals, 3 * i + k);
            CHECK(std::abs(std::sqrt(len2) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("integrated map stays inside the box of its chart projections") {
    Rng rng(53);
    const int i_count = 5, r = 6;
    Tensor centers = random_cloud(rng, i_count, 0.4);
    Tensor samples({i_count * r, 3});
    Tensor normals({i_count * r, 3});
    for (int c = 0; c < i_count; ++c)
        for (int s = 0; s < r; ++s) {
            for (int k = 0; k < 3; ++k)
                samples.data()[(c * r + s) * 3 + k] =
                    centers.data()[3 * c + k] + 0.1 * rng.normal();
            normals.data()[(c * r + s) * 3 + 2] = 1.0;
        }
    GlobalField gf = hand_field(centers, samples, normals, r);
    Tensor queries = random_cloud(rng, 10, 0.4);
    RhoResult res = rho_batch(Value(queries), gf);
    for (int i = 0; i < 10; ++i) {
        // Recompute the per-chart projections with the oracle's inner stage.
        double op[3], on[3];
        oracle_rho(queries.data() + 3 * i, centers, samples, normals, r, 1, 4, 100.0, 1000.0, op,
                   on);
        // The blend over charts lies between the coordinate extremes of all
        // participating chart projections; with blend_k=4, check against the
        // global sample extremes, which bound every chart projection.
        for (int k = 0; k < 3; ++k) {
            double lo = samples.data()[k], hi = samples.data()[k];
            for (int s = 1; s < i_count * r; ++s) {
                lo = std::min(lo, samples.data()[3 * s + k]);
                hi = std::max(hi, samples.data()[3 * s + k]);
            }
            CHECK(entry(res.points, 3 * i + k) >= lo - 1e-12);
            CHECK(entry(res.points, 3 * i + k) <= hi + 1e-12);
        }
    }
}

TEST_CASE("integrated map commutes with translation") {
    Rng rng(54);
    const int i_count = 4, r = 5;
    Tensor centers = random_cloud(rng, i_count, 0.4);
    Tensor samples({i_count * r, 3});
    Tensor normals({i_count * r, 3});
    for (int c = 0; c < i_count; ++c)
        for (int s = 0; s < r; ++s) {
            for (int k = 0; k < 3; ++k)
                samples.data()[(c * r + s) * 3 + k] =
                    centers.data()[3 * c + k] + 0.12 * rng.normal();
            normals.data()[(c * r + s) * 3 + (s % 3)] = 1.0;
        }
    quantize(centers);
    quantize(samples);
    Tensor query = random_cloud(rng, 3, 0.4);
    quantize(query);

    GlobalField base = hand_field(centers, samples, normals, r);
    RhoResult rb = rho_batch(Value(query), base);

    const double off[3] = {0.5, -1.0, 2.0};
    GlobalField moved = hand_field(test_support::translated(centers, off[0], off[1], off[2]),
                                   test_support::translated(samples, off[0], off[1], off[2]),
                                   normals, r);
    RhoResult rm = rho_batch(Value(test_support::translated(query, off[0], off[1], off[2])),
                             moved);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) {
            CHECK(entry(rm.points, 3 * i + k) ==
                  Catch::Approx(entry(rb.points, 3 * i + k) + off[k]).margin(1e-12));
            CHECK(entry(rm.normals, 3 * i + k) ==
                  Catch::Approx(entry(rb.normals, 3 * i + k)).margin(1e-12));
        }
}

TEST_CASE("distant queries raise the far flag but stay finite") {
    Rng rng(55);
    Tensor centers = random_cloud(rng, 3, 0.2);
    Tensor samples({6, 3});
    Tensor normals({6, 3});
    for (int c = 0; c < 3; ++c)
        for (int s = 0; s < 2; ++s) {
            for (int k = 0; k < 3; ++k)
                samples.data()[(c * 2 + s) * 3 + k] = centers.data()[3 * c + k] + 0.05 * s;
            normals.data()[(c * 2 + s) * 3 + 2] = 1.0;
        }
    GlobalField gf = hand_field(centers, samples, normals, 2);
    Tensor query({1, 3}, {100.0, 0.0, 0.0});
    RhoResult res = rho_batch(Value(query), gf);
    CHECK(res.far_query);
    CHECK(res.underflow);  // the inner projections are also far past underflow
    for (int k = 0; k < 3; ++k) CHECK(std::isfinite(entry(res.points, k)));
    // The stabilized blend still returns a point among the samples.
    CHECK(entry(res.points, 0) >= -1.0);
    CHECK(entry(res.points, 0) <= 1.0);
}

TEST_CASE("integrated map is deterministic") {
    Rng rng(56);
    Tensor centers = random_cloud(rng, 5, 0.4);
    Tensor samples = random_cloud(rng, 20, 0.6);
    Tensor normals({20, 3});
    for (int i = 0; i < 20; ++i) normals.data()[3 * i + (i % 3)] = 1.0;
    GlobalField gf = hand_field(centers, samples, normals, 4);
    Tensor queries = random_cloud(rng, 6, 0.4);
    RhoResult a = rho_batch(Value(queries), gf);
    RhoResult b = rho_batch(Value(queries), gf);
    for (std::int64_t i = 0; i < a.points.val.size(); ++i) {
        CHECK(a.points.val.data()[i] == b.points.val.data()[i]);
        CHECK(a.normals.val.data()[i] == b.normals.val.data()[i]);
    }
}

TEST_CASE("gradients flow through the integrated map") {
    Rng rng(57);
    FieldConfig cfg;
    cfg.hidden = 4;
    cfg.encoding.num_frequencies = 1;
    cfg.encoding.include_input = true;
    ParamStore store;
    init_field_params(store, cfg, 2, rng);
    store.set("field.l3.w", random_tensor(rng, {4, 3}, 0.3));
    Tensor centers = random_cloud(rng, 3, 0.4);
    Tensor features = random_tensor(rng, {3, 2});
    Tensor queries = random_cloud(rng, 5, 0.4);
    Tensor mix = random_tensor(rng, {5, 3});
    EncodingTables enc = make_grid_tables(4, cfg.encoding);
    ModelConfig mcfg;

    auto build = [&](const ParamStore& s, Graph& g) {
        ParamValues pv = ParamValues::leaves(g, s);
        FieldEvalResult field = eval_field(centers, Value(features), enc, pv, true);
        GlobalField gf = make_global_field(centers, std::move(field), mcfg);
        RhoResult res = rho_batch(Value(queries), gf);
        return add(sum_all(mul(res.points, Value(mix))), sum_all(mul(res.normals, Value(mix))));
    };
    check_param_grads_fd(build, store, 2e-4);
}
