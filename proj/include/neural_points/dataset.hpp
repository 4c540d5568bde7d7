#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "neural_points/config.hpp"
#include "neural_points/errors.hpp"
#include "neural_points/knn.hpp"
#include "neural_points/point_cloud.hpp"
#include "neural_points/rng.hpp"
#include "neural_points/sampling.hpp"
#include "neural_points/surfaces.hpp"
#include "neural_points/tensor.hpp"

namespace np {

/// One training instance: a sparse input patch and the dense reference patch
/// covering the same region of the surface. Inputs carry coordinates only;
/// the reference always carries normals.
struct TrainSample {
    PointCloud input;
    PointCloud gt;
    std::string surface;
    int index = 0;  // anchor index within its surface
};

struct Dataset {
    DatasetConfig config;
    std::vector<TrainSample> samples;
};

namespace detail {

/// Indices of the `count` rows of `points` nearest to `anchor`, by squared
/// distance with index tiebreak, returned in ascending row order.
inline std::vector<int> nearest_set(const Tensor& points, const double* anchor, int count) {
    const int n = points.dim(0);
    KdTree tree(points);
    std::vector<int> picked = tree.knn(anchor, std::min(count, n));
    std::sort(picked.begin(), picked.end());
    return picked;
}

inline PointCloud gather_cloud(const PointCloud& cloud, const std::vector<int>& rows) {
    PointCloud out;
    out.points = Tensor({static_cast<int>(rows.size()), 3});
    if (cloud.has_normals()) out.normals = Tensor({static_cast<int>(rows.size()), 3});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            out.points.data()[3 * i + c] = cloud.points.data()[3 * rows[i] + c];
            if (cloud.has_normals())
                out.normals.data()[3 * i + c] = cloud.normals.data()[3 * rows[i] + c];
        }
    }
    return out;
}

/// Cut the reference patch matching an input patch: start from every
/// reference point whose nearest input point lies inside the patch, then trim
/// or pad by distance to the anchor until exactly `target` points remain.
inline std::vector<int> match_gt_patch(const PointCloud& gt, const KdTree& input_tree,
                                       const std::vector<bool>& in_patch, const double* anchor,
                                       int target) {
    const int n = gt.size();
    if (target > n)
        throw contract_error("match_gt_patch: reference cloud has " + std::to_string(n) +
                             " points, patch needs " + std::to_string(target));
    std::vector<char> candidate(n, 0);
    for (int i = 0; i < n; ++i)
        candidate[i] = in_patch[input_tree.nearest(gt.points.data() + 3 * i)] ? 1 : 0;

    auto d2_to_anchor = [&](int i) {
        const double* p = gt.points.data() + 3 * i;
        const double dx = p[0] - anchor[0], dy = p[1] - anchor[1], dz = p[2] - anchor[2];
        return dx * dx + dy * dy + dz * dz;
    };
    std::vector<std::pair<double, int>> in_set, out_set;
    for (int i = 0; i < n; ++i)
        (candidate[i] ? in_set : out_set).emplace_back(d2_to_anchor(i), i);
    std::sort(in_set.begin(), in_set.end());
    std::sort(out_set.begin(), out_set.end());

    std::vector<int> picked;
    picked.reserve(target);
    for (int i = 0; i < target && i < static_cast<int>(in_set.size()); ++i)
        picked.push_back(in_set[i].second);
    for (int i = 0; static_cast<int>(picked.size()) < target; ++i)
        picked.push_back(out_set[i].second);
    std::sort(picked.begin(), picked.end());
    return picked;
}

/// Roughly even surface sampling: oversample 4x, then spread by farthest-point
/// rejection calibrated to the surface area.
inline PointCloud even_surface_cloud(const AnalyticSurface& surf, int count, Rng& rng) {
    PointCloud dense = surf.sample(4 * count, rng);
    return poisson_like_sample(dense, count, surf.area());
}

}  // namespace detail

/// Generate the synthetic training corpus described by `cfg` under
/// `cfg.out_dir`: per surface, an evenly sampled sparse cloud and a dense
/// reference at `factor` times the density, cut into anchored patches.
/// Layout: inputs/<surface>_<k>.xyz (coordinates), gt/<surface>_<k>.xyz
/// (coordinates + normals), manifest.json. Fully determined by the config.
inline Dataset gen_dataset(const DatasetConfig& cfg) {
    if (cfg.surfaces.empty()) throw config_error("gen_dataset: no surfaces listed");
    if (cfg.points_in < 8) throw config_error("gen_dataset: points_in must be >= 8");
    if (cfg.factor < 1.0) throw config_error("gen_dataset: factor must be >= 1");
    if (cfg.anchors < 1) throw config_error("gen_dataset: anchors must be >= 1");
    if (cfg.patch_size < 8) throw config_error("gen_dataset: patch_size must be >= 8");

    namespace fs = std::filesystem;
    const fs::path root(cfg.out_dir);
    fs::create_directories(root / "inputs");
    fs::create_directories(root / "gt");

    Dataset data;
    data.config = cfg;
    Rng rng(cfg.seed);
    Json entries = Json::array();

    for (const std::string& name : cfg.surfaces) {
        auto surf = make_surface(name);
        PointCloud input = detail::even_surface_cloud(*surf, cfg.points_in, rng);
        const int n_gt = static_cast<int>(std::llround(cfg.factor * cfg.points_in));
        PointCloud gt = detail::even_surface_cloud(*surf, n_gt, rng);
        input.normals = Tensor();  // inputs ship coordinates only

        std::vector<int> anchors =
            farthest_point_sample(input.points, std::min(cfg.anchors, input.size()), 0);
        KdTree input_tree(input.points);

        for (std::size_t a = 0; a < anchors.size(); ++a) {
            const double* anchor = input.points.data() + 3 * anchors[a];
            std::vector<int> patch_rows =
                detail::nearest_set(input.points, anchor, cfg.patch_size);
            std::vector<bool> in_patch(input.size(), false);
            for (int rrow : patch_rows) in_patch[rrow] = true;

            const int z_target = static_cast<int>(
                std::llround(cfg.factor * static_cast<double>(patch_rows.size())));
            std::vector<int> gt_rows =
                detail::match_gt_patch(gt, input_tree, in_patch, anchor, z_target);

            TrainSample sample;
            sample.input = detail::gather_cloud(input, patch_rows);
            sample.gt = detail::gather_cloud(gt, gt_rows);
            sample.surface = name;
            sample.index = static_cast<int>(a);

            const std::string stem = name + "_" + std::to_string(a) + ".xyz";
            const std::string in_rel = "inputs/" + stem;
            const std::string gt_rel = "gt/" + stem;
            save_xyz((root / in_rel).string(), sample.input);
            save_xyz((root / gt_rel).string(), sample.gt);
            entries.push_back(Json{{"surface", name},
                                   {"index", static_cast<int>(a)},
                                   {"input", in_rel},
                                   {"gt", gt_rel}});
            data.samples.push_back(std::move(sample));
        }
    }

    Json manifest = to_json(cfg);
    manifest["entries"] = entries;
    std::ofstream mf(root / "manifest.json");
    if (!mf) throw io_error("gen_dataset: cannot write manifest under '" + cfg.out_dir + "'");
    mf << manifest.dump(2) << "\n";
    if (!mf.good()) throw io_error("gen_dataset: manifest write failed");
    return data;
}

/// Load a corpus previously written by gen_dataset.
inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    std::ifstream mf(root / "manifest.json");
    if (!mf) throw io_error("load_dataset: cannot open manifest in '" + dir + "'");
    Json manifest;
    try {
        mf >> manifest;
    } catch (const Json::exception& e) {
        throw io_error("load_dataset: bad manifest in '" + dir + "': " + e.what());
    }

    Dataset data;
    data.config = dataset_from_json(manifest);
    if (!manifest.contains("entries") || !manifest.at("entries").is_array())
        throw io_error("load_dataset: manifest lacks an entries array");
    for (const Json& e : manifest.at("entries")) {
        TrainSample s;
        s.surface = e.at("surface").get<std::string>();
        s.index = e.at("index").get<int>();
        s.input = load_cloud((root / e.at("input").get<std::string>()).string());
        s.gt = load_cloud((root / e.at("gt").get<std::string>()).string());
        if (!s.gt.has_normals())
            throw io_error("load_dataset: reference patch '" + e.at("gt").get<std::string>() +
                           "' carries no normals");
        data.samples.push_back(std::move(s));
    }
    if (data.samples.empty()) throw io_error("load_dataset: corpus is empty");
    return data;
}

}  // namespace np
