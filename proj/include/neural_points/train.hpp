#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "neural_points/checkpoint.hpp"
#include "neural_points/config.hpp"
#include "neural_points/dataset.hpp"
#include "neural_points/encoder.hpp"
#include "neural_points/errors.hpp"
#include "neural_points/field.hpp"
#include "neural_points/integrate.hpp"
#include "neural_points/loss.hpp"
#include "neural_points/optimizer.hpp"
#include "neural_points/params.hpp"
#include "neural_points/rng.hpp"
#include "neural_points/sampler.hpp"
#include "neural_points/sampling.hpp"

namespace np {

/// Everything about one training sample that does not depend on the
/// parameters, computed once up front: the unit-ball frame, the encoder's
/// neighborhood graph, the uv grid tables, and the reference kd-tree.
struct PreparedSample {
    Tensor input_points;  // (I,3), unit-ball normalized
    Tensor gt_points;     // (J,3), same frame
    Tensor gt_normals;    // (J,3)
    EncoderPlanData encoder_plan;
    EncodingTables enc_tables;
    std::shared_ptr<const KdTree> gt_tree;
    int per_patch = 0;   // chart sample grid budget R
    int xr_rows = 0;     // I * R, the dense union size
};

inline PreparedSample prepare_sample(const TrainSample& sample, const ModelConfig& cfg) {
    if (!sample.gt.has_normals())
        throw contract_error("prepare_sample: reference cloud must carry normals");
    NormalizeResult norm = normalize_unit_ball(sample.input);
    PreparedSample ps;
    ps.input_points = std::move(norm.cloud.points);
    ps.gt_points = apply_transform(norm.transform, sample.gt.points);
    ps.gt_normals = sample.gt.normals.clone();  // uniform scaling keeps directions
    const int i_count = ps.input_points.dim(0);
    const int j_count = ps.gt_points.dim(0);
    ps.per_patch = default_per_patch(i_count, j_count);
    ps.encoder_plan = prepare_encoder_input(ps.input_points, cfg.encoder.knn);
    ps.enc_tables = make_grid_tables(ps.per_patch, cfg.field.encoding);
    ps.gt_tree = std::make_shared<const KdTree>(ps.gt_points);
    ps.xr_rows = i_count * ps.per_patch;
    return ps;
}

/// One full forward/backward pass over a prepared sample: encode, evaluate
/// the charts, integrate, subsample the dense union starting at `fps_start`,
/// pull through the global map, and score. Gradients are added into `accum`
/// scaled by `weight`, so a batch item drawn `c` times costs one pass with
/// weight c.
inline LossReport accumulate_sample_grads(const PreparedSample& ps, const ParamStore& params,
                                          const ModelConfig& cfg, const LossWeights& weights,
                                          int fps_start, double weight,
                                          std::map<std::string, Tensor>& accum) {
    Graph g;
    ParamValues pv = ParamValues::leaves(g, params);
    LocalFeatures lf = extract_local_features(ps.encoder_plan, pv);
    FieldEvalResult fer = eval_field(ps.input_points, lf.f, ps.enc_tables, pv, true);
    GlobalField gf = make_global_field(ps.input_points, std::move(fer), cfg);

    const int j_count = ps.gt_points.dim(0);
    std::vector<int> picked = subsample_targets(gf.samples.val, j_count, fps_start);
    IndexVec rows = make_indices(std::vector<std::int64_t>(picked.begin(), picked.end()));
    Value ystar = gather_rows(gf.samples, rows);
    RhoResult pulled = rho_batch(ystar, gf);

    LossInputs in;
    in.xr_points = gf.samples;
    in.xr_normals = gf.normals;
    in.y_points = pulled.points;
    in.y_normals = pulled.normals;
    in.z_points = Value(ps.gt_points);
    in.z_normals = Value(ps.gt_normals);
    in.z_tree = ps.gt_tree.get();
    TotalLoss tl = total_loss(in, gf, weights);

    g.backward(tl.total);
    for (auto& [name, grad] : g.named_grads()) {
        auto it = accum.find(name);
        if (it == accum.end()) {
            Tensor scaled(grad.shape());
            for (std::int64_t i = 0; i < grad.size(); ++i)
                scaled.data()[i] = weight * grad.data()[i];
            accum.emplace(name, std::move(scaled));
        } else {
            for (std::int64_t i = 0; i < grad.size(); ++i)
                it->second.data()[i] += weight * grad.data()[i];
        }
    }
    return tl.report;
}

/// Fresh parameters for a model: encoder weights first, field weights second,
/// all drawn from `rng` in a fixed order.
inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
    ParamStore store;
    init_encoder_params(store, cfg.encoder, rng);
    init_field_params(store, cfg.field, cfg.encoder.feature_dim(), rng);
    return store;
}

struct IterationStats {
    std::int64_t iteration = 0;
    double lr = 0.0;
    LossReport report;  // batch-weighted mean of the sample reports
};

struct TrainResult {
    Checkpoint checkpoint;  // final parameters (last good ones on abort)
    std::vector<IterationStats> history;
    bool aborted = false;  // a non-finite loss or gradient stopped training
    std::int64_t iterations_run = 0;
};

namespace detail {

inline void write_log_row(std::ofstream& log, const IterationStats& st) {
    char line[256];
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(st.iteration), st.report.shape, st.report.normal,
                  st.report.integration, st.report.total, st.lr);
    log << line;
}

}  // namespace detail

/// Optimize a fresh model on `data` per `cfg`. Writes train_log.csv (one row
/// per iteration: iter,shape,normal,integration,total,lr) and checkpoint.npck
/// (rewritten every checkpoint_interval iterations and at the end) under
/// cfg.out_dir. Batch items are drawn with replacement; duplicates within a
/// batch share a single forward/backward pass. A non-finite loss or gradient
/// aborts the run with the last finite parameters retained.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (data.samples.empty()) throw contract_error("train: dataset is empty");

    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    std::ofstream log(fs::path(cfg.out_dir) / "train_log.csv");
    if (!log) throw io_error("train: cannot write train_log.csv under '" + cfg.out_dir + "'");
    log << "iter,shape,normal,integration,total,lr\n";

    Rng rng(cfg.seed);
    ParamStore params = init_params(cfg.model, rng);
    std::vector<PreparedSample> prepared;
    prepared.reserve(data.samples.size());
    for (const TrainSample& s : data.samples) prepared.push_back(prepare_sample(s, cfg.model));

    Sgd sgd(SgdConfig{cfg.lr, cfg.lr_decay, cfg.decay_interval});
    LossWeights weights{cfg.omega_normal, cfg.omega_integration};
    const int n_samples = static_cast<int>(prepared.size());

    TrainResult result;
    auto snapshot = [&](std::int64_t iter) {
        Checkpoint ckpt;
        ckpt.iteration = static_cast<std::uint64_t>(iter);
        ckpt.config_json = to_json(cfg).dump();
        ckpt.rng_state = rng.state();
        ckpt.params = params;
        return ckpt;
    };
    const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.npck").string();

    for (std::int64_t iter = 0; iter < cfg.iterations; ++iter) {
        // Draw the batch, then collapse duplicates into multiplicities so each
        // distinct sample runs once.
        std::map<int, int> batch;
        for (int b = 0; b < cfg.batch_size; ++b) batch[rng.uniform_int(n_samples)] += 1;

        std::map<std::string, Tensor> grads;
        LossReport mean;
        bool finite = true;
        for (const auto& [idx, count] : batch) {
            const PreparedSample& ps = prepared[static_cast<std::size_t>(idx)];
            const int fps_start = rng.uniform_int(ps.xr_rows);
            LossReport r = accumulate_sample_grads(ps, params, cfg.model, weights, fps_start,
                                                   static_cast<double>(count), grads);
            const double w = static_cast<double>(count) / cfg.batch_size;
            mean.shape += w * r.shape;
            mean.normal += w * r.normal;
            mean.integration += w * r.integration;
            mean.total += w * r.total;
            if (!std::isfinite(r.total)) finite = false;
        }
        for (auto& [name, gsum] : grads)
            for (std::int64_t i = 0; i < gsum.size(); ++i) gsum.data()[i] /= cfg.batch_size;

        IterationStats st;
        st.iteration = iter;
        st.lr = sgd.current_lr();
        st.report = mean;
        result.history.push_back(st);
        detail::write_log_row(log, st);

        if (!finite) {
            result.aborted = true;
            break;
        }
        try {
            sgd.apply(params, grads);
        } catch (const training_error&) {
            result.aborted = true;
            break;
        }
        result.iterations_run = iter + 1;

        if (cfg.checkpoint_interval > 0 && (iter + 1) % cfg.checkpoint_interval == 0)
            save_checkpoint(ckpt_path, snapshot(iter + 1));
    }

    result.checkpoint = snapshot(result.iterations_run);
    save_checkpoint(ckpt_path, result.checkpoint);
    log.flush();
    if (!log.good()) throw io_error("train: writing train_log.csv failed");
    return result;
}

}  // namespace np
