// np: generate training data, train a model, upsample a cloud, or score one.
//
// Exit codes: 0 success, 1 usage error (bad flags, bad config values,
// conflicting --factor/--count), 2 runtime error (I/O, training failure).

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "neural_points/dataset.hpp"
#include "neural_points/metrics.hpp"
#include "neural_points/sampler.hpp"
#include "neural_points/surfaces.hpp"
#include "neural_points/train.hpp"

namespace {

np::Json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw np::io_error("cannot open config file '" + path + "'");
    np::Json j;
    try {
        f >> j;
    } catch (const np::Json::exception& e) {
        throw np::config_error("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return j;
}

int run_gen_data(const std::string& config_path) {
    np::DatasetConfig cfg = np::dataset_from_json(read_json_file(config_path));
    np::Dataset data = np::gen_dataset(cfg);
    std::cout << "wrote " << data.samples.size() << " patches under " << cfg.out_dir << "\n";
    return 0;
}

int run_train(const std::string& config_path) {
    np::TrainConfig cfg = np::train_from_json(read_json_file(config_path));
    if (cfg.dataset_dir.empty())
        throw np::config_error("train config must set dataset_dir");
    np::Dataset data = np::load_dataset(cfg.dataset_dir);
    np::TrainResult result = np::train(cfg, data);
    if (result.aborted) {
        std::cerr << "training aborted at iteration " << result.iterations_run
                  << " on a non-finite loss; last good checkpoint kept\n";
        return 2;
    }
    const np::LossReport& last = result.history.empty() ? np::LossReport{}
                                                        : result.history.back().report;
    std::cout << "trained " << result.iterations_run << " iterations, final total loss "
              << last.total << ", checkpoint in " << cfg.out_dir << "\n";
    return 0;
}

int run_upsample(const std::string& input_path, const std::string& ckpt_path,
                 const std::string& output_path, double factor, int count) {
    np::Checkpoint ckpt = np::load_checkpoint(ckpt_path);
    np::TrainConfig cfg;
    try {
        cfg = np::train_from_json(np::Json::parse(ckpt.config_json));
    } catch (const np::Json::exception& e) {
        throw np::io_error("checkpoint carries an unreadable config: " + std::string(e.what()));
    }

    np::UpsampleRequest req;
    req.input = np::load_cloud(input_path);
    req.target_count = count > 0 ? count
                                 : np::target_count_from_factor(factor, req.input.size());
    np::UpsampleResult result = np::upsample(req, ckpt.params, cfg.model);
    np::save_cloud(output_path, result.cloud);
    std::cout << "wrote " << result.cloud.size() << " points to " << output_path << "\n";
    return 0;
}

int run_eval(const std::string& pred_path, const std::string& gt_path,
             const std::string& surface, const std::string& csv_path) {
    np::PointCloud pred = np::load_cloud(pred_path);
    np::PointCloud gt = np::load_cloud(gt_path);
    const double cd = np::chamfer(pred.points, gt.points);
    const double hd = np::hausdorff(pred.points, gt.points);

    np::Json out{{"cd", cd}, {"hd", hd}, {"p2f", nullptr}};
    if (!surface.empty()) {
        auto surf = np::make_surface(surface);
        out["p2f"] = np::point_to_surface(pred.points, *surf);
    }
    std::cout << out.dump() << "\n";

    if (!csv_path.empty()) {
        const bool fresh = !std::filesystem::exists(csv_path);
        std::ofstream csv(csv_path, std::ios::app);
        if (!csv) throw np::io_error("cannot append to '" + csv_path + "'");
        if (fresh) csv << "pred,gt,cd,hd,p2f\n";
        csv << pred_path << "," << gt_path << "," << cd << "," << hd << ",";
        if (out.at("p2f").is_null())
            csv << "\n";
        else
            csv << out.at("p2f").get<double>() << "\n";
        if (!csv.good()) throw np::io_error("appending to '" + csv_path + "' failed");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural point cloud upsampling"};
    app.require_subcommand(1);

    std::string config_path;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic training corpus");
    gen->add_option("--config", config_path, "dataset config JSON")->required();

    std::string train_config_path;
    auto* train = app.add_subcommand("train", "train a model on a generated corpus");
    train->add_option("--config", train_config_path, "training config JSON")->required();

    std::string in_path, ckpt_path, out_path;
    double factor = 0.0;
    int count = 0;
    auto* up = app.add_subcommand("upsample", "resample a cloud through a trained model");
    up->add_option("--input", in_path, "input cloud (.xyz or .ply)")->required();
    up->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    up->add_option("--output", out_path, "output cloud path")->required();
    auto* target = up->add_option_group("target", "output size (exactly one)");
    target->add_option("--factor", factor, "upsampling ratio, may be fractional");
    target->add_option("--count", count, "absolute output point count");
    target->require_option(1);

    std::string pred_path, gt_path, surface, csv_path;
    auto* ev = app.add_subcommand("eval", "score a prediction against a reference");
    ev->add_option("--pred", pred_path, "predicted cloud")->required();
    ev->add_option("--gt", gt_path, "reference cloud")->required();
    ev->add_option("--surface", surface, "analytic reference: sphere, torus, or saddle");
    ev->add_option("--csv", csv_path, "append a result row to this CSV file");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return run_gen_data(config_path);
        if (train->parsed()) return run_train(train_config_path);
        if (up->parsed()) return run_upsample(in_path, ckpt_path, out_path, factor, count);
        return run_eval(pred_path, gt_path, surface, csv_path);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const np::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
