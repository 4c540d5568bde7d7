#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "neural_points/dataset.hpp"
#include "neural_points/train.hpp"

namespace fs = std::filesystem;
using namespace np;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(NP_CLI_PATH) + " " + args + " 2>&1";
    std::FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult r;
    char buf[512];
    while (std::fgets(buf, sizeof(buf), pipe) != nullptr) r.out += buf;
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("np_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_json(const fs::path& path, const Json& j) {
    std::ofstream f(path);
    REQUIRE(f.good());
    f << j.dump(2) << "\n";
}

TrainConfig tiny_train_cfg() {
    TrainConfig cfg;
    cfg.model.encoder.layer_widths = {2, 2, 2, 2, 2};
    cfg.model.encoder.aggregation_width = 2;
    cfg.model.encoder.knn = 4;
    cfg.model.field.hidden = 4;
    cfg.model.field.encoding.num_frequencies = 1;
    cfg.model.patch_size = 16;
    cfg.batch_size = 2;
    cfg.iterations = 2;
    cfg.decay_interval = 2;
    cfg.checkpoint_interval = 2;
    cfg.seed = 3;
    return cfg;
}

/// One shared pipeline workspace: corpus, trained checkpoint, sample clouds.
struct Workspace {
    fs::path root;
    std::string checkpoint;
    std::string cloud16;   // 16-point sphere cloud
    std::string cloud100;  // 100-point sphere cloud
};

const Workspace& workspace() {
    static Workspace ws = [] {
        Workspace w;
        w.root = fresh_dir("workspace");

        DatasetConfig dcfg;
        dcfg.surfaces = {"sphere"};
        dcfg.points_in = 16;
        dcfg.factor = 2.0;
        dcfg.anchors = 1;
        dcfg.patch_size = 16;
        dcfg.seed = 7;
        dcfg.out_dir = (w.root / "data").string();
        gen_dataset(dcfg);

        TrainConfig tcfg = tiny_train_cfg();
        tcfg.dataset_dir = dcfg.out_dir;
        tcfg.out_dir = (w.root / "run").string();
        train(tcfg, load_dataset(dcfg.out_dir));
        w.checkpoint = (w.root / "run" / "checkpoint.npck").string();

        Rng rng(9);
        SphereSurface sphere;
        PointCloud c16 = sphere.sample(16, rng);
        c16.normals = Tensor();
        w.cloud16 = (w.root / "c16.xyz").string();
        save_xyz(w.cloud16, c16);
        PointCloud c100 = sphere.sample(100, rng);
        c100.normals = Tensor();
        w.cloud100 = (w.root / "c100.xyz").string();
        save_xyz(w.cloud100, c100);
        return w;
    }();
    return ws;
}

int count_lines(const fs::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    int n = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("cli: gen-data and train run from config files") {
    fs::path dir = fresh_dir("gen_train");
    Json dcfg = to_json(DatasetConfig{});
    dcfg["points_in"] = 16;
    dcfg["factor"] = 2.0;
    dcfg["patch_size"] = 16;
    dcfg["out_dir"] = (dir / "data").string();
    write_json(dir / "data.json", dcfg);

    CliResult gen = run_cli("gen-data --config " + (dir / "data.json").string());
    INFO(gen.out);
    REQUIRE(gen.exit_code == 0);
    REQUIRE(fs::exists(dir / "data" / "manifest.json"));
    REQUIRE(fs::exists(dir / "data" / "inputs" / "sphere_0.xyz"));

    TrainConfig tcfg = tiny_train_cfg();
    tcfg.dataset_dir = (dir / "data").string();
    tcfg.out_dir = (dir / "run").string();
    write_json(dir / "train.json", to_json(tcfg));

    CliResult tr = run_cli("train --config " + (dir / "train.json").string());
    INFO(tr.out);
    REQUIRE(tr.exit_code == 0);
    REQUIRE(fs::exists(dir / "run" / "checkpoint.npck"));
    REQUIRE(count_lines(dir / "run" / "train_log.csv") == 3);  // header + 2 iterations
}

TEST_CASE("cli: upsample hits the requested counts") {
    const Workspace& ws = workspace();
    fs::path dir = fresh_dir("upsample");

    const std::string out4 = (dir / "up4.xyz").string();
    CliResult r4 = run_cli("upsample --input " + ws.cloud16 + " --factor 4 --checkpoint " +
                           ws.checkpoint + " --output " + out4);
    INFO(r4.out);
    REQUIRE(r4.exit_code == 0);
    REQUIRE(load_cloud(out4).size() == 64);

    const std::string out17 = (dir / "up17.xyz").string();
    CliResult r17 = run_cli("upsample --input " + ws.cloud100 + " --factor 1.7 --checkpoint " +
                            ws.checkpoint + " --output " + out17);
    INFO(r17.out);
    REQUIRE(r17.exit_code == 0);
    REQUIRE(load_cloud(out17).size() == 170);

    const std::string out50 = (dir / "up50.xyz").string();
    CliResult rc = run_cli("upsample --input " + ws.cloud16 + " --count 50 --checkpoint " +
                           ws.checkpoint + " --output " + out50);
    INFO(rc.out);
    REQUIRE(rc.exit_code == 0);
    REQUIRE(load_cloud(out50).size() == 50);
}

TEST_CASE("cli: factor and count are mutually exclusive and one is required") {
    const Workspace& ws = workspace();
    fs::path dir = fresh_dir("usage");
    const std::string tail =
        " --checkpoint " + ws.checkpoint + " --output " + (dir / "o.xyz").string();

    CliResult both =
        run_cli("upsample --input " + ws.cloud16 + " --factor 2 --count 50" + tail);
    REQUIRE(both.exit_code == 1);
    CliResult neither = run_cli("upsample --input " + ws.cloud16 + tail);
    REQUIRE(neither.exit_code == 1);
    REQUIRE_FALSE(fs::exists(dir / "o.xyz"));
}

TEST_CASE("cli: usage errors exit 1, runtime errors exit 2") {
    const Workspace& ws = workspace();
    fs::path dir = fresh_dir("errors");

    REQUIRE(run_cli("").exit_code == 1);               // missing subcommand
    REQUIRE(run_cli("resample").exit_code == 1);       // unknown subcommand
    REQUIRE(run_cli("train").exit_code == 1);          // missing required flag
    REQUIRE(run_cli("--help").exit_code == 0);

    // Malformed config file: usage class.
    fs::path bad = dir / "bad.json";
    std::ofstream(bad) << "{ not json";
    REQUIRE(run_cli("gen-data --config " + bad.string()).exit_code == 1);

    // Config with a value out of range: usage class.
    Json j = to_json(DatasetConfig{});
    j["factor"] = 0.25;
    write_json(dir / "badval.json", j);
    REQUIRE(run_cli("gen-data --config " + (dir / "badval.json").string()).exit_code == 1);

    // Missing input file: runtime class.
    CliResult miss = run_cli("upsample --input " + (dir / "ghost.xyz").string() +
                             " --factor 2 --checkpoint " + ws.checkpoint + " --output " +
                             (dir / "o.xyz").string());
    REQUIRE(miss.exit_code == 2);

    // Corrupt checkpoint: runtime class.
    fs::path fake = dir / "fake.npck";
    std::ofstream(fake) << "not a checkpoint";
    CliResult corrupt = run_cli("upsample --input " + ws.cloud16 + " --factor 2 --checkpoint " +
                                fake.string() + " --output " + (dir / "o.xyz").string());
    REQUIRE(corrupt.exit_code == 2);

    // Unknown analytic surface: usage class.
    CliResult surf = run_cli("eval --pred " + ws.cloud16 + " --gt " + ws.cloud16 +
                             " --surface klein");
    REQUIRE(surf.exit_code == 1);
}

TEST_CASE("cli: eval prints one-line json and appends csv") {
    const Workspace& ws = workspace();
    fs::path dir = fresh_dir("eval");

    CliResult same = run_cli("eval --pred " + ws.cloud16 + " --gt " + ws.cloud16 +
                             " --surface sphere");
    INFO(same.out);
    REQUIRE(same.exit_code == 0);
    REQUIRE(same.out.find('\n') == same.out.size() - 1);  // a single line
    Json j = Json::parse(same.out);
    REQUIRE(j.at("cd").get<double>() == 0.0);
    REQUIRE(j.at("hd").get<double>() == 0.0);
    REQUIRE(j.at("p2f").get<double>() < 1e-12);  // samples lie on the sphere

    CliResult diff = run_cli("eval --pred " + ws.cloud16 + " --gt " + ws.cloud100);
    REQUIRE(diff.exit_code == 0);
    Json j2 = Json::parse(diff.out);
    REQUIRE(j2.at("cd").get<double>() > 0.0);
    REQUIRE(j2.at("hd").get<double>() > 0.0);
    REQUIRE(j2.at("p2f").is_null());

    const std::string csv = (dir / "scores.csv").string();
    REQUIRE(run_cli("eval --pred " + ws.cloud16 + " --gt " + ws.cloud100 + " --csv " + csv)
                .exit_code == 0);
    REQUIRE(run_cli("eval --pred " + ws.cloud100 + " --gt " + ws.cloud16 + " --csv " + csv)
                .exit_code == 0);
    REQUIRE(count_lines(csv) == 3);  // header + two appended rows
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    REQUIRE(header == "pred,gt,cd,hd,p2f");
}
