#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xr2vol/cli.hpp"
#include "xr2vol/config.hpp"
#include "xr2vol/data.hpp"
#include "xr2vol/io.hpp"
#include "xr2vol/tensor.hpp"

using namespace xr2vol;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path p;
    explicit TempDir(const char* tag) {
        p = fs::temp_directory_path() /
            (std::string("xr2vol_cli_") + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(p, ec); }
    std::string dir() const { return p.string(); }
    std::string file(const std::string& name) const { return (p / name).string(); }
};

// restores (or clears) one environment variable on scope exit
struct EnvGuard {
    std::string name;
    std::string saved;
    bool had = false;
    explicit EnvGuard(const char* n) : name(n) {
        if (const char* v = std::getenv(n)) { had = true; saved = v; }
    }
    ~EnvGuard() {
        if (had) ::setenv(name.c_str(), saved.c_str(), 1);
        else ::unsetenv(name.c_str());
    }
};

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "xr2vol");
    std::vector<char*> argv;
    argv.reserve(args.size());
    for (auto& a : args) argv.push_back(a.data());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

// toy-sized family matching a 16x16 phantom, fast enough to train in-process
nlohmann::json tiny_cfg_json(const std::string& root) {
    nlohmann::json j;
    j["dataset_dir"] = root + "/data";
    j["out_dir"] = root + "/out";
    j["gen_samples"] = 3;
    j["phantom"] = {{"resolution", 16}, {"slice_count", 3}, {"noise_amp", 0.01}};
    j["ae"] = {{"input_resolution", 16},
               {"base_channels", 8},
               {"channel_multipliers", {1, 2}},
               {"latent_channels", 2}};
    j["e2"] = {{"input_resolution", 16},
               {"base_channels", 8},
               {"channel_multipliers", {1, 2}},
               {"latent_channels", 2},
               {"context_dim", 8}};
    j["unet"] = {{"in_channels", 4},
                 {"out_channels", 2},
                 {"base_channels", 8},
                 {"channel_multipliers", {1, 2}},
                 {"attention_factors", {2}},
                 {"context_dim", 8},
                 {"latent_resolution", 8}};
    j["cls"] = {{"input_resolution", 16}, {"base_channels", 4}};
    j["aw"] = {{"h", 8}, {"w", 8}, {"proj_dim", 4}};
    j["train_ae"] = {{"steps", 3}, {"batch", 2}, {"eval_every", 3}};
    j["train_diff"] = {{"steps", 3}, {"batch", 2}, {"eval_every", 3}};
    j["infer_slices"] = 3;
    j["infer_steps"] = 3;
    j["seed"] = 404;
    return j;
}

std::string write_cfg(const TempDir& td, const nlohmann::json& j,
                      const char* name = "cfg.json") {
    std::string path = td.file(name);
    atomic_write_file(path, j.dump(2));
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("presets: desk-scale is the default family, paper-scale is the full-size one") {
    RunConfig desk = preset_config("desk-scale");
    RunConfig paper = preset_config("paper-scale");

    CHECK(desk.preset == "desk-scale");
    CHECK(paper.preset == "paper-scale");

    CHECK(desk.diff.T == 1000);
    CHECK(paper.diff.T == 1000);
    CHECK(desk.diff.latent_scale == doctest::Approx(1.0));
    CHECK(paper.diff.latent_scale == doctest::Approx(0.2));

    CHECK(paper.ae.input_resolution > desk.ae.input_resolution);
    CHECK(paper.infer_slices == 50);
    CHECK(paper.infer_steps == 200);

    desk.validate();
    paper.validate();

    CHECK_THROWS_AS((void)preset_config("pocket-scale"), std::invalid_argument);
}

TEST_CASE("apply_json: known keys overlay, unknown keys are rejected") {
    RunConfig cfg = preset_config("desk-scale");

    apply_json(cfg, nlohmann::json{{"seed", 99},
                                   {"infer_steps", 12},
                                   {"train_ae", {{"lr", 5e-4}, {"steps", 77}}},
                                   {"diff", {{"latent_scale", 0.5}}},
                                   {"metrics", {{"region", {1, 9, 2, 8}}, {"region_auto", false}}}});
    CHECK(cfg.seed == 99);
    CHECK(cfg.infer_steps == 12);
    CHECK(cfg.train_ae.lr == doctest::Approx(5e-4));
    CHECK(cfg.train_ae.steps == 77);
    CHECK(cfg.diff.latent_scale == doctest::Approx(0.5));
    CHECK_FALSE(cfg.region_auto);
    CHECK(cfg.region.row_lo == 1);
    CHECK(cfg.region.col_hi == 8);

    CHECK_THROWS_AS(apply_json(cfg, nlohmann::json{{"sedd", 1}}), std::invalid_argument);
    CHECK_THROWS_AS(apply_json(cfg, nlohmann::json{{"ae", {{"depth", 3}}}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(apply_json(cfg, nlohmann::json{{"metrics", {{"region", {1, 2, 3}}}}}),
                    std::invalid_argument);
}

TEST_CASE("checkpoint paths fall back under the output root") {
    RunConfig cfg = preset_config("desk-scale");
    cfg.out_dir = "/tmp/somewhere";
    CHECK(cfg.ae_ckpt_path() == "/tmp/somewhere/ae.ckpt");
    CHECK(cfg.diff_ckpt_path() == "/tmp/somewhere/diff.ckpt");

    apply_json(cfg, nlohmann::json{{"ae_checkpoint", "/elsewhere/a.ckpt"},
                                   {"diff_checkpoint", "/elsewhere/d.ckpt"}});
    CHECK(cfg.ae_ckpt_path() == "/elsewhere/a.ckpt");
    CHECK(cfg.diff_ckpt_path() == "/elsewhere/d.ckpt");
}

TEST_CASE("command bodies return exit codes instead of throwing") {
    TempDir td("codes");
    RunConfig cfg = preset_config("desk-scale");
    cfg.dataset_dir = td.file("data");
    cfg.out_dir = td.file("out");

    SUBCASE("invalid config maps to the usage code") {
        cfg.workers = 0;
        CHECK(cmd_gen_data(cfg) == kExitUsage);
    }
    SUBCASE("missing dataset maps to the usage code") {
        CHECK(cmd_train_ae(cfg, false) == kExitUsage);
        CHECK(cmd_infer(cfg, "", 0) == kExitUsage);
    }
    SUBCASE("missing eval inputs map to the usage code") {
        CHECK(cmd_eval(cfg, td.file("nope.f32"), td.file("also_nope.f32")) == kExitUsage);
    }
}

TEST_CASE("full command chain through run_cli on a toy dataset") {
    TempDir td("chain");
    nlohmann::json j = tiny_cfg_json(td.dir());
    std::string cfg_path = write_cfg(td, j);
    std::string data = td.file("data");
    std::string out = td.file("out");

    REQUIRE(run({"gen-data", "--config", cfg_path}) == kExitOk);
    CHECK(fs::exists(data + "/manifest.json"));
    CHECK(fs::exists(data + "/resolved_config.json"));
    DatasetManifest m = load_manifest(data + "/manifest.json");
    REQUIRE(static_cast<int>(m.samples.size()) == 3);
    CHECK(m.resolution == 16);

    REQUIRE(run({"train-ae", "--config", cfg_path}) == kExitOk);
    CHECK(fs::exists(out + "/ae.ckpt"));
    CHECK(fs::exists(out + "/train_ae.csv"));
    CHECK(fs::exists(out + "/resolved_config.json"));

    REQUIRE(run({"train-diff", "--config", cfg_path}) == kExitOk);
    CHECK(fs::exists(out + "/diff.ckpt"));
    CHECK(fs::exists(out + "/train_diff.csv"));

    REQUIRE(run({"infer", "--config", cfg_path, "--sample", "0"}) == kExitOk);
    REQUIRE(fs::exists(out + "/volume.f32"));
    CHECK(fs::exists(out + "/slice_000.png"));
    CHECK(fs::exists(out + "/slice_002.png"));
    CHECK_FALSE(fs::exists(out + "/slice_003.png"));
    Tensor vol = read_tensor_file(out + "/volume.f32");
    REQUIRE(vol.shape == std::vector<int>{3, 16, 16});

    // rerunning the same seed must reproduce the volume byte for byte,
    // and a worker pool must match the serial pass
    std::string first = slurp(out + "/volume.f32");
    REQUIRE(run({"infer", "--config", cfg_path, "--sample", "0"}) == kExitOk);
    CHECK(slurp(out + "/volume.f32") == first);
    REQUIRE(run({"infer", "--config", cfg_path, "--sample", "0", "--workers", "3"}) == kExitOk);
    CHECK(slurp(out + "/volume.f32") == first);

    // a different seed must not
    REQUIRE(run({"infer", "--config", cfg_path, "--sample", "0", "--seed", "405"}) == kExitOk);
    CHECK(slurp(out + "/volume.f32") != first);

    // a pinned grade is accepted for the same sample
    REQUIRE(run({"infer", "--config", cfg_path, "--sample", "0", "--grade", "2"}) == kExitOk);

    std::string gt = data + "/samples/" + m.samples[0].id + "_vol.f32";
    REQUIRE(fs::exists(gt));
    REQUIRE(run({"eval", "--config", cfg_path, "--pred", out + "/volume.f32", "--gt", gt}) ==
            kExitOk);
    REQUIRE(fs::exists(out + "/eval.csv"));
    std::vector<std::vector<std::string>> rows = parse_csv(slurp(out + "/eval.csv"));
    REQUIRE(rows.size() == 8);  // header, three slice rows, four aggregates
    CHECK(rows[0][0] == "slice");
    CHECK(rows[4][0] == "mean");
    CHECK(rows[7][0] == "corr_gt");

    REQUIRE(run({"interp-study", "--config", cfg_path, "--sample", "0", "--steps-list", "2,3"}) ==
            kExitOk);
    REQUIRE(fs::exists(out + "/interp.csv"));
    rows = parse_csv(slurp(out + "/interp.csv"));
    REQUIRE(rows.size() == 3);  // header plus one row per step count
    CHECK(rows[1][0] == "2");
    CHECK(rows[2][0] == "3");

    // the resolved config written next to the outputs reflects the run
    nlohmann::json resolved = nlohmann::json::parse(slurp(out + "/resolved_config.json"));
    CHECK(resolved.at("seed").get<std::uint64_t>() == 404);
    CHECK(resolved.at("infer_slices").get<int>() == 3);
    CHECK(resolved.at("ae_checkpoint").get<std::string>() == out + "/ae.ckpt");
}

TEST_CASE("usage errors and help exit codes") {
    CHECK(run({"--help"}) == kExitOk);
    CHECK(run({}) == kExitUsage);                       // a verb is required
    CHECK(run({"transmogrify"}) == kExitUsage);         // unknown verb
    CHECK(run({"gen-data", "--no-such-flag"}) == kExitUsage);
    CHECK(run({"eval"}) == kExitUsage);                 // --pred / --gt are required
    CHECK(run({"gen-data", "--preset", "pocket-scale"}) == kExitUsage);
    CHECK(run({"infer", "--grade", "9"}) == kExitUsage);

    TempDir td("usage");
    std::string cfg_path = write_cfg(td, tiny_cfg_json(td.dir()));
    // training before any dataset exists is a usage failure, not a crash
    CHECK(run({"train-diff", "--config", cfg_path}) == kExitUsage);
}

TEST_CASE("output root resolution: --out beats XR2VOL_OUT beats the config file") {
    TempDir td("outres");
    nlohmann::json j = tiny_cfg_json(td.dir());
    j["gen_samples"] = 2;
    std::string cfg_path = write_cfg(td, j);
    REQUIRE(run({"gen-data", "--config", cfg_path}) == kExitOk);

    EnvGuard guard("XR2VOL_OUT");
    std::string env_out = td.file("env_out");
    ::setenv("XR2VOL_OUT", env_out.c_str(), 1);

    REQUIRE(run({"train-ae", "--config", cfg_path}) == kExitOk);
    CHECK(fs::exists(env_out + "/ae.ckpt"));
    CHECK_FALSE(fs::exists(td.file("out") + "/ae.ckpt"));

    std::string flag_out = td.file("flag_out");
    REQUIRE(run({"train-ae", "--config", cfg_path, "--out", flag_out}) == kExitOk);
    CHECK(fs::exists(flag_out + "/ae.ckpt"));

    ::unsetenv("XR2VOL_OUT");
    REQUIRE(run({"train-ae", "--config", cfg_path}) == kExitOk);
    CHECK(fs::exists(td.file("out") + "/ae.ckpt"));
}

TEST_CASE("a numerically exploding run reports the numeric exit code") {
    TempDir td("numexit");
    nlohmann::json j = tiny_cfg_json(td.dir());
    j["gen_samples"] = 2;
    // adaptive updates shrug off big rates, so force an overflow scale
    j["train_ae"] = {{"steps", 6}, {"batch", 2}, {"eval_every", 6},
                     {"lr", 1e200}, {"warmup_steps", 0}};
    std::string cfg_path = write_cfg(td, j);

    REQUIRE(run({"gen-data", "--config", cfg_path}) == kExitOk);
    CHECK(run({"train-ae", "--config", cfg_path}) == kExitNumeric);
}
