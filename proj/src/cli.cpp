#include "xr2vol/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "xr2vol/checkpoint.hpp"
#include "xr2vol/io.hpp"
#include "xr2vol/metrics.hpp"
#include "xr2vol/pipeline.hpp"

namespace xr2vol {

namespace fs = std::filesystem;

namespace {

void write_resolved_config(const RunConfig& cfg, const std::string& dir) {
    atomic_write_file((fs::path(dir) / "resolved_config.json").string(),
                      cfg.to_json().dump(2) + "\n");
}

template <class Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}

DatasetManifest open_dataset(const RunConfig& cfg) {
    std::string path = (fs::path(cfg.dataset_dir) / "manifest.json").string();
    if (!fs::exists(path))
        throw std::runtime_error("dataset manifest not found: " + path);
    return load_manifest(path);
}

ModelBundle fresh_bundle(const RunConfig& cfg) {
    return make_bundle(cfg.ae, cfg.e2, cfg.unet, cfg.cls, cfg.aw, derive_seed(cfg.seed, 11));
}

void require_resolution(const DatasetManifest& data, int expected, const char* who) {
    if (data.resolution != expected)
        throw std::runtime_error(std::string(who) + ": dataset resolution " +
                                 std::to_string(data.resolution) + " does not match the model's " +
                                 std::to_string(expected));
}

// conditioning image + grade for a dataset sample
std::pair<Tensor, int> sample_condition(const RunConfig& cfg, const DatasetManifest& data,
                                        int index) {
    if (index < 0 || index >= static_cast<int>(data.samples.size()))
        throw std::runtime_error("sample index out of range");
    PairedSample ps = load_sample(data, index);
    int grade = cfg.grade >= 0 ? cfg.grade : ps.grade;
    return {ps.xray, grade};
}

RegionSpec eval_region(const RunConfig& cfg, int resolution) {
    if (!cfg.region_auto) return cfg.region;
    // central third band, full width
    return RegionSpec{resolution / 3, 2 * resolution / 3, 0, resolution};
}

}  // namespace

int cmd_gen_data(const RunConfig& cfg) {
    return guarded([&]() {
        cfg.validate();
        if (cfg.gen_samples < 1) throw std::runtime_error("gen-data: need at least one sample");
        DatasetManifest m =
            generate_phantom_dataset(cfg.gen_samples, cfg.phantom, cfg.seed, cfg.dataset_dir);
        if (static_cast<int>(m.samples.size()) >= 2)
            split_dataset(m, cfg.train_fraction, derive_seed(cfg.seed, 7));
        else
            m.samples[0].split = "train";
        save_manifest(m, (fs::path(cfg.dataset_dir) / "manifest.json").string());
        write_resolved_config(cfg, cfg.dataset_dir);
        int n_train = static_cast<int>(split_indices(m, "train").size());
        std::cout << "generated " << m.samples.size() << " samples at " << m.resolution << "x"
                  << m.resolution << "x" << m.slice_count << " (" << n_train << " train, "
                  << m.samples.size() - static_cast<size_t>(n_train) << " val) in "
                  << cfg.dataset_dir << "\n";
        return kExitOk;
    });
}

int cmd_train_ae(const RunConfig& cfg, bool resume) {
    return guarded([&]() {
        cfg.validate();
        DatasetManifest data = open_dataset(cfg);
        require_resolution(data, cfg.ae.input_resolution, "train-ae");
        fs::create_directories(cfg.out_dir);

        ModelBundle bundle;
        TrainState state;
        if (resume && fs::exists(cfg.ae_ckpt_path())) {
            bundle = load_checkpoint(cfg.ae_ckpt_path(), &state);
            std::cout << "resuming from " << cfg.ae_ckpt_path() << " at step " << state.step
                      << "\n";
        } else {
            bundle = fresh_bundle(cfg);
        }

        TrainConfig tc = cfg.train_ae;
        tc.diff = cfg.diff;
        TrainReport rep = train_autoencoder(data, bundle, tc, cfg.seed, &state);
        save_checkpoint(cfg.ae_ckpt_path(), bundle, &state);
        atomic_write_file((fs::path(cfg.out_dir) / "train_ae.csv").string(), rep.to_csv());
        write_resolved_config(cfg, cfg.out_dir);
        std::cout << "stage-1 training stopped at step " << state.step << ", probe loss "
                  << (rep.loss.empty() ? 0.0 : rep.loss.back()) << ", wall " << rep.wall_seconds
                  << " s\ncheckpoint: " << cfg.ae_ckpt_path() << "\n";
        return kExitOk;
    });
}

int cmd_train_diff(const RunConfig& cfg, bool resume) {
    return guarded([&]() {
        cfg.validate();
        DatasetManifest data = open_dataset(cfg);
        require_resolution(data, cfg.ae.input_resolution, "train-diff");
        fs::create_directories(cfg.out_dir);

        ModelBundle bundle;
        TrainState state;
        if (resume && fs::exists(cfg.diff_ckpt_path())) {
            bundle = load_checkpoint(cfg.diff_ckpt_path(), &state);
            std::cout << "resuming from " << cfg.diff_ckpt_path() << " at step " << state.step
                      << "\n";
        } else {
            if (!fs::exists(cfg.ae_ckpt_path()))
                throw std::runtime_error("train-diff: missing stage-1 checkpoint " +
                                         cfg.ae_ckpt_path());
            bundle = load_checkpoint(cfg.ae_ckpt_path());
        }

        std::uint64_t before = bundle.params.content_hash(bundle.stage1_names());
        TrainConfig tc = cfg.train_diff;
        tc.diff = cfg.diff;
        TrainReport rep = train_diffusion(data, bundle, tc, cfg.seed, &state);
        std::uint64_t after = bundle.params.content_hash(bundle.stage1_names());
        save_checkpoint(cfg.diff_ckpt_path(), bundle, &state);
        atomic_write_file((fs::path(cfg.out_dir) / "train_diff.csv").string(), rep.to_csv());
        write_resolved_config(cfg, cfg.out_dir);
        std::cout << "autoencoder hash before 0x" << std::hex << before << " after 0x" << after
                  << std::dec << (before == after ? " (frozen)" : " (CHANGED)") << "\n";
        std::cout << "stage-2 training stopped at step " << state.step << ", probe loss "
                  << (rep.loss.empty() ? 0.0 : rep.loss.back()) << ", wall " << rep.wall_seconds
                  << " s\ncheckpoint: " << cfg.diff_ckpt_path() << "\n";
        return kExitOk;
    });
}

int cmd_infer(const RunConfig& cfg, const std::string& xray_path, int sample_index) {
    return guarded([&]() {
        cfg.validate();
        if (!fs::exists(cfg.diff_ckpt_path()))
            throw std::runtime_error("infer: missing diffusion checkpoint " +
                                     cfg.diff_ckpt_path());
        ModelBundle bundle = load_checkpoint(cfg.diff_ckpt_path());

        Tensor x_c;
        int grade = cfg.grade;
        if (!xray_path.empty()) {
            x_c = read_tensor_file(xray_path);
        } else {
            DatasetManifest data = open_dataset(cfg);
            require_resolution(data, cfg.e2.input_resolution, "infer");
            auto [img, g] = sample_condition(cfg, data, sample_index);
            x_c = img;
            grade = g;
        }
        if (x_c.rank() != 3 || x_c.dim(0) != 1 || x_c.dim(1) != cfg.e2.input_resolution ||
            x_c.dim(2) != cfg.e2.input_resolution)
            throw std::runtime_error("infer: conditioning image must be {1,R,R} at the model's "
                                     "input resolution");

        fs::create_directories(cfg.out_dir);
        auto t0 = std::chrono::steady_clock::now();
        Volume vol = infer_volume(x_c, cfg.infer_slices, cfg.infer_steps, bundle, cfg.diff,
                                  cfg.seed, cfg.workers, grade);
        double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        write_tensor_file((fs::path(cfg.out_dir) / "volume.f32").string(), vol.to_tensor());
        for (int k = 0; k < vol.slice_count(); ++k) {
            std::ostringstream name;
            name << "slice_" << std::setw(3) << std::setfill('0') << k << ".png";
            write_gray_png((fs::path(cfg.out_dir) / name.str()).string(),
                           vol.slices[static_cast<size_t>(k)]);
        }
        write_resolved_config(cfg, cfg.out_dir);
        std::cout << cfg.infer_slices << " slices, " << cfg.infer_steps << " steps, "
                  << cfg.workers << " worker(s): total " << total << " s, per slice "
                  << total / cfg.infer_slices << " s\noutput: " << cfg.out_dir << "\n";
        return kExitOk;
    });
}

int cmd_eval(const RunConfig& cfg, const std::string& pred_path, const std::string& gt_path) {
    return guarded([&]() {
        cfg.validate();
        Volume pred = Volume::from_tensor(read_tensor_file(pred_path), "generated");
        Volume gt = Volume::from_tensor(read_tensor_file(gt_path), "real");
        RegionSpec region = eval_region(cfg, gt.resolution());
        EvalReport rep = evaluate_volumes(pred, gt, region);
        fs::create_directories(cfg.out_dir);
        atomic_write_file((fs::path(cfg.out_dir) / "eval.csv").string(), eval_report_csv(rep));
        write_resolved_config(cfg, cfg.out_dir);
        std::cout << "median psnr " << rep.median_psnr << " dB, median ssim " << rep.median_ssim
                  << ", median rssim " << rep.median_rssim << ", corr pred/gt " << rep.corr_pred
                  << "/" << rep.corr_gt << "\nreport: "
                  << (fs::path(cfg.out_dir) / "eval.csv").string() << "\n";
        return kExitOk;
    });
}

int cmd_interp_study(const RunConfig& cfg, const std::vector<int>& step_counts,
                     int sample_index) {
    return guarded([&]() {
        cfg.validate();
        if (step_counts.empty()) throw std::runtime_error("interp-study: empty step list");
        if (!fs::exists(cfg.diff_ckpt_path()))
            throw std::runtime_error("interp-study: missing diffusion checkpoint " +
                                     cfg.diff_ckpt_path());
        ModelBundle bundle = load_checkpoint(cfg.diff_ckpt_path());
        DatasetManifest data = open_dataset(cfg);
        require_resolution(data, cfg.e2.input_resolution, "interp-study");
        auto [x_c, grade] = sample_condition(cfg, data, sample_index);
        PairedSample gt = load_sample(data, sample_index);

        auto rows = interp_study(x_c, step_counts, cfg.infer_slices, bundle, cfg.diff, cfg.seed,
                                 cfg.workers, grade);
        fs::create_directories(cfg.out_dir);
        atomic_write_file((fs::path(cfg.out_dir) / "interp.csv").string(), interp_csv(rows));
        write_resolved_config(cfg, cfg.out_dir);
        for (const auto& [s, c] : rows)
            std::cout << "steps " << s << ": adjacent correlation " << c << "\n";
        std::cout << "ground-truth reference correlation: "
                  << adjacent_slice_correlation(gt.volume) << "\nreport: "
                  << (fs::path(cfg.out_dir) / "interp.csv").string() << "\n";
        return kExitOk;
    });
}

int run_cli(int argc, char** argv) {
    CLI::App app{"radiograph-conditioned pseudo-MRI volume synthesis"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags remain valid after the verb

    std::string config_path, preset = "desk-scale", out_flag;
    std::uint64_t seed_flag = 0;
    int workers_flag = 0;
    auto* opt_config = app.add_option("--config", config_path, "JSON config file");
    app.add_option("--preset", preset, "desk-scale (default) or paper-scale");
    auto* opt_seed = app.add_option("--seed", seed_flag, "run seed");
    auto* opt_workers = app.add_option("--workers", workers_flag, "inference worker threads");
    auto* opt_out = app.add_option("--out", out_flag, "output root directory");

    auto* gen = app.add_subcommand("gen-data", "generate a paired phantom dataset");
    int samples_flag = 0;
    auto* opt_samples = gen->add_option("--samples", samples_flag, "sample count");

    auto* tae = app.add_subcommand("train-ae", "train the slice autoencoder");
    bool resume_ae = false;
    tae->add_flag("--resume", resume_ae, "continue from the existing checkpoint");
    int steps_ae = -1;
    auto* opt_steps_ae = tae->add_option("--steps", steps_ae, "optimizer steps");

    auto* tdf = app.add_subcommand("train-diff", "train the conditional denoiser");
    bool resume_diff = false;
    tdf->add_flag("--resume", resume_diff, "continue from the existing checkpoint");
    int steps_diff = -1;
    auto* opt_steps_diff = tdf->add_option("--steps", steps_diff, "optimizer steps");

    auto* inf = app.add_subcommand("infer", "synthesize a volume from one radiograph");
    std::string xray_path;
    int sample_index = 0;
    inf->add_option("--xray", xray_path, "conditioning radiograph tensor file");
    inf->add_option("--sample", sample_index, "dataset sample index (when --xray is absent)");
    int slices_flag = 0, isteps_flag = 0, grade_flag = -2;
    auto* opt_slices = inf->add_option("--slices", slices_flag, "slice count");
    auto* opt_isteps = inf->add_option("--steps", isteps_flag, "sampler steps");
    auto* opt_grade = inf->add_option("--grade", grade_flag, "severity grade 0..4");

    auto* ev = app.add_subcommand("eval", "score a generated volume against ground truth");
    std::string pred_path, gt_path;
    ev->add_option("--pred", pred_path, "generated volume tensor file")->required();
    ev->add_option("--gt", gt_path, "ground-truth volume tensor file")->required();

    auto* isy = app.add_subcommand("interp-study", "correlation vs sampler step count");
    std::vector<int> step_list;
    int isy_sample = 0;
    isy->add_option("--steps-list", step_list, "sampler step counts")->delimiter(',');
    isy->add_option("--sample", isy_sample, "dataset sample index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    RunConfig cfg;
    try {
        cfg = load_run_config(preset, opt_config->count() > 0 ? config_path : "");
        if (opt_seed->count() > 0) cfg.seed = seed_flag;
        if (opt_workers->count() > 0) cfg.workers = workers_flag;
        if (opt_out->count() > 0) {
            cfg.out_dir = out_flag;
        } else if (const char* env = std::getenv("XR2VOL_OUT")) {
            if (env[0] != '\0') cfg.out_dir = env;
        }
        if (opt_samples->count() > 0) cfg.gen_samples = samples_flag;
        if (opt_steps_ae->count() > 0) cfg.train_ae.steps = steps_ae;
        if (opt_steps_diff->count() > 0) cfg.train_diff.steps = steps_diff;
        if (opt_slices->count() > 0) cfg.infer_slices = slices_flag;
        if (opt_isteps->count() > 0) cfg.infer_steps = isteps_flag;
        if (opt_grade->count() > 0) {
            if (grade_flag < -1 || grade_flag > 4)
                throw std::runtime_error("--grade must be 0..4, or -1 for the classifier stub");
            cfg.grade = grade_flag;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    std::cout << "resolved config:\n" << cfg.to_json().dump(2) << "\n";

    if (gen->parsed()) return cmd_gen_data(cfg);
    if (tae->parsed()) return cmd_train_ae(cfg, resume_ae);
    if (tdf->parsed()) return cmd_train_diff(cfg, resume_diff);
    if (inf->parsed()) return cmd_infer(cfg, xray_path, sample_index);
    if (ev->parsed()) return cmd_eval(cfg, pred_path, gt_path);
    if (isy->parsed()) return cmd_interp_study(cfg, step_list, isy_sample);
    return kExitUsage;
}

}  // namespace xr2vol
