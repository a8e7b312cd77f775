#include "xr2vol/config.hpp"

#include <stdexcept>

#include "xr2vol/io.hpp"

namespace xr2vol {

void RunConfig::validate() const {
    ae.validate();
    e2.validate();
    unet.validate();
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("config: train_fraction must lie in (0,1)");
    if (phantom.resolution < 8 || phantom.slice_count < 2)
        throw std::invalid_argument("config: degenerate phantom dimensions");
    if (infer_slices < 2) throw std::invalid_argument("config: infer_slices must be >= 2");
    if (infer_steps < 1) throw std::invalid_argument("config: infer_steps must be >= 1");
    if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
    if (diff.T < 1) throw std::invalid_argument("config: diffusion T must be >= 1");
    if (!(diff.latent_scale > 0.0))
        throw std::invalid_argument("config: latent_scale must be positive");
    if (!(canny_lo > 0.0 && canny_lo < canny_hi && canny_hi < 1.0))
        throw std::invalid_argument("config: canny thresholds must satisfy 0 < lo < hi < 1");
    if (ssim_window < 1 || ssim_window % 2 == 0)
        throw std::invalid_argument("config: ssim_window must be odd");
}

RunConfig preset_config(const std::string& name) {
    RunConfig cfg;
    if (name == "desk-scale" || name.empty()) return cfg;
    if (name != "paper-scale") throw std::invalid_argument("config: unknown preset " + name);

    cfg.preset = "paper-scale";
    cfg.phantom.resolution = 256;
    cfg.phantom.slice_count = 50;

    cfg.ae.io_channels = 3;
    cfg.ae.input_resolution = 256;
    cfg.ae.base_channels = 128;
    cfg.ae.channel_multipliers = {1, 2, 4, 4};
    cfg.ae.res_blocks_per_stage = 2;

    cfg.e2.io_channels = 3;
    cfg.e2.input_resolution = 256;
    cfg.e2.base_channels = 64;
    cfg.e2.channel_multipliers = {1, 2, 4, 4};
    cfg.e2.context_dim = 768;

    cfg.unet.base_channels = 320;
    cfg.unet.channel_multipliers = {1, 2, 4, 4};
    cfg.unet.res_blocks_per_stage = 2;
    cfg.unet.attention_factors = {4, 2, 1};
    cfg.unet.attention_heads = 8;
    cfg.unet.context_dim = 768;
    cfg.unet.latent_resolution = 32;

    cfg.cls.io_channels = 3;
    cfg.cls.input_resolution = 256;
    cfg.cls.base_channels = 32;

    cfg.aw.h = 32;
    cfg.aw.w = 32;
    cfg.aw.proj_dim = 32;

    cfg.diff.latent_scale = 0.2;
    cfg.train_ae.lr = 1e-6;
    cfg.train_ae.batch = 64;
    cfg.train_ae.steps = 100000;
    cfg.train_diff.lr = 1e-6;
    cfg.train_diff.batch = 64;
    cfg.train_diff.steps = 100000;

    cfg.infer_slices = 50;
    cfg.infer_steps = 200;
    return cfg;
}

namespace {

void apply_phantom(PhantomConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "resolution") c.resolution = v.get<int>();
        else if (k == "slice_count") c.slice_count = v.get<int>();
        else if (k == "noise_amp") c.noise_amp = v.get<double>();
        else throw std::invalid_argument("config: unknown key phantom." + k);
    }
}

void apply_ae(AutoencoderConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "io_channels") c.io_channels = v.get<int>();
        else if (k == "input_resolution") c.input_resolution = v.get<int>();
        else if (k == "base_channels") c.base_channels = v.get<int>();
        else if (k == "channel_multipliers") c.channel_multipliers = v.get<std::vector<int>>();
        else if (k == "res_blocks_per_stage") c.res_blocks_per_stage = v.get<int>();
        else if (k == "latent_channels") c.latent_channels = v.get<int>();
        else if (k == "kl_weight") c.kl_weight = v.get<double>();
        else throw std::invalid_argument("config: unknown key ae." + k);
    }
}

void apply_e2(CondEncoderConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "io_channels") c.io_channels = v.get<int>();
        else if (k == "input_resolution") c.input_resolution = v.get<int>();
        else if (k == "base_channels") c.base_channels = v.get<int>();
        else if (k == "channel_multipliers") c.channel_multipliers = v.get<std::vector<int>>();
        else if (k == "res_blocks_per_stage") c.res_blocks_per_stage = v.get<int>();
        else if (k == "latent_channels") c.latent_channels = v.get<int>();
        else if (k == "context_dim") c.context_dim = v.get<int>();
        else throw std::invalid_argument("config: unknown key e2." + k);
    }
}

void apply_unet(UNetConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "in_channels") c.in_channels = v.get<int>();
        else if (k == "out_channels") c.out_channels = v.get<int>();
        else if (k == "base_channels") c.base_channels = v.get<int>();
        else if (k == "channel_multipliers") c.channel_multipliers = v.get<std::vector<int>>();
        else if (k == "res_blocks_per_stage") c.res_blocks_per_stage = v.get<int>();
        else if (k == "attention_factors") c.attention_factors = v.get<std::vector<int>>();
        else if (k == "attention_heads") c.attention_heads = v.get<int>();
        else if (k == "context_dim") c.context_dim = v.get<int>();
        else if (k == "latent_resolution") c.latent_resolution = v.get<int>();
        else throw std::invalid_argument("config: unknown key unet." + k);
    }
}

void apply_cls(ClassifierConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "io_channels") c.io_channels = v.get<int>();
        else if (k == "input_resolution") c.input_resolution = v.get<int>();
        else if (k == "base_channels") c.base_channels = v.get<int>();
        else if (k == "bypass") c.bypass = v.get<bool>();
        else if (k == "smoothing") c.smoothing = v.get<double>();
        else throw std::invalid_argument("config: unknown key cls." + k);
    }
}

void apply_aw(GuidanceConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "h") c.h = v.get<int>();
        else if (k == "w") c.w = v.get<int>();
        else if (k == "proj_dim") c.proj_dim = v.get<int>();
        else if (k == "kappa") c.kappa = v.get<double>();
        else if (k == "eps_stab") c.eps_stab = v.get<double>();
        else throw std::invalid_argument("config: unknown key aw." + k);
    }
}

void apply_diff(DiffusionSpec& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "T") c.T = v.get<int>();
        else if (k == "beta_start") c.beta_start = v.get<double>();
        else if (k == "beta_end") c.beta_end = v.get<double>();
        else if (k == "latent_scale") c.latent_scale = v.get<double>();
        else throw std::invalid_argument("config: unknown key diff." + k);
    }
}

void apply_train(TrainConfig& c, const nlohmann::json& j, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        if (k == "steps") c.steps = v.get<int>();
        else if (k == "batch") c.batch = v.get<int>();
        else if (k == "lr") c.lr = v.get<double>();
        else if (k == "warmup_steps") c.warmup_steps = v.get<int>();
        else if (k == "weight_decay") c.weight_decay = v.get<double>();
        else if (k == "ema_decay") c.ema_decay = v.get<double>();
        else if (k == "eval_every") c.eval_every = v.get<int>();
        else if (k == "patience") c.patience = v.get<int>();
        else if (k == "early_stop") c.early_stop = v.get<bool>();
        else if (k == "stop_below") c.stop_below = v.get<double>();
        else throw std::invalid_argument("config: unknown key " + where + "." + k);
    }
}

void apply_metrics(RunConfig& c, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "ssim_window") c.ssim_window = v.get<int>();
        else if (k == "canny_lo") c.canny_lo = v.get<double>();
        else if (k == "canny_hi") c.canny_hi = v.get<double>();
        else if (k == "region_auto") c.region_auto = v.get<bool>();
        else if (k == "region") {
            std::vector<int> r = v.get<std::vector<int>>();
            if (r.size() != 4)
                throw std::invalid_argument("config: region needs [row_lo,row_hi,col_lo,col_hi]");
            c.region = RegionSpec{r[0], r[1], r[2], r[3]};
        } else {
            throw std::invalid_argument("config: unknown key metrics." + k);
        }
    }
}

}  // namespace

void apply_json(RunConfig& cfg, const nlohmann::json& j) {
    for (const auto& [k, v] : j.items()) {
        if (k == "preset") cfg.preset = v.get<std::string>();
        else if (k == "dataset_dir") cfg.dataset_dir = v.get<std::string>();
        else if (k == "ae_checkpoint") cfg.ae_checkpoint = v.get<std::string>();
        else if (k == "diff_checkpoint") cfg.diff_checkpoint = v.get<std::string>();
        else if (k == "out_dir") cfg.out_dir = v.get<std::string>();
        else if (k == "gen_samples") cfg.gen_samples = v.get<int>();
        else if (k == "phantom") apply_phantom(cfg.phantom, v);
        else if (k == "train_fraction") cfg.train_fraction = v.get<double>();
        else if (k == "ae") apply_ae(cfg.ae, v);
        else if (k == "e2") apply_e2(cfg.e2, v);
        else if (k == "unet") apply_unet(cfg.unet, v);
        else if (k == "cls") apply_cls(cfg.cls, v);
        else if (k == "aw") apply_aw(cfg.aw, v);
        else if (k == "diff") apply_diff(cfg.diff, v);
        else if (k == "train_ae") apply_train(cfg.train_ae, v, "train_ae");
        else if (k == "train_diff") apply_train(cfg.train_diff, v, "train_diff");
        else if (k == "infer_slices") cfg.infer_slices = v.get<int>();
        else if (k == "infer_steps") cfg.infer_steps = v.get<int>();
        else if (k == "workers") cfg.workers = v.get<int>();
        else if (k == "grade") cfg.grade = v.get<int>();
        else if (k == "seed") cfg.seed = v.get<std::uint64_t>();
        else if (k == "metrics") apply_metrics(cfg, v);
        else throw std::invalid_argument("config: unknown key " + k);
    }
}

static nlohmann::json train_to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch", c.batch},
            {"lr", c.lr},
            {"warmup_steps", c.warmup_steps},
            {"weight_decay", c.weight_decay},
            {"ema_decay", c.ema_decay},
            {"eval_every", c.eval_every},
            {"patience", c.patience},
            {"early_stop", c.early_stop},
            {"stop_below", c.stop_below}};
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["dataset_dir"] = dataset_dir;
    j["ae_checkpoint"] = ae_ckpt_path();
    j["diff_checkpoint"] = diff_ckpt_path();
    j["out_dir"] = out_dir;
    j["gen_samples"] = gen_samples;
    j["phantom"] = {{"resolution", phantom.resolution},
                    {"slice_count", phantom.slice_count},
                    {"noise_amp", phantom.noise_amp}};
    j["train_fraction"] = train_fraction;
    j["ae"] = {{"io_channels", ae.io_channels},
               {"input_resolution", ae.input_resolution},
               {"base_channels", ae.base_channels},
               {"channel_multipliers", ae.channel_multipliers},
               {"res_blocks_per_stage", ae.res_blocks_per_stage},
               {"latent_channels", ae.latent_channels},
               {"kl_weight", ae.kl_weight}};
    j["e2"] = {{"io_channels", e2.io_channels},
               {"input_resolution", e2.input_resolution},
               {"base_channels", e2.base_channels},
               {"channel_multipliers", e2.channel_multipliers},
               {"res_blocks_per_stage", e2.res_blocks_per_stage},
               {"latent_channels", e2.latent_channels},
               {"context_dim", e2.context_dim}};
    j["unet"] = {{"in_channels", unet.in_channels},
                 {"out_channels", unet.out_channels},
                 {"base_channels", unet.base_channels},
                 {"channel_multipliers", unet.channel_multipliers},
                 {"res_blocks_per_stage", unet.res_blocks_per_stage},
                 {"attention_factors", unet.attention_factors},
                 {"attention_heads", unet.attention_heads},
                 {"context_dim", unet.context_dim},
                 {"latent_resolution", unet.latent_resolution}};
    j["cls"] = {{"io_channels", cls.io_channels},
                {"input_resolution", cls.input_resolution},
                {"base_channels", cls.base_channels},
                {"bypass", cls.bypass},
                {"smoothing", cls.smoothing}};
    j["aw"] = {{"h", aw.h},
               {"w", aw.w},
               {"proj_dim", aw.proj_dim},
               {"kappa", aw.kappa},
               {"eps_stab", aw.eps_stab}};
    j["diff"] = {{"T", diff.T},
                 {"beta_start", diff.beta_start},
                 {"beta_end", diff.beta_end},
                 {"latent_scale", diff.latent_scale}};
    j["train_ae"] = train_to_json(train_ae);
    j["train_diff"] = train_to_json(train_diff);
    j["infer_slices"] = infer_slices;
    j["infer_steps"] = infer_steps;
    j["workers"] = workers;
    j["grade"] = grade;
    j["seed"] = seed;
    j["metrics"] = {{"ssim_window", ssim_window},
                    {"canny_lo", canny_lo},
                    {"canny_hi", canny_hi},
                    {"region_auto", region_auto},
                    {"region", {region.row_lo, region.row_hi, region.col_lo, region.col_hi}}};
    return j;
}

RunConfig load_run_config(const std::string& preset, const std::string& config_path) {
    RunConfig cfg = preset_config(preset);
    if (!config_path.empty()) {
        nlohmann::json j = nlohmann::json::parse(read_file(config_path));
        if (j.contains("preset") && j.at("preset").get<std::string>() != cfg.preset) {
            cfg = preset_config(j.at("preset").get<std::string>());
        }
        apply_json(cfg, j);
    }
    return cfg;
}

}  // namespace xr2vol
