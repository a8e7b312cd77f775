#include "xr2vol/checkpoint.hpp"

#include <cstring>
#include <stdexcept>

#include "xr2vol/io.hpp"

namespace xr2vol {

static const char kMagic[8] = {'X', 'R', '2', 'V', 'C', 'K', 'P', 'T'};
static const std::uint32_t kVersion = 1;

static void append_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

static void append_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

void write_checkpoint_file(const std::string& path, const nlohmann::json& meta,
                           const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    nlohmann::json header;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    std::string payload;
    for (const auto& [name, t] : tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t->shape}});
        for (double d : t->v) {
            float f = static_cast<float>(d);
            char b[4];
            std::memcpy(b, &f, 4);
            payload.append(b, 4);
        }
    }
    header["payload_fnv"] = fnv1a64_hex(payload.data(), payload.size());
    std::string hs = header.dump();
    std::string out;
    out.append(kMagic, 8);
    append_u32(out, kVersion);
    append_u64(out, static_cast<std::uint64_t>(hs.size()));
    out += hs;
    out += payload;
    atomic_write_file(path, out);
}

RawCheckpoint read_checkpoint_file(const std::string& path) {
    std::string data = read_file(path);
    if (data.size() < 20 || std::memcmp(data.data(), kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t version = 0;
    std::memcpy(&version, data.data() + 8, 4);
    if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, data.data() + 12, 8);
    if (20 + hlen > data.size()) throw std::runtime_error("checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(data.substr(20, hlen));
    size_t off = 20 + static_cast<size_t>(hlen);
    std::string payload = data.substr(off);
    if (header.at("payload_fnv").get<std::string>() !=
        fnv1a64_hex(payload.data(), payload.size()))
        throw std::runtime_error("checkpoint: payload checksum mismatch");
    RawCheckpoint rc;
    rc.meta = header.at("meta");
    size_t pos = 0;
    for (const auto& tj : header.at("tensors")) {
        std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        size_t bytes = t.v.size() * 4;
        if (pos + bytes > payload.size()) throw std::runtime_error("checkpoint: truncated payload");
        for (size_t i = 0; i < t.v.size(); ++i) {
            float f;
            std::memcpy(&f, payload.data() + pos + i * 4, 4);
            t.v[i] = static_cast<double>(f);
        }
        pos += bytes;
        rc.tensors.emplace_back(tj.at("name").get<std::string>(), std::move(t));
    }
    if (pos != payload.size()) throw std::runtime_error("checkpoint: trailing payload bytes");
    return rc;
}

static nlohmann::json ae_to_json(const AutoencoderConfig& c) {
    return {{"io_channels", c.io_channels},
            {"input_resolution", c.input_resolution},
            {"base_channels", c.base_channels},
            {"channel_multipliers", c.channel_multipliers},
            {"res_blocks_per_stage", c.res_blocks_per_stage},
            {"latent_channels", c.latent_channels},
            {"kl_weight", c.kl_weight}};
}

static AutoencoderConfig ae_from_json(const nlohmann::json& j) {
    AutoencoderConfig c;
    c.io_channels = j.at("io_channels").get<int>();
    c.input_resolution = j.at("input_resolution").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.res_blocks_per_stage = j.at("res_blocks_per_stage").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.kl_weight = j.at("kl_weight").get<double>();
    return c;
}

static nlohmann::json e2_to_json(const CondEncoderConfig& c) {
    return {{"io_channels", c.io_channels},
            {"input_resolution", c.input_resolution},
            {"base_channels", c.base_channels},
            {"channel_multipliers", c.channel_multipliers},
            {"res_blocks_per_stage", c.res_blocks_per_stage},
            {"latent_channels", c.latent_channels},
            {"context_dim", c.context_dim}};
}

static CondEncoderConfig e2_from_json(const nlohmann::json& j) {
    CondEncoderConfig c;
    c.io_channels = j.at("io_channels").get<int>();
    c.input_resolution = j.at("input_resolution").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.res_blocks_per_stage = j.at("res_blocks_per_stage").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.context_dim = j.at("context_dim").get<int>();
    return c;
}

static nlohmann::json unet_to_json(const UNetConfig& c) {
    return {{"in_channels", c.in_channels},
            {"out_channels", c.out_channels},
            {"base_channels", c.base_channels},
            {"channel_multipliers", c.channel_multipliers},
            {"res_blocks_per_stage", c.res_blocks_per_stage},
            {"attention_factors", c.attention_factors},
            {"attention_heads", c.attention_heads},
            {"context_dim", c.context_dim},
            {"latent_resolution", c.latent_resolution}};
}

static UNetConfig unet_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    c.res_blocks_per_stage = j.at("res_blocks_per_stage").get<int>();
    c.attention_factors = j.at("attention_factors").get<std::vector<int>>();
    c.attention_heads = j.at("attention_heads").get<int>();
    c.context_dim = j.at("context_dim").get<int>();
    c.latent_resolution = j.at("latent_resolution").get<int>();
    return c;
}

static nlohmann::json cls_to_json(const ClassifierConfig& c) {
    return {{"io_channels", c.io_channels},
            {"input_resolution", c.input_resolution},
            {"base_channels", c.base_channels},
            {"bypass", c.bypass},
            {"smoothing", c.smoothing}};
}

static ClassifierConfig cls_from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    c.io_channels = j.at("io_channels").get<int>();
    c.input_resolution = j.at("input_resolution").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.bypass = j.at("bypass").get<bool>();
    c.smoothing = j.at("smoothing").get<double>();
    return c;
}

static nlohmann::json aw_to_json(const GuidanceConfig& c) {
    return {{"h", c.h},
            {"w", c.w},
            {"proj_dim", c.proj_dim},
            {"kappa", c.kappa},
            {"eps_stab", c.eps_stab}};
}

static GuidanceConfig aw_from_json(const nlohmann::json& j) {
    GuidanceConfig c;
    c.h = j.at("h").get<int>();
    c.w = j.at("w").get<int>();
    c.proj_dim = j.at("proj_dim").get<int>();
    c.kappa = j.at("kappa").get<double>();
    c.eps_stab = j.at("eps_stab").get<double>();
    return c;
}

void save_checkpoint(const std::string& path, const ModelBundle& bundle,
                     const TrainState* train) {
    nlohmann::json meta;
    meta["configs"] = {{"ae", ae_to_json(bundle.ae)},
                       {"e2", e2_to_json(bundle.e2)},
                       {"unet", unet_to_json(bundle.unet)},
                       {"cls", cls_to_json(bundle.cls)},
                       {"aw", aw_to_json(bundle.aw)}};
    meta["flags"] = {{"ae_trained", bundle.ae_trained}, {"diff_trained", bundle.diff_trained}};
    meta["ema"] = {{"decay", bundle.ema.decay}, {"names", bundle.ema.names}};
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (const auto& name : bundle.params.names())
        tensors.emplace_back(name, &bundle.params.get(name));
    for (const auto& name : bundle.ema.names)
        tensors.emplace_back("ema:" + name, &bundle.ema.shadow.at(name));
    if (train) {
        meta["train"] = {{"step", train->step},
                         {"phase", train->phase},
                         {"rng", train->rng_state},
                         {"opt_step_count", train->opt.step_count},
                         {"opt_cfg",
                          {{"lr", train->opt.cfg.lr},
                           {"beta1", train->opt.cfg.beta1},
                           {"beta2", train->opt.cfg.beta2},
                           {"eps", train->opt.cfg.eps},
                           {"weight_decay", train->opt.cfg.weight_decay},
                           {"warmup_steps", train->opt.cfg.warmup_steps}}}};
        std::vector<std::string> moment_names;
        for (const auto& name : bundle.params.names())
            if (train->opt.m.count(name)) moment_names.push_back(name);
        meta["train"]["moment_names"] = moment_names;
        for (const auto& name : moment_names) {
            tensors.emplace_back("optm:" + name, &train->opt.m.at(name));
            tensors.emplace_back("optv:" + name, &train->opt.v.at(name));
        }
    }
    write_checkpoint_file(path, meta, tensors);
}

ModelBundle load_checkpoint(const std::string& path, TrainState* train) {
    RawCheckpoint rc = read_checkpoint_file(path);
    const nlohmann::json& cfgs = rc.meta.at("configs");
    ModelBundle bundle = make_bundle(ae_from_json(cfgs.at("ae")), e2_from_json(cfgs.at("e2")),
                                     unet_from_json(cfgs.at("unet")), cls_from_json(cfgs.at("cls")),
                                     aw_from_json(cfgs.at("aw")), 0);
    bundle.ae_trained = rc.meta.at("flags").at("ae_trained").get<bool>();
    bundle.diff_trained = rc.meta.at("flags").at("diff_trained").get<bool>();
    bundle.ema.decay = rc.meta.at("ema").at("decay").get<double>();
    bundle.ema.names = rc.meta.at("ema").at("names").get<std::vector<std::string>>();
    bundle.ema.shadow.clear();

    if (train) {
        *train = TrainState{};
        if (rc.meta.contains("train")) {
            const nlohmann::json& tj = rc.meta.at("train");
            train->step = tj.at("step").get<std::int64_t>();
            train->phase = tj.at("phase").get<std::string>();
            train->rng_state = tj.at("rng").get<std::string>();
            train->opt.step_count = tj.at("opt_step_count").get<std::int64_t>();
            const nlohmann::json& oc = tj.at("opt_cfg");
            train->opt.cfg.lr = oc.at("lr").get<double>();
            train->opt.cfg.beta1 = oc.at("beta1").get<double>();
            train->opt.cfg.beta2 = oc.at("beta2").get<double>();
            train->opt.cfg.eps = oc.at("eps").get<double>();
            train->opt.cfg.weight_decay = oc.at("weight_decay").get<double>();
            train->opt.cfg.warmup_steps = oc.at("warmup_steps").get<int>();
        }
    }

    for (auto& [name, t] : rc.tensors) {
        if (name.rfind("ema:", 0) == 0) {
            bundle.ema.shadow[name.substr(4)] = std::move(t);
        } else if (name.rfind("optm:", 0) == 0) {
            if (train) train->opt.m[name.substr(5)] = std::move(t);
        } else if (name.rfind("optv:", 0) == 0) {
            if (train) train->opt.v[name.substr(5)] = std::move(t);
        } else {
            if (!bundle.params.has(name))
                throw std::runtime_error("checkpoint: unknown parameter " + name);
            Tensor& dst = bundle.params.get(name);
            if (dst.shape != t.shape)
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            dst = std::move(t);
        }
    }
    for (const auto& name : bundle.ema.names)
        if (!bundle.ema.shadow.count(name))
            throw std::runtime_error("checkpoint: missing EMA shadow for " + name);
    return bundle;
}

}  // namespace xr2vol
