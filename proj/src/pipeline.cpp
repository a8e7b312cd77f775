#include "xr2vol/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "xr2vol/diffusion.hpp"
#include "xr2vol/io.hpp"
#include "xr2vol/metrics.hpp"

namespace xr2vol {

std::string TrainReport::to_csv() const {
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < at_step.size(); ++i)
        rows.push_back({std::to_string(at_step[i]), format_double(loss[i]),
                        format_double(aux[i])});
    return csv_document({"step", "loss", "aux"}, rows);
}

static Tensor to_io(const Tensor& x, int io_channels) {
    if (x.rank() != 3 || x.dim(0) != 1)
        throw std::invalid_argument("pipeline: expected a {1,h,w} image");
    if (io_channels == 1) return x;
    if (io_channels == 3) return triplicate_channels(x);
    throw std::invalid_argument("pipeline: io_channels must be 1 or 3");
}

static Tensor plane_of(const Tensor& x) {
    Tensor out({x.dim(1), x.dim(2)});
    out.v = x.v;
    return out;
}

static std::vector<PairedSample> load_split(const DatasetManifest& data,
                                            const std::string& split) {
    std::vector<int> idx = split_indices(data, split);
    if (idx.empty() && split == "train") {
        // unsplit manifests train on everything
        idx.resize(data.samples.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    }
    std::vector<PairedSample> out;
    for (int i : idx) out.push_back(load_sample(data, i));
    return out;
}

static void check_finite(double loss, const char* phase, std::int64_t step) {
    if (!std::isfinite(loss))
        throw numeric_error(std::string("training diverged: non-finite loss in ") + phase +
                            " at step " + std::to_string(step));
}

// binds the caller's resume state or a scratch one, and configures the
// optimizer on a fresh run
static TrainState& bind_state(TrainState* state, TrainState& local, const char* phase,
                              const TrainConfig& tc) {
    TrainState& ts = state ? *state : local;
    if (ts.step == 0) {
        ts.phase = phase;
        ts.opt.cfg.lr = tc.lr;
        ts.opt.cfg.warmup_steps = tc.warmup_steps;
        ts.opt.cfg.weight_decay = tc.weight_decay;
    } else if (ts.phase != phase) {
        throw std::runtime_error("resume: checkpoint belongs to phase " + ts.phase);
    }
    return ts;
}

// recon + weighted KL for one slice, built on the tape
static Var ae_slice_loss(Tape& t, TapeParams& tp, const Tensor& x_io,
                         const AutoencoderConfig& cfg, RngHandle& rng) {
    Var x = t.leaf(x_io);
    Var enc = ae_encode_tape(t, tp, x, cfg);
    auto [mean, logvar] = split_posterior_tape(t, enc, cfg.latent_channels);
    Tensor eps_t(t.val(mean).shape);
    for (auto& e : eps_t.v) e = rng.normal();
    Var eps = t.leaf(eps_t);
    Var z = t.add(mean, t.mul(t.exp_op(t.scale(logvar, 0.5)), eps));
    Var x_hat = ae_decode_tape(t, tp, z, cfg);
    Var rec = t.mse(x_hat, x);
    Var kl_field = t.sub(t.add(t.mul(mean, mean), t.exp_op(logvar)), t.add_const(logvar, 1.0));
    Var kl = t.scale(t.mean(kl_field), 0.5);
    return t.add(rec, t.scale(kl, cfg.kl_weight));
}

TrainReport train_autoencoder(const DatasetManifest& data, ModelBundle& bundle,
                              const TrainConfig& tc, std::uint64_t seed, TrainState* state) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<PairedSample> train = load_split(data, "train");
    if (train.empty()) throw std::invalid_argument("train-ae: empty training set");

    TrainReport rep;
    rep.phase = "ae";
    rep.seed = seed;

    TrainState local;
    TrainState& ts = bind_state(state, local, "ae", tc);
    AdamW& opt = ts.opt;
    std::vector<std::string> names = bundle.stage1_names();

    RngHandle rng(derive_seed(seed, 1));
    if (!ts.rng_state.empty()) rng.restore_state(ts.rng_state);
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;

    auto probe = [&](std::int64_t at) {
        double acc = 0.0, acc_kl = 0.0;
        std::int64_t count = 0;
        for (const auto& ps : train)
            for (const auto& slice : ps.volume.slices) {
                Tensor x = to_io(slice, bundle.ae.io_channels);
                GaussianPosterior post = encode_kl(x, bundle.params, bundle.ae);
                Tensor x_hat = decode(post.mean, bundle.params, bundle.ae);
                double kl = 0.0;
                for (size_t i = 0; i < post.mean.v.size(); ++i)
                    kl += 0.5 * (post.mean.v[i] * post.mean.v[i] + std::exp(post.logvar.v[i]) -
                                 1.0 - post.logvar.v[i]);
                kl /= static_cast<double>(post.mean.v.size());
                acc += diffusion_loss(x_hat, x) + bundle.ae.kl_weight * kl;
                acc_kl += kl;
                ++count;
            }
        rep.at_step.push_back(at);
        rep.loss.push_back(acc / static_cast<double>(count));
        rep.aux.push_back(acc_kl / static_cast<double>(count));
    };

    std::int64_t start = ts.step, last = ts.step;
    for (std::int64_t step = start + 1; step <= start + tc.steps; ++step) {
        Tape t(true);
        TapeParams tp(t, bundle.params);
        Var total;
        for (int b = 0; b < tc.batch; ++b) {
            const PairedSample& ps =
                train[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(train.size()) - 1))];
            int k = static_cast<int>(rng.uniform_int(0, ps.volume.slice_count() - 1));
            Tensor x = to_io(ps.volume.slices[static_cast<size_t>(k)], bundle.ae.io_channels);
            Var item = ae_slice_loss(t, tp, x, bundle.ae, rng);
            total = (b == 0) ? item : t.add(total, item);
        }
        Var loss = t.scale(total, 1.0 / tc.batch);
        double lval = t.val(loss).v[0];
        check_finite(lval, "ae", step);
        t.backward(loss);
        std::unordered_map<std::string, Tensor> grads;
        tp.export_grads(grads);
        opt.step(bundle.params, names, grads);
        last = step;

        bool probe_now =
            (tc.eval_every > 0 && step % tc.eval_every == 0) || step == start + tc.steps;
        if (!probe_now) continue;
        probe(step);
        double p = rep.loss.back();
        check_finite(p, "ae", step);
        if (tc.stop_below > 0.0 && p < tc.stop_below) break;
        if (p < best) {
            best = p;
            since_best = 0;
        } else if (tc.early_stop && ++since_best >= tc.patience) {
            break;
        }
    }
    ts.step = last;
    ts.rng_state = rng.state_string();
    if (tc.steps > 0) bundle.ae_trained = true;
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

TrainReport train_diffusion(const DatasetManifest& data, ModelBundle& bundle,
                            const TrainConfig& tc, std::uint64_t seed, TrainState* state) {
    auto t0 = std::chrono::steady_clock::now();
    if (!bundle.ae_trained)
        throw std::runtime_error("train-diff: autoencoder stage has not been trained");
    std::vector<PairedSample> train = load_split(data, "train");
    if (train.empty()) throw std::invalid_argument("train-diff: empty training set");

    TrainReport rep;
    rep.phase = "diff";
    rep.seed = seed;

    TrainState local;
    TrainState& ts = bind_state(state, local, "diff", tc);
    AdamW& opt = ts.opt;
    std::vector<std::string> names = bundle.stage2_names();
    std::vector<std::string> frozen = bundle.stage1_names();
    std::uint64_t frozen_hash = bundle.params.content_hash(frozen);

    if (bundle.ema.names.empty()) bundle.ema.init(bundle.params, names, tc.ema_decay);

    NoiseSchedule ns = make_linear_schedule(tc.diff.T, tc.diff.beta_start, tc.diff.beta_end);
    RngHandle rng(derive_seed(seed, 2));
    if (!ts.rng_state.empty()) rng.restore_state(ts.rng_state);
    double window_acc = 0.0;
    std::int64_t window_n = 0;
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;

    std::int64_t start = ts.step, last = ts.step;
    for (std::int64_t step = start + 1; step <= start + tc.steps; ++step) {
        Tape t(true);
        TapeParams tp(t, bundle.params);
        Var total;
        Tensor probe_zt, probe_eps_hat, probe_slice;
        int probe_t = 0;
        for (int b = 0; b < tc.batch; ++b) {
            const PairedSample& ps =
                train[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(train.size()) - 1))];
            int k = static_cast<int>(rng.uniform_int(0, ps.volume.slice_count() - 1));
            double depth =
                static_cast<double>(k) / static_cast<double>(ps.volume.slice_count() - 1);
            Tensor slice_io = to_io(ps.volume.slices[static_cast<size_t>(k)],
                                    bundle.ae.io_channels);
            Tensor z0 = encode_kl(slice_io, bundle.params, bundle.ae).mean;
            for (auto& e : z0.v) e *= tc.diff.latent_scale;

            int tt = static_cast<int>(rng.uniform_int(1, tc.diff.T));
            Tensor eps_t(z0.shape);
            for (auto& e : eps_t.v) e = rng.normal();
            Tensor z_t = forward_noise(z0, eps_t, ns, tt);

            Tensor xc_e2 = to_io(ps.xray, bundle.e2.io_channels);
            Var xc = t.leaf(xc_e2);
            auto [cond_z, ctx] = e2_encode_tape(t, tp, xc, bundle.e2);

            KoaDistribution p = koa_classify_stub(to_io(ps.xray, bundle.cls.io_channels),
                                                  bundle.params, bundle.cls, ps.grade);
            Tensor i_map = downsample_area(plane_of(ps.xray), bundle.aw.h, bundle.aw.w);
            Var y_comb = adaptive_weight_tape(t, tp, t.leaf(p.probs), t.leaf(i_map), bundle.aw);

            Var zt_var = t.leaf(z_t);
            Var z_in = t.concat_ch({zt_var, cond_z});
            Var eps_hat = unet_tape(t, tp, z_in, tt, tc.diff.T, depth, y_comb, ctx, bundle.unet);
            Var item = t.mse(eps_hat, t.leaf(eps_t));
            total = (b == 0) ? item : t.add(total, item);
            if (b == 0) {
                probe_zt = z_t;
                probe_eps_hat = t.val(eps_hat);
                probe_slice = slice_io;
                probe_t = tt;
            }
        }
        Var loss = t.scale(total, 1.0 / tc.batch);
        double lval = t.val(loss).v[0];
        check_finite(lval, "diff", step);
        t.backward(loss);
        std::unordered_map<std::string, Tensor> grads;
        tp.export_grads(grads);
        opt.step(bundle.params, names, grads);
        bundle.ema.update(bundle.params);
        last = step;

        window_acc += lval;
        ++window_n;
        bool probe_now =
            (tc.eval_every > 0 && step % tc.eval_every == 0) || step == start + tc.steps;
        if (!probe_now) continue;

        // decoded-reconstruction probe, logged only
        Tensor x0_hat = predict_x0(probe_zt, probe_eps_hat, ns, probe_t);
        for (auto& e : x0_hat.v) e /= tc.diff.latent_scale;
        Tensor x_rec = decode(x0_hat, bundle.params, bundle.ae);
        double rec = diffusion_loss(x_rec, probe_slice);

        double p = window_acc / static_cast<double>(window_n);
        window_acc = 0.0;
        window_n = 0;
        rep.at_step.push_back(step);
        rep.loss.push_back(p);
        rep.aux.push_back(rec);
        if (tc.stop_below > 0.0 && p < tc.stop_below) break;
        if (p < best) {
            best = p;
            since_best = 0;
        } else if (tc.early_stop && ++since_best >= tc.patience) {
            break;
        }
    }

    ts.step = last;
    ts.rng_state = rng.state_string();
    if (bundle.params.content_hash(frozen) != frozen_hash)
        throw std::logic_error("train-diff: frozen autoencoder parameters changed");
    if (tc.steps > 0) bundle.diff_trained = true;
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

namespace {

// Depth-independent conditioning shared by every slice of one volume.
struct SamplingContext {
    ParamStore params;  // EMA weights applied
    Tensor cond_z;
    Tensor context;
    Tensor y_combined;
};

SamplingContext build_context(const Tensor& x_c, const ModelBundle& bundle, int grade) {
    if (!bundle.diff_trained)
        throw std::runtime_error("infer: the diffusion stage has not been trained");
    SamplingContext sc;
    sc.params = bundle.params;
    bundle.ema.apply_to(sc.params);
    auto enc = encode_condition(to_io(x_c, bundle.e2.io_channels), sc.params, bundle.e2);
    sc.cond_z = enc.first;
    sc.context = enc.second;
    KoaDistribution p = koa_classify_stub(to_io(x_c, bundle.cls.io_channels), sc.params,
                                          bundle.cls, grade);
    Tensor i_map = downsample_area(plane_of(x_c), bundle.aw.h, bundle.aw.w);
    GuidanceBundle gb = adaptive_weight_module(p, i_map, sc.params, bundle.aw);
    sc.y_combined = gb.y_combined;
    return sc;
}

Tensor sample_slice(const SamplingContext& sc, const ModelBundle& bundle,
                    const DiffusionSpec& ds, const NoiseSchedule& ns,
                    const std::vector<int>& ts, double depth, std::uint64_t slice_seed) {
    RngHandle rng(slice_seed);
    std::vector<int> zshape = {bundle.unet.out_channels, bundle.unet.latent_resolution,
                               bundle.unet.latent_resolution};
    Tensor z(zshape);
    for (auto& e : z.v) e = rng.normal();

    DenoiseFn<double> model = [&](const std::vector<double>& zv, int t,
                                  std::vector<double>& out) {
        Tensor z_t(zshape);
        z_t.v = zv;
        Tensor z_in({bundle.unet.in_channels, zshape[1], zshape[2]});
        std::copy(z_t.v.begin(), z_t.v.end(), z_in.v.begin());
        std::copy(sc.cond_z.v.begin(), sc.cond_z.v.end(),
                  z_in.v.begin() + static_cast<std::ptrdiff_t>(z_t.v.size()));
        Tensor eps = unet_denoise(z_in, t, ds.T, depth, sc.y_combined, sc.context, sc.params,
                                  bundle.unet);
        out = eps.v;
    };
    Tensor z0(zshape);
    z0.v = ddim_sample<double>(ns, ts, z.v, model);
    for (auto& e : z0.v) e /= ds.latent_scale;
    Tensor x = decode(z0, sc.params, bundle.ae);
    if (x.dim(0) == 3) return channel_mean(x);
    return x;
}

}  // namespace

Tensor infer_slice(const Tensor& x_c, double depth, int steps, const ModelBundle& bundle,
                   const DiffusionSpec& ds, std::uint64_t seed, int grade) {
    if (steps < 1) throw std::invalid_argument("infer: steps must be >= 1");
    if (depth < 0.0 || depth > 1.0) throw std::invalid_argument("infer: depth outside [0,1]");
    SamplingContext sc = build_context(x_c, bundle, grade);
    NoiseSchedule ns = make_linear_schedule(ds.T, ds.beta_start, ds.beta_end);
    std::vector<int> ts = uniform_timesteps(ds.T, steps);
    return sample_slice(sc, bundle, ds, ns, ts, depth, seed);
}

Volume infer_volume(const Tensor& x_c, int s, int steps, const ModelBundle& bundle,
                    const DiffusionSpec& ds, std::uint64_t seed, int workers, int grade) {
    if (s < 2) throw std::invalid_argument("infer: need at least 2 slices");
    if (steps < 1) throw std::invalid_argument("infer: steps must be >= 1");
    SamplingContext sc = build_context(x_c, bundle, grade);
    NoiseSchedule ns = make_linear_schedule(ds.T, ds.beta_start, ds.beta_end);
    std::vector<int> ts = uniform_timesteps(ds.T, steps);

    std::vector<Tensor> slices(static_cast<size_t>(s));
    auto run_one = [&](int k) {
        double depth = static_cast<double>(k) / static_cast<double>(s - 1);
        slices[static_cast<size_t>(k)] =
            sample_slice(sc, bundle, ds, ns, ts, depth, derive_seed(seed, static_cast<std::uint64_t>(k)));
    };

    int nw = std::max(1, workers);
    if (nw == 1) {
        for (int k = 0; k < s; ++k) run_one(k);
    } else {
        std::atomic<int> next{0};
        std::exception_ptr first_error;
        std::mutex err_mu;
        auto worker = [&]() {
            try {
                for (int k = next.fetch_add(1); k < s; k = next.fetch_add(1)) run_one(k);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        };
        std::vector<std::thread> pool;
        for (int i = 0; i < nw; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    Volume vol;
    vol.provenance = "generated";
    for (int k = 0; k < s; ++k) {
        vol.slices.push_back(std::move(slices[static_cast<size_t>(k)]));
        vol.depths.push_back(static_cast<double>(k) / static_cast<double>(s - 1));
    }
    return vol;
}

std::vector<std::pair<int, double>> interp_study(const Tensor& x_c,
                                                 const std::vector<int>& step_counts,
                                                 int slice_count, const ModelBundle& bundle,
                                                 const DiffusionSpec& ds, std::uint64_t seed,
                                                 int workers, int grade) {
    std::vector<std::pair<int, double>> rows;
    for (int sc : step_counts) {
        Volume vol = infer_volume(x_c, slice_count, sc, bundle, ds, seed, workers, grade);
        rows.emplace_back(sc, adjacent_slice_correlation(vol));
    }
    return rows;
}

std::string interp_csv(const std::vector<std::pair<int, double>>& rows) {
    std::vector<std::vector<std::string>> out;
    for (const auto& [s, c] : rows) out.push_back({std::to_string(s), format_double(c)});
    return csv_document({"steps", "adjacent_correlation"}, out);
}

}  // namespace xr2vol
