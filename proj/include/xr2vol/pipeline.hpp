#ifndef XR2VOL_PIPELINE_HPP
#define XR2VOL_PIPELINE_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xr2vol/checkpoint.hpp"
#include "xr2vol/data.hpp"
#include "xr2vol/networks.hpp"
#include "xr2vol/schedule.hpp"

namespace xr2vol {

// Numeric-divergence failures carry their own type so the entry point can
// map them to a dedicated exit code.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Schedule parameters shared by training and sampling. latent_scale
// multiplies encoded latents before diffusion and is divided out before
// decoding.
struct DiffusionSpec {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double latent_scale = 1.0;
};

struct TrainConfig {
    int steps = 500;       // optimizer steps; 0 leaves parameters untouched
    int batch = 8;         // gradient accumulation width
    double lr = 1e-4;
    int warmup_steps = 100;
    double weight_decay = 0.0;
    double ema_decay = 0.99;
    int eval_every = 50;     // loss probe cadence (also the report cadence)
    int patience = 10;       // probes without a new best before stopping
    bool early_stop = false;
    double stop_below = 0.0;  // stop once the probe loss drops under this; 0 disables
    DiffusionSpec diff;
};

// Probe series logged during a training phase, one row per probe.
struct TrainReport {
    std::string phase;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
    std::vector<std::int64_t> at_step;
    std::vector<double> loss;  // phase objective (recon+KL, or noise MSE)
    std::vector<double> aux;   // KL term, or decoded-reconstruction probe

    std::string to_csv() const;
};

// Stage 1: reconstruction plus weighted KL on single slices drawn from the
// training split. Updates only the autoencoder parameters. A non-null state
// with step > 0 resumes: optimizer moments, rng stream and step counter all
// continue, so the loss curve matches an uninterrupted run.
TrainReport train_autoencoder(const DatasetManifest& data, ModelBundle& bundle,
                              const TrainConfig& tc, std::uint64_t seed,
                              TrainState* state = nullptr);

// Stage 2: noise-prediction training of the denoiser, condition encoder and
// adaptive-weight parameters with the autoencoder frozen (verified by hash).
// The EMA shadow tracks every updated parameter. The decoded-reconstruction
// probe is logged only, never optimized.
TrainReport train_diffusion(const DatasetManifest& data, ModelBundle& bundle,
                            const TrainConfig& tc, std::uint64_t seed,
                            TrainState* state = nullptr);

// One slice at a normalized depth: unit-Gaussian start, deterministic sampler
// over a uniform timestep subset, decode. Sampling always runs on the EMA
// weights. grade < 0 lets the classifier stub infer the severity input.
Tensor infer_slice(const Tensor& x_c, double depth, int steps, const ModelBundle& bundle,
                   const DiffusionSpec& ds, std::uint64_t seed, int grade = -1);

// s slices at depths k/(s-1). Slice k always uses the seed derived for k, so
// worker count and generation order never change the result.
Volume infer_volume(const Tensor& x_c, int s, int steps, const ModelBundle& bundle,
                    const DiffusionSpec& ds, std::uint64_t seed, int workers = 1, int grade = -1);

// Mean adjacent-slice correlation of a generated volume per sampler step
// count, at a fixed slice count.
std::vector<std::pair<int, double>> interp_study(const Tensor& x_c,
                                                 const std::vector<int>& step_counts,
                                                 int slice_count, const ModelBundle& bundle,
                                                 const DiffusionSpec& ds, std::uint64_t seed,
                                                 int workers = 1, int grade = -1);

std::string interp_csv(const std::vector<std::pair<int, double>>& rows);

}  // namespace xr2vol

#endif
