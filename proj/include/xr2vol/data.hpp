#ifndef XR2VOL_DATA_HPP
#define XR2VOL_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "xr2vol/rng.hpp"
#include "xr2vol/tensor.hpp"

namespace xr2vol {

// Ordered stack of single-channel slices, shallow to deep. Depth values are
// the normalized positions d/(S-1).
struct Volume {
    std::vector<Tensor> slices;  // each {1, h, w}
    std::vector<double> depths;
    std::string provenance;  // "real" | "generated"

    int slice_count() const { return static_cast<int>(slices.size()); }
    int resolution() const { return slices.empty() ? 0 : slices[0].dim(1); }
    void validate() const;

    Tensor to_tensor() const;  // {S, h, w}
    static Volume from_tensor(const Tensor& t, std::string provenance);
};

// Affine map of [min, max] to [-1, 1]; a constant image maps to all zeros.
Tensor normalize_intensity(const Tensor& img);

// {1,h,w} -> {3,h,w} with identical channels.
Tensor triplicate_channels(const Tensor& img);
// {c,h,w} -> {1,h,w} channel average; exact inverse of triplication.
Tensor channel_mean(const Tensor& img);

// Keeps the 50-slice core of a deeper scan. An 80-slice input starts at
// 1-based slice 13 (the anchored clinical window); any other count requires
// generic mode, which starts at floor(lo * S).
Volume extract_slice_range(const Volume& vol, double lo = 0.16, double hi = 0.78,
                           bool generic = false, int keep = 50);

struct PhantomConfig {
    int resolution = 64;
    int slice_count = 16;
    double noise_amp = 0.01;  // uniform noise added to the radiograph
};

// Per-sample generator geometry recorded for region-based metrics and the
// projection oracle.
struct SampleGeometry {
    int joint_row_lo = 0;  // region of interest rows [lo, hi)
    int joint_row_hi = 0;
    double gap_width = 0.0;     // normalized units
    double density_min = 0.0;   // pre-normalization density range
    double density_max = 0.0;
};

struct PairedSample {
    std::string id;
    int grade = 0;
    Tensor xray;  // {1, h, w}
    Volume volume;
    SampleGeometry geom;
};

struct SampleEntry {
    std::string id;
    int grade = 0;
    std::string xray_path;
    std::string volume_path;
    std::string split;  // "train" | "val" | ""
    SampleGeometry geom;
};

struct DatasetManifest {
    int resolution = 0;
    int slice_count = 0;
    std::uint64_t seed = 0;
    double noise_amp = 0.0;
    std::string root;  // directory holding the files; not serialized
    std::vector<SampleEntry> samples;

    void validate() const;
};

// Deterministic synthetic knee: two smooth bone bodies, a joint gap that
// narrows with grade, boundary bumps that grow with grade, and a projected
// radiograph with mild noise.
PairedSample generate_phantom(const std::string& id, int grade, std::uint64_t sample_seed,
                              const PhantomConfig& cfg);

// Projection of a stored (normalized) volume back to a radiograph, given the
// recorded density range. Matches the generator's radiograph up to its noise.
Tensor reproject_radiograph(const Volume& vol, double density_min, double density_max);

// Writes n samples (grades cycling 0..4) plus manifest.json under out_dir.
DatasetManifest generate_phantom_dataset(int n, const PhantomConfig& cfg, std::uint64_t seed,
                                         const std::string& out_dir);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

PairedSample load_sample(const DatasetManifest& m, int index);

// Deterministic shuffled split; train fraction 0.7 of n rounded to nearest,
// clamped so both sides are nonempty.
void split_dataset(DatasetManifest& m, double train_fraction, std::uint64_t seed);

std::vector<int> split_indices(const DatasetManifest& m, const std::string& split);

}  // namespace xr2vol

#endif
