#include "xr2vol/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"
#include "xr2vol/io.hpp"

namespace xr2vol {

void Volume::validate() const {
    if (slices.empty()) throw std::invalid_argument("volume: no slices");
    if (depths.size() != slices.size())
        throw std::invalid_argument("volume: depth list length mismatch");
    int h = slices[0].dim(1), w = slices[0].dim(2);
    double prev = -1.0;
    for (size_t k = 0; k < slices.size(); ++k) {
        const Tensor& s = slices[k];
        if (s.rank() != 3 || s.dim(0) != 1 || s.dim(1) != h || s.dim(2) != w)
            throw std::invalid_argument("volume: inconsistent slice shape");
        double d = depths[k];
        if (d < 0.0 || d > 1.0 || d <= prev)
            throw std::invalid_argument("volume: depths must strictly increase within [0,1]");
        prev = d;
    }
}

Tensor Volume::to_tensor() const {
    validate();
    int S = slice_count(), h = slices[0].dim(1), w = slices[0].dim(2);
    Tensor t({S, h, w});
    size_t plane = static_cast<size_t>(h) * w;
    for (int k = 0; k < S; ++k)
        std::copy(slices[static_cast<size_t>(k)].v.begin(),
                  slices[static_cast<size_t>(k)].v.end(),
                  t.v.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<size_t>(k)));
    return t;
}

Volume Volume::from_tensor(const Tensor& t, std::string provenance) {
    if (t.rank() != 3) throw std::invalid_argument("volume: tensor must be {S,h,w}");
    int S = t.dim(0), h = t.dim(1), w = t.dim(2);
    if (S < 2) throw std::invalid_argument("volume: needs at least 2 slices");
    Volume v;
    v.provenance = std::move(provenance);
    size_t plane = static_cast<size_t>(h) * w;
    for (int k = 0; k < S; ++k) {
        Tensor s({1, h, w});
        std::copy(t.v.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<size_t>(k)),
                  t.v.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<size_t>(k + 1)),
                  s.v.begin());
        v.slices.push_back(std::move(s));
        v.depths.push_back(static_cast<double>(k) / static_cast<double>(S - 1));
    }
    return v;
}

Tensor normalize_intensity(const Tensor& img) {
    if (img.numel() == 0) throw std::invalid_argument("normalize: empty image");
    double mn = img.v[0], mx = img.v[0];
    for (double x : img.v) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    Tensor out(img.shape);
    if (mx == mn) return out;  // constant image maps to zeros
    double scale = 2.0 / (mx - mn);
    for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = (img.v[i] - mn) * scale - 1.0;
    return out;
}

Tensor triplicate_channels(const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 1)
        throw std::invalid_argument("triplicate: needs a single-channel {1,h,w} image");
    Tensor out({3, img.dim(1), img.dim(2)});
    for (int c = 0; c < 3; ++c)
        std::copy(img.v.begin(), img.v.end(),
                  out.v.begin() + static_cast<std::ptrdiff_t>(img.v.size() * static_cast<size_t>(c)));
    return out;
}

Tensor channel_mean(const Tensor& img) {
    if (img.rank() != 3) throw std::invalid_argument("channel_mean: needs {c,h,w}");
    int c = img.dim(0);
    Tensor out({1, img.dim(1), img.dim(2)});
    size_t plane = out.v.size();
    // averaging deviations from channel 0 keeps identical channels bit exact
    for (size_t i = 0; i < plane; ++i) {
        double base = img.v[i];
        double acc = 0.0;
        for (int ch = 1; ch < c; ++ch) acc += img.v[static_cast<size_t>(ch) * plane + i] - base;
        out.v[i] = base + acc / static_cast<double>(c);
    }
    return out;
}

Volume extract_slice_range(const Volume& vol, double lo, double hi, bool generic, int keep) {
    vol.validate();
    if (!(lo >= 0.0 && lo < hi && hi <= 1.0))
        throw std::invalid_argument("extract_slice_range: need 0 <= lo < hi <= 1");
    int S = vol.slice_count();
    int start = 0;
    if (!generic) {
        if (S != 80)
            throw std::invalid_argument(
                "extract_slice_range: expected an 80-slice scan (use generic mode otherwise)");
        start = 12;  // 1-based slice 13
    } else {
        start = static_cast<int>(std::floor(lo * S));
    }
    if (start + keep > S)
        throw std::invalid_argument("extract_slice_range: range exceeds slice count");
    Volume out;
    out.provenance = vol.provenance;
    for (int j = 0; j < keep; ++j) {
        out.slices.push_back(vol.slices[static_cast<size_t>(start + j)]);
        out.depths.push_back(static_cast<double>(j) / static_cast<double>(keep - 1));
    }
    return out;
}

void DatasetManifest::validate() const {
    if (resolution < 2 || slice_count < 2) throw std::invalid_argument("manifest: bad dimensions");
    std::vector<std::string> ids;
    for (const auto& s : samples) {
        if (s.grade < 0 || s.grade > 4) throw std::invalid_argument("manifest: bad grade");
        ids.push_back(s.id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw std::invalid_argument("manifest: duplicate sample id");
}

static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

PairedSample generate_phantom(const std::string& id, int grade, std::uint64_t sample_seed,
                              const PhantomConfig& cfg) {
    if (grade < 0 || grade > 4) throw std::invalid_argument("phantom: grade must be 0..4");
    int r = cfg.resolution, S = cfg.slice_count;
    if (r < 8 || S < 2) throw std::invalid_argument("phantom: degenerate dimensions");
    RngHandle rng(sample_seed);

    double joint_y = 0.5 + 0.06 * rng.uniform(-1.0, 1.0);
    double gap = 0.16 * (1.0 - 0.18 * grade);
    double w0 = 0.30 + 0.03 * rng.uniform(-1.0, 1.0);
    double osteo_amp = 0.015 * grade * (1.0 + 0.2 * rng.uniform(-1.0, 1.0));
    double f_f = 5.0 + 3.0 * rng.uniform();
    double f_t = 5.0 + 3.0 * rng.uniform();
    double ph_f = rng.uniform(0.0, 6.283185307179586);
    double ph_t = rng.uniform(0.0, 6.283185307179586);
    double tx_f = rng.uniform(0.0, 6.283185307179586);
    double tx_t = rng.uniform(0.0, 6.283185307179586);
    double ph_soft = rng.uniform(0.0, 6.283185307179586);

    const double softness = 0.02;
    std::vector<Tensor> raw(static_cast<size_t>(S));
    double dmin = 1e300, dmax = -1e300;
    for (int k = 0; k < S; ++k) {
        double u = static_cast<double>(k) / static_cast<double>(S - 1);
        double span = 1.0 - (2.0 * u - 1.0) * (2.0 * u - 1.0);
        double cw = w0 * (0.35 + 0.65 * std::sqrt(span < 0.0 ? 0.0 : span));
        Tensor plane({1, r, r});
        for (int yy = 0; yy < r; ++yy) {
            double y = static_cast<double>(yy) / static_cast<double>(r - 1);
            for (int xx = 0; xx < r; ++xx) {
                double x = static_cast<double>(xx) / static_cast<double>(r - 1);
                double o_f = osteo_amp * (0.5 + 0.5 * std::sin(6.2831853 * f_f * x + ph_f));
                double o_t = osteo_amp * (0.5 + 0.5 * std::sin(6.2831853 * f_t * x + ph_t));
                double y_f = joint_y - 0.5 * gap - o_f;
                double y_t = joint_y + 0.5 * gap + o_t;
                double m_lat = sigmoid((cw - std::fabs(x - 0.5)) / softness);
                double m_f = sigmoid((y_f - y) / softness) * m_lat *
                             sigmoid((y - 0.06) / softness);
                double m_t = sigmoid((y - y_t) / softness) * m_lat *
                             sigmoid((0.94 - y) / softness);
                double soft = 0.18 + 0.06 * std::sin(6.2831853 * (1.3 * x + 0.9 * y) + ph_soft +
                                                     0.8 * u);
                double bone_f = 0.85 + 0.12 * std::sin(9.0 * y * 3.14159265 + tx_f) *
                                           std::cos(7.0 * x * 3.14159265 + tx_f * 0.7);
                double bone_t = 0.85 + 0.12 * std::sin(9.0 * y * 3.14159265 + tx_t) *
                                           std::cos(7.0 * x * 3.14159265 + tx_t * 0.7);
                double wsoft = 1.0 - m_f - m_t;
                if (wsoft < 0.0) wsoft = 0.0;
                double d = soft * wsoft + bone_f * m_f + bone_t * m_t;
                plane.at3(0, yy, xx) = d;
                dmin = std::min(dmin, d);
                dmax = std::max(dmax, d);
            }
        }
        raw[static_cast<size_t>(k)] = std::move(plane);
    }

    PairedSample ps;
    ps.id = id;
    ps.grade = grade;
    ps.geom.gap_width = gap;
    ps.geom.density_min = dmin;
    ps.geom.density_max = dmax;
    double band = 0.5 * gap + osteo_amp + 0.12;
    int lo = static_cast<int>(std::floor((joint_y - band) * (r - 1)));
    int hi = static_cast<int>(std::ceil((joint_y + band) * (r - 1))) + 1;
    ps.geom.joint_row_lo = std::max(0, lo);
    ps.geom.joint_row_hi = std::min(r, hi);

    // volume-level min-max normalization to [-1,1]
    ps.volume.provenance = "generated";
    double scale = dmax > dmin ? 2.0 / (dmax - dmin) : 0.0;
    for (int k = 0; k < S; ++k) {
        Tensor s({1, r, r});
        for (size_t i = 0; i < s.v.size(); ++i)
            s.v[i] = (raw[static_cast<size_t>(k)].v[i] - dmin) * scale - 1.0;
        ps.volume.slices.push_back(std::move(s));
        ps.volume.depths.push_back(static_cast<double>(k) / static_cast<double>(S - 1));
    }

    // radiograph: intensity-weighted mean projection of the raw densities
    Tensor proj({1, r, r});
    for (int yy = 0; yy < r; ++yy)
        for (int xx = 0; xx < r; ++xx) {
            double num = 0.0, den = 1e-6;
            for (int k = 0; k < S; ++k) {
                double d = raw[static_cast<size_t>(k)].at3(0, yy, xx);
                num += d * d;
                den += d;
            }
            proj.at3(0, yy, xx) = num / den;
        }
    ps.xray = normalize_intensity(proj);
    for (auto& px : ps.xray.v) {
        px += rng.uniform(-cfg.noise_amp, cfg.noise_amp);
        px = px < -1.0 ? -1.0 : (px > 1.0 ? 1.0 : px);
    }
    return ps;
}

Tensor reproject_radiograph(const Volume& vol, double density_min, double density_max) {
    vol.validate();
    int S = vol.slice_count(), r = vol.resolution();
    double half = 0.5 * (density_max - density_min);
    Tensor proj({1, r, vol.slices[0].dim(2)});
    for (int yy = 0; yy < r; ++yy)
        for (int xx = 0; xx < vol.slices[0].dim(2); ++xx) {
            double num = 0.0, den = 1e-6;
            for (int k = 0; k < S; ++k) {
                double d = (vol.slices[static_cast<size_t>(k)].at3(0, yy, xx) + 1.0) * half +
                           density_min;
                num += d * d;
                den += d;
            }
            proj.at3(0, yy, xx) = num / den;
        }
    return normalize_intensity(proj);
}

static nlohmann::json geom_to_json(const SampleGeometry& g) {
    return {{"joint_row_lo", g.joint_row_lo},
            {"joint_row_hi", g.joint_row_hi},
            {"gap_width", g.gap_width},
            {"density_min", g.density_min},
            {"density_max", g.density_max}};
}

static SampleGeometry geom_from_json(const nlohmann::json& j) {
    SampleGeometry g;
    g.joint_row_lo = j.at("joint_row_lo").get<int>();
    g.joint_row_hi = j.at("joint_row_hi").get<int>();
    g.gap_width = j.at("gap_width").get<double>();
    g.density_min = j.at("density_min").get<double>();
    g.density_max = j.at("density_max").get<double>();
    return g;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    m.validate();
    nlohmann::json j;
    j["resolution"] = m.resolution;
    j["slice_count"] = m.slice_count;
    j["seed"] = m.seed;
    j["noise_amp"] = m.noise_amp;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : m.samples) {
        j["samples"].push_back({{"id", s.id},
                                {"grade", s.grade},
                                {"xray", s.xray_path},
                                {"volume", s.volume_path},
                                {"split", s.split},
                                {"geometry", geom_to_json(s.geom)}});
    }
    atomic_write_file(path, j.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    DatasetManifest m;
    m.resolution = j.at("resolution").get<int>();
    m.slice_count = j.at("slice_count").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.noise_amp = j.at("noise_amp").get<double>();
    m.root = std::filesystem::path(path).parent_path().string();
    for (const auto& sj : j.at("samples")) {
        SampleEntry e;
        e.id = sj.at("id").get<std::string>();
        e.grade = sj.at("grade").get<int>();
        e.xray_path = sj.at("xray").get<std::string>();
        e.volume_path = sj.at("volume").get<std::string>();
        e.split = sj.at("split").get<std::string>();
        e.geom = geom_from_json(sj.at("geometry"));
        m.samples.push_back(std::move(e));
    }
    m.validate();
    return m;
}

DatasetManifest generate_phantom_dataset(int n, const PhantomConfig& cfg, std::uint64_t seed,
                                         const std::string& out_dir) {
    if (n < 1) throw std::invalid_argument("gen-data: need at least one sample");
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "samples");
    DatasetManifest m;
    m.resolution = cfg.resolution;
    m.slice_count = cfg.slice_count;
    m.seed = seed;
    m.noise_amp = cfg.noise_amp;
    m.root = out_dir;
    for (int i = 0; i < n; ++i) {
        std::string id = "phantom" + std::to_string(i);
        int grade = i % 5;
        PairedSample ps = generate_phantom(id, grade, derive_seed(seed, static_cast<std::uint64_t>(i)),
                                           cfg);
        SampleEntry e;
        e.id = id;
        e.grade = grade;
        e.geom = ps.geom;
        e.xray_path = "samples/" + id + "_xray.f32";
        e.volume_path = "samples/" + id + "_vol.f32";
        write_tensor_file((fs::path(out_dir) / e.xray_path).string(), ps.xray);
        write_tensor_file((fs::path(out_dir) / e.volume_path).string(), ps.volume.to_tensor());
        m.samples.push_back(std::move(e));
    }
    save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

PairedSample load_sample(const DatasetManifest& m, int index) {
    const SampleEntry& e = m.samples.at(static_cast<size_t>(index));
    namespace fs = std::filesystem;
    PairedSample ps;
    ps.id = e.id;
    ps.grade = e.grade;
    ps.geom = e.geom;
    Tensor x = read_tensor_file((fs::path(m.root) / e.xray_path).string());
    if (x.rank() != 3 || x.dim(0) != 1 || x.dim(1) != m.resolution)
        throw std::runtime_error("dataset: radiograph shape mismatch for " + e.id);
    for (double v : x.v)
        if (v < -1.0 || v > 1.0) throw std::runtime_error("dataset: intensity out of range");
    ps.xray = std::move(x);
    Tensor vt = read_tensor_file((fs::path(m.root) / e.volume_path).string());
    if (vt.dim(0) != m.slice_count)
        throw std::runtime_error("dataset: unexpected slice count for " + e.id);
    ps.volume = Volume::from_tensor(vt, "generated");
    return ps;
}

void split_dataset(DatasetManifest& m, double train_fraction, std::uint64_t seed) {
    int n = static_cast<int>(m.samples.size());
    if (n < 2) throw std::invalid_argument("split: need at least 2 samples");
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    RngHandle rng(seed);
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_int(0, i));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    int n_train = static_cast<int>(std::llround(train_fraction * n));
    n_train = std::max(1, std::min(n - 1, n_train));
    for (int i = 0; i < n; ++i)
        m.samples[static_cast<size_t>(idx[static_cast<size_t>(i)])].split =
            i < n_train ? "train" : "val";
}

std::vector<int> split_indices(const DatasetManifest& m, const std::string& split) {
    std::vector<int> out;
    for (size_t i = 0; i < m.samples.size(); ++i)
        if (m.samples[i].split == split) out.push_back(static_cast<int>(i));
    return out;
}

}  // namespace xr2vol
