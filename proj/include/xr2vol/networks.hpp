#ifndef XR2VOL_NETWORKS_HPP
#define XR2VOL_NETWORKS_HPP

#include <string>
#include <utility>
#include <vector>

#include "xr2vol/autograd.hpp"
#include "xr2vol/guidance.hpp"
#include "xr2vol/nn.hpp"
#include "xr2vol/rng.hpp"
#include "xr2vol/tensor.hpp"

namespace xr2vol {

struct AutoencoderConfig {
    int io_channels = 1;  // 1 at desk scale, 3 to honor channel triplication
    int input_resolution = 64;
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int res_blocks_per_stage = 1;
    int latent_channels = 4;
    double kl_weight = 1e-6;

    int stages() const { return static_cast<int>(channel_multipliers.size()); }
    int latent_resolution() const { return input_resolution >> (stages() - 1); }
    void validate() const;
};

struct CondEncoderConfig {
    int io_channels = 1;
    int input_resolution = 64;
    int base_channels = 16;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int res_blocks_per_stage = 1;
    int latent_channels = 4;
    int context_dim = 64;

    int stages() const { return static_cast<int>(channel_multipliers.size()); }
    int latent_resolution() const { return input_resolution >> (stages() - 1); }
    void validate() const;
};

struct UNetConfig {
    int in_channels = 8;  // z_t plus condition latent, concatenated
    int out_channels = 4;
    int base_channels = 64;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int res_blocks_per_stage = 1;
    std::vector<int> attention_factors = {4};  // downsampling factors below latent res
    int attention_heads = 1;
    int context_dim = 64;
    int latent_resolution = 16;

    int stages() const { return static_cast<int>(channel_multipliers.size()); }
    int emb_dim() const { return 4 * base_channels; }
    bool attention_at(int stage) const;
    void validate() const;
};

struct ClassifierConfig {
    int io_channels = 1;
    int input_resolution = 64;
    int base_channels = 8;
    bool bypass = true;        // true: grade label becomes a smoothed one-hot
    double smoothing = 0.1;
};

struct GaussianPosterior {
    Tensor mean;    // {latent_channels, lr, lr}
    Tensor logvar;  // same shape, clamped to [-30, 20]
};

// Largest of {8,4,2,1} dividing c; keeps GroupNorm valid for any toy width.
int norm_groups(int c);

// ---- parameter registration (one prefix per submodel) ----
void register_autoencoder(ParamStore& store, const AutoencoderConfig& cfg, RngHandle& rng);
void register_cond_encoder(ParamStore& store, const CondEncoderConfig& cfg, RngHandle& rng);
void register_unet(ParamStore& store, const UNetConfig& cfg, RngHandle& rng);
void register_classifier(ParamStore& store, const ClassifierConfig& cfg, RngHandle& rng);

std::vector<std::string> params_with_prefix(const ParamStore& store, const std::string& prefix);

// ---- tape forward passes ----
// Encoder output is mean/logvar stacked on the channel axis; helpers below
// split and clamp.
Var ae_encode_tape(Tape& t, TapeParams& tp, Var x, const AutoencoderConfig& cfg);
std::pair<Var, Var> split_posterior_tape(Tape& t, Var enc_out, int latent_channels);
Var ae_decode_tape(Tape& t, TapeParams& tp, Var z, const AutoencoderConfig& cfg);
std::pair<Var, Var> e2_encode_tape(Tape& t, TapeParams& tp, Var x, const CondEncoderConfig& cfg);
Var unet_tape(Tape& t, TapeParams& tp, Var z_concat, int timestep, int total_steps, double depth,
              Var y_combined, Var context, const UNetConfig& cfg);
Var classifier_tape(Tape& t, TapeParams& tp, Var x, const ClassifierConfig& cfg);

// ---- gradient-free evaluation wrappers ----
GaussianPosterior encode_kl(const Tensor& x, const ParamStore& params,
                            const AutoencoderConfig& cfg);
Tensor sample_posterior(const GaussianPosterior& post, RngHandle& rng);
Tensor decode(const Tensor& z, const ParamStore& params, const AutoencoderConfig& cfg);
std::pair<Tensor, Tensor> encode_condition(const Tensor& x, const ParamStore& params,
                                           const CondEncoderConfig& cfg);
Tensor unet_denoise(const Tensor& z_concat, int timestep, int total_steps, double depth,
                    const Tensor& y_combined, const Tensor& context, const ParamStore& params,
                    const UNetConfig& cfg);
KoaDistribution koa_classify_stub(const Tensor& x, const ParamStore& params,
                                  const ClassifierConfig& cfg, int bypass_grade = -1);

// MSE + kl_weight * mean KL(N(mean, e^logvar) || N(0,1))
double recon_kl_loss(const Tensor& x, const Tensor& x_hat, const GaussianPosterior& post,
                     double kl_weight);

// Sinusoidal embedding of an integer timestep scaled to [0,1] by T.
Tensor embed_timestep(int timestep, int total_steps, int dim);

// ---- the whole model plus training state ----
struct ModelBundle {
    AutoencoderConfig ae;
    CondEncoderConfig e2;
    UNetConfig unet;
    ClassifierConfig cls;
    GuidanceConfig aw;
    ParamStore params;
    EmaState ema;
    bool ae_trained = false;
    bool diff_trained = false;

    // Names of the parameters each training stage updates.
    std::vector<std::string> stage1_names() const;
    std::vector<std::string> stage2_names() const;
};

// Builds and initializes every submodel from the configs.
ModelBundle make_bundle(const AutoencoderConfig& ae, const CondEncoderConfig& e2,
                        const UNetConfig& unet, const ClassifierConfig& cls,
                        const GuidanceConfig& aw, std::uint64_t init_seed);

}  // namespace xr2vol

#endif
