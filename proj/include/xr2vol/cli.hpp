#ifndef XR2VOL_CLI_HPP
#define XR2VOL_CLI_HPP

#include <string>
#include <vector>

#include "xr2vol/config.hpp"

namespace xr2vol {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;    // bad arguments or missing inputs
inline constexpr int kExitNumeric = 3;  // non-finite loss or divergence

// Command bodies, callable in-process. Each validates the config, performs
// the work, writes the resolved config next to its outputs, and returns an
// exit code instead of throwing.
int cmd_gen_data(const RunConfig& cfg);
int cmd_train_ae(const RunConfig& cfg, bool resume);
int cmd_train_diff(const RunConfig& cfg, bool resume);
// xray_path empty: condition on dataset sample `sample_index`.
int cmd_infer(const RunConfig& cfg, const std::string& xray_path, int sample_index);
int cmd_eval(const RunConfig& cfg, const std::string& pred_path, const std::string& gt_path);
int cmd_interp_study(const RunConfig& cfg, const std::vector<int>& step_counts,
                     int sample_index);

// Full argument parser + dispatch. Resolution order: preset, then --config
// file, then individual flags; XR2VOL_OUT overrides the output root unless
// --out is given.
int run_cli(int argc, char** argv);

}  // namespace xr2vol

#endif
