#pragma once

#include "gma/avatar.hpp"
#include "gma/losses.hpp"
#include "gma/synth_data.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace gma {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool operator==(const AdamConfig&) const = default;
};

/// One named block of parameters sharing a learning rate. With `quaternion`
/// set, the block holds consecutive (w, x, y, z) groups renormalized after
/// each update.
struct ParamGroup {
    std::string name;
    std::span<double> values;
    std::span<const double> grads;
    double lr = 0;
    bool quaternion = false;
};

struct AdamState {
    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> moments;
    long step = 0;
};

/// Bias-corrected Adam over all groups. Throws NumericError naming the group
/// and step when a gradient is not finite; nothing is updated in that case.
void adam_step(std::span<const ParamGroup> groups, AdamState& state, const AdamConfig& cfg = {});

enum class StageKind { Stage1, Stage2, OneStage };

struct FitConfig {
    int stage1_steps = 2000;
    int stage2_steps = 2000;
    bool one_stage = false;  ///< ablation: stage2_steps + stage1_steps of the stage-2 objective, nothing frozen
    OffsetMode offset_mode = OffsetMode::Normal;
    LossWeights stage1_weights = LossWeights::stage1();
    LossWeights stage2_weights = LossWeights::stage2();
    double lr_features = 5e-3;
    double lr_mlp = 1e-3;
    AdamConfig adam;
    std::uint64_t seed = 0;
    int batch = 1;        ///< frames per step
    int threads = 1;      ///< rasterizer threads; results do not depend on it
    int log_every = 50;   ///< NDJSON record interval, 0 = off
    int checkpoint_every = 0;
    std::string checkpoint_path;  ///< written every `checkpoint_every` steps when set

    void validate() const;
    nlohmann::json to_json() const;
    static FitConfig from_json(const nlohmann::json& j);
    bool operator==(const FitConfig&) const = default;
};

/// Per-step total losses of one stage and how often the divergence guard fired.
struct StageHistory {
    StageKind kind = StageKind::Stage1;
    std::vector<double> loss;
    std::vector<double> l1;
    int lr_halvings = 0;
};

struct FitHistory {
    std::vector<StageHistory> stages;
};

/// Hooks for progress output and periodic checkpoints.
struct FitObserver {
    std::ostream* log = nullptr;  ///< NDJSON {step, stage, loss, terms, wall_ms}
    std::function<void(const AvatarCheckpoint&, StageKind, int)> checkpoint;
};

/// Runs one stage of `steps` steps on the dataset's training frames.
StageHistory run_stage(AvatarCheckpoint& ckpt, const Dataset& data, const FitConfig& cfg, StageKind kind, int steps,
                       const FitObserver& obs = {});

/// Geometry-heavy stage: coarse surfels only, every parameter trained.
StageHistory run_stage1(AvatarCheckpoint& ckpt, const Dataset& data, const FitConfig& cfg,
                        const FitObserver& obs = {});
/// Texture stage: coarse plus fine surfels, F_coarse and f_geo frozen (checked
/// byte-for-byte afterwards).
StageHistory run_stage2(AvatarCheckpoint& ckpt, const Dataset& data, const FitConfig& cfg,
                        const FitObserver& obs = {});

/// Starting point of a fit: random features and decoders from `cfg.seed`,
/// canonical shape taken from the first frame.
AvatarCheckpoint initial_avatar(const Dataset& data, const FitConfig& cfg, const CoreConstants& constants = {});

/// Initializes from `cfg.seed` and runs both stages (or the one-stage
/// ablation). The result is rounded to float precision.
AvatarCheckpoint fit_avatar(const Dataset& data, const FitConfig& cfg, FitHistory* history = nullptr,
                            const FitObserver& obs = {}, const CoreConstants& constants = {});

struct FrameMetrics {
    int frame = 0;
    double psnr = 0;
    double ssim = 0;
    double mask_iou = 0;
};

struct EvalReport {
    std::vector<FrameMetrics> per_frame;
    double mean_psnr = 0, mean_ssim = 0, mean_iou = 0;
    nlohmann::json to_json() const;
};

inline constexpr double kPsnrCap = 60.0;

/// PSNR of 8-bit images over the union of both masks, capped at kPsnrCap.
double masked_psnr(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target,
                   std::span<const std::uint8_t> pred_mask, std::span<const std::uint8_t> target_mask);

/// Renders the avatar (coarse plus fine surfels) for one pose and camera and
/// quantizes it: rgb H x W x 3 and mask (alpha >= 0.5) H x W, both 8-bit.
struct FrameImage {
    std::vector<std::uint8_t> rgb, mask;
};
FrameImage render_frame(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                        const BodyParams& params, const Camera& cam, const Vec3& background, int threads = 1);

/// Metrics on the given frames (typically `data.holdout`). Throws UsageError when empty.
EvalReport evaluate(const AvatarCheckpoint& ckpt, const Dataset& data, std::span<const int> frames,
                    int threads = 1);

std::string to_string(StageKind k);

}  // namespace gma
