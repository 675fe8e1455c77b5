#pragma once

#include "gma/body_model.hpp"
#include "gma/decoders.hpp"
#include "gma/gma_core.hpp"
#include "gma/splat_renderer.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace gma {

/// How F_coarse moves the mesh: one scalar along the vertex normal, or a
/// free 3D offset per face (ablation).
enum class OffsetMode { Normal, Free };

std::string to_string(OffsetMode m);
OffsetMode offset_mode_from_string(const std::string& s);

struct FitMetadata {
    int stage1_steps = 0;
    int stage2_steps = 0;
    bool one_stage = false;
    std::uint64_t seed = 0;
    std::vector<double> loss_tail;  ///< last recorded total losses

    nlohmann::json to_json() const;
    static FitMetadata from_json(const nlohmann::json& j);
    bool operator==(const FitMetadata&) const = default;
};

/// Everything needed to decode and render one avatar.
struct AvatarCheckpoint {
    BodyConfig body_config;
    BodyParams canonical;
    CoreConstants constants;
    OffsetMode offset_mode = OffsetMode::Normal;
    FeatureLayer features;
    DecoderSet decoders;
    FitMetadata meta;

    std::size_t num_faces() const { return features.num_faces(); }
    /// Throws ShapeError when feature rows or decoder dims disagree with the config.
    void validate() const;
    bool operator==(const AvatarCheckpoint& o) const;
};

AvatarCheckpoint init_avatar(const BodyConfig& body, const CoreConstants& constants, OffsetMode mode,
                             std::uint64_t seed);

/// Rounds every learnable value to float precision so a save/load round
/// trip is exact.
void quantize_to_float(AvatarCheckpoint& ckpt);

/// Body model plus per-face data that never changes during a fit.
struct BodyContext {
    SkinnedBody body;
    CoreConstants constants;
    Eigen::MatrixXd encoded;                     ///< encoding_dim x N_f, template face centers
    std::vector<std::vector<int>> incidence;     ///< faces around each vertex
};

std::shared_ptr<const BodyContext> make_body_context(const BodyConfig& body, const CoreConstants& constants);

/// Which decoders a forward pass evaluates.
struct DecodeRequest {
    bool coarse = true;
    bool fine = true;   ///< F_fine and T_scale
    bool color = true;
};

/// Pose-independent per-face decoder outputs plus their tapes.
struct DecodedAvatar {
    Eigen::MatrixXd raw_coarse, raw_fine, raw_color, raw_scale;  ///< out x N_f
    GradTape tape_coarse, tape_fine, tape_color, tape_scale;
    std::vector<double> face_offsets;                  ///< normal mode
    std::vector<Vec3> local_offsets;                   ///< free mode
    std::vector<std::vector<UvdCoord>> coords;         ///< N_f x n_k
    std::vector<std::vector<Vec3>> colors;             ///< N_f x n_k
    std::vector<std::vector<Vec2>> scale_factors;      ///< N_f x n_k
    std::vector<Vec3> coarse_colors;                   ///< N_f
};

DecodedAvatar decode_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodeRequest& req = {});

/// Applies the decoded offsets to a posed base mesh.
MorphedMesh morph_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                         const MeshState& posed);

/// Coarse surfels (one per face) followed by fine surfels (n_k per face, face-major).
SurfelSet assemble_surfels(const BodyContext& ctx, const DecodedAvatar& dec, const MorphedMesh& morphed, bool coarse,
                           bool fine);

/// Posed base, morphed mesh and surfels for one set of body parameters.
struct PosedAvatar {
    MeshState posed;
    MorphedMesh morphed;
    SurfelSet surfels;
};

PosedAvatar pose_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                        const BodyParams& params, bool coarse = true, bool fine = true);

/// Parameter gradients of an avatar; same shapes as the checkpoint.
struct AvatarGrads {
    Eigen::MatrixXd geo, tex;
    DecoderGrads decoders;

    static AvatarGrads zeros_like(const AvatarCheckpoint& ckpt);
    void set_zero();
};

/// Which parts of the chain receive gradients.
struct BackwardRequest {
    bool geometry = true;  ///< morph path into F_coarse and f_geo
    bool fine = true;      ///< F_fine and T_scale
    bool color = true;     ///< T_color and f_tex
};

/// Backpropagates surfel gradients (from rasterize_backward on the surfels of
/// `assemble_surfels(..., coarse, fine)`) plus extra morphed-vertex gradients
/// into `out` (accumulating).
void backward_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                     const MorphedMesh& morphed, bool coarse, bool fine, const SurfelGrads& surfel_grads,
                     const std::vector<Vec3>& grad_morphed, const BackwardRequest& req, AvatarGrads& out);

}  // namespace gma
