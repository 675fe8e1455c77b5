#pragma once

#include "gma/avatar.hpp"
#include "gma/image_io.hpp"
#include "gma/splat_renderer.hpp"
#include "gma/trainer.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace gma {

/// Sorted unique face indices.
struct FaceRegion {
    std::vector<int> faces;

    static FaceRegion from(std::vector<int> faces);
    static FaceRegion all(std::size_t n_faces);
    /// Throws UsageError when empty and IndexError when an index is >= n_faces.
    void check(std::size_t n_faces) const;
    std::size_t size() const { return faces.size(); }
};

enum class TransferMode { Geo, Tex, Both };
std::string to_string(TransferMode m);
TransferMode transfer_mode_from_string(const std::string& s);

/// Copies feature rows region_src[i] of `src` into rows region_dst[i] of
/// `dst`. The regions pair up by position, so they are taken as given (not
/// re-sorted). Throws CorrespondenceError on a size mismatch and
/// CompatibilityError when k or the decoder architecture differ.
AvatarCheckpoint transfer_features(const AvatarCheckpoint& src, const AvatarCheckpoint& dst,
                                   const std::vector<int>& region_src, const std::vector<int>& region_dst,
                                   TransferMode mode);

struct InvertConfig {
    int max_steps = 2000;
    double tolerance = 0.01;  ///< stop once every face channel is this close to its target
    double lr = 0.05;
    AdamConfig adam;
    double warn_linf = 0.05;  ///< residuals above this mark the result unconverged
};

struct InvertResult {
    AvatarCheckpoint avatar;
    int steps = 0;
    double mse = 0;
    double max_error = 0;           ///< L-inf over faces and channels
    std::vector<Vec3> residuals;    ///< achieved minus target, per region face
    bool converged = true;          ///< false means max_error > warn_linf; a warning, not a failure
};

/// Mean decoded fine color of each face in `faces`.
std::vector<Vec3> face_mean_colors(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const std::vector<int>& faces);

/// Fits the f_tex rows of `region` so the mean decoded fine color of each face
/// matches `targets` (one per region face, in region order). T_color and every
/// other row stay fixed.
InvertResult invert_color(const AvatarCheckpoint& ckpt, const FaceRegion& region, const std::vector<Vec3>& targets,
                          const InvertConfig& cfg = {});

struct StampResult {
    InvertResult inversion;
    std::vector<int> applied;      ///< faces that received a target
    std::vector<Vec3> targets;     ///< per applied face
    std::vector<int> back_facing;
    std::vector<int> outside;      ///< no fine surfel projects into the image
    std::vector<std::string> notices;
};

/// Projects each region face's fine surfels (posed with `params`) into the
/// image through `cam`, averages bilinear samples into a target color and
/// inverts those targets. Back-facing and out-of-image faces are skipped.
StampResult stamp_texture(const AvatarCheckpoint& ckpt, const Image8& image, const Camera& cam,
                          const FaceRegion& region, const BodyParams& params, const InvertConfig& cfg = {});

/// Re-poses the avatar: decoded offsets, coords, colors and scales are reused,
/// only the body changes.
PosedAvatar apply_body_params(const AvatarCheckpoint& ckpt, const BodyParams& params);

/// {"kind": "transfer|paint|stamp|shape|pose|expression", "region": [ints], "payload": {...}}
///
/// transfer   payload {source_base64 | source_path, source_region?, mode}
/// paint      payload {color: [r,g,b]} or {colors: [[r,g,b], ...]}
/// stamp      payload {image_base64 | image_path, camera, params?}
/// shape      payload {beta}; pose {theta}; expression {psi}; any with "delta": true adds
struct EditCommand {
    std::string kind;
    std::vector<int> region;
    nlohmann::json payload = nlohmann::json::object();

    /// Throws ConfigError naming the bad field.
    static EditCommand from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct EditOutcome {
    AvatarCheckpoint avatar;
    std::vector<int> changed_faces;
    std::vector<std::string> notices;
    nlohmann::json report = nlohmann::json::object();
};

/// Applies a command. Shape, pose and expression commands write the
/// checkpoint's canonical parameters.
EditOutcome apply_edit(const AvatarCheckpoint& ckpt, const EditCommand& cmd, const InvertConfig& cfg = {});

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace gma
