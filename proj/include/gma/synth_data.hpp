#pragma once

#include "gma/avatar.hpp"
#include "gma/splat_renderer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gma {

/// Surface pattern of the reference subject. Text form: terms joined by '+',
/// each one of "regions", "checker(n)" or "stripes(n)"; e.g. "regions+checker(2)".
struct TextureSpec {
    bool regions = false;
    int checker = 0;  ///< cell size in grid steps, 0 = off
    int stripes = 0;  ///< band height in rings, 0 = off

    static TextureSpec parse(const std::string& text);
    std::string to_string() const;
    bool operator==(const TextureSpec&) const = default;
};

inline constexpr const char* kStandardTexture = "regions+checker(2)";

/// Ground-truth avatar on the procedural topology. Its decoders pass the
/// features straight through, so it renders `face_colors` and `face_offsets`
/// up to float rounding of the stored features.
struct ReferenceScene {
    AvatarCheckpoint avatar;
    TextureSpec texture;
    std::uint64_t seed = 0;
    std::vector<Vec3> face_colors;
    std::vector<double> face_offsets;
};

ReferenceScene generate_subject(const BodyConfig& body, const std::string& texture, std::uint64_t seed,
                                const CoreConstants& constants = {});

/// Cameras on a horizontal circle around the body, looking at `target_height`.
struct OrbitSpec {
    double radius = 3.0;
    double eye_height = 1.1;
    double target_height = 0.92;
    double focal_factor = 1.3;  ///< focal length in units of the image width
};

/// Sinusoidal walk-like motion; every amplitude is in radians except `expression`.
struct MotionSpec {
    double arm_swing = 0.5;
    double leg_swing = 0.3;
    double head_turn = 0.3;
    double expression = 0.8;
    double cycles = 2.0;  ///< full swings over the sequence
};

Camera orbit_camera(const OrbitSpec& orbit, int frame, int n_frames, int width, int height);
BodyParams motion_params(const SkinnedBody& body, const BodyParams& canonical, const MotionSpec& motion, int frame,
                         int n_frames);

struct DatasetFrame {
    std::string rgb_path;   ///< relative to the dataset root
    std::string mask_path;
    BodyParams params;
    Camera camera;
    std::vector<double> rgb;   ///< H x W x 3 in [0, 1]
    std::vector<double> mask;  ///< H x W, 0 or 1
};

struct Dataset {
    std::filesystem::path root;
    int width = 0, height = 0;
    std::uint64_t seed = 0;
    BodyConfig body_config;
    Vec3 background = Vec3::Ones();
    std::vector<DatasetFrame> frames;
    std::vector<int> train, holdout;
};

/// Every 8th frame (7, 15, ...) is held out.
void split_frames(Dataset& data);

inline constexpr int kManifestVersion = 1;

/// Renders frame t with camera azimuth 2 pi t / n_frames and the motion pose,
/// writing rgb_XXXX.png, mask_XXXX.png and manifest.json into `out`.
Dataset render_dataset(const ReferenceScene& scene, int n_frames, int width, int height, const OrbitSpec& orbit,
                       const MotionSpec& motion, const std::filesystem::path& out,
                       const Vec3& background = Vec3::Ones(), int threads = 1);

/// Throws LoadError naming the missing or inconsistent file.
Dataset load_dataset(const std::filesystem::path& root);

}  // namespace gma
