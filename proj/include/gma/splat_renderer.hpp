#pragma once

#include "gma/gma_core.hpp"
#include "gma/geometry.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace gma {

/// Pinhole camera, world -> camera is x_c = R x + t. Camera looks along +z,
/// image x to the right and y down. Pixel (i, j) samples at (i + 0.5, j + 0.5).
struct Camera {
    double fx = 100, fy = 100, cx = 64, cy = 64;
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();
    int width = 128, height = 128;

    void validate() const;
    Vec3 center() const { return -R.transpose() * t; }

    nlohmann::json to_json() const;
    /// Accepts {fx,fy,cx,cy,R(9, row-major),t(3)} plus optional width/height.
    static Camera from_json(const nlohmann::json& j, int default_width = 0, int default_height = 0);

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height);
};

/// Flat row-major images; multi-channel images interleave channels.
struct RenderOutput {
    int width = 0, height = 0;
    std::vector<double> color;   // H x W x 3
    std::vector<double> alpha;   // H x W
    std::vector<double> depth;   // H x W, alpha-normalized expected depth
    std::vector<double> normal;  // H x W x 3, camera space, alpha-blended
    std::vector<int> id;         // H x W, face id or -1
    std::size_t skipped_singular = 0;
};

struct RasterSettings {
    double alpha_floor = 1.0 / 255.0;      ///< contributions below are dropped
    double transmittance_floor = 1e-4;     ///< compositing stops once T falls below
    double near = 0.01;                    ///< meters
    double lowpass = 0.3;                  ///< pixel^2 added to projected covariances
    double max_condition = 1e8;
    int tile = 16;
    int threads = 1;
};

struct SurfelProjection {
    Vec2 mean;
    Mat2 cov;    ///< J R Sigma_plane R^T J^T (without low-pass)
    double depth;
};

/// Returns nullopt when the surfel is behind the near plane.
std::optional<SurfelProjection> project_surfel(const Surfel& s, const Camera& cam, double near = 0.01);

/// Everything the backward pass needs from one forward pass.
struct RenderRecord {
    struct Projected {
        bool active = false;
        Vec3 p_cam;
        Vec2 mean;
        Mat2 M;          ///< J * [s1 R t, s2 R b]
        Eigen::Matrix<double, 2, 3> J;
        Eigen::Matrix<double, 3, 2> B;  ///< [s1 Rc t, s2 Rc b]
        Mat3 axes;       ///< world (t, b, n)
        double conic_a, conic_b, conic_c;
        double radius;
        double flip;     ///< +1 / -1 so the camera-space normal faces the camera
        Vec3 n_cam;
    };

    Camera camera;
    Vec3 background;
    RasterSettings settings;
    std::size_t surfel_count = 0;
    std::uint64_t fingerprint = 0;
    std::vector<Projected> proj;
    std::vector<Vec3> colors;
    std::vector<Quat> rotations;
    std::vector<Vec2> scales;
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<int>> tile_lists;  ///< depth-sorted surfel indices per tile
    std::vector<int> pixel_end;                ///< per pixel: end position in its tile list
    std::vector<double> transmittance;         ///< per pixel final T
    std::vector<double> depth_sum;             ///< per pixel un-normalized depth
    std::size_t active_pairs = 0;              ///< contributing (pixel, surfel) pairs
};

/// Depth-sorted front-to-back compositing of opacity-1 surfels.
RenderOutput rasterize(const SurfelSet& surfels, const Camera& cam, const Vec3& background,
                       const RasterSettings& settings = {}, RenderRecord* record = nullptr);

/// Reference per-pixel loop without tiling; used to validate the tiled path.
RenderOutput rasterize_naive(const SurfelSet& surfels, const Camera& cam, const Vec3& background,
                             const RasterSettings& settings = {});

/// Upstream image gradients; empty vectors mean zero.
struct RenderGrads {
    std::vector<double> color, alpha, depth, normal;
};

struct SurfelGrads {
    std::vector<Vec3> position;
    std::vector<Vec2> scale;
    std::vector<Quat> rotation;  ///< w.r.t. the raw quaternion (tangent to the unit sphere)
    std::vector<Mat3> axes;      ///< w.r.t. the world frame columns (t, b, n)
    std::vector<Vec3> color;
};

SurfelGrads rasterize_backward(const RenderRecord& record, const RenderGrads& grads);

/// Same, verifying the record was produced from `surfels`.
SurfelGrads rasterize_backward(const RenderRecord& record, const SurfelSet& surfels, const RenderGrads& grads);

std::uint64_t surfel_fingerprint(const SurfelSet& surfels);

/// Camera-space normals from back-projected depth via central differences.
/// Zero where the pixel or a neighbor has alpha < 0.5, and on the border.
std::vector<double> depth_to_normal(const std::vector<double>& depth, const std::vector<double>& alpha,
                                    const Camera& cam);

/// Adds the depth gradient of sum(grad_normal . depth_to_normal(depth)).
void depth_to_normal_backward(const std::vector<double>& depth, const std::vector<double>& alpha, const Camera& cam,
                              const std::vector<double>& grad_normal, std::vector<double>& grad_depth);

}  // namespace gma
