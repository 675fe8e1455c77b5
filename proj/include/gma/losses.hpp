#pragma once

#include "gma/body_model.hpp"
#include "gma/splat_renderer.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <string>
#include <vector>

namespace gma {

/// Weights of the geometry and picture objectives.
struct LossWeights {
    double lap = 0, edge = 0, normal = 0;
    double l1 = 0, ssim = 0, mask = 0, percep = 0;

    /// Geometry-heavy first stage.
    static LossWeights stage1();
    /// Texture refinement stage; the perceptual proxy stays off by default.
    static LossWeights stage2();

    void validate() const;
    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
    bool operator==(const LossWeights&) const = default;
};

/// Scalar loss plus its gradient w.r.t. the first image argument.
struct ImageLoss {
    double value = 0;
    std::vector<double> grad;
};

struct VertexLoss {
    double value = 0;
    std::vector<Vec3> grad;
};

ImageLoss l1_loss(std::span<const double> pred, std::span<const double> target);

/// 1 - mean SSIM over the valid 11x11 Gaussian-window positions of an
/// interleaved H x W x C image.
ImageLoss ssim_loss(std::span<const double> pred, std::span<const double> target, int width, int height,
                    int channels);

/// Mean SSIM (no gradient), used for evaluation.
double ssim(std::span<const double> a, std::span<const double> b, int width, int height, int channels);

ImageLoss mask_loss(std::span<const double> alpha, std::span<const double> mask);

/// Sum over vertices of |V_i - mean(1-ring)|^2 (uniform weights).
VertexLoss laplacian_loss(std::span<const Vec3> vertices, std::span<const Face> faces);

/// Mean over unique edges of ((l_morph - l_base) / l_base)^2; gradient w.r.t. morphed vertices.
VertexLoss edge_loss(std::span<const Vec3> morphed, std::span<const Vec3> base, std::span<const Face> faces);

struct NormalLoss {
    double value = 0;
    std::vector<double> grad_normal;  ///< H x W x 3
    std::vector<double> grad_depth;   ///< H x W
};

/// Mean over valid pixels of 1 - normalize(n_blend) . n_depth, where a pixel
/// is valid if alpha >= 0.5 and its depth normal is defined.
NormalLoss normal_loss(const RenderOutput& render, const Camera& cam);

/// Multi-scale image-gradient L1; a stand-in for a learned perceptual metric.
ImageLoss gradient_proxy_loss(std::span<const double> pred, std::span<const double> target, int width, int height,
                              int channels, int levels = 3);

struct TotalLoss {
    double value = 0;
    std::map<std::string, double> terms;  ///< unweighted component values
    RenderGrads render_grads;
    std::vector<Vec3> grad_morphed;       ///< w.r.t. morphed vertices
};

/// Weighted sum of all objectives. The Laplacian acts on the displacement
/// field morphed - base, so an unmorphed mesh has zero Laplacian loss.
TotalLoss total_loss(const RenderOutput& render, const Camera& cam, std::span<const double> target_rgb,
                     std::span<const double> target_mask, std::span<const Vec3> morphed, std::span<const Vec3> base,
                     std::span<const Face> faces, const LossWeights& w);

}  // namespace gma
