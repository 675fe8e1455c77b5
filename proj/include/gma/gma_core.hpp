#pragma once

#include "gma/body_model.hpp"
#include "gma/geometry.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace gma {

/// Sizes and clamp bounds shared by the embedding and the decoders.
struct CoreConstants {
    int k = 16;         ///< feature dimension
    int n_freq = 4;     ///< positional-encoding frequencies
    int n_k = 6;        ///< fine surfels per face
    double max_offset = 0.15;      ///< meters, coarse normal offset bound
    double max_d = 0.05;           ///< meters, fine normal offset bound
    double max_scale = 0.2;        ///< meters, surfel extent bound
    double max_scale_factor = 3.0; ///< upper clamp of the decoded fine scale factor

    int encoding_dim() const { return 6 * n_freq; }
    int input_dim() const { return k + encoding_dim(); }

    void validate() const;
    nlohmann::json to_json() const;
    static CoreConstants from_json(const nlohmann::json& j);
    bool operator==(const CoreConstants&) const = default;
};

/// Per-face geometry and texture features; row i belongs to face i.
struct FeatureLayer {
    Eigen::MatrixXd geo;
    Eigen::MatrixXd tex;

    int k() const { return static_cast<int>(geo.cols()); }
    std::size_t num_faces() const { return static_cast<std::size_t>(geo.rows()); }
};

/// Oriented 2D Gaussian disk. Opacity is always one.
struct Surfel {
    Vec3 position = Vec3::Zero();
    Vec2 scale = Vec2::Ones();
    Quat rotation = Quat(1, 0, 0, 0);
    Vec3 color = Vec3::Zero();
    int face = -1;  ///< owning face, reported by the ID pass
};

using SurfelSet = std::vector<Surfel>;

/// Barycentric (u, v) on a face plus signed offset d along the face normal.
struct UvdCoord {
    double u = 1.0 / 3.0;
    double v = 1.0 / 3.0;
    double d = 0.0;
};

/// Base mesh displaced per vertex: V' = V + displacement.
struct MorphedMesh {
    MeshState base;
    std::vector<double> scales;       ///< normal-offset scales (empty in free-offset mode)
    std::vector<Vec3> displacement;   ///< V' - V
    std::vector<Vec3> vertices;       ///< V'
};

FeatureLayer init_feature_layer(std::size_t n_faces, int k, std::uint64_t seed);

/// Faces incident to each vertex. Throws TopologyError for isolated vertices.
std::vector<std::vector<int>> vertex_face_incidence(std::span<const Face> faces, std::size_t n_vertices);

/// Mean of incident face offsets per vertex, clamped to +-max_offset.
std::vector<double> face_offsets_to_vertex_scales(std::span<const double> face_offsets, std::span<const Face> faces,
                                                  std::size_t n_vertices, double max_offset = 0.15);

/// V'_k = V_k + scale_k * N_k.
MorphedMesh morph_mesh(const MeshState& base, std::vector<double> scales);

/// Free-offset variant: each face carries a 3D offset in its local frame
/// (tangent, bitangent, normal) of the base mesh; vertices move by the mean
/// of their incident faces' world-space offsets.
MorphedMesh morph_mesh_free(const MeshState& base, std::span<const Face> faces, std::span<const Vec3> local_offsets);

/// One surfel per face at the morphed face center with the face's frame.
/// `colors` holds one color per face (may be empty for black).
SurfelSet embed_coarse(const MorphedMesh& morphed, std::span<const Face> faces, std::span<const Vec3> colors = {});

/// Fine surfels of one face from uvd coordinates. `scales2d` are factors
/// relative to the face's area scale.
SurfelSet embed_fine(const MorphedMesh& morphed, std::span<const Face> faces, std::size_t face_index,
                     std::span<const UvdCoord> coords, std::span<const Vec2> scales2d, std::span<const Vec3> colors,
                     double max_scale = 0.2);

/// Position of a uvd coordinate on a triangle with unit normal n.
inline Vec3 uvd_position(const Vec3& v1, const Vec3& v2, const Vec3& v3, const Vec3& n, const UvdCoord& c) {
    return c.u * v1 + c.v * v2 + (1.0 - c.u - c.v) * v3 + n * c.d;
}

/// Sinusoidal encoding; layout per frequency l: sin(2^l pi p) for x,y,z then cos.
std::vector<double> encode_position(const Vec3& p, int n_freq);

}  // namespace gma
