#pragma once

#include "gma/geometry.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gma {

/// Resolution and basis sizes of the procedural body.
struct BodyConfig {
    int segments = 12;   ///< vertices around each body part
    int rings = 10;      ///< interior rings along each body part
    int shape_dims = 4;  ///< B, at least 3
    int expr_dims = 2;   ///< E, at least 1
    int joints = 11;     ///< J, between 5 and kMaxJoints

    static constexpr int kMaxJoints = 11;

    std::size_t face_count() const { return static_cast<std::size_t>(6 * 2 * segments * rings); }
    std::size_t vertex_count() const { return static_cast<std::size_t>(6 * (segments * rings + 2)); }

    void validate() const;
    nlohmann::json to_json() const;
    static BodyConfig from_json(const nlohmann::json& j);
    bool operator==(const BodyConfig&) const = default;
};

/// Shape (beta), per-joint axis-angle pose (theta) and expression (psi).
struct BodyParams {
    std::vector<double> beta;
    std::vector<Vec3> theta;
    std::vector<double> psi;

    nlohmann::json to_json() const;
    static BodyParams from_json(const nlohmann::json& j);
    bool operator==(const BodyParams&) const = default;
};

enum class BodyPart : int { Torso = 0, Head = 1, LeftArm = 2, RightArm = 3, LeftLeg = 4, RightLeg = 5 };
inline constexpr int kBodyPartCount = 6;

struct Joint {
    Vec3 rest;
    int parent = -1;
};

/// Template mesh, blendshapes, skeleton and skinning weights.
struct SkinnedBody {
    BodyConfig config;
    std::vector<Vec3> template_vertices;
    std::vector<Face> faces;
    std::vector<std::vector<Vec3>> shape_basis;        // B x N_v
    std::vector<std::vector<Vec3>> expr_basis;         // E x N_v, head only
    std::vector<std::vector<Vec3>> joint_shape_basis;  // B x J
    std::vector<Joint> joints;
    Eigen::MatrixXd skin_weights;  // N_v x J, rows sum to one

    std::vector<BodyPart> face_part;
    /// (band, segment) of each face on its part's ring grid; band 0 and
    /// band `rings` are the pole fans.
    std::vector<std::array<int, 2>> face_grid;
    std::vector<BodyPart> vertex_part;

    std::size_t num_vertices() const { return template_vertices.size(); }
    std::size_t num_faces() const { return faces.size(); }
    std::size_t num_joints() const { return joints.size(); }

    BodyParams zero_params() const;
    void check_params(const BodyParams& params) const;
};

/// Posed vertices plus unit vertex normals.
struct MeshState {
    std::vector<Vec3> vertices;
    std::vector<Vec3> normals;
};

/// Local frame of one triangle: columns (tangent, bitangent, normal).
struct FaceFrame {
    Vec3 center;
    Vec3 normal;
    Vec3 tangent;
    Vec3 bitangent;
    Quat rotation;       // canonical sign, w >= 0
    double area_scale;   // sqrt(triangle area)

    Mat3 axes() const {
        Mat3 m;
        m.col(0) = tangent;
        m.col(1) = bitangent;
        m.col(2) = normal;
        return m;
    }
};

SkinnedBody build_procedural_body(const BodyConfig& config);

/// Blendshapes followed by linear blend skinning.
MeshState pose_mesh(const SkinnedBody& body, const BodyParams& params);

/// Blendshaped rest-pose vertices (no skinning).
std::vector<Vec3> shaped_vertices(const SkinnedBody& body, const BodyParams& params);

/// Area-weighted vertex normals. Vertices without incident faces get a zero normal.
std::vector<Vec3> vertex_normals(std::span<const Vec3> vertices, std::span<const Face> faces);

FaceFrame face_frame(const Vec3& v1, const Vec3& v2, const Vec3& v3, std::size_t face_index = 0);

std::vector<FaceFrame> face_frames(std::span<const Vec3> vertices, std::span<const Face> faces);

/// Accumulates vertex gradients for one face given gradients on its frame.
/// `grad_vertices` receives contributions for v1, v2, v3.
void face_frame_backward(const Vec3& v1, const Vec3& v2, const Vec3& v3, const Vec3& grad_center,
                         const Vec3& grad_normal, const Vec3& grad_tangent, const Vec3& grad_bitangent,
                         double grad_area_scale, std::array<Vec3, 3>& grad_vertices);

/// Undirected edges (i < j), sorted.
std::vector<std::array<int, 2>> unique_edges(std::span<const Face> faces);

/// True when every undirected edge is shared by exactly two faces.
bool is_closed_manifold(std::span<const Face> faces);

void write_obj(const std::filesystem::path& path, std::span<const Vec3> vertices,
               std::span<const Vec3> normals, std::span<const Face> faces);

}  // namespace gma
