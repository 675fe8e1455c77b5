#include "gma/gma_core.hpp"

#include "gma/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace gma {

void CoreConstants::validate() const {
    if (k <= 0) throw ConfigError("feature dimension k must be positive");
    if (n_freq <= 0) throw ConfigError("n_freq must be positive");
    if (n_k <= 0) throw ConfigError("n_k must be positive");
    if (!(max_offset > 0) || !(max_d >= 0) || !(max_scale > 0) || !(max_scale_factor > 1e-4))
        throw ConfigError("clamp bounds must be positive");
}

nlohmann::json CoreConstants::to_json() const {
    return {{"k", k},
            {"n_freq", n_freq},
            {"n_k", n_k},
            {"max_offset", max_offset},
            {"max_d", max_d},
            {"max_scale", max_scale},
            {"max_scale_factor", max_scale_factor}};
}

CoreConstants CoreConstants::from_json(const nlohmann::json& j) {
    CoreConstants c;
    try {
        c.k = j.at("k").get<int>();
        c.n_freq = j.at("n_freq").get<int>();
        c.n_k = j.at("n_k").get<int>();
        c.max_offset = j.at("max_offset").get<double>();
        c.max_d = j.at("max_d").get<double>();
        c.max_scale = j.at("max_scale").get<double>();
        c.max_scale_factor = j.at("max_scale_factor").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("constants: ") + e.what());
    }
    c.validate();
    return c;
}

FeatureLayer init_feature_layer(std::size_t n_faces, int k, std::uint64_t seed) {
    if (n_faces == 0) throw ParameterError("init_feature_layer: n_faces must be positive");
    if (k <= 0) throw ParameterError("init_feature_layer: k must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.01);
    FeatureLayer layer;
    layer.geo.resize(static_cast<Eigen::Index>(n_faces), k);
    layer.tex.resize(static_cast<Eigen::Index>(n_faces), k);
    // fill row by row so the draw order does not depend on storage order
    for (Eigen::Index i = 0; i < layer.geo.rows(); ++i)
        for (Eigen::Index j = 0; j < k; ++j) layer.geo(i, j) = dist(rng);
    for (Eigen::Index i = 0; i < layer.tex.rows(); ++i)
        for (Eigen::Index j = 0; j < k; ++j) layer.tex(i, j) = dist(rng);
    return layer;
}

std::vector<std::vector<int>> vertex_face_incidence(std::span<const Face> faces, std::size_t n_vertices) {
    std::vector<std::vector<int>> incident(n_vertices);
    for (std::size_t i = 0; i < faces.size(); ++i)
        for (int v : faces[i]) {
            if (v < 0 || static_cast<std::size_t>(v) >= n_vertices)
                throw TopologyError("face " + std::to_string(i) + " references vertex " + std::to_string(v));
            incident[v].push_back(static_cast<int>(i));
        }
    for (std::size_t v = 0; v < n_vertices; ++v)
        if (incident[v].empty()) throw TopologyError("isolated vertex " + std::to_string(v));
    return incident;
}

std::vector<double> face_offsets_to_vertex_scales(std::span<const double> face_offsets, std::span<const Face> faces,
                                                  std::size_t n_vertices, double max_offset) {
    if (face_offsets.size() != faces.size())
        throw ShapeError("face_offsets has " + std::to_string(face_offsets.size()) + " entries for " +
                         std::to_string(faces.size()) + " faces");
    for (double o : face_offsets)
        if (!std::isfinite(o)) throw ParameterError("non-finite face offset");
    const auto incident = vertex_face_incidence(faces, n_vertices);
    std::vector<double> scales(n_vertices, 0.0);
    for (std::size_t v = 0; v < n_vertices; ++v) {
        double sum = 0.0;
        for (int f : incident[v]) sum += face_offsets[f];
        scales[v] = std::clamp(sum / static_cast<double>(incident[v].size()), -max_offset, max_offset);
    }
    return scales;
}

MorphedMesh morph_mesh(const MeshState& base, std::vector<double> scales) {
    if (scales.size() != base.vertices.size())
        throw ShapeError("morph_mesh: " + std::to_string(scales.size()) + " scales for " +
                         std::to_string(base.vertices.size()) + " vertices");
    MorphedMesh m;
    m.base = base;
    m.scales = std::move(scales);
    m.displacement.resize(base.vertices.size());
    m.vertices.resize(base.vertices.size());
    for (std::size_t v = 0; v < base.vertices.size(); ++v) {
        m.displacement[v] = m.scales[v] * base.normals[v];
        m.vertices[v] = base.vertices[v] + m.displacement[v];
    }
    return m;
}

MorphedMesh morph_mesh_free(const MeshState& base, std::span<const Face> faces, std::span<const Vec3> local_offsets) {
    if (local_offsets.size() != faces.size()) throw ShapeError("morph_mesh_free: one offset per face required");
    const auto frames = face_frames(base.vertices, faces);
    const auto incident = vertex_face_incidence(faces, base.vertices.size());
    MorphedMesh m;
    m.base = base;
    m.displacement.assign(base.vertices.size(), Vec3::Zero());
    m.vertices.resize(base.vertices.size());
    for (std::size_t v = 0; v < base.vertices.size(); ++v) {
        Vec3 sum = Vec3::Zero();
        for (int f : incident[v]) sum += frames[f].axes() * local_offsets[f];
        m.displacement[v] = sum / static_cast<double>(incident[v].size());
        m.vertices[v] = base.vertices[v] + m.displacement[v];
    }
    return m;
}

SurfelSet embed_coarse(const MorphedMesh& morphed, std::span<const Face> faces, std::span<const Vec3> colors) {
    if (!colors.empty() && colors.size() != faces.size()) throw ShapeError("embed_coarse: one color per face required");
    SurfelSet out;
    out.reserve(faces.size());
    for (std::size_t i = 0; i < faces.size(); ++i) {
        const auto& f = faces[i];
        const FaceFrame fr = face_frame(morphed.vertices[f[0]], morphed.vertices[f[1]], morphed.vertices[f[2]], i);
        Surfel s;
        s.position = fr.center;
        s.scale = Vec2(fr.area_scale, fr.area_scale);
        s.rotation = fr.rotation;
        s.color = colors.empty() ? Vec3::Zero() : colors[i];
        s.face = static_cast<int>(i);
        out.push_back(s);
    }
    return out;
}

SurfelSet embed_fine(const MorphedMesh& morphed, std::span<const Face> faces, std::size_t face_index,
                     std::span<const UvdCoord> coords, std::span<const Vec2> scales2d, std::span<const Vec3> colors,
                     double max_scale) {
    if (face_index >= faces.size())
        throw IndexError("face index " + std::to_string(face_index) + " out of range (" +
                         std::to_string(faces.size()) + " faces)");
    if (scales2d.size() != coords.size() || colors.size() != coords.size())
        throw ShapeError("embed_fine: coords, scales and colors must have equal length");
    const auto& f = faces[face_index];
    const Vec3& v1 = morphed.vertices[f[0]];
    const Vec3& v2 = morphed.vertices[f[1]];
    const Vec3& v3 = morphed.vertices[f[2]];
    const FaceFrame fr = face_frame(v1, v2, v3, face_index);
    SurfelSet out;
    out.reserve(coords.size());
    for (std::size_t j = 0; j < coords.size(); ++j) {
        UvdCoord c = coords[j];
        c.u = std::max(c.u, 0.0);
        c.v = std::max(c.v, 0.0);
        if (c.u + c.v > 1.0) {
            const double s = c.u + c.v;
            c.u /= s;
            c.v /= s;
        }
        Surfel s;
        s.position = uvd_position(v1, v2, v3, fr.normal, c);
        s.scale = (fr.area_scale * scales2d[j]).cwiseMin(max_scale);
        s.rotation = fr.rotation;
        s.color = colors[j];
        s.face = static_cast<int>(face_index);
        out.push_back(s);
    }
    return out;
}

std::vector<double> encode_position(const Vec3& p, int n_freq) {
    if (!p.allFinite()) throw ParameterError("encode_position: non-finite input");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(6 * n_freq));
    for (int l = 0; l < n_freq; ++l) {
        const double w = std::ldexp(std::numbers::pi, l);
        for (int c = 0; c < 3; ++c) out.push_back(std::sin(w * p[c]));
        for (int c = 0; c < 3; ++c) out.push_back(std::cos(w * p[c]));
    }
    return out;
}

}  // namespace gma
