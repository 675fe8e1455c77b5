#include "gma/body_model.hpp"

#include "gma/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

namespace gma {

namespace {

constexpr double kPi = std::numbers::pi;

// Full skeleton; a body with J joints keeps the first J entries.
// 0 pelvis, 1 chest, 2 neck, 3/4 shoulders, 5/6 hips, 7/8 elbows, 9/10 knees.
struct JointSpec {
    Vec3 rest;
    int parent;
};

const std::array<JointSpec, BodyConfig::kMaxJoints> kSkeleton = {{
    {{0.0, 0.95, 0.0}, -1},
    {{0.0, 1.25, 0.0}, 0},
    {{0.0, 1.50, 0.0}, 1},
    {{0.19, 1.42, 0.0}, 1},
    {{-0.19, 1.42, 0.0}, 1},
    {{0.09, 0.90, 0.0}, 0},
    {{-0.09, 0.90, 0.0}, 0},
    {{0.19 + 0.31 * 0.766, 1.42 - 0.31 * 0.643, 0.0}, 3},
    {{-0.19 - 0.31 * 0.766, 1.42 - 0.31 * 0.643, 0.0}, 4},
    {{0.095, 0.48, 0.0}, 5},
    {{-0.095, 0.48, 0.0}, 6},
}};

struct PartSpec {
    BodyPart part;
    Vec3 start;
    Vec3 end;
    double radius_a;   // across, in the plane spanned with the z axis
    double radius_b;   // depth
    double exponent;   // profile sharpness, 1 gives an ellipsoid
    int joint_near;    // skinning joint at the start
    int joint_far;     // skinning joint past the blend point
    double blend_at;   // axial parameter where near hands over to far
};

std::vector<PartSpec> part_specs() {
    const Vec3 arm_dir_l = Vec3(0.766, -0.643, 0.0);
    const Vec3 arm_dir_r = Vec3(-0.766, -0.643, 0.0);
    const Vec3 sh_l = kSkeleton[3].rest;
    const Vec3 sh_r = kSkeleton[4].rest;
    return {
        {BodyPart::Torso, {0.0, 0.82, 0.0}, {0.0, 1.52, 0.0}, 0.165, 0.11, 0.6, 0, 1, 0.5},
        {BodyPart::Head, {0.0, 1.50, 0.0}, {0.0, 1.80, 0.0}, 0.095, 0.105, 1.0, 2, 2, 0.5},
        {BodyPart::LeftArm, sh_l - 0.05 * arm_dir_l, sh_l + 0.64 * arm_dir_l, 0.05, 0.05, 0.6, 3, 7, 0.5},
        {BodyPart::RightArm, sh_r - 0.05 * arm_dir_r, sh_r + 0.64 * arm_dir_r, 0.05, 0.05, 0.6, 4, 8, 0.5},
        {BodyPart::LeftLeg, {0.095, 0.95, 0.0}, {0.095, 0.03, 0.0}, 0.075, 0.075, 0.6, 5, 9, 0.5},
        {BodyPart::RightLeg, {-0.095, 0.95, 0.0}, {-0.095, 0.03, 0.0}, 0.075, 0.075, 0.6, 6, 10, 0.5},
    };
}

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Nearest ancestor that exists in a skeleton truncated to `count` joints.
int resolve_joint(int j, int count) {
    while (j >= count) j = kSkeleton[j].parent;
    return j;
}

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw ParameterError(std::string("non-finite ") + what);
}

}  // namespace

void BodyConfig::validate() const {
    if (segments < 3) throw ConfigError("body config: segments must be >= 3");
    if (rings < 1) throw ConfigError("body config: rings must be >= 1");
    if (shape_dims < 3) throw ConfigError("body config: shape_dims must be >= 3");
    if (expr_dims < 1) throw ConfigError("body config: expr_dims must be >= 1");
    if (joints < 5 || joints > kMaxJoints)
        throw ConfigError("body config: joints must be in [5, " + std::to_string(kMaxJoints) + "]");
}

nlohmann::json BodyConfig::to_json() const {
    return {{"segments", segments}, {"rings", rings}, {"shape_dims", shape_dims},
            {"expr_dims", expr_dims}, {"joints", joints}};
}

BodyConfig BodyConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("body config: expected a JSON object");
    BodyConfig c;
    auto read = [&](const char* key, int& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number_integer()) throw ConfigError(std::string("body config: ") + key + " must be an integer");
        out = j.at(key).get<int>();
    };
    read("segments", c.segments);
    read("rings", c.rings);
    read("shape_dims", c.shape_dims);
    read("expr_dims", c.expr_dims);
    read("joints", c.joints);
    c.validate();
    return c;
}

nlohmann::json BodyParams::to_json() const {
    nlohmann::json th = nlohmann::json::array();
    for (const auto& t : theta) th.push_back({t.x(), t.y(), t.z()});
    return {{"beta", beta}, {"theta", th}, {"psi", psi}};
}

BodyParams BodyParams::from_json(const nlohmann::json& j) {
    BodyParams p;
    try {
        p.beta = j.at("beta").get<std::vector<double>>();
        p.psi = j.at("psi").get<std::vector<double>>();
        for (const auto& t : j.at("theta")) {
            auto v = t.get<std::vector<double>>();
            if (v.size() != 3) throw ParameterError("theta entries must have 3 components");
            p.theta.emplace_back(v[0], v[1], v[2]);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("body params: ") + e.what());
    }
    return p;
}

BodyParams SkinnedBody::zero_params() const {
    BodyParams p;
    p.beta.assign(shape_basis.size(), 0.0);
    p.theta.assign(joints.size(), Vec3::Zero());
    p.psi.assign(expr_basis.size(), 0.0);
    return p;
}

void SkinnedBody::check_params(const BodyParams& params) const {
    if (params.beta.size() != shape_basis.size())
        throw ParameterError("beta has " + std::to_string(params.beta.size()) + " entries, body expects " +
                             std::to_string(shape_basis.size()));
    if (params.theta.size() != joints.size())
        throw ParameterError("theta has " + std::to_string(params.theta.size()) + " joints, body expects " +
                             std::to_string(joints.size()));
    if (params.psi.size() != expr_basis.size())
        throw ParameterError("psi has " + std::to_string(params.psi.size()) + " entries, body expects " +
                             std::to_string(expr_basis.size()));
    for (double b : params.beta) require_finite(b, "beta");
    for (double e : params.psi) require_finite(e, "psi");
    for (const auto& t : params.theta)
        for (int i = 0; i < 3; ++i) require_finite(t[i], "theta");
}

SkinnedBody build_procedural_body(const BodyConfig& config) {
    config.validate();
    SkinnedBody body;
    body.config = config;

    const int nj = config.joints;
    for (int j = 0; j < nj; ++j) body.joints.push_back({kSkeleton[j].rest, kSkeleton[j].parent});

    const int segs = config.segments;
    const int rings = config.rings;
    const auto parts = part_specs();

    struct VertexInfo {
        const PartSpec* spec;
        double axial;   // 0 at start, 1 at end
        Vec3 radial;    // offset from the axis
    };
    std::vector<VertexInfo> info;
    std::vector<std::pair<int, int>> weights_near_far;
    std::vector<double> blend;

    for (const auto& spec : parts) {
        const int base = static_cast<int>(body.template_vertices.size());
        const Vec3 axis = (spec.end - spec.start).normalized();
        Vec3 e1 = Vec3::UnitZ().cross(axis).normalized();
        Vec3 e2 = axis.cross(e1);
        const double length = (spec.end - spec.start).norm();

        auto add_vertex = [&](double phi, double omega) {
            const double axial = 0.5 * (1.0 - std::cos(phi));
            const double s = std::pow(std::sin(phi), spec.exponent);
            const Vec3 radial = s * (spec.radius_a * std::cos(omega) * e1 + spec.radius_b * std::sin(omega) * e2);
            body.template_vertices.push_back(spec.start + axial * length * axis + radial);
            info.push_back({&spec, axial, radial});
            body.vertex_part.push_back(spec.part);
        };

        add_vertex(0.0, 0.0);
        for (int r = 1; r <= rings; ++r) {
            const double phi = kPi * r / (rings + 1);
            for (int s = 0; s < segs; ++s) add_vertex(phi, 2.0 * kPi * s / segs);
        }
        add_vertex(kPi, 0.0);

        const int pole_a = base;
        const int pole_b = base + 1 + rings * segs;
        auto ring_vertex = [&](int r, int s) { return base + 1 + (r - 1) * segs + (s % segs); };

        std::vector<Face> part_faces;
        std::vector<std::array<int, 2>> grid;
        for (int s = 0; s < segs; ++s) {
            part_faces.push_back({pole_a, ring_vertex(1, s + 1), ring_vertex(1, s)});
            grid.push_back({0, s});
        }
        for (int r = 1; r < rings; ++r) {
            for (int s = 0; s < segs; ++s) {
                const int a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
                const int c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
                part_faces.push_back({a, b, d});
                part_faces.push_back({a, d, c});
                grid.push_back({r, s});
                grid.push_back({r, s});
            }
        }
        for (int s = 0; s < segs; ++s) {
            part_faces.push_back({pole_b, ring_vertex(rings, s), ring_vertex(rings, s + 1)});
            grid.push_back({rings, s});
        }

        // Orient outward: positive signed volume.
        double volume = 0.0;
        for (const auto& f : part_faces) {
            const Vec3& p0 = body.template_vertices[f[0]];
            const Vec3& p1 = body.template_vertices[f[1]];
            const Vec3& p2 = body.template_vertices[f[2]];
            volume += p0.dot(p1.cross(p2));
        }
        if (volume < 0)
            for (auto& f : part_faces) std::swap(f[1], f[2]);

        for (std::size_t i = 0; i < part_faces.size(); ++i) {
            body.faces.push_back(part_faces[i]);
            body.face_grid.push_back(grid[i]);
            body.face_part.push_back(spec.part);
        }
    }

    const std::size_t nv = body.template_vertices.size();

    // Skinning weights: each part blends its near joint into its far joint.
    body.skin_weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nv), nj);
    for (std::size_t v = 0; v < nv; ++v) {
        const auto& vi = info[v];
        const double far = smoothstep(vi.spec->blend_at - 0.12, vi.spec->blend_at + 0.12, vi.axial);
        const int jn = resolve_joint(vi.spec->joint_near, nj);
        const int jf = resolve_joint(vi.spec->joint_far, nj);
        body.skin_weights(static_cast<Eigen::Index>(v), jn) += 1.0 - far;
        body.skin_weights(static_cast<Eigen::Index>(v), jf) += far;
    }

    // Shape basis. 0: height, 1: girth, 2: limb length, 3+: ripples.
    const int nb = config.shape_dims;
    body.shape_basis.assign(nb, std::vector<Vec3>(nv, Vec3::Zero()));
    body.joint_shape_basis.assign(nb, std::vector<Vec3>(nj, Vec3::Zero()));
    for (std::size_t v = 0; v < nv; ++v) {
        const auto& vi = info[v];
        const Vec3& p = body.template_vertices[v];
        const bool limb = vi.spec->part != BodyPart::Torso && vi.spec->part != BodyPart::Head;
        body.shape_basis[0][v] = Vec3(0.0, 0.1 * p.y(), 0.0);
        body.shape_basis[1][v] = (vi.spec->part == BodyPart::Head ? 0.05 : 0.12) * vi.radial / 0.1;
        if (limb) {
            const Vec3 axis = (vi.spec->end - vi.spec->start).normalized();
            body.shape_basis[2][v] = 0.1 * (p - vi.spec->start).dot(axis) * axis;
        }
        for (int b = 3; b < nb; ++b) {
            const double r = vi.radial.norm();
            const Vec3 dir = r > 1e-9 ? Vec3(vi.radial / r) : Vec3::Zero();
            body.shape_basis[b][v] = 0.02 * std::sin(3.0 * b * p.y() + b) * dir;
        }
    }
    for (int j = 0; j < nj; ++j) {
        const Vec3& o = body.joints[j].rest;
        body.joint_shape_basis[0][j] = Vec3(0.0, 0.1 * o.y(), 0.0);
        // elbows and knees slide along their limb with the limb-length component
        const PartSpec* limb = nullptr;
        if (j == 7) limb = &parts[2];
        if (j == 8) limb = &parts[3];
        if (j == 9) limb = &parts[4];
        if (j == 10) limb = &parts[5];
        if (limb) {
            const Vec3 axis = (limb->end - limb->start).normalized();
            body.joint_shape_basis[2][j] = 0.1 * (o - limb->start).dot(axis) * axis;
        }
    }

    // Expression basis lives on the head only. 0: jaw drop, 1: cheek puff, 2+: ripples.
    const int ne = config.expr_dims;
    body.expr_basis.assign(ne, std::vector<Vec3>(nv, Vec3::Zero()));
    const Vec3 head_center = 0.5 * (parts[1].start + parts[1].end);
    for (std::size_t v = 0; v < nv; ++v) {
        if (info[v].spec->part != BodyPart::Head) continue;
        const Vec3& p = body.template_vertices[v];
        const Vec3 rel = p - head_center;
        for (int e = 0; e < ne; ++e) {
            if (e == 0) {
                const double below = std::max(0.0, -rel.y() / 0.15);
                body.expr_basis[e][v] = Vec3(0.0, -0.03 * below, 0.0);
            } else if (e == 1) {
                const double side = std::abs(rel.x()) / 0.1;
                body.expr_basis[e][v] = 0.015 * side * info[v].radial.normalized();
            } else {
                body.expr_basis[e][v] = 0.01 * std::sin(20.0 * rel.y() + e) * info[v].radial.normalized();
            }
        }
    }
    // poles have zero radial; keep the basis finite
    for (auto& basis : body.expr_basis)
        for (auto& d : basis)
            if (!d.allFinite()) d.setZero();

    return body;
}

std::vector<Vec3> shaped_vertices(const SkinnedBody& body, const BodyParams& params) {
    body.check_params(params);
    std::vector<Vec3> out = body.template_vertices;
    for (std::size_t b = 0; b < params.beta.size(); ++b) {
        if (params.beta[b] == 0.0) continue;
        for (std::size_t v = 0; v < out.size(); ++v) out[v] += params.beta[b] * body.shape_basis[b][v];
    }
    for (std::size_t e = 0; e < params.psi.size(); ++e) {
        if (params.psi[e] == 0.0) continue;
        for (std::size_t v = 0; v < out.size(); ++v) out[v] += params.psi[e] * body.expr_basis[e][v];
    }
    return out;
}

MeshState pose_mesh(const SkinnedBody& body, const BodyParams& params) {
    MeshState state;
    state.vertices = shaped_vertices(body, params);

    const std::size_t nj = body.joints.size();
    std::vector<Vec3> origins(nj);
    for (std::size_t j = 0; j < nj; ++j) {
        origins[j] = body.joints[j].rest;
        for (std::size_t b = 0; b < params.beta.size(); ++b)
            origins[j] += params.beta[b] * body.joint_shape_basis[b][j];
    }

    bool identity = true;
    for (const auto& t : params.theta) identity = identity && t.isZero(0.0);

    if (!identity) {
        // world transform of joint j: p -> rot[j] * p + trans[j]
        std::vector<Mat3> rot(nj);
        std::vector<Vec3> trans(nj);
        for (std::size_t j = 0; j < nj; ++j) {
            const Mat3 local = axis_angle_to_matrix(params.theta[j]);
            const Vec3 local_t = origins[j] - local * origins[j];
            const int parent = body.joints[j].parent;
            if (parent < 0) {
                rot[j] = local;
                trans[j] = local_t;
            } else {
                rot[j] = rot[parent] * local;
                trans[j] = rot[parent] * local_t + trans[parent];
            }
        }
        for (std::size_t v = 0; v < state.vertices.size(); ++v) {
            const Vec3 p = state.vertices[v];
            Vec3 out = Vec3::Zero();
            for (std::size_t j = 0; j < nj; ++j) {
                const double w = body.skin_weights(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j));
                if (w == 0.0) continue;
                out += w * (rot[j] * p + trans[j]);
            }
            state.vertices[v] = out;
        }
    }

    state.normals = vertex_normals(state.vertices, body.faces);
    return state;
}

std::vector<Vec3> vertex_normals(std::span<const Vec3> vertices, std::span<const Face> faces) {
    std::vector<Vec3> normals(vertices.size(), Vec3::Zero());
    for (const auto& f : faces) {
        const Vec3 c = (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]);
        for (int k = 0; k < 3; ++k) normals[f[k]] += c;
    }
    for (auto& n : normals) {
        const double len = n.norm();
        if (len > 0) n /= len;
    }
    return normals;
}

FaceFrame face_frame(const Vec3& v1, const Vec3& v2, const Vec3& v3, std::size_t face_index) {
    const Vec3 e1 = v2 - v1;
    const Vec3 e2 = v3 - v1;
    const Vec3 c = e1.cross(e2);
    const double doubled_area = c.norm();
    const double e1_len = e1.norm();
    if (!(doubled_area > 1e-14) || !(e1_len > 0)) throw DegenerateFaceError(face_index);

    FaceFrame f;
    f.center = (v1 + v2 + v3) / 3.0;
    f.normal = c / doubled_area;
    // e1 is orthogonal to the normal by construction
    f.tangent = e1 / e1_len;
    f.bitangent = f.normal.cross(f.tangent);
    f.rotation = matrix_to_quat(f.axes());
    f.area_scale = std::sqrt(0.5 * doubled_area);
    return f;
}

std::vector<FaceFrame> face_frames(std::span<const Vec3> vertices, std::span<const Face> faces) {
    std::vector<FaceFrame> frames;
    frames.reserve(faces.size());
    for (std::size_t i = 0; i < faces.size(); ++i) {
        const auto& f = faces[i];
        frames.push_back(face_frame(vertices[f[0]], vertices[f[1]], vertices[f[2]], i));
    }
    return frames;
}

void face_frame_backward(const Vec3& v1, const Vec3& v2, const Vec3& v3, const Vec3& grad_center,
                         const Vec3& grad_normal, const Vec3& grad_tangent, const Vec3& grad_bitangent,
                         double grad_area_scale, std::array<Vec3, 3>& grad_vertices) {
    const Vec3 e1 = v2 - v1;
    const Vec3 e2 = v3 - v1;
    const Vec3 c = e1.cross(e2);
    const double doubled_area = c.norm();
    const double e1_len = e1.norm();
    const Vec3 n = c / doubled_area;
    const Vec3 t = e1 / e1_len;
    const double s = std::sqrt(0.5 * doubled_area);

    // b = n x t
    Vec3 g_n = grad_normal + t.cross(grad_bitangent);
    Vec3 g_t = grad_tangent + grad_bitangent.cross(n);

    Vec3 g_c = (g_n - n * n.dot(g_n)) / doubled_area;
    g_c += n * (grad_area_scale / (4.0 * s));

    Vec3 g_e1 = (g_t - t * t.dot(g_t)) / e1_len;
    g_e1 += e2.cross(g_c);
    const Vec3 g_e2 = g_c.cross(e1);

    const Vec3 g_mean = grad_center / 3.0;
    grad_vertices[0] += g_mean - g_e1 - g_e2;
    grad_vertices[1] += g_mean + g_e1;
    grad_vertices[2] += g_mean + g_e2;
}

std::vector<std::array<int, 2>> unique_edges(std::span<const Face> faces) {
    std::vector<std::array<int, 2>> edges;
    edges.reserve(faces.size() * 3);
    for (const auto& f : faces)
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            if (a > b) std::swap(a, b);
            edges.push_back({a, b});
        }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return edges;
}

bool is_closed_manifold(std::span<const Face> faces) {
    std::map<std::array<int, 2>, int> count;
    for (const auto& f : faces)
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            if (a > b) std::swap(a, b);
            ++count[{a, b}];
        }
    return std::all_of(count.begin(), count.end(), [](const auto& kv) { return kv.second == 2; });
}

void write_obj(const std::filesystem::path& path, std::span<const Vec3> vertices, std::span<const Vec3> normals,
               std::span<const Face> faces) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(9);
    for (const auto& v : vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto& n : normals) out << "vn " << n.x() << ' ' << n.y() << ' ' << n.z() << '\n';
    const bool with_normals = normals.size() == vertices.size();
    for (const auto& f : faces) {
        out << 'f';
        for (int k = 0; k < 3; ++k) {
            out << ' ' << f[k] + 1;
            if (with_normals) out << "//" << f[k] + 1;
        }
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace gma
