#include "gma/edit_ops.hpp"

#include "gma/errors.hpp"
#include "gma/persistence.hpp"

#include <boost/beast/core/detail/base64.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace gma {

FaceRegion FaceRegion::from(std::vector<int> faces) {
    std::sort(faces.begin(), faces.end());
    faces.erase(std::unique(faces.begin(), faces.end()), faces.end());
    return {std::move(faces)};
}

FaceRegion FaceRegion::all(std::size_t n_faces) {
    FaceRegion r;
    r.faces.resize(n_faces);
    for (std::size_t i = 0; i < n_faces; ++i) r.faces[i] = static_cast<int>(i);
    return r;
}

namespace {

void check_indices(const std::vector<int>& faces, std::size_t n_faces, const char* what) {
    if (faces.empty()) throw UsageError(std::string(what) + " is empty");
    for (int f : faces)
        if (f < 0 || static_cast<std::size_t>(f) >= n_faces)
            throw IndexError(std::string(what) + ": face " + std::to_string(f) + " out of range (" +
                             std::to_string(n_faces) + " faces)");
}

bool same_architecture(const MlpWeights& a, const MlpWeights& b) {
    return a.activation == b.activation && a.input_dim() == b.input_dim() && a.hidden_dim() == b.hidden_dim() &&
           a.output_dim() == b.output_dim();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void FaceRegion::check(std::size_t n_faces) const { check_indices(faces, n_faces, "region"); }

std::string to_string(TransferMode m) {
    switch (m) {
    case TransferMode::Geo: return "geo";
    case TransferMode::Tex: return "tex";
    case TransferMode::Both: return "both";
    }
    return "?";
}

TransferMode transfer_mode_from_string(const std::string& s) {
    if (s == "geo") return TransferMode::Geo;
    if (s == "tex") return TransferMode::Tex;
    if (s == "both") return TransferMode::Both;
    throw ConfigError("unknown transfer mode '" + s + "'");
}

AvatarCheckpoint transfer_features(const AvatarCheckpoint& src, const AvatarCheckpoint& dst,
                                   const std::vector<int>& region_src, const std::vector<int>& region_dst,
                                   TransferMode mode) {
    if (region_src.size() != region_dst.size())
        throw CorrespondenceError("source region has " + std::to_string(region_src.size()) +
                                  " faces, destination region has " + std::to_string(region_dst.size()));
    check_indices(region_src, src.num_faces(), "source region");
    check_indices(region_dst, dst.num_faces(), "destination region");
    if (src.constants.k != dst.constants.k || src.features.k() != dst.features.k())
        throw CompatibilityError("feature dimension differs: " + std::to_string(src.features.k()) + " vs " +
                                 std::to_string(dst.features.k()));
    if (!same_architecture(src.decoders.coarse, dst.decoders.coarse) ||
        !same_architecture(src.decoders.fine, dst.decoders.fine) ||
        !same_architecture(src.decoders.color, dst.decoders.color) ||
        !same_architecture(src.decoders.scale, dst.decoders.scale))
        throw CompatibilityError("decoder architectures differ");
    AvatarCheckpoint out = dst;
    for (std::size_t i = 0; i < region_dst.size(); ++i) {
        if (mode != TransferMode::Tex) out.features.geo.row(region_dst[i]) = src.features.geo.row(region_src[i]);
        if (mode != TransferMode::Geo) out.features.tex.row(region_dst[i]) = src.features.tex.row(region_src[i]);
    }
    return out;
}

namespace {

// Forward of the mean fine color for a block of faces; input columns are
// [f_tex row; encoded center] per face.
Eigen::MatrixXd mean_colors(const MlpWeights& w, const Eigen::MatrixXd& input, int n_k, GradTape* tape,
                            Eigen::MatrixXd* sig) {
    const Eigen::MatrixXd raw = mlp_forward_batch(w, input, tape);
    Eigen::MatrixXd s = raw.unaryExpr([](double x) { return sigmoid(x); });
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(3, raw.cols());
    for (int j = 0; j < n_k; ++j) mean += s.middleRows(3 * j, 3);
    mean /= n_k;
    if (sig) *sig = std::move(s);
    return mean;
}

Eigen::MatrixXd region_inputs(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const std::vector<int>& faces) {
    const int k = ckpt.constants.k;
    Eigen::MatrixXd x(ckpt.constants.input_dim(), static_cast<Eigen::Index>(faces.size()));
    for (std::size_t i = 0; i < faces.size(); ++i) {
        x.col(static_cast<Eigen::Index>(i)).head(k) = ckpt.features.tex.row(faces[i]).transpose();
        x.col(static_cast<Eigen::Index>(i)).tail(ctx.encoded.rows()) = ctx.encoded.col(faces[i]);
    }
    return x;
}

}  // namespace

std::vector<Vec3> face_mean_colors(const AvatarCheckpoint& ckpt, const BodyContext& ctx,
                                   const std::vector<int>& faces) {
    check_indices(faces, ckpt.num_faces(), "faces");
    const Eigen::MatrixXd c = mean_colors(ckpt.decoders.color, region_inputs(ckpt, ctx, faces), ckpt.constants.n_k,
                                          nullptr, nullptr);
    std::vector<Vec3> out(faces.size());
    for (std::size_t i = 0; i < faces.size(); ++i) out[i] = c.col(static_cast<Eigen::Index>(i));
    return out;
}

InvertResult invert_color(const AvatarCheckpoint& ckpt, const FaceRegion& region, const std::vector<Vec3>& targets,
                          const InvertConfig& cfg) {
    region.check(ckpt.num_faces());
    if (targets.size() != region.size())
        throw CorrespondenceError("invert_color: " + std::to_string(targets.size()) + " targets for " +
                                  std::to_string(region.size()) + " faces");
    for (const auto& t : targets)
        if (!t.allFinite() || (t.array() < 0).any() || (t.array() > 1).any())
            throw ParameterError("invert_color: target colors must lie in [0, 1]");
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const int k = ckpt.constants.k, nk = ckpt.constants.n_k;
    const auto n = static_cast<Eigen::Index>(region.size());
    Eigen::MatrixXd target(3, n);
    for (Eigen::Index i = 0; i < n; ++i) target.col(i) = targets[static_cast<std::size_t>(i)];

    Eigen::MatrixXd x = region_inputs(ckpt, *ctx, region.faces);
    Eigen::MatrixXd feat = x.topRows(k);
    Eigen::MatrixXd grad(k, n);
    AdamState adam;
    InvertResult res;
    for (; res.steps < cfg.max_steps; ++res.steps) {
        GradTape tape;
        Eigen::MatrixXd sig;
        x.topRows(k) = feat;
        const Eigen::MatrixXd c = mean_colors(ckpt.decoders.color, x, nk, &tape, &sig);
        const Eigen::MatrixXd diff = c - target;
        if (diff.cwiseAbs().maxCoeff() <= cfg.tolerance) break;
        const Eigen::MatrixXd g_mean = diff * (2.0 / static_cast<double>(3 * n * nk));
        Eigen::MatrixXd g_raw(3 * nk, n);
        for (int j = 0; j < nk; ++j) {
            const auto s = sig.middleRows(3 * j, 3).array();
            g_raw.middleRows(3 * j, 3) = (g_mean.array() * s * (1.0 - s)).matrix();
        }
        grad = mlp_backward(ckpt.decoders.color, tape, g_raw, nullptr).topRows(k);
        const ParamGroup group{"f_tex", {feat.data(), static_cast<std::size_t>(feat.size())},
                               {grad.data(), static_cast<std::size_t>(grad.size())}, cfg.lr};
        adam_step(std::span<const ParamGroup>(&group, 1), adam, cfg.adam);
    }

    res.avatar = ckpt;
    if (res.steps > 0)
        for (Eigen::Index i = 0; i < n; ++i)
            for (int d = 0; d < k; ++d)
                res.avatar.features.tex(region.faces[static_cast<std::size_t>(i)], d) = static_cast<float>(feat(d, i));
    const auto achieved = face_mean_colors(res.avatar, *ctx, region.faces);
    res.residuals.resize(region.size());
    for (std::size_t i = 0; i < region.size(); ++i) {
        res.residuals[i] = achieved[i] - targets[i];
        res.mse += res.residuals[i].squaredNorm() / static_cast<double>(3 * n);
        res.max_error = std::max(res.max_error, res.residuals[i].cwiseAbs().maxCoeff());
    }
    res.converged = res.max_error <= cfg.warn_linf;
    return res;
}

namespace {

Vec3 bilinear(const Image8& img, double x, double y) {
    // pixel (i, j) is centered at (i + 0.5, j + 0.5)
    const double fx = std::clamp(x - 0.5, 0.0, img.width - 1.0), fy = std::clamp(y - 0.5, 0.0, img.height - 1.0);
    const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    const double ax = fx - x0, ay = fy - y0;
    auto px = [&](int i, int j) {
        const std::size_t o = (static_cast<std::size_t>(j) * img.width + i) * img.channels;
        if (img.channels == 1) return Vec3(Vec3::Constant(img.data[o] / 255.0));
        return Vec3(img.data[o] / 255.0, img.data[o + 1] / 255.0, img.data[o + 2] / 255.0);
    };
    return (1 - ay) * ((1 - ax) * px(x0, y0) + ax * px(x1, y0)) + ay * ((1 - ax) * px(x0, y1) + ax * px(x1, y1));
}

}  // namespace

StampResult stamp_texture(const AvatarCheckpoint& ckpt, const Image8& image, const Camera& cam,
                          const FaceRegion& region, const BodyParams& params, const InvertConfig& cfg) {
    region.check(ckpt.num_faces());
    if (image.width <= 0 || image.height <= 0 || (image.channels != 1 && image.channels != 3) ||
        image.data.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
        throw UsageError("stamp: image must be gray or RGB with consistent size");
    cam.validate();
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const DecodedAvatar dec = decode_avatar(ckpt, *ctx, {true, true, false});
    const MeshState posed = pose_mesh(ctx->body, params);
    const MorphedMesh morphed = morph_avatar(ckpt, *ctx, dec, posed);
    const Vec3 eye = cam.center();

    StampResult res;
    for (int f : region.faces) {
        const Face& tri = ctx->body.faces[f];
        const Vec3 &a = morphed.vertices[tri[0]], &b = morphed.vertices[tri[1]], &c = morphed.vertices[tri[2]];
        const FaceFrame fr = face_frame(a, b, c, static_cast<std::size_t>(f));
        if (fr.normal.dot(fr.center - eye) >= 0) {
            res.back_facing.push_back(f);
            continue;
        }
        Vec3 sum = Vec3::Zero();
        int hits = 0;
        for (const auto& uvd : dec.coords[f]) {
            const Vec3 p = cam.R * uvd_position(a, b, c, fr.normal, uvd) + cam.t;
            if (p.z() <= 1e-9) continue;
            const double u = cam.fx * p.x() / p.z() + cam.cx, v = cam.fy * p.y() / p.z() + cam.cy;
            if (u < 0 || v < 0 || u >= image.width || v >= image.height) continue;
            sum += bilinear(image, u, v);
            ++hits;
        }
        if (hits == 0) {
            res.outside.push_back(f);
            continue;
        }
        res.applied.push_back(f);
        res.targets.push_back(sum / hits);
    }
    if (!res.back_facing.empty())
        res.notices.push_back(std::to_string(res.back_facing.size()) + " back-facing faces skipped");
    if (!res.outside.empty())
        res.notices.push_back(std::to_string(res.outside.size()) + " faces outside the image skipped");
    if (res.applied.empty()) {
        res.inversion.avatar = ckpt;
        res.notices.emplace_back("no face received a stamp target; checkpoint unchanged");
        return res;
    }
    res.inversion = invert_color(ckpt, FaceRegion{res.applied}, res.targets, cfg);
    return res;
}

PosedAvatar apply_body_params(const AvatarCheckpoint& ckpt, const BodyParams& params) {
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    ctx->body.check_params(params);
    return pose_avatar(ckpt, *ctx, decode_avatar(ckpt, *ctx), params);
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    namespace b64 = boost::beast::detail::base64;
    // The decoder writes whole 3-byte groups, so unaligned input would overrun.
    if (text.size() % 4 != 0) throw ConfigError("invalid base64 data");
    std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
    const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
    // The decoder stops at padding; anything but up to two '=' after that is garbage.
    const bool padded = text.size() - read <= 2 && text.find_first_not_of('=', read) == std::string::npos;
    if (!padded) throw ConfigError("invalid base64 data");
    out.resize(written);
    return out;
}

namespace {

const std::vector<std::string> kKinds{"transfer", "paint", "stamp", "shape", "pose", "expression"};

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::uint8_t> blob(const nlohmann::json& p, const char* b64_key, const char* path_key) {
    if (p.contains(b64_key)) return base64_decode(p.at(b64_key).get<std::string>());
    if (p.contains(path_key)) return read_file(p.at(path_key).get<std::string>());
    throw ConfigError(std::string("payload needs '") + b64_key + "' or '" + path_key + "'");
}

}  // namespace

EditCommand EditCommand::from_json(const nlohmann::json& j) {
    EditCommand c;
    if (!j.is_object()) throw ConfigError("edit command must be a JSON object");
    if (!j.contains("kind") || !j.at("kind").is_string()) throw ConfigError("field 'kind' is missing or not a string");
    c.kind = j.at("kind").get<std::string>();
    if (std::find(kKinds.begin(), kKinds.end(), c.kind) == kKinds.end())
        throw ConfigError("field 'kind' has unknown value '" + c.kind + "'");
    if (j.contains("region")) {
        if (!j.at("region").is_array()) throw ConfigError("field 'region' must be an array of face indices");
        for (const auto& v : j.at("region")) {
            if (!v.is_number_integer()) throw ConfigError("field 'region' must be an array of face indices");
            c.region.push_back(v.get<int>());
        }
    }
    if (j.contains("payload")) {
        if (!j.at("payload").is_object()) throw ConfigError("field 'payload' must be an object");
        c.payload = j.at("payload");
    }
    const bool regional = c.kind == "transfer" || c.kind == "paint" || c.kind == "stamp";
    if (regional && c.region.empty()) throw ConfigError("field 'region' is required for " + c.kind);
    const auto& p = c.payload;
    auto need = [&](const char* key) {
        if (!p.contains(key)) throw ConfigError("field 'payload." + std::string(key) + "' is required for " + c.kind);
    };
    if (c.kind == "paint" && !p.contains("color") && !p.contains("colors"))
        throw ConfigError("field 'payload.color' is required for paint");
    if (c.kind == "stamp") need("camera");
    if (c.kind == "shape") need("beta");
    if (c.kind == "pose") need("theta");
    if (c.kind == "expression") need("psi");
    return c;
}

nlohmann::json EditCommand::to_json() const { return {{"kind", kind}, {"region", region}, {"payload", payload}}; }

EditOutcome apply_edit(const AvatarCheckpoint& ckpt, const EditCommand& cmd, const InvertConfig& cfg) {
    EditOutcome out;
    const auto& p = cmd.payload;
    try {
        if (cmd.kind == "transfer") {
            const AvatarCheckpoint src = deserialize_checkpoint(blob(p, "source_base64", "source_path"));
            const auto src_region = p.contains("source_region") ? p.at("source_region").get<std::vector<int>>()
                                                                : cmd.region;
            const auto mode = transfer_mode_from_string(p.value("mode", std::string("both")));
            out.avatar = transfer_features(src, ckpt, src_region, cmd.region, mode);
            out.changed_faces = FaceRegion::from(cmd.region).faces;
        } else if (cmd.kind == "paint") {
            const FaceRegion region = FaceRegion::from(cmd.region);
            std::vector<Vec3> targets;
            if (p.contains("colors")) {
                if (region.faces != cmd.region)
                    throw ConfigError("field 'region' must be sorted and unique when 'payload.colors' is given");
                for (const auto& c : p.at("colors")) {
                    const auto v = c.get<std::vector<double>>();
                    if (v.size() != 3) throw ConfigError("field 'payload.colors' entries need 3 components");
                    targets.emplace_back(v[0], v[1], v[2]);
                }
            } else {
                const auto v = p.at("color").get<std::vector<double>>();
                if (v.size() != 3) throw ConfigError("field 'payload.color' needs 3 components");
                targets.assign(region.size(), Vec3(v[0], v[1], v[2]));
            }
            const InvertResult r = invert_color(ckpt, region, targets, cfg);
            out.avatar = r.avatar;
            out.changed_faces = region.faces;
            out.report = {{"steps", r.steps}, {"mse", r.mse}, {"max_error", r.max_error}, {"converged", r.converged}};
            if (!r.converged)
                out.notices.push_back("color inversion stopped with L-inf error " + std::to_string(r.max_error));
        } else if (cmd.kind == "stamp") {
            const Image8 image = decode_png(blob(p, "image_base64", "image_path"));
            const Camera cam = Camera::from_json(p.at("camera"), image.width, image.height);
            const BodyParams params = p.contains("params") ? BodyParams::from_json(p.at("params")) : ckpt.canonical;
            const StampResult r = stamp_texture(ckpt, image, cam, FaceRegion::from(cmd.region), params, cfg);
            out.avatar = r.inversion.avatar;
            out.changed_faces = r.applied;
            out.notices = r.notices;
            out.report = {{"applied", r.applied.size()},
                          {"back_facing", r.back_facing.size()},
                          {"outside", r.outside.size()},
                          {"max_error", r.inversion.max_error}};
        } else {
            out.avatar = ckpt;
            BodyParams& bp = out.avatar.canonical;
            const bool delta = p.value("delta", false);
            if (cmd.kind == "shape" || cmd.kind == "expression") {
                auto& dst = cmd.kind == "shape" ? bp.beta : bp.psi;
                const auto v = p.at(cmd.kind == "shape" ? "beta" : "psi").get<std::vector<double>>();
                if (v.size() != dst.size())
                    throw ParameterError(cmd.kind + " needs " + std::to_string(dst.size()) + " values");
                for (std::size_t i = 0; i < v.size(); ++i) dst[i] = delta ? dst[i] + v[i] : v[i];
            } else {
                const BodyParams parsed = BodyParams::from_json({{"beta", bp.beta}, {"psi", bp.psi},
                                                                 {"theta", p.at("theta")}});
                if (parsed.theta.size() != bp.theta.size())
                    throw ParameterError("pose needs " + std::to_string(bp.theta.size()) + " joint rotations");
                for (std::size_t i = 0; i < bp.theta.size(); ++i)
                    bp.theta[i] = delta ? Vec3(bp.theta[i] + parsed.theta[i]) : parsed.theta[i];
            }
            build_procedural_body(out.avatar.body_config).check_params(bp);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("edit payload: " + std::string(e.what()));
    }
    quantize_to_float(out.avatar);
    return out;
}

}  // namespace gma
