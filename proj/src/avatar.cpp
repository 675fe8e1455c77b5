#include "gma/avatar.hpp"

#include "gma/errors.hpp"

#include <algorithm>
#include <cmath>

namespace gma {

namespace {

std::span<const double> column(const Eigen::MatrixXd& m, Eigen::Index c) {
    return {m.data() + c * m.rows(), static_cast<std::size_t>(m.rows())};
}

Eigen::MatrixXd decoder_inputs(const Eigen::MatrixXd& features, const Eigen::MatrixXd& encoded) {
    Eigen::MatrixXd x(features.cols() + encoded.rows(), features.rows());
    x.topRows(features.cols()) = features.transpose();
    x.bottomRows(encoded.rows()) = encoded;
    return x;
}

void check_mlp(const MlpWeights& w, int in, int out, const char* name) {
    if (w.input_dim() != in || w.output_dim() != out || w.b1.size() != w.hidden_dim() || w.b2.size() != out ||
        w.w2.cols() != w.hidden_dim())
        throw ShapeError(std::string(name) + ": decoder dimensions do not match the constants");
}

template <typename M>
void round_to_float(M& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

void quantize(MlpWeights& w) {
    round_to_float(w.w1);
    round_to_float(w.b1);
    round_to_float(w.w2);
    round_to_float(w.b2);
}

}  // namespace

std::string to_string(OffsetMode m) { return m == OffsetMode::Normal ? "normal" : "free"; }

OffsetMode offset_mode_from_string(const std::string& s) {
    if (s == "normal") return OffsetMode::Normal;
    if (s == "free") return OffsetMode::Free;
    throw ConfigError("unknown offset mode '" + s + "'");
}

nlohmann::json FitMetadata::to_json() const {
    return {{"stage1_steps", stage1_steps}, {"stage2_steps", stage2_steps}, {"one_stage", one_stage},
            {"seed", seed}, {"loss_tail", loss_tail}};
}

FitMetadata FitMetadata::from_json(const nlohmann::json& j) {
    FitMetadata m;
    try {
        m.stage1_steps = j.at("stage1_steps").get<int>();
        m.stage2_steps = j.at("stage2_steps").get<int>();
        m.one_stage = j.at("one_stage").get<bool>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.loss_tail = j.at("loss_tail").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("fit metadata: ") + e.what());
    }
    return m;
}

void AvatarCheckpoint::validate() const {
    body_config.validate();
    constants.validate();
    const auto nf = static_cast<Eigen::Index>(body_config.face_count());
    const int k = constants.k, in = constants.input_dim(), nk = constants.n_k;
    if (features.geo.rows() != nf || features.tex.rows() != nf)
        throw ShapeError("feature layer has " + std::to_string(features.geo.rows()) + " rows, body has " +
                         std::to_string(nf) + " faces");
    if (features.geo.cols() != k || features.tex.cols() != k)
        throw ShapeError("feature width " + std::to_string(features.geo.cols()) + " does not match k = " +
                         std::to_string(k));
    check_mlp(decoders.coarse, in, offset_mode == OffsetMode::Free ? 3 : 1, "F_coarse");
    check_mlp(decoders.fine, in, 3 * nk, "F_fine");
    check_mlp(decoders.color, in, 3 * nk, "T_color");
    check_mlp(decoders.scale, in, 2 * nk, "T_scale");
    if (static_cast<int>(canonical.beta.size()) != body_config.shape_dims ||
        static_cast<int>(canonical.psi.size()) != body_config.expr_dims ||
        static_cast<int>(canonical.theta.size()) != body_config.joints)
        throw ShapeError("canonical body parameters do not match the body config");
}

bool AvatarCheckpoint::operator==(const AvatarCheckpoint& o) const {
    return body_config == o.body_config && canonical == o.canonical && constants == o.constants &&
           offset_mode == o.offset_mode && features.geo == o.features.geo && features.tex == o.features.tex &&
           decoders == o.decoders && meta == o.meta;
}

AvatarCheckpoint init_avatar(const BodyConfig& body, const CoreConstants& constants, OffsetMode mode,
                             std::uint64_t seed) {
    body.validate();
    constants.validate();
    AvatarCheckpoint c;
    c.body_config = body;
    c.constants = constants;
    c.offset_mode = mode;
    c.canonical.beta.assign(static_cast<std::size_t>(body.shape_dims), 0.0);
    c.canonical.psi.assign(static_cast<std::size_t>(body.expr_dims), 0.0);
    c.canonical.theta.assign(static_cast<std::size_t>(body.joints), Vec3::Zero());
    c.features = init_feature_layer(body.face_count(), constants.k, seed);
    c.decoders = make_decoders(constants, mode == OffsetMode::Free, seed + 1);
    c.meta.seed = seed;
    quantize_to_float(c);
    return c;
}

void quantize_to_float(AvatarCheckpoint& c) {
    round_to_float(c.features.geo);
    round_to_float(c.features.tex);
    quantize(c.decoders.coarse);
    quantize(c.decoders.fine);
    quantize(c.decoders.color);
    quantize(c.decoders.scale);
    for (auto& v : c.canonical.beta) v = static_cast<float>(v);
    for (auto& v : c.canonical.psi) v = static_cast<float>(v);
    for (auto& t : c.canonical.theta) round_to_float(t);
    for (auto& v : c.meta.loss_tail) v = static_cast<float>(v);
}

std::shared_ptr<const BodyContext> make_body_context(const BodyConfig& body, const CoreConstants& constants) {
    auto ctx = std::make_shared<BodyContext>();
    ctx->body = build_procedural_body(body);
    ctx->constants = constants;
    const auto& faces = ctx->body.faces;
    ctx->encoded.resize(constants.encoding_dim(), static_cast<Eigen::Index>(faces.size()));
    for (std::size_t i = 0; i < faces.size(); ++i) {
        const auto& f = faces[i];
        const auto& v = ctx->body.template_vertices;
        const auto enc = encode_position((v[f[0]] + v[f[1]] + v[f[2]]) / 3.0, constants.n_freq);
        for (std::size_t r = 0; r < enc.size(); ++r) ctx->encoded(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = enc[r];
    }
    ctx->incidence = vertex_face_incidence(faces, ctx->body.num_vertices());
    return ctx;
}

DecodedAvatar decode_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodeRequest& req) {
    if (!(ckpt.constants == ctx.constants) || ckpt.num_faces() != ctx.body.num_faces())
        throw CompatibilityError("checkpoint does not match the body context");
    if (!ckpt.features.geo.allFinite() || !ckpt.features.tex.allFinite())
        throw NumericError("feature layer contains non-finite values");
    const auto& c = ckpt.constants;
    const auto nf = static_cast<Eigen::Index>(ckpt.num_faces());
    DecodedAvatar d;
    if (req.coarse || req.fine) {
        const Eigen::MatrixXd x_geo = decoder_inputs(ckpt.features.geo, ctx.encoded);
        if (req.coarse) {
            d.raw_coarse = mlp_forward_batch(ckpt.decoders.coarse, x_geo, &d.tape_coarse);
            if (ckpt.offset_mode == OffsetMode::Normal) {
                d.face_offsets.resize(static_cast<std::size_t>(nf));
                for (Eigen::Index i = 0; i < nf; ++i) d.face_offsets[i] = coarse_head(d.raw_coarse(0, i), c.max_offset);
            } else {
                d.local_offsets.resize(static_cast<std::size_t>(nf));
                for (Eigen::Index i = 0; i < nf; ++i)
                    for (int k = 0; k < 3; ++k) d.local_offsets[i][k] = coarse_head(d.raw_coarse(k, i), c.max_offset);
            }
        }
        if (req.fine) {
            d.raw_fine = mlp_forward_batch(ckpt.decoders.fine, x_geo, &d.tape_fine);
            d.coords.resize(static_cast<std::size_t>(nf));
            for (Eigen::Index i = 0; i < nf; ++i) d.coords[i] = fine_head(column(d.raw_fine, i), c.n_k, c.max_d);
        }
    }
    if (req.color || req.fine) {
        const Eigen::MatrixXd x_tex = decoder_inputs(ckpt.features.tex, ctx.encoded);
        if (req.color) {
            d.raw_color = mlp_forward_batch(ckpt.decoders.color, x_tex, &d.tape_color);
            d.colors.resize(static_cast<std::size_t>(nf));
            d.coarse_colors.resize(static_cast<std::size_t>(nf));
            for (Eigen::Index i = 0; i < nf; ++i) {
                d.colors[i] = color_head(column(d.raw_color, i), c.n_k);
                d.coarse_colors[i] = coarse_color(d.colors[i]);
            }
        }
        if (req.fine) {
            d.raw_scale = mlp_forward_batch(ckpt.decoders.scale, x_tex, &d.tape_scale);
            d.scale_factors.resize(static_cast<std::size_t>(nf));
            for (Eigen::Index i = 0; i < nf; ++i)
                d.scale_factors[i] = scale_head(column(d.raw_scale, i), c.n_k, c.max_scale_factor);
        }
    }
    return d;
}

MorphedMesh morph_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                         const MeshState& posed) {
    const auto& faces = ctx.body.faces;
    if (ckpt.offset_mode == OffsetMode::Free) {
        if (dec.local_offsets.size() != faces.size()) throw UsageError("morph_avatar: coarse decoder was not evaluated");
        return morph_mesh_free(posed, faces, dec.local_offsets);
    }
    if (dec.face_offsets.size() != faces.size()) throw UsageError("morph_avatar: coarse decoder was not evaluated");
    return morph_mesh(posed, face_offsets_to_vertex_scales(dec.face_offsets, faces, posed.vertices.size(),
                                                           ckpt.constants.max_offset));
}

SurfelSet assemble_surfels(const BodyContext& ctx, const DecodedAvatar& dec, const MorphedMesh& morphed, bool coarse,
                           bool fine) {
    const auto& faces = ctx.body.faces;
    const std::size_t nf = faces.size();
    const auto& c = ctx.constants;
    SurfelSet out;
    out.reserve((coarse ? nf : 0) + (fine ? nf * static_cast<std::size_t>(c.n_k) : 0));
    if (coarse) {
        if (dec.coarse_colors.size() != nf) throw UsageError("assemble_surfels: color decoder was not evaluated");
        out = embed_coarse(morphed, faces, dec.coarse_colors);
    }
    if (fine) {
        if (dec.coords.size() != nf || dec.scale_factors.size() != nf || dec.colors.size() != nf)
            throw UsageError("assemble_surfels: fine decoders were not evaluated");
        for (std::size_t i = 0; i < nf; ++i) {
            const auto s = embed_fine(morphed, faces, i, dec.coords[i], dec.scale_factors[i], dec.colors[i], c.max_scale);
            out.insert(out.end(), s.begin(), s.end());
        }
    }
    return out;
}

PosedAvatar pose_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                        const BodyParams& params, bool coarse, bool fine) {
    PosedAvatar p;
    p.posed = pose_mesh(ctx.body, params);
    p.morphed = morph_avatar(ckpt, ctx, dec, p.posed);
    p.surfels = assemble_surfels(ctx, dec, p.morphed, coarse, fine);
    return p;
}

AvatarGrads AvatarGrads::zeros_like(const AvatarCheckpoint& ckpt) {
    AvatarGrads g;
    g.geo = Eigen::MatrixXd::Zero(ckpt.features.geo.rows(), ckpt.features.geo.cols());
    g.tex = Eigen::MatrixXd::Zero(ckpt.features.tex.rows(), ckpt.features.tex.cols());
    g.decoders = DecoderGrads::zeros_like(ckpt.decoders);
    return g;
}

void AvatarGrads::set_zero() {
    geo.setZero();
    tex.setZero();
    decoders.coarse.set_zero();
    decoders.fine.set_zero();
    decoders.color.set_zero();
    decoders.scale.set_zero();
}

void backward_avatar(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                     const MorphedMesh& morphed, bool coarse, bool fine, const SurfelGrads& sg,
                     const std::vector<Vec3>& grad_morphed, const BackwardRequest& req, AvatarGrads& out) {
    const auto& faces = ctx.body.faces;
    const std::size_t nf = faces.size();
    const auto& c = ctx.constants;
    const int nk = c.n_k;
    const std::size_t expected = (coarse ? nf : 0) + (fine ? nf * static_cast<std::size_t>(nk) : 0);
    if (sg.position.size() != expected) throw UsageError("backward_avatar: surfel gradients do not match the layout");
    const auto& V = morphed.vertices;

    std::vector<Vec3> g_vert(V.size(), Vec3::Zero());
    if (req.geometry) {
        if (!grad_morphed.empty()) {
            if (grad_morphed.size() != V.size()) throw ShapeError("backward_avatar: vertex gradient size mismatch");
            g_vert = grad_morphed;
        }
    }
    Eigen::MatrixXd g_color_raw, g_fine_raw, g_scale_raw;
    if (req.color) g_color_raw = Eigen::MatrixXd::Zero(3 * nk, static_cast<Eigen::Index>(nf));
    if (req.fine && fine) {
        g_fine_raw = Eigen::MatrixXd::Zero(3 * nk, static_cast<Eigen::Index>(nf));
        g_scale_raw = Eigen::MatrixXd::Zero(2 * nk, static_cast<Eigen::Index>(nf));
    }

    const double scale_lo = std::log(1e-4), scale_hi = std::log(c.max_scale_factor);
    for (std::size_t i = 0; i < nf; ++i) {
        const auto& f = faces[i];
        const Vec3 &v1 = V[f[0]], &v2 = V[f[1]], &v3 = V[f[2]];
        const FaceFrame fr = face_frame(v1, v2, v3, i);
        Vec3 g_center = Vec3::Zero();
        Mat3 g_axes = Mat3::Zero();
        double g_area = 0.0;
        std::array<Vec3, 3> g_corner{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};

        if (coarse) {
            g_center += sg.position[i];
            g_axes += sg.axes[i];
            g_area += sg.scale[i].sum();
            if (req.color) {
                // coarse color is the mean of the fine colors
                for (int j = 0; j < nk; ++j)
                    for (int ch = 0; ch < 3; ++ch) {
                        const double col = dec.colors[i][j][ch];
                        g_color_raw(3 * j + ch, static_cast<Eigen::Index>(i)) += sg.color[i][ch] / nk * col * (1 - col);
                    }
            }
        }
        if (fine) {
            const std::size_t base = (coarse ? nf : 0) + i * static_cast<std::size_t>(nk);
            for (int j = 0; j < nk; ++j) {
                const std::size_t s = base + static_cast<std::size_t>(j);
                const UvdCoord& uvd = dec.coords[i][j];
                const Vec3& gp = sg.position[s];
                const double w = 1.0 - uvd.u - uvd.v;
                g_corner[0] += uvd.u * gp;
                g_corner[1] += uvd.v * gp;
                g_corner[2] += w * gp;
                g_axes.col(2) += uvd.d * gp;
                g_axes += sg.axes[s];
                const Vec2& factor = dec.scale_factors[i][j];
                for (int a = 0; a < 2; ++a) {
                    // scale = min(area * factor, max_scale)
                    if (fr.area_scale * factor[a] >= c.max_scale) continue;
                    g_area += sg.scale[s][a] * factor[a];
                    if (req.fine) {
                        const double raw = dec.raw_scale(2 * j + a, static_cast<Eigen::Index>(i));
                        if (raw > scale_lo && raw < scale_hi)
                            g_scale_raw(2 * j + a, static_cast<Eigen::Index>(i)) += sg.scale[s][a] * fr.area_scale * factor[a];
                    }
                }
                if (req.fine) {
                    const double g_u = gp.dot(v1 - v3), g_v = gp.dot(v2 - v3);
                    // softmax over (a, b, 0)
                    const double g_a = uvd.u * (1 - uvd.u) * g_u - uvd.u * uvd.v * g_v;
                    const double g_b = -uvd.u * uvd.v * g_u + uvd.v * (1 - uvd.v) * g_v;
                    const double t = std::tanh(dec.raw_fine(3 * j + 2, static_cast<Eigen::Index>(i)));
                    const auto col = static_cast<Eigen::Index>(i);
                    g_fine_raw(3 * j, col) += g_a;
                    g_fine_raw(3 * j + 1, col) += g_b;
                    g_fine_raw(3 * j + 2, col) += gp.dot(fr.normal) * c.max_d * (1 - t * t);
                }
                if (req.color)
                    for (int ch = 0; ch < 3; ++ch) {
                        const double col = dec.colors[i][j][ch];
                        g_color_raw(3 * j + ch, static_cast<Eigen::Index>(i)) += sg.color[s][ch] * col * (1 - col);
                    }
            }
        }
        if (req.geometry) {
            std::array<Vec3, 3> gv{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
            face_frame_backward(v1, v2, v3, g_center, g_axes.col(2), g_axes.col(0), g_axes.col(1), g_area, gv);
            for (int a = 0; a < 3; ++a) g_vert[f[a]] += gv[a] + g_corner[a];
        }
    }

    Eigen::MatrixXd g_geo_in;  // decoder-input gradients for the f_geo columns
    if (req.geometry) {
        if (dec.raw_coarse.size() == 0) throw UsageError("backward_avatar: coarse decoder was not evaluated");
        const auto& inc = ctx.incidence;
        Eigen::MatrixXd g_coarse_raw = Eigen::MatrixXd::Zero(dec.raw_coarse.rows(), static_cast<Eigen::Index>(nf));
        if (ckpt.offset_mode == OffsetMode::Normal) {
            const auto& N = morphed.base.normals;
            for (std::size_t v = 0; v < V.size(); ++v) {
                // clamp(mean) is inactive unless the mean sits exactly on the bound
                if (std::abs(morphed.scales[v]) >= c.max_offset) continue;
                const double g_s = N[v].dot(g_vert[v]) / static_cast<double>(inc[v].size());
                for (int fi : inc[v]) g_coarse_raw(0, fi) += g_s;
            }
            for (std::size_t i = 0; i < nf; ++i) {
                const double t = std::tanh(dec.raw_coarse(0, static_cast<Eigen::Index>(i)));
                g_coarse_raw(0, static_cast<Eigen::Index>(i)) *= c.max_offset * (1 - t * t);
            }
        } else {
            const auto base_frames = face_frames(morphed.base.vertices, faces);
            for (std::size_t v = 0; v < V.size(); ++v) {
                const Vec3 g = g_vert[v] / static_cast<double>(inc[v].size());
                for (int fi : inc[v]) g_coarse_raw.col(fi) += base_frames[fi].axes().transpose() * g;
            }
            for (std::size_t i = 0; i < nf; ++i)
                for (int k = 0; k < 3; ++k) {
                    const double t = std::tanh(dec.raw_coarse(k, static_cast<Eigen::Index>(i)));
                    g_coarse_raw(k, static_cast<Eigen::Index>(i)) *= c.max_offset * (1 - t * t);
                }
        }
        g_geo_in = mlp_backward(ckpt.decoders.coarse, dec.tape_coarse, g_coarse_raw, &out.decoders.coarse);
    }
    if (req.fine && fine) {
        const Eigen::MatrixXd gi = mlp_backward(ckpt.decoders.fine, dec.tape_fine, g_fine_raw, &out.decoders.fine);
        if (req.geometry) g_geo_in += gi;
        const Eigen::MatrixXd gt = mlp_backward(ckpt.decoders.scale, dec.tape_scale, g_scale_raw, &out.decoders.scale);
        if (req.color) out.tex += gt.topRows(c.k).transpose();
    }
    if (req.geometry) out.geo += g_geo_in.topRows(c.k).transpose();
    if (req.color) {
        const Eigen::MatrixXd gt = mlp_backward(ckpt.decoders.color, dec.tape_color, g_color_raw, &out.decoders.color);
        out.tex += gt.topRows(c.k).transpose();
    }
}

}  // namespace gma
