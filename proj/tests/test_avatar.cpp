#include "support/gradcheck.hpp"

#include "gma/avatar.hpp"
#include "gma/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace gma;
using testing::rel_err;

namespace {

BodyConfig tiny_body() {
    BodyConfig b;
    b.segments = 6;
    b.rings = 3;
    return b;
}

CoreConstants tiny_constants() {
    CoreConstants c;
    c.k = 6;
    c.n_freq = 2;
    c.n_k = 3;
    return c;
}

// Random linear functional of surfel parameters and morphed vertices.
struct SurfelFunctional {
    std::vector<Vec3> a, d;
    std::vector<Vec2> b;
    std::vector<Mat3> C;
    std::vector<Vec3> e;

    SurfelFunctional(std::size_t n_surfels, std::size_t n_vertices, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> U(-1, 1);
        auto v3 = [&] { return Vec3(U(rng), U(rng), U(rng)); };
        for (std::size_t i = 0; i < n_surfels; ++i) {
            a.push_back(v3());
            d.push_back(v3());
            b.emplace_back(U(rng), U(rng));
            Mat3 m;
            m.col(0) = v3();
            m.col(1) = v3();
            m.col(2) = v3();
            C.push_back(m);
        }
        for (std::size_t v = 0; v < n_vertices; ++v) e.push_back(0.1 * v3());
    }

    double eval(const SurfelSet& s, const std::vector<Vec3>& verts) const {
        double sum = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            sum += a[i].dot(s[i].position) + b[i].dot(s[i].scale) + d[i].dot(s[i].color);
            sum += (C[i].array() * quat_to_matrix(s[i].rotation).array()).sum();
        }
        for (std::size_t v = 0; v < verts.size(); ++v) sum += e[v].dot(verts[v]);
        return sum;
    }

    SurfelGrads grads() const {
        SurfelGrads g;
        g.position = a;
        g.scale = b;
        g.color = d;
        g.axes = C;
        g.rotation.assign(a.size(), Quat::Zero());
        return g;
    }
};

struct Harness {
    AvatarCheckpoint ckpt;
    std::shared_ptr<const BodyContext> ctx;
    MeshState posed;
    bool coarse, fine;

    double eval(const AvatarCheckpoint& c, const SurfelFunctional& f) const {
        const auto dec = decode_avatar(c, *ctx);
        const auto m = morph_avatar(c, *ctx, dec, posed);
        return f.eval(assemble_surfels(*ctx, dec, m, coarse, fine), m.vertices);
    }
};

void check_chain(OffsetMode mode, bool coarse, bool fine, std::uint64_t seed) {
    Harness h{init_avatar(tiny_body(), tiny_constants(), mode, seed), nullptr, {}, coarse, fine};
    h.ctx = make_body_context(h.ckpt.body_config, h.ckpt.constants);
    // lift the features so heads are away from their centers
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N(0, 0.5);
    for (Eigen::Index i = 0; i < h.ckpt.features.geo.size(); ++i) h.ckpt.features.geo.data()[i] = N(rng);
    for (Eigen::Index i = 0; i < h.ckpt.features.tex.size(); ++i) h.ckpt.features.tex.data()[i] = N(rng);
    BodyParams p = h.ckpt.canonical;
    p.theta[0] = Vec3(0.1, 0.3, -0.2);
    h.posed = pose_mesh(h.ctx->body, p);

    const auto dec = decode_avatar(h.ckpt, *h.ctx);
    const auto morphed = morph_avatar(h.ckpt, *h.ctx, dec, h.posed);
    const auto surfels = assemble_surfels(*h.ctx, dec, morphed, coarse, fine);
    const SurfelFunctional f(surfels.size(), morphed.vertices.size(), seed + 7);
    AvatarGrads g = AvatarGrads::zeros_like(h.ckpt);
    backward_avatar(h.ckpt, *h.ctx, dec, morphed, coarse, fine, f.grads(), f.e, {}, g);

    // small step: ReLU kinks of the texture decoders sit close to some probes
    const double step = 1e-6;
    double worst = 0;
    std::string where;
    int idx = 0;
    std::string label;
    auto probe = [&](double analytic, auto&& ref) {
        ++idx;
        const double orig = ref(h.ckpt);
        AvatarCheckpoint p1 = h.ckpt, p2 = h.ckpt;
        ref(p1) = orig + step;
        ref(p2) = orig - step;
        const double num = (h.eval(p1, f) - h.eval(p2, f)) / (2 * step);
        if (rel_err(analytic, num, 1e-4) > worst) {
            worst = rel_err(analytic, num, 1e-4);
            where = label + " probe " + std::to_string(idx) + " analytic " + std::to_string(analytic) + " numeric " + std::to_string(num);
        }
    };
    for (Eigen::Index i = 0; i < g.geo.size(); i += 17)
        probe(g.geo.data()[i], [i](AvatarCheckpoint& c) -> double& { return c.features.geo.data()[i]; });
    for (Eigen::Index i = 0; i < g.tex.size(); i += 13)
        probe(g.tex.data()[i], [i](AvatarCheckpoint& c) -> double& { return c.features.tex.data()[i]; });
    auto weights = [&](MlpGrad DecoderGrads::*gm, MlpWeights DecoderSet::*wm) {
        const MlpGrad& mg = g.decoders.*gm;
        label = "w1";
        for (Eigen::Index i = 0; i < mg.w1.size(); i += 97)
            probe(mg.w1.data()[i], [=](AvatarCheckpoint& c) -> double& { return (c.decoders.*wm).w1.data()[i]; });
        label = "w2";
        for (Eigen::Index i = 0; i < mg.w2.size(); i += 31)
            probe(mg.w2.data()[i], [=](AvatarCheckpoint& c) -> double& { return (c.decoders.*wm).w2.data()[i]; });
        label = "b2";
        for (Eigen::Index i = 0; i < mg.b2.size(); ++i)
            probe(mg.b2[i], [=](AvatarCheckpoint& c) -> double& { return (c.decoders.*wm).b2.data()[i]; });
    };
    label = "features";
    weights(&DecoderGrads::coarse, &DecoderSet::coarse);
    weights(&DecoderGrads::color, &DecoderSet::color);
    if (fine) {
        weights(&DecoderGrads::fine, &DecoderSet::fine);
        weights(&DecoderGrads::scale, &DecoderSet::scale);
    }
    INFO("mode " << to_string(mode) << " coarse " << coarse << " fine " << fine << " " << where);
    CHECK(worst < 1e-3);
}

}  // namespace

TEST_CASE("initial avatar is consistent and float-exact") {
    const auto c = init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 3);
    CHECK_NOTHROW(c.validate());
    CHECK(c.num_faces() == tiny_body().face_count());
    for (Eigen::Index i = 0; i < c.features.geo.size(); ++i)
        CHECK(c.features.geo.data()[i] == static_cast<double>(static_cast<float>(c.features.geo.data()[i])));
    CHECK(c == init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 3));
    CHECK_FALSE(c == init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 4));

    AvatarCheckpoint bad = c;
    bad.features.geo.conservativeResize(Eigen::NoChange, 5);
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = c;
    bad.decoders.coarse.w2.resize(3, bad.decoders.coarse.hidden_dim());
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("body context counts match the config") {
    const auto ctx = make_body_context(tiny_body(), tiny_constants());
    CHECK(ctx->body.num_faces() == tiny_body().face_count());
    CHECK(ctx->body.num_vertices() == tiny_body().vertex_count());
    CHECK(ctx->encoded.rows() == tiny_constants().encoding_dim());
}

TEST_CASE("batched decode equals per-face decode") {
    const auto c = init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 5);
    const auto ctx = make_body_context(c.body_config, c.constants);
    const auto d = decode_avatar(c, *ctx);
    const auto& tv = ctx->body.template_vertices;
    for (std::size_t i = 0; i < c.num_faces(); i += 7) {
        const auto& f = ctx->body.faces[i];
        const auto mu = encode_position((tv[f[0]] + tv[f[1]] + tv[f[2]]) / 3.0, c.constants.n_freq);
        const Eigen::VectorXd geo = c.features.geo.row(static_cast<Eigen::Index>(i)).transpose();
        const Eigen::VectorXd tex = c.features.tex.row(static_cast<Eigen::Index>(i)).transpose();
        CHECK(d.face_offsets[i] == doctest::Approx(decode_coarse(c.decoders.coarse, geo, mu, 0.15)).epsilon(1e-12));
        const auto uvd = decode_fine(c.decoders.fine, geo, mu, 3, 0.05);
        const auto col = decode_color(c.decoders.color, tex, mu, 3);
        const auto sc = decode_scale(c.decoders.scale, tex, mu, 3, 3.0);
        for (int j = 0; j < 3; ++j) {
            CHECK(d.coords[i][j].u == doctest::Approx(uvd[j].u).epsilon(1e-12));
            CHECK(d.coords[i][j].d == doctest::Approx(uvd[j].d).epsilon(1e-12));
            CHECK((d.colors[i][j] - col[j]).norm() < 1e-12);
            CHECK((d.scale_factors[i][j] - sc[j]).norm() < 1e-12);
        }
    }
}

TEST_CASE("surfel layout: coarse first, then fine face-major") {
    const auto c = init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 5);
    const auto ctx = make_body_context(c.body_config, c.constants);
    const auto d = decode_avatar(c, *ctx);
    const auto p = pose_avatar(c, *ctx, d, c.canonical);
    const std::size_t nf = c.num_faces();
    REQUIRE(p.surfels.size() == nf * 4);
    CHECK(p.surfels[0].face == 0);
    CHECK(p.surfels[nf - 1].face == static_cast<int>(nf - 1));
    CHECK(p.surfels[nf].face == 0);
    CHECK(p.surfels[nf + 3].face == 1);
    for (const auto& s : p.surfels) CHECK(s.scale.maxCoeff() <= c.constants.max_scale);
}

TEST_CASE("avatar backward matches central differences") {
    check_chain(OffsetMode::Normal, true, false, 1);
    check_chain(OffsetMode::Normal, true, true, 2);
    check_chain(OffsetMode::Normal, false, true, 3);
    check_chain(OffsetMode::Free, true, false, 4);
    check_chain(OffsetMode::Free, true, true, 5);
}

TEST_CASE("frozen geometry receives no gradient") {
    const auto c = init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 8);
    const auto ctx = make_body_context(c.body_config, c.constants);
    const auto d = decode_avatar(c, *ctx);
    const auto p = pose_avatar(c, *ctx, d, c.canonical);
    const SurfelFunctional f(p.surfels.size(), p.morphed.vertices.size(), 3);
    AvatarGrads g = AvatarGrads::zeros_like(c);
    BackwardRequest req;
    req.geometry = false;
    backward_avatar(c, *ctx, d, p.morphed, true, true, f.grads(), f.e, req, g);
    CHECK(g.geo.isZero(0.0));
    CHECK(g.decoders.coarse.w1.isZero(0.0));
    CHECK_FALSE(g.tex.isZero(0.0));
    CHECK_FALSE(g.decoders.fine.w2.isZero(0.0));
}

TEST_CASE("end-to-end directional derivative through the rasterizer") {
    auto c = init_avatar(tiny_body(), tiny_constants(), OffsetMode::Normal, 12);
    const auto ctx = make_body_context(c.body_config, c.constants);
    Camera cam = Camera::look_at(Vec3(0, 1.0, 3.0), Vec3(0, 1.0, 0), Vec3(0, 1, 0), 20, 16, 16);
    const auto posed = pose_mesh(ctx->body, c.canonical);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> U(-1, 1);
    std::vector<double> wc(16 * 16 * 3), wa(16 * 16);
    for (auto& x : wc) x = U(rng);
    for (auto& x : wa) x = U(rng);
    RenderRecord rec;
    auto render = [&](const AvatarCheckpoint& a, RenderRecord* r) {
        const auto d = decode_avatar(a, *ctx);
        const auto m = morph_avatar(a, *ctx, d, posed);
        const auto out = rasterize(assemble_surfels(*ctx, d, m, true, true), cam, Vec3(1, 1, 1), {}, r);
        double s = 0;
        for (std::size_t i = 0; i < wc.size(); ++i) s += wc[i] * out.color[i];
        for (std::size_t i = 0; i < wa.size(); ++i) s += wa[i] * out.alpha[i];
        return s;
    };
    render(c, &rec);
    const auto d = decode_avatar(c, *ctx);
    const auto m = morph_avatar(c, *ctx, d, posed);
    const auto surfels = assemble_surfels(*ctx, d, m, true, true);
    RenderGrads rg;
    rg.color = wc;
    rg.alpha = wa;
    const auto sg = rasterize_backward(rec, surfels, rg);
    AvatarGrads g = AvatarGrads::zeros_like(c);
    backward_avatar(c, *ctx, d, m, true, true, sg, {}, {}, g);

    int compared = 0;
    for (std::uint64_t dir = 0; dir < 10 && compared < 3; ++dir) {
        std::mt19937_64 r2(100 + dir);
        Eigen::MatrixXd D(c.features.geo.rows(), c.features.geo.cols());
        for (Eigen::Index i = 0; i < D.size(); ++i) D.data()[i] = U(r2);
        const double analytic = (g.geo.array() * D.array()).sum();
        const double h = 1e-5;
        AvatarCheckpoint p1 = c, p2 = c;
        p1.features.geo += h * D;
        p2.features.geo -= h * D;
        RenderRecord r1, r2r;
        const double f1 = render(p1, &r1), f2 = render(p2, &r2r);
        const auto base = testing::contributing_pairs(rec);
        if (testing::contributing_pairs(r1) != base || testing::contributing_pairs(r2r) != base) continue;
        CHECK(rel_err(analytic, (f1 - f2) / (2 * h)) < 1e-3);
        ++compared;
    }
    CHECK(compared >= 1);
}

TEST_CASE("coarse centers follow the averaged normal offsets") {
    // independent brute force on random faces: X_f + (1/3) sum_k s_k N_k
    const auto c = init_avatar(BodyConfig{}, CoreConstants{}, OffsetMode::Normal, 2);
    const auto ctx = make_body_context(c.body_config, c.constants);
    const auto posed = pose_mesh(ctx->body, c.canonical);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> U(-0.15, 0.15);
    std::vector<double> offsets(c.num_faces());
    for (auto& o : offsets) o = U(rng);
    const auto scales = face_offsets_to_vertex_scales(offsets, ctx->body.faces, posed.vertices.size());
    const auto m = morph_mesh(posed, scales);
    const auto s = embed_coarse(m, ctx->body.faces);
    for (std::size_t i = 0; i < c.num_faces(); ++i) {
        const auto& f = ctx->body.faces[i];
        Vec3 x = Vec3::Zero();
        for (int v : f) {
            double sum = 0;
            int count = 0;
            for (std::size_t j = 0; j < ctx->body.faces.size(); ++j)
                for (int w : ctx->body.faces[j])
                    if (w == v) {
                        sum += offsets[j];
                        ++count;
                    }
            x += (posed.vertices[v] + sum / count * posed.normals[v]) / 3.0;
        }
        CHECK((s[i].position - x).norm() < 1e-12);
    }
}
