#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace gma::testing {

// Contributing pairs recomputed from a forward record, independent of the
// renderer's own bookkeeping.
std::set<std::pair<int, int>> contributing_pairs(const RenderRecord& rec) {
    std::set<std::pair<int, int>> out;
    const int W = rec.camera.width, H = rec.camera.height, tile = rec.settings.tile;
    const double cut = 2.0 * std::log(1.0 / rec.settings.alpha_floor);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const auto& list = rec.tile_lists[(y / tile) * rec.tiles_x + x / tile];
            const int end = rec.pixel_end[y * W + x];
            for (int i = 0; i < end; ++i) {
                const auto& p = rec.proj[list[i]];
                const double dx = x + 0.5 - p.mean.x(), dy = y + 0.5 - p.mean.y();
                const double q = p.conic_a * dx * dx + 2 * p.conic_b * dx * dy + p.conic_c * dy * dy;
                if (q <= cut + 1e-9 && std::exp(-0.5 * q) >= rec.settings.alpha_floor)
                    out.insert({y * W + x, list[i]});
            }
        }
    return out;
}

namespace {

struct Functional {
    std::vector<double> wc, wa, wd, wn;
    double eval(const RenderOutput& o) const {
        double s = 0;
        for (std::size_t i = 0; i < wc.size(); ++i) s += wc[i] * o.color[i] + wn[i] * o.normal[i];
        for (std::size_t i = 0; i < wa.size(); ++i) s += wa[i] * o.alpha[i] + wd[i] * o.depth[i];
        return s;
    }
};

}  // namespace

double rel_err(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

SurfelSet random_scene(std::uint64_t seed, int n, int size, Camera& cam) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    cam = Camera{};
    cam.width = cam.height = size;
    cam.fx = cam.fy = 1.25 * size;
    cam.cx = cam.cy = 0.5 * size;
    SurfelSet s(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& x = s[i];
        x.position = Vec3(-0.5 + U(rng), -0.5 + U(rng), 2.0 + U(rng));
        x.scale = Vec2(0.12 + 0.25 * U(rng), 0.12 + 0.25 * U(rng));
        // tilt at most ~60 degrees away from the view axis so surfels are not edge-on
        Vec3 axis(U(rng) - 0.5, U(rng) - 0.5, U(rng) - 0.5);
        const Mat3 R = axis_angle_to_matrix(axis.normalized() * (0.2 + 0.8 * U(rng)));
        x.rotation = matrix_to_quat(R) * (0.8 + 0.4 * U(rng));
        x.color = Vec3(U(rng), U(rng), U(rng));
        x.face = i;
    }
    return s;
}

GradCheckResult check_render_gradients(const SurfelSet& surfels, const Camera& cam, std::uint64_t seed, double h) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    Functional f;
    for (auto* v : {&f.wc, &f.wn}) {
        v->resize(3 * npix);
        for (auto& x : *v) x = U(rng);
    }
    for (auto* v : {&f.wa, &f.wd}) {
        v->resize(npix);
        for (auto& x : *v) x = U(rng);
    }
    const Vec3 bg(0.3, 0.6, 0.9);
    RenderRecord rec;
    rasterize(surfels, cam, bg, {}, &rec);
    RenderGrads g{f.wc, f.wa, f.wd, f.wn};
    const SurfelGrads an = rasterize_backward(rec, surfels, g);
    const auto base_pairs = contributing_pairs(rec);

    GradCheckResult res;
    auto probe = [&](const char* what, std::size_t i, double analytic, auto&& mutate) {
        SurfelSet p = surfels, m = surfels;
        mutate(p[i], h);
        mutate(m[i], -h);
        RenderRecord rp, rm;
        const double fp = f.eval(rasterize(p, cam, bg, {}, &rp));
        const double fm = f.eval(rasterize(m, cam, bg, {}, &rm));
        if (contributing_pairs(rp) != base_pairs || contributing_pairs(rm) != base_pairs) {
            ++res.skipped;
            return;
        }
        const double num = (fp - fm) / (2 * h);
        const double e = rel_err(analytic, num);
        ++res.checked;
        if (e > res.max_rel_err) {
            res.max_rel_err = e;
            res.worst = std::string(what) + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) +
                        " numeric " + std::to_string(num);
        }
    };
    for (std::size_t i = 0; i < surfels.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            probe("position", i, an.position[i][c], [c](Surfel& s, double d) { s.position[c] += d; });
            probe("color", i, an.color[i][c], [c](Surfel& s, double d) { s.color[c] += d; });
        }
        for (int c = 0; c < 2; ++c)
            probe("scale", i, an.scale[i][c], [c](Surfel& s, double d) { s.scale[c] += d; });
        for (int c = 0; c < 4; ++c)
            probe("rotation", i, an.rotation[i][c], [c](Surfel& s, double d) { s.rotation[c] += d; });
    }
    return res;
}

GradCheckResult check_mlp_gradients(const MlpWeights& w, std::uint64_t seed, int batch, double h) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    Eigen::MatrixXd input(w.input_dim(), batch), probe(w.output_dim(), batch);
    for (Eigen::Index i = 0; i < input.size(); ++i) input(i) = U(rng);
    for (Eigen::Index i = 0; i < probe.size(); ++i) probe(i) = U(rng);

    GradTape tape;
    mlp_forward_batch(w, input, &tape);
    MlpGrad g = MlpGrad::zeros_like(w);
    const Eigen::MatrixXd g_in = mlp_backward(w, tape, probe, &g);

    auto value = [&](const MlpWeights& ww, const Eigen::MatrixXd& in) {
        return (mlp_forward_batch(ww, in).array() * probe.array()).sum();
    };
    GradCheckResult res;
    auto record = [&](const std::string& what, double analytic, double num) {
        const double e = rel_err(analytic, num);
        ++res.checked;
        if (e > res.max_rel_err) {
            res.max_rel_err = e;
            res.worst = what + " analytic " + std::to_string(analytic) + " numeric " + std::to_string(num);
        }
    };
    // ReLU kinks: skip entries whose perturbation flips any pre-activation sign
    auto same_pattern = [&](const MlpWeights& a, const Eigen::MatrixXd& ia) {
        if (w.activation != Activation::Relu) return true;
        GradTape t;
        mlp_forward_batch(a, ia, &t);
        return ((t.pre.array() > 0) == (tape.pre.array() > 0)).all();
    };
    auto check_param = [&](const std::string& name, auto member, const auto& grad) {
        // sample a bounded number of entries per tensor to keep runtime small
        MlpWeights probe_w = w;
        auto& tensor = probe_w.*member;
        const Eigen::Index n = tensor.size();
        const Eigen::Index stride = std::max<Eigen::Index>(1, n / 40);
        for (Eigen::Index k = 0; k < n; k += stride) {
            const double orig = tensor(k);
            tensor(k) = orig + h;
            const bool okp = same_pattern(probe_w, input);
            const double fp = value(probe_w, input);
            tensor(k) = orig - h;
            const bool okm = same_pattern(probe_w, input);
            const double fm = value(probe_w, input);
            tensor(k) = orig;
            if (!okp || !okm) {
                ++res.skipped;
                continue;
            }
            record(name + "[" + std::to_string(k) + "]", grad(k), (fp - fm) / (2 * h));
        }
    };
    check_param("w1", &MlpWeights::w1, g.w1);
    check_param("b1", &MlpWeights::b1, g.b1);
    check_param("w2", &MlpWeights::w2, g.w2);
    check_param("b2", &MlpWeights::b2, g.b2);
    for (Eigen::Index k = 0; k < input.size(); ++k) {
        Eigen::MatrixXd ip = input, im = input;
        ip(k) += h;
        im(k) -= h;
        if (!same_pattern(w, ip) || !same_pattern(w, im)) {
            ++res.skipped;
            continue;
        }
        record("input[" + std::to_string(k) + "]", g_in(k), (value(w, ip) - value(w, im)) / (2 * h));
    }
    return res;
}

}  // namespace gma::testing
