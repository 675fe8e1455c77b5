#include "support/gradcheck.hpp"

#include "gma/errors.hpp"
#include "gma/losses.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace gma;
using testing::rel_err;

namespace {

std::vector<double> random_image(std::uint64_t seed, std::size_t n, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = U(rng);
    return v;
}

// Brute-force windowed SSIM straight from the definition.
double reference_ssim(const std::vector<double>& a, const std::vector<double>& b, int W, int H, int C) {
    double g[11][11], sum = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) sum += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
    double total = 0;
    int count = 0;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y + 11 <= H; ++y)
            for (int x = 0; x + 11 <= W; ++x) {
                double mx = 0, my = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double w = g[i][j] / sum;
                        mx += w * a[((y + i) * W + x + j) * C + c];
                        my += w * b[((y + i) * W + x + j) * C + c];
                    }
                double vx = 0, vy = 0, cxy = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double w = g[i][j] / sum;
                        const double dx = a[((y + i) * W + x + j) * C + c] - mx, dy = b[((y + i) * W + x + j) * C + c] - my;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cxy += w * dx * dy;
                    }
                const double c1 = 1e-4, c2 = 9e-4;
                total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
    return total / count;
}

template <typename F>
double fd(F&& f, std::vector<double> x, std::size_t i, double h) {
    x[i] += h;
    const double p = f(x);
    x[i] -= 2 * h;
    return (p - f(x)) / (2 * h);
}

std::vector<Face> tetra_faces() { return {{0, 2, 1}, {0, 1, 3}, {1, 2, 3}, {0, 3, 2}}; }

std::vector<Vec3> unit_tetrahedron() {
    const double s = 1.0 / std::sqrt(3.0);
    return {Vec3(s, s, s), Vec3(s, -s, -s), Vec3(-s, s, -s), Vec3(-s, -s, s)};
}

}  // namespace

TEST_CASE("L1 loss values and gradient") {
    const auto a = random_image(1, 30), b = random_image(2, 30);
    CHECK(l1_loss(a, a).value == 0.0);
    CHECK(l1_loss(std::vector<double>(12, 1.0), std::vector<double>(12, 0.0)).value == 1.0);
    const auto l = l1_loss(a, b);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(l.grad[i] == doctest::Approx(fd([&](const std::vector<double>& x) { return l1_loss(x, b).value; }, a, i, 1e-7)).epsilon(1e-4));
    CHECK_THROWS_AS(l1_loss(a, random_image(3, 29)), ShapeError);
}

TEST_CASE("SSIM matches a brute-force evaluation") {
    const int W = 17, H = 14, C = 3;
    const auto a = random_image(4, W * H * C), b = random_image(5, W * H * C);
    CHECK(ssim(a, b, W, H, C) == doctest::Approx(reference_ssim(a, b, W, H, C)).epsilon(1e-12));
    CHECK(ssim_loss(a, a, W, H, C).value == doctest::Approx(0.0).epsilon(1e-14));
    CHECK_THROWS_AS(ssim_loss(random_image(1, 30), random_image(1, 30), 10, 3, 1), ShapeError);
}

TEST_CASE("SSIM penalizes a constant brightness shift") {
    const int W = 16, H = 16;
    const auto t = random_image(6, W * H * 3, 0.0, 0.5);
    std::vector<double> p(t);
    for (auto& v : p) v += 0.5;
    const double loss = ssim_loss(p, t, W, H, 3).value;
    CHECK(loss == doctest::Approx(1.0 - reference_ssim(p, t, W, H, 3)).epsilon(1e-12));
    CHECK(loss > 0.2);
}

TEST_CASE("SSIM gradient matches central differences") {
    const int W = 13, H = 12, C = 2;
    const auto a = random_image(7, W * H * C), b = random_image(8, W * H * C);
    const auto l = ssim_loss(a, b, W, H, C);
    auto f = [&](const std::vector<double>& x) { return ssim_loss(x, b, W, H, C).value; };
    for (std::size_t i = 0; i < a.size(); i += 7) CHECK(rel_err(l.grad[i], fd(f, a, i, 1e-6)) < 1e-3);
}

TEST_CASE("mask loss values and floater penalty") {
    const std::vector<double> ones(20, 1.0), zeros(20, 0.0);
    CHECK(mask_loss(ones, zeros).value == 1.0);
    CHECK(mask_loss(zeros, zeros).value == 0.0);

    Camera cam;
    cam.width = cam.height = 16;
    cam.fx = cam.fy = 20;
    cam.cx = cam.cy = 8;
    Surfel s;
    s.position = Vec3(0, 0, 2);
    s.scale = Vec2(0.3, 0.3);
    SurfelSet scene{s};
    const auto r0 = rasterize(scene, cam, Vec3::Zero());
    std::vector<double> mask(256);
    for (int i = 0; i < 256; ++i) mask[i] = r0.alpha[i] >= 0.5 ? 1.0 : 0.0;
    Surfel floater = s;
    floater.position = Vec3(0.7, 0.7, 2);
    floater.scale = Vec2(0.1, 0.1);
    scene.push_back(floater);
    const auto r1 = rasterize(scene, cam, Vec3::Zero());
    CHECK(mask_loss(r1.alpha, mask).value > mask_loss(r0.alpha, mask).value);
}

TEST_CASE("Laplacian loss on the regular unit tetrahedron") {
    const auto v = unit_tetrahedron();
    // brute force: every vertex neighbors the other three
    double oracle = 0;
    for (int i = 0; i < 4; ++i) {
        Vec3 mean = Vec3::Zero();
        for (int j = 0; j < 4; ++j)
            if (j != i) mean += v[j] / 3.0;
        oracle += (v[i] - mean).squaredNorm();
    }
    const auto l = laplacian_loss(v, tetra_faces());
    CHECK(oracle == doctest::Approx(64.0 / 9.0).epsilon(1e-12));
    CHECK(std::abs(l.value - 64.0 / 9.0) < 1e-12);
}

TEST_CASE("Laplacian loss is zero on a flat regular grid interior") {
    std::vector<Vec3> v;
    std::vector<Face> f;
    const int n = 5;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) v.emplace_back(x, y, 0);
    for (int y = 0; y + 1 < n; ++y)
        for (int x = 0; x + 1 < n; ++x) {
            const int a = y * n + x;
            f.push_back({a, a + 1, a + n + 1});
            f.push_back({a, a + n + 1, a + n});
        }
    const auto l = laplacian_loss(v, f);
    // interior vertex of this triangulation: 6 neighbors, symmetric about it
    CHECK((l.grad.size() == v.size()));
    double interior = 0;
    for (int y = 1; y + 1 < n; ++y)
        for (int x = 1; x + 1 < n; ++x) {
            Vec3 mean = Vec3::Zero();
            const int i = y * n + x;
            for (int j : {i - 1, i + 1, i - n, i + n, i - n - 1, i + n + 1}) mean += v[j] / 6.0;
            interior += (v[i] - mean).squaredNorm();
        }
    CHECK(interior == 0.0);
}

TEST_CASE("Laplacian gradient matches central differences") {
    auto v = unit_tetrahedron();
    std::mt19937_64 rng(3);
    std::normal_distribution<double> N(0, 0.2);
    for (auto& x : v) x += Vec3(N(rng), N(rng), N(rng));
    const auto faces = tetra_faces();
    const auto l = laplacian_loss(v, faces);
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c) {
            auto p = v, m = v;
            p[i][c] += 1e-6;
            m[i][c] -= 1e-6;
            const double num = (laplacian_loss(p, faces).value - laplacian_loss(m, faces).value) / 2e-6;
            CHECK(rel_err(l.grad[i][c], num) < 1e-3);
        }
}

TEST_CASE("Laplacian loss rejects isolated vertices") {
    auto v = unit_tetrahedron();
    v.emplace_back(5, 5, 5);
    CHECK_THROWS_AS(laplacian_loss(v, tetra_faces()), TopologyError);
}

TEST_CASE("edge loss values") {
    const auto base = unit_tetrahedron();
    const auto faces = tetra_faces();
    CHECK(edge_loss(base, base, faces).value == 0.0);
    std::vector<Vec3> stretched;
    for (const auto& x : base) stretched.push_back(1.1 * x);
    CHECK(std::abs(edge_loss(stretched, base, faces).value - 0.01) < 1e-9);
    for (double s : {0.5, 2.0, 3.7}) {
        std::vector<Vec3> scaled;
        for (const auto& x : base) scaled.push_back(s * x + Vec3(1, 2, 3));
        CHECK(edge_loss(scaled, base, faces).value == doctest::Approx((s - 1) * (s - 1)).epsilon(1e-12));
    }
    auto degenerate = base;
    degenerate[1] = degenerate[0];
    CHECK_THROWS_AS(edge_loss(base, degenerate, faces), DegenerateEdgeError);
}

TEST_CASE("edge gradient matches central differences") {
    const auto base = unit_tetrahedron();
    auto m = base;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> N(0, 0.1);
    for (auto& x : m) x += Vec3(N(rng), N(rng), N(rng));
    const auto faces = tetra_faces();
    const auto l = edge_loss(m, base, faces);
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c) {
            auto p = m, q = m;
            p[i][c] += 1e-6;
            q[i][c] -= 1e-6;
            CHECK(rel_err(l.grad[i][c], (edge_loss(p, base, faces).value - edge_loss(q, base, faces).value) / 2e-6) < 1e-3);
        }
}

TEST_CASE("normal loss on a flat patch facing the camera") {
    Camera cam;
    cam.width = cam.height = 16;
    cam.fx = cam.fy = 20;
    cam.cx = cam.cy = 8;
    SurfelSet s;
    for (int y = -3; y <= 3; ++y)
        for (int x = -3; x <= 3; ++x) {
            Surfel a;
            a.position = Vec3(0.15 * x, 0.15 * y, 2.0);
            a.scale = Vec2(0.12, 0.12);
            s.push_back(a);
        }
    const auto r = rasterize(s, cam, Vec3::Zero());
    const auto l = normal_loss(r, cam);
    CHECK(l.value < 1e-3);

    // blended normals orthogonal to the depth normals
    RenderOutput ortho = r;
    for (std::size_t p = 0; p < r.alpha.size(); ++p) {
        ortho.normal[3 * p] = r.alpha[p];
        ortho.normal[3 * p + 1] = 0;
        ortho.normal[3 * p + 2] = 0;
    }
    CHECK(normal_loss(ortho, cam).value == doctest::Approx(1.0).epsilon(1e-12));

    const auto empty = rasterize({}, cam, Vec3::Zero());
    CHECK(normal_loss(empty, cam).value == 0.0);
}

TEST_CASE("normal loss gradients match central differences") {
    Camera cam;
    SurfelSet s = testing::random_scene(21, 8, 12, cam);
    for (auto& x : s) x.scale *= 2.0;
    RenderOutput r = rasterize(s, cam, Vec3::Zero());
    const auto l = normal_loss(r, cam);
    for (std::size_t i = 0; i < r.normal.size(); i += 5) {
        RenderOutput p = r, m = r;
        p.normal[i] += 1e-6;
        m.normal[i] -= 1e-6;
        CHECK(rel_err(l.grad_normal[i], (normal_loss(p, cam).value - normal_loss(m, cam).value) / 2e-6) < 1e-3);
    }
    for (std::size_t i = 0; i < r.depth.size(); i += 3) {
        RenderOutput p = r, m = r;
        p.depth[i] += 1e-6;
        m.depth[i] -= 1e-6;
        CHECK(rel_err(l.grad_depth[i], (normal_loss(p, cam).value - normal_loss(m, cam).value) / 2e-6) < 1e-3);
    }
}

TEST_CASE("gradient proxy loss") {
    const int W = 12, H = 10;
    const auto a = random_image(10, W * H * 3), b = random_image(11, W * H * 3);
    CHECK(gradient_proxy_loss(a, a, W, H, 3).value == 0.0);
    const auto l = gradient_proxy_loss(a, b, W, H, 3);
    auto f = [&](const std::vector<double>& x) { return gradient_proxy_loss(x, b, W, H, 3).value; };
    for (std::size_t i = 0; i < a.size(); i += 11) CHECK(rel_err(l.grad[i], fd(f, a, i, 1e-8)) < 1e-4);
}

TEST_CASE("stage presets") {
    const auto s1 = LossWeights::stage1(), s2 = LossWeights::stage2();
    CHECK(s1.lap == 1000);
    CHECK(s1.edge == 100);
    CHECK(s1.normal == 0.05);
    CHECK(s2.lap == 100);
    CHECK(s2.edge == 10);
    CHECK(s2.normal == 0);
    CHECK(s1.percep == 0);
    CHECK(LossWeights::from_json(s1.to_json()) == s1);
    LossWeights bad;
    bad.l1 = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("total loss is linear in the weights") {
    Camera cam;
    SurfelSet s = testing::random_scene(5, 10, 16, cam);
    const auto r = rasterize(s, cam, Vec3(1, 1, 1));
    const auto target = random_image(12, 16 * 16 * 3);
    std::vector<double> mask(256);
    for (int i = 0; i < 256; ++i) mask[i] = i % 3 == 0;
    const auto base = unit_tetrahedron();
    std::vector<Vec3> morphed;
    for (const auto& v : base) morphed.push_back(1.05 * v + Vec3(0.01, 0, 0));
    const auto faces = tetra_faces();

    const LossWeights zero;
    CHECK(total_loss(r, cam, target, mask, morphed, base, faces, zero).value == 0.0);
    LossWeights only_l1;
    only_l1.l1 = 1;
    CHECK(total_loss(r, cam, target, mask, morphed, base, faces, only_l1).value == l1_loss(r.color, target).value);

    LossWeights a = LossWeights::stage1(), b = LossWeights::stage2();
    b.percep = 0.3;
    LossWeights sum{a.lap + b.lap, a.edge + b.edge, a.normal + b.normal, a.l1 + b.l1, a.ssim + b.ssim, a.mask + b.mask,
                    a.percep + b.percep};
    const double la = total_loss(r, cam, target, mask, morphed, base, faces, a).value;
    const double lb = total_loss(r, cam, target, mask, morphed, base, faces, b).value;
    CHECK(total_loss(r, cam, target, mask, morphed, base, faces, sum).value == doctest::Approx(la + lb).epsilon(1e-12));
    CHECK(la >= 0);
}
