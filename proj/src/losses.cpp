#include "gma/losses.hpp"

#include "gma/errors.hpp"

#include <algorithm>
#include <cmath>

namespace gma {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b)
        throw ShapeError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

std::array<double, kWindow> gaussian_window() {
    std::array<double, kWindow> g{};
    double sum = 0;
    for (int i = 0; i < kWindow; ++i) {
        const double x = i - kWindow / 2;
        g[i] = std::exp(-x * x / (2 * kSigma * kSigma));
        sum += g[i];
    }
    for (auto& v : g) v /= sum;
    return g;
}

// Valid separable Gaussian filter of one plane: (H, W) -> (H-10, W-10).
struct Filter {
    int W, H, OW, OH;
    std::array<double, kWindow> g = gaussian_window();

    std::vector<double> apply(const std::vector<double>& in) const {
        std::vector<double> tmp(static_cast<std::size_t>(H) * OW, 0.0), out(static_cast<std::size_t>(OH) * OW, 0.0);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < OW; ++x) {
                double s = 0;
                for (int k = 0; k < kWindow; ++k) s += g[k] * in[y * W + x + k];
                tmp[y * OW + x] = s;
            }
        for (int y = 0; y < OH; ++y)
            for (int x = 0; x < OW; ++x) {
                double s = 0;
                for (int k = 0; k < kWindow; ++k) s += g[k] * tmp[(y + k) * OW + x];
                out[y * OW + x] = s;
            }
        return out;
    }

    // Adjoint of apply.
    std::vector<double> transpose(const std::vector<double>& gout) const {
        std::vector<double> tmp(static_cast<std::size_t>(H) * OW, 0.0), gin(static_cast<std::size_t>(H) * W, 0.0);
        for (int y = 0; y < OH; ++y)
            for (int x = 0; x < OW; ++x)
                for (int k = 0; k < kWindow; ++k) tmp[(y + k) * OW + x] += g[k] * gout[y * OW + x];
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < OW; ++x)
                for (int k = 0; k < kWindow; ++k) gin[y * W + x + k] += g[k] * tmp[y * OW + x];
        return gin;
    }
};

std::vector<double> plane(std::span<const double> img, int n, int channels, int c) {
    std::vector<double> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[i] = img[static_cast<std::size_t>(i) * channels + c];
    return p;
}

// Mean SSIM and optionally its gradient w.r.t. `a`.
double ssim_impl(std::span<const double> a, std::span<const double> b, int W, int H, int C, std::vector<double>* grad) {
    require_same(a.size(), b.size(), "ssim");
    if (W <= 0 || H <= 0 || C <= 0 || a.size() != static_cast<std::size_t>(W) * H * C)
        throw ShapeError("ssim: image dimensions do not match the buffer");
    if (W < kWindow || H < kWindow) throw ShapeError("ssim: image smaller than the 11x11 window");
    const Filter f{W, H, W - kWindow + 1, H - kWindow + 1};
    const int n = W * H, no = f.OW * f.OH;
    const double norm = 1.0 / (static_cast<double>(no) * C);
    if (grad) grad->assign(a.size(), 0.0);
    double total = 0;
    for (int c = 0; c < C; ++c) {
        const auto x = plane(a, n, C, c), y = plane(b, n, C, c);
        std::vector<double> xx(n), yy(n), xy(n);
        for (int i = 0; i < n; ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = f.apply(x), my = f.apply(y), exx = f.apply(xx), eyy = f.apply(yy), exy = f.apply(xy);
        std::vector<double> g_ex, g_exx, g_exy;
        if (grad) {
            g_ex.assign(no, 0.0);
            g_exx.assign(no, 0.0);
            g_exy.assign(no, 0.0);
        }
        for (int o = 0; o < no; ++o) {
            const double vx = exx[o] - mx[o] * mx[o], vy = eyy[o] - my[o] * my[o], cxy = exy[o] - mx[o] * my[o];
            const double A1 = 2 * mx[o] * my[o] + kC1, A2 = 2 * cxy + kC2;
            const double B1 = mx[o] * mx[o] + my[o] * my[o] + kC1, B2 = vx + vy + kC2;
            const double s = A1 * A2 / (B1 * B2);
            total += s;
            if (!grad) continue;
            const double ds_dmx = 2 * my[o] * A2 / (B1 * B2) - s * 2 * mx[o] / B1;
            const double ds_dcxy = 2 * A1 / (B1 * B2);
            const double ds_dvx = -s / B2;
            g_ex[o] = ds_dmx - 2 * mx[o] * ds_dvx - my[o] * ds_dcxy;
            g_exx[o] = ds_dvx;
            g_exy[o] = ds_dcxy;
        }
        if (!grad) continue;
        const auto t_ex = f.transpose(g_ex), t_exx = f.transpose(g_exx), t_exy = f.transpose(g_exy);
        for (int i = 0; i < n; ++i)
            (*grad)[static_cast<std::size_t>(i) * C + c] = norm * (t_ex[i] + 2 * x[i] * t_exx[i] + y[i] * t_exy[i]);
    }
    return total * norm;
}

std::vector<std::vector<int>> neighbors(std::span<const Face> faces, std::size_t n_vertices) {
    std::vector<std::vector<int>> nb(n_vertices);
    for (const auto& e : unique_edges(faces)) {
        if (e[0] < 0 || e[1] < 0 || static_cast<std::size_t>(std::max(e[0], e[1])) >= n_vertices)
            throw TopologyError("edge references a vertex outside the mesh");
        nb[e[0]].push_back(e[1]);
        nb[e[1]].push_back(e[0]);
    }
    for (std::size_t v = 0; v < n_vertices; ++v)
        if (nb[v].empty()) throw TopologyError("isolated vertex " + std::to_string(v));
    return nb;
}

// 2x2 average pooling of an interleaved image (odd trailing rows/cols dropped).
std::vector<double> pool(std::span<const double> img, int W, int H, int C) {
    const int w = W / 2, h = H / 2;
    std::vector<double> out(static_cast<std::size_t>(w) * h * C);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < C; ++c)
                out[(y * w + x) * C + c] = 0.25 * (img[((2 * y) * W + 2 * x) * C + c] + img[((2 * y) * W + 2 * x + 1) * C + c] +
                                                   img[((2 * y + 1) * W + 2 * x) * C + c] +
                                                   img[((2 * y + 1) * W + 2 * x + 1) * C + c]);
    return out;
}

}  // namespace

LossWeights LossWeights::stage1() {
    LossWeights w;
    w.lap = 1000;
    w.edge = 100;
    w.normal = 0.05;
    w.l1 = 0.8;
    w.ssim = 0.2;
    w.mask = 1.0;
    return w;
}

LossWeights LossWeights::stage2() {
    LossWeights w;
    w.lap = 100;
    w.edge = 10;
    w.normal = 0;
    w.l1 = 0.8;
    w.ssim = 0.2;
    w.mask = 1.0;
    return w;
}

void LossWeights::validate() const {
    for (double v : {lap, edge, normal, l1, ssim, mask, percep})
        if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and non-negative");
}

nlohmann::json LossWeights::to_json() const {
    return {{"lap", lap}, {"edge", edge}, {"normal", normal}, {"l1", l1},
            {"ssim", ssim}, {"mask", mask}, {"percep", percep}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
    LossWeights w;
    try {
        w.lap = j.at("lap").get<double>();
        w.edge = j.at("edge").get<double>();
        w.normal = j.at("normal").get<double>();
        w.l1 = j.at("l1").get<double>();
        w.ssim = j.at("ssim").get<double>();
        w.mask = j.at("mask").get<double>();
        w.percep = j.value("percep", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("loss weights: ") + e.what());
    }
    w.validate();
    return w;
}

ImageLoss l1_loss(std::span<const double> pred, std::span<const double> target) {
    require_same(pred.size(), target.size(), "l1_loss");
    ImageLoss out;
    out.grad.assign(pred.size(), 0.0);
    if (pred.empty()) return out;
    const double inv = 1.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        out.value += std::abs(d);
        out.grad[i] = d > 0 ? inv : (d < 0 ? -inv : 0.0);
    }
    out.value *= inv;
    return out;
}

ImageLoss ssim_loss(std::span<const double> pred, std::span<const double> target, int width, int height,
                    int channels) {
    ImageLoss out;
    out.value = 1.0 - ssim_impl(pred, target, width, height, channels, &out.grad);
    for (auto& g : out.grad) g = -g;
    return out;
}

double ssim(std::span<const double> a, std::span<const double> b, int width, int height, int channels) {
    return ssim_impl(a, b, width, height, channels, nullptr);
}

ImageLoss mask_loss(std::span<const double> alpha, std::span<const double> mask) {
    return l1_loss(alpha, mask);
}

VertexLoss laplacian_loss(std::span<const Vec3> vertices, std::span<const Face> faces) {
    const auto nb = neighbors(faces, vertices.size());
    const std::size_t n = vertices.size();
    std::vector<Vec3> delta(n);
    VertexLoss out;
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 mean = Vec3::Zero();
        for (int j : nb[i]) mean += vertices[j];
        delta[i] = vertices[i] - mean / static_cast<double>(nb[i].size());
        out.value += delta[i].squaredNorm();
    }
    out.grad.assign(n, Vec3::Zero());
    for (std::size_t i = 0; i < n; ++i) {
        out.grad[i] += 2.0 * delta[i];
        const Vec3 share = 2.0 * delta[i] / static_cast<double>(nb[i].size());
        for (int j : nb[i]) out.grad[j] -= share;
    }
    return out;
}

VertexLoss edge_loss(std::span<const Vec3> morphed, std::span<const Vec3> base, std::span<const Face> faces) {
    require_same(morphed.size(), base.size(), "edge_loss");
    const auto edges = unique_edges(faces);
    VertexLoss out;
    out.grad.assign(morphed.size(), Vec3::Zero());
    if (edges.empty()) return out;
    const double inv = 1.0 / static_cast<double>(edges.size());
    for (const auto& [a, b] : edges) {
        const double lb = (base[a] - base[b]).norm();
        if (!(lb > 0)) throw DegenerateEdgeError(a, b);
        const Vec3 d = morphed[a] - morphed[b];
        const double lm = d.norm();
        const double r = (lm - lb) / lb;
        out.value += r * r;
        if (lm > 0) {
            const Vec3 g = inv * 2.0 * r / lb * d / lm;
            out.grad[a] += g;
            out.grad[b] -= g;
        }
    }
    out.value *= inv;
    return out;
}

NormalLoss normal_loss(const RenderOutput& render, const Camera& cam) {
    const std::size_t npix = static_cast<std::size_t>(render.width) * render.height;
    if (render.width != cam.width || render.height != cam.height)
        throw ShapeError("normal_loss: render does not match the camera");
    NormalLoss out;
    out.grad_normal.assign(3 * npix, 0.0);
    out.grad_depth.assign(npix, 0.0);
    const auto nd = depth_to_normal(render.depth, render.alpha, cam);
    std::vector<std::size_t> valid;
    for (std::size_t p = 0; p < npix; ++p) {
        const Vec3 d(nd[3 * p], nd[3 * p + 1], nd[3 * p + 2]);
        const Vec3 b(render.normal[3 * p], render.normal[3 * p + 1], render.normal[3 * p + 2]);
        if (render.alpha[p] >= 0.5 && d.squaredNorm() > 0 && b.squaredNorm() > 1e-24) valid.push_back(p);
    }
    if (valid.empty()) return out;
    const double inv = 1.0 / static_cast<double>(valid.size());
    std::vector<double> g_nd(3 * npix, 0.0);
    for (std::size_t p : valid) {
        const Vec3 d(nd[3 * p], nd[3 * p + 1], nd[3 * p + 2]);
        const Vec3 b(render.normal[3 * p], render.normal[3 * p + 1], render.normal[3 * p + 2]);
        const double len = b.norm();
        const Vec3 u = b / len;
        out.value += 1.0 - u.dot(d);
        const Vec3 g_u = -inv * d;
        const Vec3 g_b = (g_u - u * u.dot(g_u)) / len;
        const Vec3 g_d = -inv * u;
        for (int k = 0; k < 3; ++k) {
            out.grad_normal[3 * p + k] = g_b[k];
            g_nd[3 * p + k] = g_d[k];
        }
    }
    out.value *= inv;
    depth_to_normal_backward(render.depth, render.alpha, cam, g_nd, out.grad_depth);
    return out;
}

ImageLoss gradient_proxy_loss(std::span<const double> pred, std::span<const double> target, int width, int height,
                              int channels, int levels) {
    require_same(pred.size(), target.size(), "gradient_proxy_loss");
    if (pred.size() != static_cast<std::size_t>(width) * height * channels)
        throw ShapeError("gradient_proxy_loss: image dimensions do not match the buffer");
    ImageLoss out;
    out.grad.assign(pred.size(), 0.0);
    std::vector<double> p(pred.begin(), pred.end()), t(target.begin(), target.end());
    // gradient of the current level w.r.t. level-0 pixels is a box spread: each
    // pooled pixel is the mean of a (2^l x 2^l) block
    int W = width, H = height, block = 1;
    for (int l = 0; l < levels && W >= 2 && H >= 2; ++l) {
        const double n = static_cast<double>((W - 1) * H + W * (H - 1)) * channels;
        auto add = [&](int i0, int i1, int c) {
            const double d = (p[i1 * channels + c] - p[i0 * channels + c]) - (t[i1 * channels + c] - t[i0 * channels + c]);
            out.value += std::abs(d) / n;
            const double g = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n;
            if (g == 0) return;
            const double share = g / (block * block);
            for (int s : {i1, i0}) {
                const int sx = (s % W) * block, sy = (s / W) * block;
                for (int yy = sy; yy < sy + block; ++yy)
                    for (int xx = sx; xx < sx + block; ++xx)
                        out.grad[(static_cast<std::size_t>(yy) * width + xx) * channels + c] += (s == i1 ? share : -share);
            }
        };
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < channels; ++c) {
                    if (x + 1 < W) add(y * W + x, y * W + x + 1, c);
                    if (y + 1 < H) add(y * W + x, (y + 1) * W + x, c);
                }
        p = pool(p, W, H, channels);
        t = pool(t, W, H, channels);
        W /= 2;
        H /= 2;
        block *= 2;
    }
    return out;
}

TotalLoss total_loss(const RenderOutput& render, const Camera& cam, std::span<const double> target_rgb,
                     std::span<const double> target_mask, std::span<const Vec3> morphed, std::span<const Vec3> base,
                     std::span<const Face> faces, const LossWeights& w) {
    w.validate();
    const std::size_t npix = static_cast<std::size_t>(render.width) * render.height;
    TotalLoss out;
    auto& rg = out.render_grads;
    rg.color.assign(3 * npix, 0.0);
    rg.alpha.assign(npix, 0.0);
    rg.depth.assign(npix, 0.0);
    rg.normal.assign(3 * npix, 0.0);
    out.grad_morphed.assign(morphed.size(), Vec3::Zero());
    auto axpy = [](std::vector<double>& dst, double a, const std::vector<double>& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
    };

    if (w.l1 > 0) {
        const auto l = l1_loss(render.color, target_rgb);
        out.terms["l1"] = l.value;
        out.value += w.l1 * l.value;
        axpy(rg.color, w.l1, l.grad);
    }
    if (w.ssim > 0) {
        const auto l = ssim_loss(render.color, target_rgb, render.width, render.height, 3);
        out.terms["ssim"] = l.value;
        out.value += w.ssim * l.value;
        axpy(rg.color, w.ssim, l.grad);
    }
    if (w.mask > 0) {
        const auto l = mask_loss(render.alpha, target_mask);
        out.terms["mask"] = l.value;
        out.value += w.mask * l.value;
        axpy(rg.alpha, w.mask, l.grad);
    }
    if (w.percep > 0) {
        const auto l = gradient_proxy_loss(render.color, target_rgb, render.width, render.height, 3);
        out.terms["percep"] = l.value;
        out.value += w.percep * l.value;
        axpy(rg.color, w.percep, l.grad);
    }
    if (w.normal > 0) {
        const auto l = normal_loss(render, cam);
        out.terms["normal"] = l.value;
        out.value += w.normal * l.value;
        axpy(rg.normal, w.normal, l.grad_normal);
        axpy(rg.depth, w.normal, l.grad_depth);
    }
    if (w.lap > 0) {
        require_same(morphed.size(), base.size(), "total_loss");
        std::vector<Vec3> disp(morphed.size());
        for (std::size_t i = 0; i < disp.size(); ++i) disp[i] = morphed[i] - base[i];
        const auto l = laplacian_loss(disp, faces);
        out.terms["lap"] = l.value;
        out.value += w.lap * l.value;
        for (std::size_t i = 0; i < disp.size(); ++i) out.grad_morphed[i] += w.lap * l.grad[i];
    }
    if (w.edge > 0) {
        const auto l = edge_loss(morphed, base, faces);
        out.terms["edge"] = l.value;
        out.value += w.edge * l.value;
        for (std::size_t i = 0; i < morphed.size(); ++i) out.grad_morphed[i] += w.edge * l.grad[i];
    }
    if (!std::isfinite(out.value)) throw NumericError("total_loss: non-finite loss");
    return out;
}

}  // namespace gma
