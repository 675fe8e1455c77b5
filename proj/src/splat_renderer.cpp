#include "gma/splat_renderer.hpp"

#include "gma/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

namespace gma {

namespace {

constexpr int kChannels = 8;  // r g b | depth | nx ny nz | alpha

template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
    if (threads <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    const int n = std::min(threads, count);
    pool.reserve(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

// Projects one surfel; returns false when culled or singular.
bool project_full(const Surfel& s, const Camera& cam, const RasterSettings& st, RenderRecord::Projected& p,
                  bool& singular) {
    singular = false;
    p.active = false;
    p.p_cam = cam.R * s.position + cam.t;
    const double z = p.p_cam.z();
    if (!(z >= st.near)) return false;
    const double x = p.p_cam.x(), y = p.p_cam.y();
    p.mean = Vec2(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    p.J << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
    p.axes = quat_to_matrix(s.rotation);
    p.B.col(0) = s.scale[0] * (cam.R * p.axes.col(0));
    p.B.col(1) = s.scale[1] * (cam.R * p.axes.col(1));
    p.M = p.J * p.B;
    Mat2 cov = p.M * p.M.transpose();
    cov(0, 0) += st.lowpass;
    cov(1, 1) += st.lowpass;
    const double half_trace = 0.5 * (cov(0, 0) + cov(1, 1));
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    const double disc = std::sqrt(std::max(0.0, half_trace * half_trace - det));
    const double lmax = half_trace + disc;
    const double lmin = half_trace - disc;
    if (!(lmin > 0.0) || !(det > 0.0) || lmax / lmin > st.max_condition) {
        singular = true;
        return false;
    }
    p.conic_a = cov(1, 1) / det;
    p.conic_b = -cov(0, 1) / det;
    p.conic_c = cov(0, 0) / det;
    p.radius = std::sqrt(2.0 * std::log(1.0 / st.alpha_floor) * lmax) + 1.0;
    p.n_cam = cam.R * p.axes.col(2);
    p.flip = p.n_cam.dot(p.p_cam) > 0.0 ? -1.0 : 1.0;
    p.n_cam *= p.flip;
    p.active = true;
    return true;
}

struct PixelState {
    double T = 1.0;
    double acc[kChannels - 1] = {0, 0, 0, 0, 0, 0, 0};
    int id = -1;
    int end = 0;
};

// Composites one pixel over `list` (depth-sorted surfel indices).
// Identical arithmetic is used by the tiled and the naive path.
PixelState composite(const RenderRecord& rec, const std::vector<int>& faces, const std::vector<int>& list,
                     double px, double py, double q_cut) {
    PixelState st;
    const auto& settings = rec.settings;
    const int n = static_cast<int>(list.size());
    int i = 0;
    for (; i < n; ++i) {
        const int idx = list[i];
        const auto& p = rec.proj[idx];
        const double dx = px - p.mean.x(), dy = py - p.mean.y();
        const double q = p.conic_a * dx * dx + 2.0 * p.conic_b * dx * dy + p.conic_c * dy * dy;
        if (q > q_cut) continue;
        const double w = std::min(1.0, std::exp(-0.5 * q));
        if (w < settings.alpha_floor) continue;
        const double wt = w * st.T;
        const Vec3& c = rec.colors[idx];
        st.acc[0] += c.x() * wt;
        st.acc[1] += c.y() * wt;
        st.acc[2] += c.z() * wt;
        st.acc[3] += p.p_cam.z() * wt;
        st.acc[4] += p.n_cam.x() * wt;
        st.acc[5] += p.n_cam.y() * wt;
        st.acc[6] += p.n_cam.z() * wt;
        st.T *= (1.0 - w);
        if (st.id < 0 && 1.0 - st.T > 0.5) st.id = faces[idx];
        if (st.T < settings.transmittance_floor) {
            ++i;
            break;
        }
    }
    st.end = i;
    return st;
}

void write_pixel(RenderOutput& out, RenderRecord& rec, int pixel, const PixelState& st) {
    const Vec3& bg = rec.background;
    for (int c = 0; c < 3; ++c) out.color[3 * pixel + c] = st.acc[c] + bg[c] * st.T;
    const double a = 1.0 - st.T;
    out.alpha[pixel] = a;
    out.depth[pixel] = a > 1e-12 ? st.acc[3] / a : 0.0;
    for (int c = 0; c < 3; ++c) out.normal[3 * pixel + c] = st.acc[4 + c];
    out.id[pixel] = st.id;
    rec.pixel_end[pixel] = st.end;
    rec.transmittance[pixel] = st.T;
    rec.depth_sum[pixel] = st.acc[3];
}

// Projection, sorting and tile binning shared by both raster paths.
void prepare(const SurfelSet& surfels, const Camera& cam, const Vec3& background, const RasterSettings& settings,
             RenderRecord& rec, std::vector<int>& sorted, std::size_t& singular_count) {
    cam.validate();
    if (settings.tile <= 0) throw ConfigError("tile size must be positive");
    rec.camera = cam;
    rec.background = background;
    rec.settings = settings;
    rec.surfel_count = surfels.size();
    rec.fingerprint = surfel_fingerprint(surfels);
    rec.proj.assign(surfels.size(), {});
    rec.colors.resize(surfels.size());
    rec.rotations.resize(surfels.size());
    rec.scales.resize(surfels.size());
    singular_count = 0;
    for (std::size_t i = 0; i < surfels.size(); ++i) {
        bool singular = false;
        project_full(surfels[i], cam, settings, rec.proj[i], singular);
        if (singular) ++singular_count;
        rec.colors[i] = surfels[i].color;
        rec.rotations[i] = surfels[i].rotation;
        rec.scales[i] = surfels[i].scale;
    }
    sorted.clear();
    for (std::size_t i = 0; i < surfels.size(); ++i)
        if (rec.proj[i].active) sorted.push_back(static_cast<int>(i));
    std::sort(sorted.begin(), sorted.end(), [&](int a, int b) {
        const double za = rec.proj[a].p_cam.z(), zb = rec.proj[b].p_cam.z();
        return za < zb || (za == zb && a < b);
    });

    const int tile = settings.tile;
    rec.tiles_x = (cam.width + tile - 1) / tile;
    rec.tiles_y = (cam.height + tile - 1) / tile;
    rec.tile_lists.assign(static_cast<std::size_t>(rec.tiles_x * rec.tiles_y), {});
    for (int idx : sorted) {
        const auto& p = rec.proj[idx];
        const double x0 = std::floor(p.mean.x() - p.radius - 0.5), x1 = std::ceil(p.mean.x() + p.radius - 0.5);
        const double y0 = std::floor(p.mean.y() - p.radius - 0.5), y1 = std::ceil(p.mean.y() + p.radius - 0.5);
        if (x1 < 0 || y1 < 0 || x0 >= cam.width || y0 >= cam.height) continue;
        const int tx0 = std::max(0, static_cast<int>(x0)) / tile;
        const int tx1 = std::min(cam.width - 1, static_cast<int>(x1)) / tile;
        const int ty0 = std::max(0, static_cast<int>(y0)) / tile;
        const int ty1 = std::min(cam.height - 1, static_cast<int>(y1)) / tile;
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx) rec.tile_lists[static_cast<std::size_t>(ty * rec.tiles_x + tx)].push_back(idx);
    }

    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    rec.pixel_end.assign(npix, 0);
    rec.transmittance.assign(npix, 1.0);
    rec.depth_sum.assign(npix, 0.0);
}

RenderOutput make_output(const Camera& cam, std::size_t singular) {
    RenderOutput out;
    out.width = cam.width;
    out.height = cam.height;
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    out.color.assign(3 * npix, 0.0);
    out.alpha.assign(npix, 0.0);
    out.depth.assign(npix, 0.0);
    out.normal.assign(3 * npix, 0.0);
    out.id.assign(npix, -1);
    out.skipped_singular = singular;
    return out;
}

double cut_for(const RasterSettings& s) { return 2.0 * std::log(1.0 / s.alpha_floor) + 1e-9; }

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

void Camera::validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
    if (!(R * R.transpose() - Mat3::Identity()).isZero(1e-6)) throw ConfigError("camera rotation is not orthonormal");
}

nlohmann::json Camera::to_json() const {
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[3 * i + j] = R(i, j);
    return {{"fx", fx}, {"fy", fy}, {"cx", cx}, {"cy", cy}, {"R", r}, {"t", {t.x(), t.y(), t.z()}},
            {"width", width}, {"height", height}};
}

Camera Camera::from_json(const nlohmann::json& j, int default_width, int default_height) {
    Camera c;
    try {
        c.fx = j.at("fx").get<double>();
        c.fy = j.at("fy").get<double>();
        c.cx = j.at("cx").get<double>();
        c.cy = j.at("cy").get<double>();
        const auto r = j.at("R").get<std::vector<double>>();
        const auto t = j.at("t").get<std::vector<double>>();
        if (r.size() != 9) throw ConfigError("camera R must have 9 entries");
        if (t.size() != 3) throw ConfigError("camera t must have 3 entries");
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) c.R(a, b) = r[3 * a + b];
        c.t = Vec3(t[0], t[1], t[2]);
        c.width = j.contains("width") ? j.at("width").get<int>() : default_width;
        c.height = j.contains("height") ? j.at("height").get<int>() : default_height;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("camera: ") + e.what());
    }
    c.validate();
    return c;
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
    const Vec3 z = (target - eye).normalized();
    const Vec3 x = z.cross(up).normalized();
    const Vec3 y = z.cross(x);
    Camera c;
    c.R.row(0) = x.transpose();
    c.R.row(1) = y.transpose();
    c.R.row(2) = z.transpose();
    c.t = -c.R * eye;
    c.fx = c.fy = focal;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    c.width = width;
    c.height = height;
    return c;
}

std::optional<SurfelProjection> project_surfel(const Surfel& s, const Camera& cam, double near) {
    const Vec3 pc = cam.R * s.position + cam.t;
    const double z = pc.z();
    if (!(z >= near)) return std::nullopt;
    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx / z, 0.0, -cam.fx * pc.x() / (z * z), 0.0, cam.fy / z, -cam.fy * pc.y() / (z * z);
    const Mat3 axes = quat_to_matrix(s.rotation);
    Eigen::Matrix<double, 3, 2> B;
    B.col(0) = s.scale[0] * (cam.R * axes.col(0));
    B.col(1) = s.scale[1] * (cam.R * axes.col(1));
    const Mat2 M = J * B;
    return SurfelProjection{Vec2(cam.fx * pc.x() / z + cam.cx, cam.fy * pc.y() / z + cam.cy), M * M.transpose(), z};
}

std::uint64_t surfel_fingerprint(const SurfelSet& surfels) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& s : surfels) {
        h = fnv(h, s.position.data(), sizeof(double) * 3);
        h = fnv(h, s.scale.data(), sizeof(double) * 2);
        h = fnv(h, s.rotation.data(), sizeof(double) * 4);
        h = fnv(h, s.color.data(), sizeof(double) * 3);
        h = fnv(h, &s.face, sizeof(int));
    }
    return h;
}

RenderOutput rasterize(const SurfelSet& surfels, const Camera& cam, const Vec3& background,
                       const RasterSettings& settings, RenderRecord* record) {
    RenderRecord local;
    RenderRecord& rec = record ? *record : local;
    std::vector<int> sorted;
    std::size_t singular = 0;
    prepare(surfels, cam, background, settings, rec, sorted, singular);
    RenderOutput out = make_output(cam, singular);

    std::vector<int> faces(surfels.size());
    for (std::size_t i = 0; i < surfels.size(); ++i) faces[i] = surfels[i].face;

    const double q_cut = cut_for(settings);
    const int tile = settings.tile;
    const int ntiles = rec.tiles_x * rec.tiles_y;
    std::vector<std::size_t> pairs(static_cast<std::size_t>(ntiles), 0);
    parallel_for(ntiles, settings.threads, [&](int t) {
        const int tx = t % rec.tiles_x, ty = t / rec.tiles_x;
        const auto& list = rec.tile_lists[static_cast<std::size_t>(t)];
        for (int y = ty * tile; y < std::min(cam.height, (ty + 1) * tile); ++y)
            for (int x = tx * tile; x < std::min(cam.width, (tx + 1) * tile); ++x) {
                const PixelState st = composite(rec, faces, list, x + 0.5, y + 0.5, q_cut);
                write_pixel(out, rec, y * cam.width + x, st);
                pairs[static_cast<std::size_t>(t)] += static_cast<std::size_t>(st.end);
            }
    });
    rec.active_pairs = std::accumulate(pairs.begin(), pairs.end(), std::size_t{0});
    return out;
}

RenderOutput rasterize_naive(const SurfelSet& surfels, const Camera& cam, const Vec3& background,
                             const RasterSettings& settings) {
    RenderRecord rec;
    std::vector<int> sorted;
    std::size_t singular = 0;
    prepare(surfels, cam, background, settings, rec, sorted, singular);
    RenderOutput out = make_output(cam, singular);
    std::vector<int> faces(surfels.size());
    for (std::size_t i = 0; i < surfels.size(); ++i) faces[i] = surfels[i].face;
    const double q_cut = cut_for(settings);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
            write_pixel(out, rec, y * cam.width + x, composite(rec, faces, sorted, x + 0.5, y + 0.5, q_cut));
    return out;
}

SurfelGrads rasterize_backward(const RenderRecord& record, const SurfelSet& surfels, const RenderGrads& grads) {
    if (surfels.size() != record.surfel_count || surfel_fingerprint(surfels) != record.fingerprint)
        throw UsageError("rasterize_backward: record was produced from a different surfel set");
    return rasterize_backward(record, grads);
}

SurfelGrads rasterize_backward(const RenderRecord& rec, const RenderGrads& grads) {
    const Camera& cam = rec.camera;
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    auto check = [&](const std::vector<double>& g, std::size_t channels, const char* name) {
        if (!g.empty() && g.size() != channels * npix)
            throw UsageError(std::string("rasterize_backward: ") + name + " gradient does not match the record");
    };
    if (rec.pixel_end.size() != npix) throw UsageError("rasterize_backward: empty or mismatched record");
    check(grads.color, 3, "color");
    check(grads.alpha, 1, "alpha");
    check(grads.depth, 1, "depth");
    check(grads.normal, 3, "normal");

    const std::size_t n = rec.surfel_count;
    SurfelGrads out;
    out.position.assign(n, Vec3::Zero());
    out.scale.assign(n, Vec2::Zero());
    out.rotation.assign(n, Quat::Zero());
    out.axes.assign(n, Mat3::Zero());
    out.color.assign(n, Vec3::Zero());

    // per surfel, screen-space accumulators: mean(2) conic(3) color(3) depth(1) normal(3)
    constexpr int kAcc = 12;
    const double q_cut = cut_for(rec.settings);
    const int tile = rec.settings.tile;
    const int ntiles = rec.tiles_x * rec.tiles_y;
    std::vector<std::vector<double>> tile_acc(static_cast<std::size_t>(ntiles));

    parallel_for(ntiles, rec.settings.threads, [&](int t) {
        const auto& list = rec.tile_lists[static_cast<std::size_t>(t)];
        auto& acc = tile_acc[static_cast<std::size_t>(t)];
        acc.assign(list.size() * kAcc, 0.0);
        if (list.empty()) return;
        const int tx = t % rec.tiles_x, ty = t / rec.tiles_x;

        struct Contribution {
            int pos;
            double alpha, T, dx, dy, w;
        };
        std::vector<Contribution> contribs;

        for (int y = ty * tile; y < std::min(cam.height, (ty + 1) * tile); ++y)
            for (int x = tx * tile; x < std::min(cam.width, (tx + 1) * tile); ++x) {
                const int pix = y * cam.width + x;
                double g[kChannels] = {0, 0, 0, 0, 0, 0, 0, 0};
                if (!grads.color.empty())
                    for (int c = 0; c < 3; ++c) g[c] = grads.color[3 * pix + c];
                if (!grads.normal.empty())
                    for (int c = 0; c < 3; ++c) g[4 + c] = grads.normal[3 * pix + c];
                if (!grads.alpha.empty()) g[7] = grads.alpha[pix];
                const double a = 1.0 - rec.transmittance[pix];
                if (!grads.depth.empty() && a > 1e-12) {
                    const double gd = grads.depth[pix];
                    g[3] = gd / a;
                    g[7] -= gd * rec.depth_sum[pix] / (a * a);
                }
                bool any = false;
                for (double v : g) any = any || v != 0.0;
                if (!any) continue;

                // replay the forward pass to recover alpha and T per contribution
                contribs.clear();
                double T = 1.0;
                const int end = rec.pixel_end[pix];
                const double px = x + 0.5, py = y + 0.5;
                for (int i = 0; i < end; ++i) {
                    const auto& p = rec.proj[list[i]];
                    const double dx = px - p.mean.x(), dy = py - p.mean.y();
                    const double q = p.conic_a * dx * dx + 2.0 * p.conic_b * dx * dy + p.conic_c * dy * dy;
                    if (q > q_cut) continue;
                    const double e = std::exp(-0.5 * q);
                    const double w = std::min(1.0, e);
                    if (w < rec.settings.alpha_floor) continue;
                    contribs.push_back({i, w, T, dx, dy, e});
                    T *= (1.0 - w);
                }

                double S[kChannels] = {rec.background.x(), rec.background.y(), rec.background.z(), 0, 0, 0, 0, 0};
                for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                    const int idx = list[it->pos];
                    const auto& p = rec.proj[idx];
                    const Vec3& c = rec.colors[idx];
                    const double val[kChannels] = {c.x(), c.y(), c.z(), p.p_cam.z(), p.n_cam.x(), p.n_cam.y(),
                                                   p.n_cam.z(), 1.0};
                    double g_alpha = 0.0;
                    for (int ch = 0; ch < kChannels; ++ch) g_alpha += g[ch] * (val[ch] - S[ch]);
                    g_alpha *= it->T;
                    const double wt = it->alpha * it->T;
                    double* A = &acc[static_cast<std::size_t>(it->pos) * kAcc];
                    A[5] += g[0] * wt;
                    A[6] += g[1] * wt;
                    A[7] += g[2] * wt;
                    A[8] += g[3] * wt;
                    A[9] += g[4] * wt;
                    A[10] += g[5] * wt;
                    A[11] += g[6] * wt;
                    if (it->w <= 1.0) {
                        // alpha = exp(-q / 2)
                        const double g_q = -0.5 * it->w * g_alpha;
                        const double dx = it->dx, dy = it->dy;
                        A[0] -= g_q * 2.0 * (p.conic_a * dx + p.conic_b * dy);
                        A[1] -= g_q * 2.0 * (p.conic_b * dx + p.conic_c * dy);
                        A[2] += g_q * dx * dx;
                        A[3] += g_q * 2.0 * dx * dy;
                        A[4] += g_q * dy * dy;
                    }
                    for (int ch = 0; ch < kChannels; ++ch) S[ch] = it->alpha * val[ch] + (1.0 - it->alpha) * S[ch];
                }
            }
    });

    // merge per-tile buffers in tile order so the sums do not depend on threading
    std::vector<double> total(n * kAcc, 0.0);
    for (int t = 0; t < ntiles; ++t) {
        const auto& list = rec.tile_lists[static_cast<std::size_t>(t)];
        const auto& acc = tile_acc[static_cast<std::size_t>(t)];
        for (std::size_t i = 0; i < list.size(); ++i)
            for (int k = 0; k < kAcc; ++k) total[static_cast<std::size_t>(list[i]) * kAcc + k] += acc[i * kAcc + k];
    }

    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = rec.proj[i];
        if (!p.active) continue;
        const double* A = &total[i * kAcc];
        out.color[i] = Vec3(A[5], A[6], A[7]);

        // conic = cov^-1  ->  dL/dcov = -Q G Q
        Mat2 Q;
        Q << p.conic_a, p.conic_b, p.conic_b, p.conic_c;
        Mat2 G;
        G << A[2], 0.5 * A[3], 0.5 * A[3], A[4];
        const Mat2 g_cov = -Q * G * Q;
        // cov = M M^T + lowpass I
        const Mat2 g_M = (g_cov + g_cov.transpose()) * p.M;
        const Eigen::Matrix<double, 2, 3> g_J = g_M * p.B.transpose();
        const Eigen::Matrix<double, 3, 2> g_B = p.J.transpose() * g_M;

        const double z = p.p_cam.z(), x = p.p_cam.x(), y = p.p_cam.y();
        const double fx = cam.fx, fy = cam.fy;
        Vec3 g_p = Vec3::Zero();
        g_p.x() += g_J(0, 2) * (-fx / (z * z));
        g_p.y() += g_J(1, 2) * (-fy / (z * z));
        g_p.z() += g_J(0, 0) * (-fx / (z * z)) + g_J(0, 2) * (2.0 * fx * x / (z * z * z)) +
                   g_J(1, 1) * (-fy / (z * z)) + g_J(1, 2) * (2.0 * fy * y / (z * z * z));
        g_p.x() += A[0] * fx / z;
        g_p.y() += A[1] * fy / z;
        g_p.z() += -A[0] * fx * x / (z * z) - A[1] * fy * y / (z * z);
        g_p.z() += A[8];

        out.position[i] = cam.R.transpose() * g_p;

        const Vec3 t_cam = cam.R * p.axes.col(0);
        const Vec3 b_cam = cam.R * p.axes.col(1);
        const double s1 = rec.scales[i][0], s2 = rec.scales[i][1];
        out.scale[i] = Vec2(t_cam.dot(g_B.col(0)), b_cam.dot(g_B.col(1)));
        Mat3 g_axes;
        g_axes.col(0) = s1 * (cam.R.transpose() * g_B.col(0));
        g_axes.col(1) = s2 * (cam.R.transpose() * g_B.col(1));
        g_axes.col(2) = p.flip * (cam.R.transpose() * Vec3(A[9], A[10], A[11]));
        out.axes[i] = g_axes;
        out.rotation[i] = quat_to_matrix_backward(rec.rotations[i], g_axes);
    }
    return out;
}

std::vector<double> depth_to_normal(const std::vector<double>& depth, const std::vector<double>& alpha,
                                    const Camera& cam) {
    const int W = cam.width, H = cam.height;
    const std::size_t npix = static_cast<std::size_t>(W) * H;
    if (depth.size() != npix || alpha.size() != npix) throw ShapeError("depth_to_normal: image size mismatch");
    std::vector<double> out(3 * npix, 0.0);
    auto point = [&](int x, int y) {
        const double d = depth[static_cast<std::size_t>(y) * W + x];
        return Vec3((x + 0.5 - cam.cx) / cam.fx * d, (y + 0.5 - cam.cy) / cam.fy * d, d);
    };
    auto valid = [&](int x, int y) {
        return alpha[static_cast<std::size_t>(y) * W + x] >= 0.5 && alpha[static_cast<std::size_t>(y) * W + x + 1] >= 0.5 &&
               alpha[static_cast<std::size_t>(y) * W + x - 1] >= 0.5 && alpha[static_cast<std::size_t>(y + 1) * W + x] >= 0.5 &&
               alpha[static_cast<std::size_t>(y - 1) * W + x] >= 0.5;
    };
    for (int y = 1; y < H - 1; ++y)
        for (int x = 1; x < W - 1; ++x) {
            if (!valid(x, y)) continue;
            const Vec3 dx = point(x + 1, y) - point(x - 1, y);
            const Vec3 dy = point(x, y + 1) - point(x, y - 1);
            const Vec3 c = dy.cross(dx);
            const double len = c.norm();
            if (!(len > 0)) continue;
            const std::size_t p = static_cast<std::size_t>(y) * W + x;
            for (int k = 0; k < 3; ++k) out[3 * p + k] = c[k] / len;
        }
    return out;
}

void depth_to_normal_backward(const std::vector<double>& depth, const std::vector<double>& alpha, const Camera& cam,
                              const std::vector<double>& grad_normal, std::vector<double>& grad_depth) {
    const int W = cam.width, H = cam.height;
    const std::size_t npix = static_cast<std::size_t>(W) * H;
    if (grad_depth.size() != npix) grad_depth.assign(npix, 0.0);
    auto ray = [&](int x, int y) { return Vec3((x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0); };
    auto at = [&](int x, int y) { return static_cast<std::size_t>(y) * W + x; };
    for (int y = 1; y < H - 1; ++y)
        for (int x = 1; x < W - 1; ++x) {
            const std::size_t p = at(x, y);
            const Vec3 g_n(grad_normal[3 * p], grad_normal[3 * p + 1], grad_normal[3 * p + 2]);
            if (g_n.isZero(0.0)) continue;
            if (!(alpha[p] >= 0.5 && alpha[at(x + 1, y)] >= 0.5 && alpha[at(x - 1, y)] >= 0.5 &&
                  alpha[at(x, y + 1)] >= 0.5 && alpha[at(x, y - 1)] >= 0.5))
                continue;
            const Vec3 dx = ray(x + 1, y) * depth[at(x + 1, y)] - ray(x - 1, y) * depth[at(x - 1, y)];
            const Vec3 dy = ray(x, y + 1) * depth[at(x, y + 1)] - ray(x, y - 1) * depth[at(x, y - 1)];
            const Vec3 c = dy.cross(dx);
            const double len = c.norm();
            if (!(len > 0)) continue;
            const Vec3 n = c / len;
            const Vec3 g_c = (g_n - n * n.dot(g_n)) / len;
            const Vec3 g_dy = dx.cross(g_c);
            const Vec3 g_dx = g_c.cross(dy);
            grad_depth[at(x + 1, y)] += ray(x + 1, y).dot(g_dx);
            grad_depth[at(x - 1, y)] -= ray(x - 1, y).dot(g_dx);
            grad_depth[at(x, y + 1)] += ray(x, y + 1).dot(g_dy);
            grad_depth[at(x, y - 1)] -= ray(x, y - 1).dot(g_dy);
        }
}

}  // namespace gma
