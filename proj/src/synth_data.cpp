#include "gma/synth_data.hpp"

#include "gma/errors.hpp"
#include "gma/image_io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

namespace gma {

TextureSpec TextureSpec::parse(const std::string& text) {
    TextureSpec spec;
    if (text.empty()) throw ConfigError("empty texture spec");
    static const std::regex term(R"((regions)|(checker|stripes)\((\d+)\))");
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, '+')) {
        std::smatch m;
        if (!std::regex_match(part, m, term)) throw ConfigError("bad texture term '" + part + "'");
        if (m[1].matched) {
            spec.regions = true;
            continue;
        }
        const int n = std::stoi(m[3].str());
        if (n <= 0) throw ConfigError("texture term '" + part + "' needs a positive size");
        (m[2].str() == "checker" ? spec.checker : spec.stripes) = n;
    }
    return spec;
}

std::string TextureSpec::to_string() const {
    std::vector<std::string> terms;
    if (regions) terms.emplace_back("regions");
    if (checker > 0) terms.push_back("checker(" + std::to_string(checker) + ")");
    if (stripes > 0) terms.push_back("stripes(" + std::to_string(stripes) + ")");
    std::string out;
    for (const auto& t : terms) out += (out.empty() ? "" : "+") + t;
    return out;
}

namespace {

Vec3 part_color(BodyPart p) {
    switch (p) {
    case BodyPart::Torso: return {0.78, 0.24, 0.20};
    case BodyPart::Head: return {0.88, 0.68, 0.52};
    case BodyPart::LeftArm:
    case BodyPart::RightArm: return {0.82, 0.60, 0.44};
    case BodyPart::LeftLeg:
    case BodyPart::RightLeg: return {0.20, 0.30, 0.62};
    }
    return Vec3::Constant(0.6);
}

double part_offset(BodyPart p) {
    switch (p) {
    case BodyPart::Torso: return 0.015;
    case BodyPart::Head: return 0.010;
    case BodyPart::LeftArm:
    case BodyPart::RightArm: return 0.012;
    case BodyPart::LeftLeg:
    case BodyPart::RightLeg: return 0.013;
    }
    return 0.0;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

MlpWeights zero_mlp(int in, int out, Activation act) {
    MlpWeights w;
    w.activation = act;
    w.w1 = Eigen::MatrixXd::Zero(kHiddenDim, in);
    w.b1 = Eigen::VectorXd::Zero(kHiddenDim);
    w.w2 = Eigen::MatrixXd::Zero(out, kHiddenDim);
    w.b2 = Eigen::VectorXd::Zero(out);
    return w;
}

// Fixed barycentric layout of the fine surfels: cycles through three
// near-corner points, three near-edge-midpoint points and the centroid.
std::vector<std::array<double, 3>> fine_layout(int n_k) {
    static const std::array<std::array<double, 3>, 7> points{{{0.6, 0.2, 0.2},
                                                              {0.2, 0.6, 0.2},
                                                              {0.2, 0.2, 0.6},
                                                              {0.4, 0.4, 0.2},
                                                              {0.2, 0.4, 0.4},
                                                              {0.4, 0.2, 0.4},
                                                              {1.0 / 3, 1.0 / 3, 1.0 / 3}}};
    std::vector<std::array<double, 3>> out;
    for (int j = 0; j < n_k; ++j) out.push_back(points[j % points.size()]);
    return out;
}

}  // namespace

ReferenceScene generate_subject(const BodyConfig& body_config, const std::string& texture, std::uint64_t seed,
                                const CoreConstants& c) {
    body_config.validate();
    c.validate();
    if (c.k < 3) throw ConfigError("reference subject needs k >= 3");
    ReferenceScene scene;
    scene.texture = TextureSpec::parse(texture);
    scene.seed = seed;
    const SkinnedBody body = build_procedural_body(body_config);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);

    std::array<Vec3, kBodyPartCount> colors;
    std::array<double, kBodyPartCount> offsets;
    for (int p = 0; p < kBodyPartCount; ++p) {
        const auto part = static_cast<BodyPart>(p);
        colors[p] = scene.texture.regions ? part_color(part) : Vec3::Constant(0.6);
        for (int ch = 0; ch < 3; ++ch) colors[p][ch] += 0.05 * jitter(rng);
        offsets[p] = part_offset(part) + 0.002 * jitter(rng);
    }

    const std::size_t nf = body.num_faces();
    scene.face_colors.resize(nf);
    scene.face_offsets.resize(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        const int p = static_cast<int>(body.face_part[i]);
        const auto [band, segment] = body.face_grid[i];
        Vec3 col = colors[p];
        if (scene.texture.checker > 0 && (band / scene.texture.checker + segment / scene.texture.checker) % 2 == 1)
            col *= 0.55;
        if (scene.texture.stripes > 0 && (band / scene.texture.stripes) % 2 == 1) col = 0.5 * (col + Vec3::Ones());
        scene.face_colors[i] = col.cwiseMax(0.03).cwiseMin(0.97);
        scene.face_offsets[i] = offsets[p];
    }

    AvatarCheckpoint& a = scene.avatar;
    a.body_config = body_config;
    a.constants = c;
    a.offset_mode = OffsetMode::Normal;
    a.canonical = body.zero_params();
    std::normal_distribution<double> shape(0.0, 0.3);
    for (auto& b : a.canonical.beta) b = shape(rng);
    a.features.geo = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nf), c.k);
    a.features.tex = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nf), c.k);
    for (std::size_t i = 0; i < nf; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        a.features.geo(r, 0) = std::atanh(scene.face_offsets[i] / c.max_offset);
        for (int ch = 0; ch < 3; ++ch) a.features.tex(r, ch) = logit(scene.face_colors[i][ch]);
    }

    const int in = c.input_dim();
    // GELU(x) - GELU(-x) = x, so the coarse decoder returns f_geo[0] unchanged.
    a.decoders.coarse = zero_mlp(in, 1, Activation::Gelu);
    a.decoders.coarse.w1(0, 0) = 1.0;
    a.decoders.coarse.w1(1, 0) = -1.0;
    a.decoders.coarse.w2(0, 0) = 1.0;
    a.decoders.coarse.w2(0, 1) = -1.0;

    a.decoders.color = zero_mlp(in, 3 * c.n_k, Activation::Relu);
    for (int ch = 0; ch < 3; ++ch) {
        a.decoders.color.w1(2 * ch, ch) = 1.0;
        a.decoders.color.w1(2 * ch + 1, ch) = -1.0;
        for (int j = 0; j < c.n_k; ++j) {
            a.decoders.color.w2(3 * j + ch, 2 * ch) = 1.0;
            a.decoders.color.w2(3 * j + ch, 2 * ch + 1) = -1.0;
        }
    }

    a.decoders.fine = zero_mlp(in, 3 * c.n_k, Activation::Gelu);
    const auto layout = fine_layout(c.n_k);
    for (int j = 0; j < c.n_k; ++j) {
        a.decoders.fine.b2[3 * j] = std::log(layout[j][0] / layout[j][2]);
        a.decoders.fine.b2[3 * j + 1] = std::log(layout[j][1] / layout[j][2]);
    }

    a.decoders.scale = zero_mlp(in, 2 * c.n_k, Activation::Relu);
    a.decoders.scale.b2.setConstant(std::log(0.5));

    a.meta.seed = seed;
    quantize_to_float(a);
    a.validate();
    return scene;
}

Camera orbit_camera(const OrbitSpec& orbit, int frame, int n_frames, int width, int height) {
    if (n_frames < 1) throw ParameterError("orbit: n_frames must be at least 1");
    const double az = 2.0 * std::numbers::pi * frame / n_frames;
    const Vec3 eye(orbit.radius * std::sin(az), orbit.eye_height, orbit.radius * std::cos(az));
    return Camera::look_at(eye, Vec3(0, orbit.target_height, 0), Vec3(0, 1, 0), orbit.focal_factor * width, width,
                           height);
}

BodyParams motion_params(const SkinnedBody& body, const BodyParams& canonical, const MotionSpec& motion, int frame,
                         int n_frames) {
    BodyParams p = canonical;
    const double phase = 2.0 * std::numbers::pi * motion.cycles * frame / n_frames;
    const double s = std::sin(phase);
    auto rotate = [&](std::size_t joint, const Vec3& aa) {
        if (joint < p.theta.size()) p.theta[joint] += aa;
    };
    rotate(3, Vec3(motion.arm_swing * s, 0, 0));
    rotate(4, Vec3(-motion.arm_swing * s, 0, 0));
    rotate(5, Vec3(-motion.leg_swing * s, 0, 0));
    rotate(6, Vec3(motion.leg_swing * s, 0, 0));
    rotate(2, Vec3(0, motion.head_turn * std::sin(0.5 * phase), 0));
    if (!p.psi.empty()) p.psi[0] += motion.expression * std::sin(0.5 * phase);
    body.check_params(p);
    return p;
}

void split_frames(Dataset& data) {
    data.train.clear();
    data.holdout.clear();
    for (int i = 0; i < static_cast<int>(data.frames.size()); ++i) (i % 8 == 7 ? data.holdout : data.train).push_back(i);
}

namespace {

std::string frame_name(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04d.png", prefix, i);
    return buf;
}

nlohmann::json manifest_json(const Dataset& d) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : d.frames) {
        nlohmann::json cam = f.camera.to_json();
        cam.erase("width");
        cam.erase("height");
        auto params = f.params.to_json();
        frames.push_back({{"rgb", f.rgb_path},
                          {"mask", f.mask_path},
                          {"beta", params["beta"]},
                          {"theta", params["theta"]},
                          {"psi", params["psi"]},
                          {"camera", cam}});
    }
    return {{"version", kManifestVersion},
            {"resolution", {d.width, d.height}},
            {"n_frames", d.frames.size()},
            {"seed", d.seed},
            {"body_config", d.body_config.to_json()},
            {"background", {d.background.x(), d.background.y(), d.background.z()}},
            {"frames", frames}};
}

template <class Fn>
void for_each_parallel(int count, int threads, Fn&& fn) {
    threads = std::max(1, std::min(threads, count));
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    auto worker = [&](int w) {
        try {
            for (int i = next++; i < count; i = next++) fn(i);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < threads; ++w) pool.emplace_back(worker, w);
    worker(0);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

Dataset render_dataset(const ReferenceScene& scene, int n_frames, int width, int height, const OrbitSpec& orbit,
                       const MotionSpec& motion, const std::filesystem::path& out, const Vec3& background,
                       int threads) {
    if (n_frames < 1) throw ParameterError("render_dataset: n_frames must be at least 1");
    if (width <= 0 || height <= 0) throw ParameterError("render_dataset: resolution must be positive");
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

    const auto ctx = make_body_context(scene.avatar.body_config, scene.avatar.constants);
    const DecodedAvatar dec = decode_avatar(scene.avatar, *ctx);

    Dataset data;
    data.root = out;
    data.width = width;
    data.height = height;
    data.seed = scene.seed;
    data.body_config = scene.avatar.body_config;
    data.background = background;
    data.frames.resize(static_cast<std::size_t>(n_frames));

    for_each_parallel(n_frames, threads, [&](int t) {
        DatasetFrame& f = data.frames[t];
        f.rgb_path = frame_name("rgb", t);
        f.mask_path = frame_name("mask", t);
        f.params = motion_params(ctx->body, scene.avatar.canonical, motion, t, n_frames);
        f.camera = orbit_camera(orbit, t, n_frames, width, height);
        const PosedAvatar posed = pose_avatar(scene.avatar, *ctx, dec, f.params);
        const RenderOutput r = rasterize(posed.surfels, f.camera, background);
        Image8 rgb{width, height, 3, quantize8(r.color)};
        Image8 mask{width, height, 1, std::vector<std::uint8_t>(r.alpha.size())};
        for (std::size_t i = 0; i < r.alpha.size(); ++i) mask.data[i] = r.alpha[i] >= 0.5 ? 255 : 0;
        write_png(out / f.rgb_path, rgb);
        write_png(out / f.mask_path, mask);
        f.rgb = dequantize8(rgb.data);
        f.mask = dequantize8(mask.data);
    });

    std::ofstream m(out / "manifest.json");
    m << manifest_json(data).dump(2) << '\n';
    if (!m) throw IoError("cannot write " + (out / "manifest.json").string());
    split_frames(data);
    return data;
}

Dataset load_dataset(const std::filesystem::path& root) {
    const auto manifest_path = root / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw LoadError("missing manifest " + manifest_path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    Dataset d;
    d.root = root;
    try {
        if (j.at("version").get<int>() != kManifestVersion)
            throw LoadError("unsupported manifest version in " + manifest_path.string());
        const auto res = j.at("resolution").get<std::vector<int>>();
        if (res.size() != 2 || res[0] <= 0 || res[1] <= 0) throw LoadError("manifest field 'resolution' is invalid");
        d.width = res[0];
        d.height = res[1];
        d.seed = j.at("seed").get<std::uint64_t>();
        d.body_config = BodyConfig::from_json(j.at("body_config"));
        const auto bg = j.at("background").get<std::vector<double>>();
        if (bg.size() != 3) throw LoadError("manifest field 'background' must have 3 entries");
        d.background = Vec3(bg[0], bg[1], bg[2]);
        const auto& frames = j.at("frames");
        if (frames.size() != j.at("n_frames").get<std::size_t>())
            throw LoadError("manifest n_frames disagrees with the frame list");
        if (frames.empty()) throw LoadError("manifest has no frames");
        const SkinnedBody body = build_procedural_body(d.body_config);
        for (std::size_t i = 0; i < frames.size(); ++i) {
            const auto& fj = frames[i];
            DatasetFrame f;
            f.rgb_path = fj.at("rgb").get<std::string>();
            f.mask_path = fj.at("mask").get<std::string>();
            f.params = BodyParams::from_json(fj);
            f.camera = Camera::from_json(fj.at("camera"), d.width, d.height);
            try {
                body.check_params(f.params);
            } catch (const Error& e) {
                throw LoadError("frame " + std::to_string(i) + ": " + e.what());
            }
            auto load = [&](const std::string& rel, int channels) {
                const auto path = root / rel;
                if (!std::filesystem::exists(path)) throw LoadError("missing file " + path.string());
                Image8 img;
                try {
                    img = read_png(path);
                } catch (const IoError& e) {
                    throw LoadError(e.what());
                }
                if (img.width != d.width || img.height != d.height)
                    throw LoadError(path.string() + " is " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height) + ", manifest says " + std::to_string(d.width) + "x" +
                                    std::to_string(d.height));
                if (img.channels != channels)
                    throw LoadError(path.string() + " has " + std::to_string(img.channels) + " channels, expected " +
                                    std::to_string(channels));
                return dequantize8(img.data);
            };
            f.rgb = load(f.rgb_path, 3);
            f.mask = load(f.mask_path, 1);
            d.frames.push_back(std::move(f));
        }
    } catch (const LoadError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("manifest " + manifest_path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw LoadError("manifest " + manifest_path.string() + ": " + e.what());
    }
    split_frames(d);
    return d;
}

}  // namespace gma
