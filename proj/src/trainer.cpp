#include "gma/trainer.hpp"

#include "gma/errors.hpp"
#include "gma/image_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

namespace gma {

std::string to_string(StageKind k) {
    switch (k) {
    case StageKind::Stage1: return "stage1";
    case StageKind::Stage2: return "stage2";
    case StageKind::OneStage: return "one_stage";
    }
    return "?";
}

void adam_step(std::span<const ParamGroup> groups, AdamState& state, const AdamConfig& cfg) {
    const long step = state.step + 1;
    for (const auto& g : groups) {
        if (g.values.size() != g.grads.size())
            throw ShapeError("adam: group '" + g.name + "' has " + std::to_string(g.grads.size()) +
                             " gradients for " + std::to_string(g.values.size()) + " values");
        if (g.quaternion && g.values.size() % 4 != 0)
            throw ShapeError("adam: quaternion group '" + g.name + "' size is not a multiple of 4");
        for (double x : g.grads)
            if (!std::isfinite(x))
                throw NumericError("non-finite gradient in group '" + g.name + "' at step " + std::to_string(step));
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (const auto& g : groups) {
        auto& mom = state.moments[g.name];
        if (mom.m.size() != g.values.size()) {
            if (!mom.m.empty()) throw ShapeError("adam: group '" + g.name + "' changed size");
            mom.m.assign(g.values.size(), 0.0);
            mom.v.assign(g.values.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            const double gr = g.grads[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gr;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gr * gr;
            g.values[i] -= g.lr * (mom.m[i] / c1) / (std::sqrt(mom.v[i] / c2) + cfg.eps);
        }
        if (g.quaternion)
            for (std::size_t q = 0; q < g.values.size(); q += 4) {
                double n = 0;
                for (int c = 0; c < 4; ++c) n += g.values[q + c] * g.values[q + c];
                n = std::sqrt(n);
                if (n > 0)
                    for (int c = 0; c < 4; ++c) g.values[q + c] /= n;
            }
    }
    state.step = step;
}

void FitConfig::validate() const {
    if (stage1_steps < 0 || stage2_steps < 0) throw ConfigError("step counts must be non-negative");
    if (!(lr_features > 0) || !(lr_mlp > 0)) throw ConfigError("learning rates must be positive");
    if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1)
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0)) throw ConfigError("Adam eps must be positive");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (log_every < 0 || checkpoint_every < 0) throw ConfigError("intervals must be non-negative");
    stage1_weights.validate();
    stage2_weights.validate();
}

nlohmann::json FitConfig::to_json() const {
    return {{"stage1_steps", stage1_steps},
            {"stage2_steps", stage2_steps},
            {"one_stage", one_stage},
            {"offset_mode", to_string(offset_mode)},
            {"stage1_weights", stage1_weights.to_json()},
            {"stage2_weights", stage2_weights.to_json()},
            {"lr_features", lr_features},
            {"lr_mlp", lr_mlp},
            {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
            {"seed", seed},
            {"batch", batch},
            {"threads", threads},
            {"log_every", log_every},
            {"checkpoint_every", checkpoint_every},
            {"checkpoint_path", checkpoint_path}};
}

FitConfig FitConfig::from_json(const nlohmann::json& j) {
    FitConfig c;
    try {
        c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
        c.stage2_steps = j.value("stage2_steps", c.stage2_steps);
        c.one_stage = j.value("one_stage", c.one_stage);
        if (j.contains("offset_mode")) c.offset_mode = offset_mode_from_string(j.at("offset_mode").get<std::string>());
        if (j.contains("stage1_weights")) c.stage1_weights = LossWeights::from_json(j.at("stage1_weights"));
        if (j.contains("stage2_weights")) c.stage2_weights = LossWeights::from_json(j.at("stage2_weights"));
        c.lr_features = j.value("lr_features", c.lr_features);
        c.lr_mlp = j.value("lr_mlp", c.lr_mlp);
        if (j.contains("adam")) {
            const auto& a = j.at("adam");
            c.adam.beta1 = a.value("beta1", c.adam.beta1);
            c.adam.beta2 = a.value("beta2", c.adam.beta2);
            c.adam.eps = a.value("eps", c.adam.eps);
        }
        c.seed = j.value("seed", c.seed);
        c.batch = j.value("batch", c.batch);
        c.threads = j.value("threads", c.threads);
        c.log_every = j.value("log_every", c.log_every);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("fit config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

void mlp_groups(std::vector<ParamGroup>& out, const std::string& name, MlpWeights& w, MlpGrad& g, double lr) {
    out.push_back({name + ".w1", {w.w1.data(), static_cast<std::size_t>(w.w1.size())},
                   {g.w1.data(), static_cast<std::size_t>(g.w1.size())}, lr});
    out.push_back({name + ".b1", {w.b1.data(), static_cast<std::size_t>(w.b1.size())},
                   {g.b1.data(), static_cast<std::size_t>(g.b1.size())}, lr});
    out.push_back({name + ".w2", {w.w2.data(), static_cast<std::size_t>(w.w2.size())},
                   {g.w2.data(), static_cast<std::size_t>(g.w2.size())}, lr});
    out.push_back({name + ".b2", {w.b2.data(), static_cast<std::size_t>(w.b2.size())},
                   {g.b2.data(), static_cast<std::size_t>(g.b2.size())}, lr});
}

std::vector<ParamGroup> trainable_groups(AvatarCheckpoint& c, AvatarGrads& g, StageKind kind, double lr_f,
                                         double lr_m) {
    std::vector<ParamGroup> out;
    const bool geometry = kind != StageKind::Stage2;
    auto matrix = [](Eigen::MatrixXd& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); };
    if (geometry) out.push_back({"f_geo", matrix(c.features.geo), matrix(g.geo), lr_f});
    out.push_back({"f_tex", matrix(c.features.tex), matrix(g.tex), lr_f});
    if (geometry) mlp_groups(out, "F_coarse", c.decoders.coarse, g.decoders.coarse, lr_m);
    mlp_groups(out, "F_fine", c.decoders.fine, g.decoders.fine, lr_m);
    mlp_groups(out, "T_color", c.decoders.color, g.decoders.color, lr_m);
    mlp_groups(out, "T_scale", c.decoders.scale, g.decoders.scale, lr_m);
    return out;
}

void scale_grads(AvatarGrads& g, double s) {
    g.geo *= s;
    g.tex *= s;
    for (MlpGrad* m : {&g.decoders.coarse, &g.decoders.fine, &g.decoders.color, &g.decoders.scale}) {
        m->w1 *= s;
        m->b1 *= s;
        m->w2 *= s;
        m->b2 *= s;
    }
}

template <class M>
bool bytes_equal(const M& a, const M& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

bool mlp_bytes_equal(const MlpWeights& a, const MlpWeights& b) {
    return a.activation == b.activation && bytes_equal(a.w1, b.w1) && bytes_equal(a.b1, b.b1) &&
           bytes_equal(a.w2, b.w2) && bytes_equal(a.b2, b.b2);
}

const LossWeights& stage_weights(const FitConfig& cfg, StageKind kind) {
    return kind == StageKind::Stage1 ? cfg.stage1_weights : cfg.stage2_weights;
}

}  // namespace

StageHistory run_stage(AvatarCheckpoint& ckpt, const Dataset& data, const FitConfig& cfg, StageKind kind, int steps,
                       const FitObserver& obs) {
    cfg.validate();
    ckpt.validate();
    if (data.train.empty()) throw UsageError("dataset has no training frames");
    if (!(ckpt.body_config == data.body_config))
        throw CompatibilityError("checkpoint body config differs from the dataset's");
    StageHistory hist;
    hist.kind = kind;
    if (steps == 0) return hist;

    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const bool fine = kind != StageKind::Stage1;
    const DecodeRequest dreq{true, fine, true};
    const BackwardRequest breq{kind != StageKind::Stage2, fine, true};
    const LossWeights& weights = stage_weights(cfg, kind);

    std::vector<MeshState> posed(data.frames.size());
    for (int i : data.train) posed[i] = pose_mesh(ctx->body, data.frames[i].params);

    RasterSettings settings;
    settings.threads = cfg.threads;
    AdamState adam;
    AvatarGrads grads = AvatarGrads::zeros_like(ckpt);
    double lr_f = cfg.lr_features, lr_m = cfg.lr_mlp;
    double reference = 0;
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n_train = data.train.size();

    for (int step = 0; step < steps; ++step) {
        grads.set_zero();
        double loss = 0, l1 = 0;
        std::map<std::string, double> terms;
        try {
            const DecodedAvatar dec = decode_avatar(ckpt, *ctx, dreq);
            for (int b = 0; b < cfg.batch; ++b) {
                const int fi = data.train[(static_cast<std::size_t>(step) * cfg.batch + b) % n_train];
                const DatasetFrame& frame = data.frames[fi];
                const MorphedMesh morphed = morph_avatar(ckpt, *ctx, dec, posed[fi]);
                const SurfelSet surfels = assemble_surfels(*ctx, dec, morphed, true, fine);
                RenderRecord rec;
                const RenderOutput render = rasterize(surfels, frame.camera, data.background, settings, &rec);
                const TotalLoss tl = total_loss(render, frame.camera, frame.rgb, frame.mask, morphed.vertices,
                                                posed[fi].vertices, ctx->body.faces, weights);
                const SurfelGrads sg = rasterize_backward(rec, surfels, tl.render_grads);
                backward_avatar(ckpt, *ctx, dec, morphed, true, fine, sg, tl.grad_morphed, breq, grads);
                loss += tl.value / cfg.batch;
                const auto it = tl.terms.find("l1");
                l1 += (it != tl.terms.end() ? it->second : l1_loss(render.color, frame.rgb).value) / cfg.batch;
                for (const auto& [k, v] : tl.terms) terms[k] += v / cfg.batch;
            }
            if (cfg.batch > 1) scale_grads(grads, 1.0 / cfg.batch);

            if (step == 0) reference = loss;
            if (loss > 10.0 * reference) {
                if (hist.lr_halvings > 0)
                    throw NumericError("loss diverged to " + std::to_string(loss) + " (initial " +
                                       std::to_string(reference) + ")");
                ++hist.lr_halvings;
                lr_f *= 0.5;
                lr_m *= 0.5;
            }
            const auto groups = trainable_groups(ckpt, grads, kind, lr_f, lr_m);
            adam_step(groups, adam, cfg.adam);
        } catch (const NumericError& e) {
            throw NumericError(to_string(kind) + " step " + std::to_string(step) + ": " + e.what());
        }
        hist.loss.push_back(loss);
        hist.l1.push_back(l1);

        if (obs.log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == steps)) {
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            nlohmann::json rec{{"step", step}, {"stage", to_string(kind)}, {"loss", loss}, {"terms", terms},
                               {"wall_ms", ms}};
            *obs.log << rec.dump() << '\n' << std::flush;
        }
        if (obs.checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            obs.checkpoint(ckpt, kind, step + 1);
    }
    return hist;
}

StageHistory run_stage1(AvatarCheckpoint& ckpt, const Dataset& data, const FitConfig& cfg, const FitObserver& obs) {
    return run_stage(ckpt, data, cfg, StageKind::Stage1, cfg.stage1_steps, obs);
}

StageHistory run_stage2(AvatarCheckpoint& ckpt, const Dataset& data, const FitConfig& cfg, const FitObserver& obs) {
    const Eigen::MatrixXd geo = ckpt.features.geo;
    const MlpWeights coarse = ckpt.decoders.coarse;
    StageHistory h = run_stage(ckpt, data, cfg, StageKind::Stage2, cfg.stage2_steps, obs);
    if (!bytes_equal(geo, ckpt.features.geo) || !mlp_bytes_equal(coarse, ckpt.decoders.coarse))
        throw Error("stage 2 modified frozen geometry parameters");
    return h;
}

AvatarCheckpoint initial_avatar(const Dataset& data, const FitConfig& cfg, const CoreConstants& constants) {
    if (data.frames.empty()) throw UsageError("dataset has no frames");
    AvatarCheckpoint c = init_avatar(data.body_config, constants, cfg.offset_mode, cfg.seed);
    c.canonical.beta = data.frames.front().params.beta;
    c.meta.seed = cfg.seed;
    c.meta.one_stage = cfg.one_stage;
    quantize_to_float(c);
    return c;
}

AvatarCheckpoint fit_avatar(const Dataset& data, const FitConfig& cfg, FitHistory* history, const FitObserver& obs,
                            const CoreConstants& constants) {
    cfg.validate();
    AvatarCheckpoint c = initial_avatar(data, cfg, constants);
    FitHistory local;
    FitHistory& h = history ? *history : local;
    h.stages.clear();
    if (cfg.one_stage) {
        h.stages.push_back(run_stage(c, data, cfg, StageKind::OneStage, cfg.stage1_steps + cfg.stage2_steps, obs));
    } else {
        h.stages.push_back(run_stage1(c, data, cfg, obs));
        h.stages.push_back(run_stage2(c, data, cfg, obs));
    }
    c.meta.stage1_steps = cfg.stage1_steps;
    c.meta.stage2_steps = cfg.stage2_steps;
    c.meta.one_stage = cfg.one_stage;
    c.meta.seed = cfg.seed;
    c.meta.loss_tail.clear();
    const auto& last = h.stages.back().loss;
    const std::size_t tail = std::min<std::size_t>(16, last.size());
    c.meta.loss_tail.assign(last.end() - static_cast<std::ptrdiff_t>(tail), last.end());
    quantize_to_float(c);
    return c;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : per_frame)
        frames.push_back({{"frame", f.frame}, {"psnr", f.psnr}, {"ssim", f.ssim}, {"mask_iou", f.mask_iou}});
    return {{"per_frame", frames}, {"mean_psnr", mean_psnr}, {"mean_ssim", mean_ssim}, {"mean_mask_iou", mean_iou}};
}

double masked_psnr(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target,
                   std::span<const std::uint8_t> pred_mask, std::span<const std::uint8_t> target_mask) {
    if (pred.size() != target.size() || pred_mask.size() != target_mask.size() ||
        pred.size() != 3 * pred_mask.size())
        throw ShapeError("masked_psnr: image sizes disagree");
    double se = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < pred_mask.size(); ++p) {
        if (!pred_mask[p] && !target_mask[p]) continue;
        for (int c = 0; c < 3; ++c) {
            const double d = (static_cast<double>(pred[3 * p + c]) - target[3 * p + c]) / 255.0;
            se += d * d;
        }
        n += 3;
    }
    if (n == 0 || se == 0) return kPsnrCap;
    return std::min(kPsnrCap, -10.0 * std::log10(se / static_cast<double>(n)));
}

FrameImage render_frame(const AvatarCheckpoint& ckpt, const BodyContext& ctx, const DecodedAvatar& dec,
                        const BodyParams& params, const Camera& cam, const Vec3& background, int threads) {
    const PosedAvatar posed = pose_avatar(ckpt, ctx, dec, params);
    RasterSettings settings;
    settings.threads = threads;
    const RenderOutput r = rasterize(posed.surfels, cam, background, settings);
    FrameImage img;
    img.rgb = quantize8(r.color);
    img.mask.resize(r.alpha.size());
    for (std::size_t i = 0; i < r.alpha.size(); ++i) img.mask[i] = r.alpha[i] >= 0.5 ? 255 : 0;
    return img;
}

EvalReport evaluate(const AvatarCheckpoint& ckpt, const Dataset& data, std::span<const int> frames, int threads) {
    if (frames.empty()) throw UsageError("evaluate: no frames to evaluate");
    if (!(ckpt.body_config == data.body_config))
        throw CompatibilityError("checkpoint body config differs from the dataset's");
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const DecodedAvatar dec = decode_avatar(ckpt, *ctx);
    EvalReport rep;
    for (int fi : frames) {
        if (fi < 0 || static_cast<std::size_t>(fi) >= data.frames.size())
            throw IndexError("evaluate: frame " + std::to_string(fi) + " out of range");
        const DatasetFrame& f = data.frames[fi];
        const FrameImage img = render_frame(ckpt, *ctx, dec, f.params, f.camera, data.background, threads);
        const auto target = quantize8(f.rgb);
        const auto target_mask = quantize8(f.mask);
        FrameMetrics m;
        m.frame = fi;
        m.psnr = masked_psnr(img.rgb, target, img.mask, target_mask);
        m.ssim = ssim(dequantize8(img.rgb), dequantize8(target), data.width, data.height, 3);
        std::size_t inter = 0, uni = 0;
        for (std::size_t p = 0; p < img.mask.size(); ++p) {
            const bool a = img.mask[p] != 0, b = target_mask[p] != 0;
            inter += a && b;
            uni += a || b;
        }
        m.mask_iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
        rep.per_frame.push_back(m);
    }
    const double n = static_cast<double>(rep.per_frame.size());
    for (const auto& m : rep.per_frame) {
        rep.mean_psnr += m.psnr / n;
        rep.mean_ssim += m.ssim / n;
        rep.mean_iou += m.mask_iou / n;
    }
    return rep;
}

}  // namespace gma
