#include "support/fixtures.hpp"

#include "gma/errors.hpp"
#include "gma/persistence.hpp"
#include "gma/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

using namespace gma;
using testing::tiny_world;

namespace {

FitConfig short_fit(int s1, int s2) {
    FitConfig cfg;
    cfg.stage1_steps = s1;
    cfg.stage2_steps = s2;
    cfg.seed = 5;
    cfg.log_every = 1;
    return cfg;
}

// Textbook bias-corrected Adam on one scalar.
double adam_reference(double x, const std::vector<double>& grads, double lr, const AdamConfig& c) {
    double m = 0, v = 0;
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        m = c.beta1 * m + (1 - c.beta1) * g;
        v = c.beta2 * v + (1 - c.beta2) * g * g;
        const double mh = m / (1 - std::pow(c.beta1, static_cast<double>(t)));
        const double vh = v / (1 - std::pow(c.beta2, static_cast<double>(t)));
        x -= lr * mh / (std::sqrt(vh) + c.eps);
    }
    return x;
}

}  // namespace

TEST_CASE("adam matches the textbook recurrence") {
    const std::vector<double> seq{0.5, -1.0, 2.0, 0.25, 0.0, -3.0};
    double x = 1.0, g = 0;
    AdamState state;
    const AdamConfig cfg;
    std::vector<double> applied;
    for (double gi : seq) {
        g = gi;
        applied.push_back(gi);
        ParamGroup group{"x", {&x, 1}, {&g, 1}, 0.1, false};
        adam_step({&group, 1}, state, cfg);
        CHECK(x == doctest::Approx(adam_reference(1.0, applied, 0.1, cfg)).epsilon(1e-14));
    }
    CHECK(state.step == static_cast<long>(seq.size()));
}

TEST_CASE("adam first step moves every coordinate by about lr") {
    std::vector<double> x{1, 2, 3}, g{10, -0.001, 3};
    AdamState state;
    ParamGroup group{"x", x, g, 0.01, false};
    adam_step({&group, 1}, state);
    CHECK(x[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(x[1] == doctest::Approx(2.01).epsilon(1e-6));
    CHECK(x[2] == doctest::Approx(2.99).epsilon(1e-6));
}

TEST_CASE("adam keeps quaternion groups unit length") {
    std::vector<double> q{1, 0, 0, 0, 0.5, 0.5, 0.5, 0.5}, g{0.3, -1, 2, 0.1, 1, 1, -1, 0};
    AdamState state;
    ParamGroup group{"q", q, g, 0.2, true};
    for (int i = 0; i < 5; ++i) adam_step({&group, 1}, state);
    for (int k = 0; k < 2; ++k) {
        double n = 0;
        for (int i = 0; i < 4; ++i) n += q[4 * k + i] * q[4 * k + i];
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("adam rejects non-finite gradients without touching any group") {
    std::vector<double> a{1, 2}, ga{0.1, 0.2}, b{3}, gb{std::numeric_limits<double>::quiet_NaN()};
    AdamState state;
    const ParamGroup groups[] = {{"a", a, ga, 0.1, false}, {"b", b, gb, 0.1, false}};
    CHECK_THROWS_AS(adam_step(groups, state), NumericError);
    CHECK(a == std::vector<double>{1, 2});
    CHECK(b == std::vector<double>{3});
    CHECK(state.step == 0);
}

TEST_CASE("fit config validation and JSON round trip") {
    FitConfig cfg = short_fit(7, 9);
    cfg.one_stage = true;
    cfg.offset_mode = OffsetMode::Free;
    cfg.batch = 3;
    CHECK(FitConfig::from_json(cfg.to_json()) == cfg);
    FitConfig bad;
    bad.stage1_steps = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = FitConfig{};
    bad.lr_features = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = FitConfig{};
    bad.batch = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("a zero-step fit returns the initial avatar") {
    const auto& w = tiny_world();
    const FitConfig cfg = short_fit(0, 0);
    const AvatarCheckpoint fitted = fit_avatar(w.data, cfg);
    const AvatarCheckpoint init = initial_avatar(w.data, cfg);
    CHECK(serialize_checkpoint(fitted) == serialize_checkpoint(init));
    const auto& beta0 = w.data.frames.front().params.beta;
    REQUIRE(init.canonical.beta.size() == beta0.size());
    for (std::size_t i = 0; i < beta0.size(); ++i)
        CHECK(init.canonical.beta[i] == static_cast<double>(static_cast<float>(beta0[i])));
}

TEST_CASE("fits are deterministic and independent of the thread count") {
    const auto& w = tiny_world();
    FitConfig cfg = short_fit(4, 4);
    const auto a = serialize_checkpoint(fit_avatar(w.data, cfg));
    const auto b = serialize_checkpoint(fit_avatar(w.data, cfg));
    cfg.threads = 3;
    const auto c = serialize_checkpoint(fit_avatar(w.data, cfg));
    CHECK(a == b);
    CHECK(a == c);
    cfg.seed = 6;
    CHECK(serialize_checkpoint(fit_avatar(w.data, cfg)) != a);
}

TEST_CASE("stage one lowers the loss") {
    const auto& w = tiny_world();
    const FitConfig cfg = short_fit(60, 0);
    AvatarCheckpoint c = initial_avatar(w.data, cfg);
    const StageHistory h = run_stage1(c, w.data, cfg);
    REQUIRE(h.loss.size() == 60);
    double head = 0, tail = 0;
    for (int i = 0; i < 7; ++i) {  // one pass over the training frames
        head += h.loss[i];
        tail += h.loss[h.loss.size() - 1 - i];
    }
    CHECK(tail < 0.8 * head);
    CHECK(h.lr_halvings == 0);
}

TEST_CASE("stage two leaves f_geo and F_coarse bit-identical") {
    const auto& w = tiny_world();
    const FitConfig cfg = short_fit(0, 5);
    AvatarCheckpoint c = initial_avatar(w.data, cfg);
    const AvatarCheckpoint before = c;
    run_stage2(c, w.data, cfg);
    CHECK(c.features.geo == before.features.geo);
    CHECK(c.decoders.coarse == before.decoders.coarse);
    CHECK(c.features.tex != before.features.tex);
    CHECK(c.decoders.color != before.decoders.color);
}

TEST_CASE("one-stage ablation trains geometry too") {
    const auto& w = tiny_world();
    FitConfig cfg = short_fit(2, 2);
    cfg.one_stage = true;
    FitHistory hist;
    const AvatarCheckpoint c = fit_avatar(w.data, cfg, &hist);
    REQUIRE(hist.stages.size() == 1);
    CHECK(hist.stages[0].kind == StageKind::OneStage);
    CHECK(hist.stages[0].loss.size() == 4);
    CHECK(c.features.geo != initial_avatar(w.data, cfg).features.geo);
    CHECK(c.meta.one_stage);
}

TEST_CASE("training log is one JSON record per logged step") {
    const auto& w = tiny_world();
    const FitConfig cfg = short_fit(2, 3);
    std::ostringstream log;
    int checkpoints = 0;
    FitObserver obs;
    obs.log = &log;
    obs.checkpoint = [&](const AvatarCheckpoint&, StageKind, int) { ++checkpoints; };
    FitConfig every = cfg;
    every.checkpoint_every = 2;
    fit_avatar(w.data, every, nullptr, obs);
    std::istringstream in(log.str());
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* key : {"step", "stage", "loss", "terms", "wall_ms"}) CHECK(j.contains(key));
        ++n;
    }
    CHECK(n == 5);
    CHECK(checkpoints == 2);  // step 2 of each stage
}

TEST_CASE("masked psnr") {
    std::vector<std::uint8_t> a(12, 100), b(12, 110), m(4, 255), none(4, 0);
    CHECK(masked_psnr(a, a, m, m) == kPsnrCap);
    CHECK(masked_psnr(a, b, m, m) == doctest::Approx(20 * std::log10(255.0 / 10.0)).epsilon(1e-12));
    // Only pixel 0 is inside either mask.
    std::vector<std::uint8_t> m0(4, 0);
    m0[0] = 255;
    std::vector<std::uint8_t> c = a;
    c[3] = 255;  // outside the union, ignored
    CHECK(masked_psnr(a, c, m0, none) == kPsnrCap);
}

TEST_CASE("evaluation of the reference subject hits the cap") {
    const auto& w = tiny_world();
    const EvalReport r = evaluate(w.scene.avatar, w.data, w.data.holdout);
    REQUIRE(r.per_frame.size() == 1);
    CHECK(r.per_frame[0].frame == 7);
    CHECK(r.mean_psnr == kPsnrCap);
    CHECK(r.mean_ssim == doctest::Approx(1.0));
    CHECK(r.mean_iou == 1.0);
    CHECK_THROWS_AS(evaluate(w.scene.avatar, w.data, {}), UsageError);
}

TEST_CASE("200 steps on a one-frame dataset lower the L1 loss") {
    testing::TempDir dir;
    const ReferenceScene scene = generate_subject(testing::tiny_body(), kStandardTexture, 8);
    const Dataset one = render_dataset(scene, 1, 32, 32, OrbitSpec{}, MotionSpec{}, dir.path());
    REQUIRE(one.train == std::vector<int>{0});
    FitHistory hist;
    fit_avatar(one, short_fit(100, 100), &hist);
    REQUIRE(hist.stages.size() == 2);
    const auto& first = hist.stages.front().l1;
    const auto& last = hist.stages.back().l1;
    CHECK(last.back() < first.front());
}
