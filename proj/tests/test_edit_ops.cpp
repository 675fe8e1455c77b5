#include "support/fixtures.hpp"

#include "gma/edit_ops.hpp"
#include "gma/errors.hpp"
#include "gma/persistence.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>

using namespace gma;
using testing::TempDir;
using testing::tiny_body;
using testing::tiny_world;

namespace {

// Same decoders as `base`, independent features.
AvatarCheckpoint sibling(const AvatarCheckpoint& base, std::uint64_t seed) {
    AvatarCheckpoint other = init_avatar(base.body_config, base.constants, base.offset_mode, seed);
    other.decoders = base.decoders;
    other.canonical = base.canonical;
    quantize_to_float(other);
    return other;
}

std::vector<std::uint8_t> render_bytes(const AvatarCheckpoint& c, const Camera& cam) {
    const auto ctx = make_body_context(c.body_config, c.constants);
    const DecodedAvatar dec = decode_avatar(c, *ctx);
    return render_frame(c, *ctx, dec, c.canonical, cam, Vec3::Ones()).rgb;
}

std::vector<Vec3> positions(const AvatarCheckpoint& c) {
    const PosedAvatar p = apply_body_params(c, c.canonical);
    std::vector<Vec3> out;
    for (const auto& s : p.surfels) out.push_back(s.position);
    return out;
}

std::vector<int> part_faces(const SkinnedBody& body, BodyPart part) {
    std::vector<int> out;
    for (std::size_t f = 0; f < body.num_faces(); ++f)
        if (body.face_part[f] == part) out.push_back(static_cast<int>(f));
    return out;
}

}  // namespace

TEST_CASE("face regions") {
    CHECK(FaceRegion::from({5, 1, 5, 3}).faces == std::vector<int>{1, 3, 5});
    CHECK(FaceRegion::all(4).faces == std::vector<int>{0, 1, 2, 3});
    CHECK_THROWS_AS(FaceRegion{}.check(10), UsageError);
    CHECK_THROWS_AS(FaceRegion::from({2, 10}).check(10), IndexError);
    CHECK_THROWS_AS(FaceRegion::from({-1}).check(10), IndexError);
    CHECK_NOTHROW(FaceRegion::from({0, 9}).check(10));
}

TEST_CASE("transfer modes") {
    for (auto m : {TransferMode::Geo, TransferMode::Tex, TransferMode::Both})
        CHECK(transfer_mode_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(transfer_mode_from_string("colour"), ConfigError);
}

TEST_CASE("whole-region transfer of both features reproduces the source render") {
    const auto& w = tiny_world();
    const AvatarCheckpoint a = w.scene.avatar;
    const AvatarCheckpoint b = sibling(a, 77);
    const auto all = FaceRegion::all(a.num_faces()).faces;
    const AvatarCheckpoint moved = transfer_features(b, a, all, all, TransferMode::Both);
    const Camera cam = w.data.frames[2].camera;
    CHECK(render_bytes(moved, cam) == render_bytes(b, cam));
    CHECK(render_bytes(moved, cam) != render_bytes(a, cam));
}

TEST_CASE("texture-only transfer keeps every surfel position") {
    const auto& w = tiny_world();
    const AvatarCheckpoint a = w.scene.avatar;
    const AvatarCheckpoint b = sibling(a, 78);
    const std::vector<int> region{0, 4, 9, 30, 31, 100};
    const AvatarCheckpoint moved = transfer_features(b, a, region, region, TransferMode::Tex);
    CHECK(positions(moved) == positions(a));
    CHECK(moved.features.geo == a.features.geo);
    for (int f : region) CHECK(moved.features.tex.row(f) == b.features.tex.row(f));
    CHECK(moved.features.tex.row(1) == a.features.tex.row(1));

    const AvatarCheckpoint geo = transfer_features(b, a, region, region, TransferMode::Geo);
    CHECK(geo.features.tex == a.features.tex);
    for (int f : region) CHECK(geo.features.geo.row(f) == b.features.geo.row(f));
}

TEST_CASE("transfer pairs regions by position") {
    const auto& w = tiny_world();
    const AvatarCheckpoint a = w.scene.avatar;
    const AvatarCheckpoint b = sibling(a, 79);
    const AvatarCheckpoint moved = transfer_features(b, a, {10, 3}, {0, 1}, TransferMode::Both);
    CHECK(moved.features.tex.row(0) == b.features.tex.row(10));
    CHECK(moved.features.tex.row(1) == b.features.tex.row(3));
}

TEST_CASE("transfer errors") {
    const auto& w = tiny_world();
    const AvatarCheckpoint a = w.scene.avatar;
    CHECK_THROWS_AS(transfer_features(a, a, {1, 2}, {1}, TransferMode::Both), CorrespondenceError);
    CHECK_THROWS_AS(transfer_features(a, a, {}, {}, TransferMode::Both), UsageError);
    CHECK_THROWS_AS(transfer_features(a, a, {1}, {100000}, TransferMode::Both), IndexError);
    CoreConstants k8 = a.constants;
    k8.k = a.constants.k + 2;
    const AvatarCheckpoint other = init_avatar(a.body_config, k8, a.offset_mode, 1);
    CHECK_THROWS_AS(transfer_features(other, a, {1}, {1}, TransferMode::Both), CompatibilityError);
}

TEST_CASE("mean face colors of the reference subject") {
    const auto& w = tiny_world();
    const auto ctx = make_body_context(w.scene.avatar.body_config, w.scene.avatar.constants);
    const std::vector<int> faces{0, 17, 200};
    const auto colors = face_mean_colors(w.scene.avatar, *ctx, faces);
    for (std::size_t i = 0; i < faces.size(); ++i)
        for (int c = 0; c < 3; ++c) CHECK(colors[i][c] == doctest::Approx(w.scene.face_colors[faces[i]][c]).epsilon(1e-5));
}

TEST_CASE("color inversion reaches its targets and touches only the region") {
    const auto& w = tiny_world();
    const AvatarCheckpoint& a = w.scene.avatar;
    std::vector<int> faces(10);
    for (int i = 0; i < 10; ++i) faces[i] = 3 + 7 * i;
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::vector<Vec3> targets;
    for (int i = 0; i < 10; ++i) targets.emplace_back(u(rng), u(rng), u(rng));
    const InvertResult r = invert_color(a, FaceRegion::from(faces), targets);
    CHECK(r.converged);
    CHECK(r.max_error <= 0.05);
    CHECK(r.mse < 1e-4);
    CHECK(r.steps <= 500);
    CHECK(r.avatar.decoders == a.decoders);
    CHECK(r.avatar.features.geo == a.features.geo);
    for (int f = 0; f < static_cast<int>(a.num_faces()); ++f)
        if (std::find(faces.begin(), faces.end(), f) == faces.end()) CHECK(r.avatar.features.tex.row(f) == a.features.tex.row(f));
    const auto ctx = make_body_context(a.body_config, a.constants);
    const auto got = face_mean_colors(r.avatar, *ctx, faces);
    for (int i = 0; i < 10; ++i) CHECK((got[i] - targets[i]).cwiseAbs().maxCoeff() <= 0.05);
    CHECK_THROWS_AS(invert_color(a, FaceRegion::from(faces), {targets[0]}), CorrespondenceError);
}

TEST_CASE("stamping a half-black half-white image splits the torso by side") {
    const auto& w = tiny_world();
    const AvatarCheckpoint& a = w.scene.avatar;
    const auto ctx = make_body_context(a.body_config, a.constants);
    const int W = 64, H = 64;
    const Camera cam = orbit_camera(OrbitSpec{}, 0, 8, W, H);
    Image8 img{W, H, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H * 3, 255)};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x)
            for (int c = 0; c < 3; ++c) img.data[(static_cast<std::size_t>(y) * W + x) * 3 + c] = 0;
    const std::vector<int> torso = part_faces(ctx->body, BodyPart::Torso);
    const StampResult r = stamp_texture(a, img, cam, FaceRegion::from(torso), a.canonical);
    CHECK(!r.applied.empty());
    CHECK(!r.back_facing.empty());
    CHECK(r.applied.size() + r.back_facing.size() + r.outside.size() == torso.size());

    // Oracle: side of the projected face centroid, for faces whose normal faces the eye.
    const PosedAvatar posed = apply_body_params(a, a.canonical);
    const auto& V = posed.morphed.vertices;
    const Vec3 eye = cam.center();
    const auto colors = face_mean_colors(r.inversion.avatar, *ctx, r.applied);
    int front = 0, correct = 0;
    for (std::size_t i = 0; i < r.applied.size(); ++i) {
        const Face& f = ctx->body.faces[r.applied[i]];
        const Vec3 c = (V[f[0]] + V[f[1]] + V[f[2]]) / 3.0;
        const Vec3 n = (V[f[1]] - V[f[0]]).cross(V[f[2]] - V[f[0]]);
        if (n.dot(c - eye) >= 0) continue;
        ++front;
        const Vec3 p = cam.R * c + cam.t;
        const bool left = cam.fx * p.x() / p.z() + cam.cx < W / 2.0;
        if (left == (colors[i].mean() < 0.5)) ++correct;
    }
    REQUIRE(front > 10);
    CHECK(correct >= 0.95 * front);
}

TEST_CASE("edit command JSON") {
    const auto c = EditCommand::from_json(
        {{"kind", "paint"}, {"region", {1, 2}}, {"payload", {{"color", {1, 0, 0}}}}});
    CHECK(c.kind == "paint");
    CHECK(EditCommand::from_json(c.to_json()).to_json() == c.to_json());
    auto field_error = [](const nlohmann::json& j) {
        try {
            EditCommand::from_json(j);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(field_error({{"region", {1}}}).find("'kind'") != std::string::npos);
    CHECK(field_error({{"kind", "melt"}}).find("'kind'") != std::string::npos);
    CHECK(field_error({{"kind", "paint"}, {"payload", {{"color", {1, 0, 0}}}}}).find("'region'") != std::string::npos);
    CHECK(field_error({{"kind", "paint"}, {"region", {1}}}).find("'payload.color'") != std::string::npos);
    CHECK(field_error({{"kind", "shape"}}).find("'payload.beta'") != std::string::npos);
    CHECK(field_error({{"kind", "paint"}, {"region", "all"}, {"payload", {{"color", {1, 0, 0}}}}})
              .find("'region'") != std::string::npos);
}

TEST_CASE("apply_edit paint, shape and transfer") {
    const auto& w = tiny_world();
    const AvatarCheckpoint& a = w.scene.avatar;
    const auto paint = apply_edit(a, EditCommand::from_json({{"kind", "paint"},
                                                             {"region", {5, 6}},
                                                             {"payload", {{"color", {0.9, 0.1, 0.1}}}}}));
    CHECK(paint.changed_faces == std::vector<int>{5, 6});
    CHECK(paint.avatar.features.tex.row(7) == a.features.tex.row(7));
    CHECK(paint.avatar.features.tex.row(5) != a.features.tex.row(5));
    CHECK(deserialize_checkpoint(serialize_checkpoint(paint.avatar)) == paint.avatar);

    std::vector<double> beta(a.canonical.beta.size(), 0.5);
    const auto shape = apply_edit(a, EditCommand::from_json({{"kind", "shape"}, {"payload", {{"beta", beta}}}}));
    CHECK(shape.avatar.canonical.beta == beta);
    CHECK(shape.avatar.features.tex == a.features.tex);
    const auto more = apply_edit(shape.avatar, EditCommand::from_json(
                                                   {{"kind", "shape"}, {"payload", {{"beta", beta}, {"delta", true}}}}));
    CHECK(more.avatar.canonical.beta[0] == 1.0);
    CHECK_THROWS_AS(apply_edit(a, EditCommand::from_json({{"kind", "shape"}, {"payload", {{"beta", {1.0}}}}})),
                    ParameterError);
    CHECK_THROWS_AS(apply_edit(a, EditCommand::from_json({{"kind", "paint"},
                                                          {"region", {5}},
                                                          {"payload", {{"color", {1, 0}}}}})),
                    ConfigError);

    const AvatarCheckpoint b = sibling(a, 90);
    const auto src = serialize_checkpoint(b);
    const auto moved = apply_edit(a, EditCommand::from_json({{"kind", "transfer"},
                                                             {"region", {3}},
                                                             {"payload",
                                                              {{"source_base64", base64_encode(src)},
                                                               {"mode", "tex"}}}}));
    CHECK(moved.avatar.features.tex.row(3) == b.features.tex.row(3));
    CHECK(moved.avatar.features.geo.row(3) == a.features.geo.row(3));
}

TEST_CASE("base64") {
    const std::string text = "foobar";
    const std::vector<std::uint8_t> bytes(text.begin(), text.end());
    CHECK(base64_encode(bytes) == "Zm9vYmFy");
    CHECK(base64_decode("Zm9vYmFy") == bytes);
    CHECK(base64_encode(std::vector<std::uint8_t>{'f'}) == "Zg==");
    std::vector<std::uint8_t> all(256);
    for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
    CHECK(base64_decode(base64_encode(all)) == all);
    CHECK_THROWS_AS(base64_decode("Zm9v!"), ConfigError);
    CHECK_THROWS_AS(base64_decode("Zg=a"), ConfigError);
    CHECK_THROWS_AS(base64_decode("Zg"), ConfigError);
}
