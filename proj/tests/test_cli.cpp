#include "support/fixtures.hpp"

#include "gma/cli.hpp"
#include "gma/image_io.hpp"
#include "gma/persistence.hpp"
#include "gma/trainer.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace gma;
using nlohmann::json;
using testing::TempDir;
using testing::tiny_body;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
    json config() const { return json::parse(out.substr(0, out.find('\n'))); }
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "gma");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

void write_json(const std::filesystem::path& p, const json& j) { std::ofstream(p) << j.dump(); }

// Small dataset through the CLI, shared by the cases below.
const TempDir& world() {
    static TempDir dir("gma_cli");
    static const bool built = [] {
        write_json(dir / "synth.json", {{"body", tiny_body().to_json()}});
        const Run r = cli({"synth", "--config", (dir / "synth.json").string(), "--frames", "8", "--res", "32",
                           "--seed", "4", "--out", (dir / "data").string()});
        REQUIRE(r.code == 0);
        return true;
    }();
    (void)built;
    return dir;
}

}  // namespace

TEST_CASE("synth echoes a replayable configuration") {
    const TempDir& w = world();
    CHECK(std::filesystem::exists(w / "data/manifest.json"));
    CHECK(std::filesystem::exists(w / "data/rgb_0007.png"));
    CHECK(std::filesystem::exists(w / "data/subject.gma"));

    TempDir again;
    write_json(again / "synth.json", {{"body", tiny_body().to_json()}});
    const Run first = cli({"synth", "--config", (again / "synth.json").string(), "--frames", "8", "--res", "32",
                           "--seed", "4", "--out", (again / "a").string()});
    REQUIRE(first.code == 0);
    const json cfg = first.config();
    CHECK(cfg["command"] == "synth");
    CHECK(cfg["config"]["width"] == 32);
    write_json(again / "replay.json", cfg["config"]);
    const Run replay = cli({"synth", "--config", (again / "replay.json").string(), "--out", (again / "b").string()});
    REQUIRE(replay.code == 0);
    CHECK(replay.config()["config"] == cfg["config"]);
    CHECK(slurp(again / "a/manifest.json") == slurp(again / "b/manifest.json"));
    CHECK(slurp(again / "a/rgb_0005.png") == slurp(again / "b/rgb_0005.png"));
}

TEST_CASE("eval of the reference subject reports the PSNR cap") {
    const TempDir& w = world();
    const auto json_out = (w / "metrics.json").string();
    const Run r = cli({"eval", "--ckpt", (w / "data/subject.gma").string(), "--data", (w / "data").string(),
                       "--json-out", json_out});
    REQUIRE(r.code == 0);
    const json m = json::parse(slurp(json_out));
    CHECK(m["mean_psnr"] == kPsnrCap);
    CHECK(m["per_frame"].size() == 1);
    CHECK(m["per_frame"][0].contains("psnr"));
    CHECK(m["per_frame"][0].contains("ssim"));
    CHECK(m.contains("mean_ssim"));
}

TEST_CASE("zero-step fit writes the initial avatar") {
    const TempDir& w = world();
    const auto out = w / "zero.gma";
    const Run r = cli({"fit", "--data", (w / "data").string(), "--out", out.string(), "--stage1-steps", "0",
                       "--stage2-steps", "0", "--seed", "9"});
    REQUIRE(r.code == 0);
    const json echoed = r.config();
    CHECK(echoed["fit"]["seed"] == 9);
    const FitConfig cfg = FitConfig::from_json(echoed["fit"]);
    CHECK(serialize_checkpoint(load_checkpoint(out)) ==
          serialize_checkpoint(initial_avatar(load_dataset(w / "data"), cfg)));
}

TEST_CASE("fit replays from its echoed configuration") {
    const TempDir& w = world();
    const Run a = cli({"fit", "--data", (w / "data").string(), "--out", (w / "a.gma").string(), "--stage1-steps",
                       "2", "--stage2-steps", "2", "--one-stage", "--face-offsets", "--log", (w / "log.ndjson").string()});
    REQUIRE(a.code == 0);
    write_json(w / "fit.json", a.config()["fit"]);
    const Run b = cli({"fit", "--data", (w / "data").string(), "--out", (w / "b.gma").string(), "--config",
                       (w / "fit.json").string()});
    REQUIRE(b.code == 0);
    CHECK(b.config()["fit"] == a.config()["fit"]);
    CHECK(slurp(w / "a.gma") == slurp(w / "b.gma"));
    const AvatarCheckpoint c = load_checkpoint(w / "a.gma");
    CHECK(c.offset_mode == OffsetMode::Free);
    CHECK(c.meta.one_stage);
    CHECK(!slurp(w / "log.ndjson").empty());
}

TEST_CASE("render of a holdout frame matches the evaluation image") {
    const TempDir& w = world();
    const json manifest = json::parse(slurp(w / "data/manifest.json"));
    write_json(w / "frame7.json", manifest["frames"][7]);
    const auto ckpt_path = w / "data/subject.gma";
    const Run r = cli({"render", "--ckpt", ckpt_path.string(), "--camera-json", (w / "frame7.json").string(),
                       "--pose-json", (w / "frame7.json").string(), "--width", "32", "--height", "32", "--out",
                       (w / "r7.png").string()});
    REQUIRE(r.code == 0);
    const Dataset data = load_dataset(w / "data");
    const AvatarCheckpoint ckpt = load_checkpoint(ckpt_path);
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const DecodedAvatar dec = decode_avatar(ckpt, *ctx);
    const auto& f = data.frames[7];
    const FrameImage expect = render_frame(ckpt, *ctx, dec, f.params, f.camera, data.background);
    CHECK(read_png(w / "r7.png").data == expect.rgb);
    CHECK(slurp(w / "r7.png") == slurp(w / "data/rgb_0007.png"));

    const Run sizeless = cli({"render", "--ckpt", ckpt_path.string(), "--camera-json", (w / "frame7.json").string(),
                              "--out", (w / "x.png").string()});
    CHECK(sizeless.code == 1);
    CHECK(sizeless.err.find("--width") != std::string::npos);
}

TEST_CASE("edit subcommands") {
    const TempDir& w = world();
    const auto subject = (w / "data/subject.gma").string();
    const Run p = cli({"edit", "paint", "--ckpt", subject, "--region", "0-3,7", "--color", "0.9,0.1,0.1", "--out",
                       (w / "p.gma").string()});
    REQUIRE(p.code == 0);
    CHECK(p.config()["edit"]["region"] == json::array({0, 1, 2, 3, 7}));
    const AvatarCheckpoint before = load_checkpoint(subject), after = load_checkpoint(w / "p.gma");
    CHECK(after.features.tex.row(0) != before.features.tex.row(0));
    CHECK(after.features.tex.row(4) == before.features.tex.row(4));

    const Run t = cli({"edit", "transfer", "--ckpt", subject, "--source", (w / "p.gma").string(), "--region",
                       "0,1", "--mode", "tex", "--out", (w / "t.gma").string()});
    REQUIRE(t.code == 0);
    CHECK(load_checkpoint(w / "t.gma").features.tex.row(1) == after.features.tex.row(1));

    const Run s = cli({"edit", "shape", "--ckpt", subject, "--beta", "0.5,0,0,0", "--out", (w / "s.gma").string()});
    REQUIRE(s.code == 0);
    CHECK(load_checkpoint(w / "s.gma").canonical.beta == std::vector<double>{0.5, 0, 0, 0});

    const Run bad = cli({"edit", "paint", "--ckpt", subject, "--region", "0,99999", "--color", "1,1,1", "--out",
                         (w / "bad.gma").string()});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("99999") != std::string::npos);
}

TEST_CASE("export-mesh writes the morphed mesh") {
    const TempDir& w = world();
    const Run r = cli({"export-mesh", "--ckpt", (w / "data/subject.gma").string(), "--out", (w / "m.obj").string()});
    REQUIRE(r.code == 0);
    std::ifstream f(w / "m.obj");
    std::string line;
    int v = 0, faces = 0;
    while (std::getline(f, line)) {
        v += line.starts_with("v ");
        faces += line.starts_with("f ");
    }
    CHECK(v == static_cast<int>(tiny_body().vertex_count()));
    CHECK(faces == static_cast<int>(tiny_body().face_count()));
}

TEST_CASE("user errors exit 1 naming the flag or path") {
    const Run unknown = cli({"fit", "--data", ".", "--out", "x.gma", "--bogus"});
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("--bogus") != std::string::npos);

    const Run missing = cli({"render", "--ckpt", "/nonexistent/a.gma", "--camera-json", "c.json", "--out", "o.png"});
    CHECK(missing.code == 1);
    CHECK(missing.err.find("/nonexistent/a.gma") != std::string::npos);

    const Run required = cli({"eval", "--data", "."});
    CHECK(required.code == 1);
    CHECK(required.err.find("--ckpt") != std::string::npos);

    CHECK(cli({}).code == 1);
    CHECK(cli({"dance"}).code == 1);
    CHECK(cli({"--help"}).code == 0);

    TempDir d;
    const Run no_manifest = cli({"fit", "--data", d.path().string(), "--out", (d / "o.gma").string()});
    CHECK(no_manifest.code == 1);
    CHECK(no_manifest.err.find("manifest") != std::string::npos);

    std::ofstream(d / "broken.gma") << "GMA1 not really";
    const Run corrupt = cli({"export-mesh", "--ckpt", (d / "broken.gma").string(), "--out", (d / "m.obj").string()});
    CHECK(corrupt.code == 1);

    const Run bad_addr = cli({"serve", "--ckpt", (world() / "data/subject.gma").string(), "--addr", "host:xyz"});
    CHECK(bad_addr.code == 1);
}
