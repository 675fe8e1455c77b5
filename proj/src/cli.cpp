#include "gma/cli.hpp"

#include "gma/avatar.hpp"
#include "gma/edit_ops.hpp"
#include "gma/editor_service.hpp"
#include "gma/errors.hpp"
#include "gma/image_io.hpp"
#include "gma/persistence.hpp"
#include "gma/synth_data.hpp"
#include "gma/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <regex>

namespace gma {

namespace {

using nlohmann::json;

json read_json_file(const std::string& path, const std::string& flag) {
    std::ifstream in(path);
    if (!in) throw IoError(flag + ": cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(flag + ": malformed JSON in " + path + " (" + e.what() + ")");
    }
}

/// "all", a JSON file holding an index array (or {"faces": [...]}), or a
/// comma list of indices and inclusive ranges such as "0-9,12".
std::vector<int> parse_region(const std::string& text, std::size_t n_faces, const std::string& flag) {
    if (text == "all") return FaceRegion::all(n_faces).faces;
    std::vector<int> out;
    if (text.size() > 5 && text.ends_with(".json")) {
        json j = read_json_file(text, flag);
        if (j.is_object() && j.contains("faces")) j = j.at("faces");
        try {
            out = j.get<std::vector<int>>();
        } catch (const json::exception&) {
            throw ConfigError(flag + ": " + text + " must hold an array of face indices");
        }
    } else {
        static const std::regex item(R"(\s*(\d+)\s*(?:-\s*(\d+))?\s*)");
        std::stringstream ss(text);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            std::smatch m;
            if (!std::regex_match(tok, m, item)) throw ConfigError(flag + ": cannot parse '" + tok + "'");
            const int a = std::stoi(m[1].str());
            const int b = m[2].matched ? std::stoi(m[2].str()) : a;
            if (b < a) throw ConfigError(flag + ": empty range '" + tok + "'");
            for (int i = a; i <= b; ++i) out.push_back(i);
        }
    }
    if (out.empty()) throw ConfigError(flag + ": region is empty");
    for (int f : out)
        if (f < 0 || static_cast<std::size_t>(f) >= n_faces)
            throw IndexError(flag + ": face " + std::to_string(f) + " out of range (" + std::to_string(n_faces) +
                             " faces)");
    return out;
}

/// Accepts a bare camera object or anything with a "camera" member, such as a
/// manifest frame entry.
Camera load_camera(const std::string& path, int width, int height) {
    json j = read_json_file(path, "--camera-json");
    if (j.is_object() && j.contains("camera")) j = j.at("camera");
    if (!j.contains("width") && !j.contains("height") && (width <= 0 || height <= 0))
        throw ConfigError("--camera-json: camera has no size; pass --width and --height");
    try {
        Camera c = Camera::from_json(j, width, height);
        if (width > 0) c.width = width;
        if (height > 0) c.height = height;
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError("--camera-json: " + std::string(e.what()));
    }
}

/// A BodyParams object or a manifest frame entry; `fallback` when no path.
BodyParams load_pose(const std::string& path, const BodyParams& fallback, const SkinnedBody& body) {
    if (path.empty()) return fallback;
    json j = read_json_file(path, "--pose-json");
    if (j.is_object() && j.contains("params")) j = j.at("params");
    try {
        BodyParams p = BodyParams::from_json(j);
        body.check_params(p);
        return p;
    } catch (const json::exception& e) {
        throw ConfigError("--pose-json: " + std::string(e.what()));
    } catch (const ParameterError& e) {
        throw ParameterError("--pose-json: " + std::string(e.what()));
    }
}

std::pair<int, int> parse_resolution(const std::string& text) {
    static const std::regex re(R"((\d+)(?:x(\d+))?)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) throw ConfigError("--res: expected N or WxH, got '" + text + "'");
    const int w = std::stoi(m[1].str());
    const int h = m[2].matched ? std::stoi(m[2].str()) : w;
    if (w <= 0 || h <= 0 || w > 4096 || h > 4096) throw ConfigError("--res: resolution out of range");
    return {w, h};
}

Vec3 to_vec3(const std::vector<double>& v, const std::string& flag) {
    if (v.size() != 3) throw ConfigError(flag + ": needs 3 values");
    return {v[0], v[1], v[2]};
}

json orbit_json(const OrbitSpec& o) {
    return {{"radius", o.radius},
            {"eye_height", o.eye_height},
            {"target_height", o.target_height},
            {"focal_factor", o.focal_factor}};
}

json motion_json(const MotionSpec& m) {
    return {{"arm_swing", m.arm_swing},
            {"leg_swing", m.leg_swing},
            {"head_turn", m.head_turn},
            {"expression", m.expression},
            {"cycles", m.cycles}};
}

template <class T>
void take(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

void echo(std::ostream& out, const json& config) { out << config.dump() << std::endl; }

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string config, res = "128", out, texture = kStandardTexture;
    int frames = 48, threads = 1;
    std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a, const CLI::App& cmd, std::ostream& out) {
    BodyConfig body;
    OrbitSpec orbit;
    MotionSpec motion;
    Vec3 background = Vec3::Ones();
    int frames = a.frames;
    auto [width, height] = parse_resolution(a.res);
    std::uint64_t seed = a.seed;
    std::string texture = a.texture;
    if (!a.config.empty()) {
        const json j = read_json_file(a.config, "--config");
        try {
            if (j.contains("body")) body = BodyConfig::from_json(j.at("body"));
            if (!cmd.count("--frames")) take(j, "frames", frames);
            if (!cmd.count("--seed")) take(j, "seed", seed);
            if (!cmd.count("--texture")) take(j, "texture", texture);
            if (!cmd.count("--res")) {
                take(j, "width", width);
                take(j, "height", height);
            }
            if (j.contains("orbit")) {
                const auto& o = j.at("orbit");
                take(o, "radius", orbit.radius);
                take(o, "eye_height", orbit.eye_height);
                take(o, "target_height", orbit.target_height);
                take(o, "focal_factor", orbit.focal_factor);
            }
            if (j.contains("motion")) {
                const auto& m = j.at("motion");
                take(m, "arm_swing", motion.arm_swing);
                take(m, "leg_swing", motion.leg_swing);
                take(m, "head_turn", motion.head_turn);
                take(m, "expression", motion.expression);
                take(m, "cycles", motion.cycles);
            }
            if (j.contains("background")) background = to_vec3(j.at("background").get<std::vector<double>>(), "background");
        } catch (const json::exception& e) {
            throw ConfigError("--config: " + std::string(e.what()));
        }
    }
    body.validate();
    if (frames < 1) throw ConfigError("--frames: must be at least 1");
    if (width <= 0 || height <= 0) throw ConfigError("--res: resolution must be positive");
    const TextureSpec tex = TextureSpec::parse(texture);
    echo(out, {{"command", "synth"},
               {"out", a.out},
               {"threads", a.threads},
               {"config",
                {{"body", body.to_json()},
                 {"frames", frames},
                 {"width", width},
                 {"height", height},
                 {"seed", seed},
                 {"texture", tex.to_string()},
                 {"orbit", orbit_json(orbit)},
                 {"motion", motion_json(motion)},
                 {"background", {background.x(), background.y(), background.z()}}}}});
    const ReferenceScene scene = generate_subject(body, tex.to_string(), seed);
    render_dataset(scene, frames, width, height, orbit, motion, a.out, background, a.threads);
    save_checkpoint(scene.avatar, std::filesystem::path(a.out) / "subject.gma");
    return 0;
}

struct FitArgs {
    std::string data, out, log, config;
    int stage1 = 2000, stage2 = 2000, threads = 1, batch = 1, checkpoint_every = 0;
    bool one_stage = false, face_offsets = false;
    std::uint64_t seed = 0;
};

int run_fit(const FitArgs& a, const CLI::App& cmd, std::ostream& out) {
    FitConfig cfg;
    if (!a.config.empty()) {
        try {
            cfg = FitConfig::from_json(read_json_file(a.config, "--config"));
        } catch (const json::exception& e) {
            throw ConfigError("--config: " + std::string(e.what()));
        }
    }
    if (!a.config.empty() ? cmd.count("--stage1-steps") > 0 : true) cfg.stage1_steps = a.stage1;
    if (!a.config.empty() ? cmd.count("--stage2-steps") > 0 : true) cfg.stage2_steps = a.stage2;
    if (!a.config.empty() ? cmd.count("--seed") > 0 : true) cfg.seed = a.seed;
    if (!a.config.empty() ? cmd.count("--threads") > 0 : true) cfg.threads = a.threads;
    if (!a.config.empty() ? cmd.count("--batch") > 0 : true) cfg.batch = a.batch;
    if (a.one_stage) cfg.one_stage = true;
    if (a.face_offsets) cfg.offset_mode = OffsetMode::Free;
    if (cmd.count("--checkpoint-every")) {
        cfg.checkpoint_every = a.checkpoint_every;
        cfg.checkpoint_path = a.out;
    }
    cfg.validate();
    echo(out, {{"command", "fit"}, {"data", a.data}, {"out", a.out}, {"log", a.log}, {"fit", cfg.to_json()}});
    const Dataset data = load_dataset(a.data);
    std::ofstream log;
    FitObserver obs;
    if (!a.log.empty()) {
        log.open(a.log);
        if (!log) throw IoError("--log: cannot write " + a.log);
        obs.log = &log;
    }
    if (cfg.checkpoint_every > 0)
        obs.checkpoint = [&](const AvatarCheckpoint& c, StageKind, int) { save_checkpoint(c, a.out); };
    const AvatarCheckpoint result = fit_avatar(data, cfg, nullptr, obs);
    save_checkpoint(result, a.out);
    return 0;
}

struct RenderArgs {
    std::string ckpt, camera, pose, out, mask_out;
    int width = 0, height = 0, threads = 1;
    std::vector<double> background{1, 1, 1};
};

int run_render(const RenderArgs& a, std::ostream& out) {
    const AvatarCheckpoint ckpt = load_checkpoint(a.ckpt);
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const Camera cam = load_camera(a.camera, a.width, a.height);
    const BodyParams params = load_pose(a.pose, ckpt.canonical, ctx->body);
    const Vec3 bg = to_vec3(a.background, "--background");
    echo(out, {{"command", "render"},
               {"ckpt", a.ckpt},
               {"out", a.out},
               {"mask_out", a.mask_out},
               {"camera", cam.to_json()},
               {"params", params.to_json()},
               {"background", a.background},
               {"threads", a.threads}});
    const DecodedAvatar dec = decode_avatar(ckpt, *ctx);
    const FrameImage img = render_frame(ckpt, *ctx, dec, params, cam, bg, a.threads);
    write_png(a.out, {cam.width, cam.height, 3, img.rgb});
    if (!a.mask_out.empty()) write_png(a.mask_out, {cam.width, cam.height, 1, img.mask});
    return 0;
}

struct EditArgs {
    std::string ckpt, out, region = "all", source, source_region, mode = "both", image, camera, pose;
    std::vector<double> color, beta, psi;
    bool delta = false;
};

int run_edit(const std::string& kind, const EditArgs& a, std::ostream& out) {
    const AvatarCheckpoint ckpt = load_checkpoint(a.ckpt);
    EditCommand cmd;
    cmd.kind = kind;
    const bool regional = kind == "transfer" || kind == "paint" || kind == "stamp";
    if (regional) cmd.region = parse_region(a.region, ckpt.num_faces(), "--region");
    json& p = cmd.payload;
    if (kind == "transfer") {
        p["source_path"] = a.source;
        p["mode"] = to_string(transfer_mode_from_string(a.mode));
        if (!a.source_region.empty()) {
            const AvatarCheckpoint src = load_checkpoint(a.source);
            p["source_region"] = parse_region(a.source_region, src.num_faces(), "--source-region");
        }
    } else if (kind == "paint") {
        const Vec3 c = to_vec3(a.color, "--color");
        p["color"] = {c.x(), c.y(), c.z()};
    } else if (kind == "stamp") {
        const Image8 image = read_png(a.image);
        const Camera cam = load_camera(a.camera, image.width, image.height);
        const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
        p["image_path"] = a.image;
        p["camera"] = cam.to_json();
        p["params"] = load_pose(a.pose, ckpt.canonical, ctx->body).to_json();
    } else if (kind == "shape") {
        p["beta"] = a.beta;
    } else if (kind == "expression") {
        p["psi"] = a.psi;
    } else if (kind == "pose") {
        json j = read_json_file(a.pose, "--pose-json");
        if (j.is_object() && j.contains("params")) j = j.at("params");
        if (!j.is_object() || !j.contains("theta")) throw ConfigError("--pose-json: needs a 'theta' member");
        p["theta"] = j.at("theta");
    }
    if (!regional) p["delta"] = a.delta;
    echo(out, {{"command", "edit"}, {"ckpt", a.ckpt}, {"out", a.out}, {"edit", cmd.to_json()}});
    const EditOutcome outcome = apply_edit(ckpt, EditCommand::from_json(cmd.to_json()));
    save_checkpoint(outcome.avatar, a.out);
    echo(out, {{"changed_faces", outcome.changed_faces.size()}, {"notices", outcome.notices}, {"report", outcome.report}});
    return 0;
}

struct EvalArgs {
    std::string ckpt, data, json_out, frames = "holdout";
    int threads = 1;
};

int run_eval(const EvalArgs& a, std::ostream& out) {
    echo(out, {{"command", "eval"},
               {"ckpt", a.ckpt},
               {"data", a.data},
               {"json_out", a.json_out},
               {"frames", a.frames},
               {"threads", a.threads}});
    const AvatarCheckpoint ckpt = load_checkpoint(a.ckpt);
    const Dataset data = load_dataset(a.data);
    if (ckpt.body_config != data.body_config)
        throw CompatibilityError("--ckpt: body configuration differs from the dataset's");
    std::vector<int> frames;
    if (a.frames == "holdout") {
        frames = data.holdout;
    } else if (a.frames == "train") {
        frames = data.train;
    } else {
        for (int i = 0; i < static_cast<int>(data.frames.size()); ++i) frames.push_back(i);
    }
    const json report = evaluate(ckpt, data, frames, a.threads).to_json();
    if (a.json_out.empty() || a.json_out == "-") {
        out << report.dump() << std::endl;
    } else {
        std::ofstream f(a.json_out);
        if (!f) throw IoError("--json-out: cannot write " + a.json_out);
        f << report.dump(2) << '\n';
    }
    return 0;
}

struct ExportArgs {
    std::string ckpt, out, pose;
    bool base = false;
};

int run_export(const ExportArgs& a, std::ostream& out) {
    const AvatarCheckpoint ckpt = load_checkpoint(a.ckpt);
    const auto ctx = make_body_context(ckpt.body_config, ckpt.constants);
    const BodyParams params = load_pose(a.pose, ckpt.canonical, ctx->body);
    echo(out, {{"command", "export-mesh"},
               {"ckpt", a.ckpt},
               {"out", a.out},
               {"base", a.base},
               {"params", params.to_json()}});
    const DecodedAvatar dec = decode_avatar(ckpt, *ctx, {true, false, false});
    const PosedAvatar posed = pose_avatar(ckpt, *ctx, dec, params, false, false);
    const auto& faces = ctx->body.faces;
    const auto& verts = a.base ? posed.posed.vertices : posed.morphed.vertices;
    write_obj(a.out, verts, vertex_normals(verts, faces), faces);
    return 0;
}

struct ServeArgs {
    std::string ckpt, addr = "127.0.0.1:8080";
    int threads = 1, view_size = 256;
    std::size_t undo_depth = 16;
};

int run_serve(const ServeArgs& a, std::ostream& out) {
    parse_address(a.addr);
    SessionOptions opts;
    opts.render_threads = a.threads;
    opts.view_size = a.view_size;
    opts.undo_depth = a.undo_depth;
    echo(out, {{"command", "serve"},
               {"ckpt", a.ckpt},
               {"addr", a.addr},
               {"threads", a.threads},
               {"view_size", a.view_size},
               {"undo_depth", a.undo_depth}});
    serve(load_checkpoint(a.ckpt), a.addr, opts);
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Gaussian morphing avatar toolkit", "gma"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Render a synthetic subject into a dataset directory");
    s->add_option("--config", synth.config, "JSON with body, frames, width, height, seed, texture, orbit, motion")
        ->check(CLI::ExistingFile);
    s->add_option("--frames", synth.frames, "Number of frames")->capture_default_str();
    s->add_option("--res", synth.res, "Resolution N or WxH")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--seed", synth.seed, "Subject seed")->capture_default_str();
    s->add_option("--texture", synth.texture, "Pattern, e.g. regions+checker(2)")->capture_default_str();
    s->add_option("--threads", synth.threads)->check(CLI::PositiveNumber)->capture_default_str();

    FitArgs fit;
    auto* f = app.add_subcommand("fit", "Fit an avatar to a dataset");
    f->add_option("--data", fit.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    f->add_option("--out", fit.out, "Output checkpoint")->required();
    f->add_option("--config", fit.config, "FitConfig JSON; flags override it")->check(CLI::ExistingFile);
    f->add_option("--stage1-steps", fit.stage1)->check(CLI::NonNegativeNumber)->capture_default_str();
    f->add_option("--stage2-steps", fit.stage2)->check(CLI::NonNegativeNumber)->capture_default_str();
    f->add_flag("--one-stage", fit.one_stage, "Single stage with every parameter trained");
    f->add_flag("--face-offsets", fit.face_offsets, "Free per-face offsets instead of normal offsets");
    f->add_option("--seed", fit.seed)->capture_default_str();
    f->add_option("--threads", fit.threads)->check(CLI::PositiveNumber)->capture_default_str();
    f->add_option("--batch", fit.batch)->check(CLI::PositiveNumber)->capture_default_str();
    f->add_option("--checkpoint-every", fit.checkpoint_every, "Write --out every N steps")
        ->check(CLI::PositiveNumber);
    f->add_option("--log", fit.log, "NDJSON training log");

    RenderArgs render;
    auto* r = app.add_subcommand("render", "Render a checkpoint to PNG");
    r->add_option("--ckpt", render.ckpt)->required()->check(CLI::ExistingFile);
    r->add_option("--camera-json", render.camera, "Camera JSON or manifest frame entry")
        ->required()
        ->check(CLI::ExistingFile);
    r->add_option("--pose-json", render.pose, "Body parameters JSON; canonical when omitted")
        ->check(CLI::ExistingFile);
    r->add_option("--out", render.out)->required();
    r->add_option("--mask-out", render.mask_out);
    r->add_option("--width", render.width)->check(CLI::PositiveNumber);
    r->add_option("--height", render.height)->check(CLI::PositiveNumber);
    r->add_option("--background", render.background)->delimiter(',')->expected(3)->capture_default_str();
    r->add_option("--threads", render.threads)->check(CLI::PositiveNumber)->capture_default_str();

    EditArgs edit;
    auto* e = app.add_subcommand("edit", "Apply one edit and write a new checkpoint");
    e->require_subcommand(1);
    std::string edit_kind;
    auto edit_cmd = [&](const char* name, const char* help) {
        auto* c = e->add_subcommand(name, help);
        c->add_option("--ckpt", edit.ckpt)->required()->check(CLI::ExistingFile);
        c->add_option("--out", edit.out)->required();
        c->callback([&edit_kind, name] { edit_kind = name; });
        return c;
    };
    auto* et = edit_cmd("transfer", "Copy feature rows from another avatar");
    et->add_option("--source", edit.source, "Source checkpoint")->required()->check(CLI::ExistingFile);
    et->add_option("--region", edit.region, "Target faces: all, i,j,a-b or a .json file")->capture_default_str();
    et->add_option("--source-region", edit.source_region, "Source faces; defaults to --region");
    et->add_option("--mode", edit.mode, "geo, tex or both")->capture_default_str();
    auto* ep = edit_cmd("paint", "Recolor a region");
    ep->add_option("--region", edit.region)->required();
    ep->add_option("--color", edit.color, "r,g,b in [0, 1]")->required()->delimiter(',')->expected(3);
    auto* es = edit_cmd("stamp", "Project an image onto a region");
    es->add_option("--region", edit.region)->required();
    es->add_option("--image", edit.image)->required()->check(CLI::ExistingFile);
    es->add_option("--camera-json", edit.camera)->required()->check(CLI::ExistingFile);
    es->add_option("--pose-json", edit.pose)->check(CLI::ExistingFile);
    auto* eb = edit_cmd("shape", "Set the canonical shape");
    eb->add_option("--beta", edit.beta)->required()->delimiter(',');
    eb->add_flag("--delta", edit.delta, "Add to the current values");
    auto* eo = edit_cmd("pose", "Set the canonical pose");
    eo->add_option("--pose-json", edit.pose)->required()->check(CLI::ExistingFile);
    eo->add_flag("--delta", edit.delta, "Add to the current values");
    auto* ex = edit_cmd("expression", "Set the canonical expression");
    ex->add_option("--psi", edit.psi)->required()->delimiter(',');
    ex->add_flag("--delta", edit.delta, "Add to the current values");

    EvalArgs ev;
    auto* v = app.add_subcommand("eval", "Score a checkpoint against a dataset");
    v->add_option("--ckpt", ev.ckpt)->required()->check(CLI::ExistingFile);
    v->add_option("--data", ev.data)->required()->check(CLI::ExistingDirectory);
    v->add_option("--json-out", ev.json_out, "Metrics file; stdout when omitted");
    v->add_option("--frames", ev.frames)->check(CLI::IsMember({"holdout", "train", "all"}))->capture_default_str();
    v->add_option("--threads", ev.threads)->check(CLI::PositiveNumber)->capture_default_str();

    ExportArgs ex_mesh;
    auto* m = app.add_subcommand("export-mesh", "Write the morphed mesh as OBJ");
    m->add_option("--ckpt", ex_mesh.ckpt)->required()->check(CLI::ExistingFile);
    m->add_option("--out", ex_mesh.out)->required();
    m->add_option("--pose-json", ex_mesh.pose)->check(CLI::ExistingFile);
    m->add_flag("--base", ex_mesh.base, "Write the posed base mesh without offsets");

    ServeArgs sv;
    auto* w = app.add_subcommand("serve", "Run the editing service");
    w->add_option("--ckpt", sv.ckpt)->required()->check(CLI::ExistingFile);
    w->add_option("--addr", sv.addr, "host:port")->capture_default_str();
    w->add_option("--threads", sv.threads)->check(CLI::PositiveNumber)->capture_default_str();
    w->add_option("--view-size", sv.view_size)->check(CLI::Range(16, 4096))->capture_default_str();
    w->add_option("--undo-depth", sv.undo_depth)->check(CLI::PositiveNumber)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& ex) {
        err << "error: " << ex.what() << '\n';
        return 1;
    }

    try {
        if (s->parsed()) return run_synth(synth, *s, out);
        if (f->parsed()) return run_fit(fit, *f, out);
        if (r->parsed()) return run_render(render, out);
        if (e->parsed()) return run_edit(edit_kind, edit, out);
        if (v->parsed()) return run_eval(ev, out);
        if (m->parsed()) return run_export(ex_mesh, out);
        if (w->parsed()) return run_serve(sv, out);
        err << "error: no subcommand\n";
        return 1;
    } catch (const ConfigError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const ParameterError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const UsageError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const IoError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const LoadError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const IndexError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const CorrespondenceError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const CompatibilityError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const ShapeError& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const json::exception& ex) {
        err << "error: " << ex.what() << '\n';
    } catch (const std::exception& ex) {
        err << "internal error: " << ex.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace gma
