#include "gma/editor_service.hpp"

#include "gma/errors.hpp"
#include "gma/image_io.hpp"
#include "gma/persistence.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <sys/socket.h>

#include <algorithm>
#include <chrono>
#include <iostream>
#include <regex>
#include <set>

namespace gma {

namespace {

constexpr int kMaxImageSide = 4096;

std::string field_of(const std::string& message) {
    static const std::regex re("field '([^']+)'");
    std::smatch m;
    return std::regex_search(message, m, re) ? m[1].str() : std::string{};
}

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw RequestError(400, std::string("missing field '") + key + "'", key);
    return j.at(key);
}

int dimension(const nlohmann::json& j, const char* key, int fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<int>() <= 0 || v.get<int>() > kMaxImageSide)
        throw RequestError(400, std::string("field '") + key + "' must be a positive integer", key);
    return v.get<int>();
}

Camera camera_of(const nlohmann::json& j, int default_size) {
    const int w = dimension(j, "width", 0), h = dimension(j, "height", 0);
    try {
        const auto& cj = require(j, "camera");
        Camera c = Camera::from_json(cj, w ? w : default_size, h ? h : default_size);
        if (w) c.width = w;
        if (h) c.height = h;
        c.validate();
        if (c.width > kMaxImageSide || c.height > kMaxImageSide) throw ParameterError("image too large");
        return c;
    } catch (const RequestError&) {
        throw;
    } catch (const Error& e) {
        throw RequestError(400, std::string("camera: ") + e.what(), "camera");
    }
}

BodyParams params_of(const nlohmann::json& j, const SessionSnapshot& s) {
    if (!j.contains("params")) return s.params;
    try {
        BodyParams p = BodyParams::from_json(j.at("params"));
        s.ctx->body.check_params(p);
        return p;
    } catch (const Error& e) {
        throw RequestError(400, std::string("params: ") + e.what(), "params");
    }
}

Vec3 background_of(const nlohmann::json& j) {
    if (!j.contains("background")) return Vec3::Ones();
    try {
        const auto v = j.at("background").get<std::vector<double>>();
        if (v.size() != 3) throw std::invalid_argument("size");
        return {v[0], v[1], v[2]};
    } catch (const std::exception&) {
        throw RequestError(400, "field 'background' must be [r, g, b]", "background");
    }
}

bool inside_polygon(const std::vector<Vec2>& poly, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec2 &a = poly[i], &b = poly[j];
        if ((a.y() > y) != (b.y() > y) && x < (b.x() - a.x()) * (y - a.y()) / (b.y() - a.y()) + a.x()) in = !in;
    }
    return in;
}

}  // namespace

Session::Session(AvatarCheckpoint ckpt, SessionOptions opts) : opts_(opts) {
    ckpt.validate();
    const BodyParams params = ckpt.canonical;
    const double focal = 1.3 * opts_.view_size;
    view_ = Camera::look_at(Vec3(0, 1.1, 3.0), Vec3(0, 0.92, 0), Vec3(0, 1, 0), focal, opts_.view_size,
                            opts_.view_size);
    auto snap = std::make_shared<SessionSnapshot>();
    snap->avatar = std::make_shared<const AvatarCheckpoint>(std::move(ckpt));
    snap->ctx = make_body_context(snap->avatar->body_config, snap->avatar->constants);
    snap->decoded = std::make_shared<const DecodedAvatar>(decode_avatar(*snap->avatar, *snap->ctx));
    snap->params = params;
    snap_ = std::move(snap);
    worker_ = std::thread([this] { worker(); });
}

Session::~Session() {
    {
        std::lock_guard lock(queue_mu_);
        stopping_ = true;
    }
    queue_cv_.notify_all();
    worker_.join();
}

std::shared_ptr<const SessionSnapshot> Session::snapshot() const {
    std::lock_guard lock(state_mu_);
    return snap_;
}

Camera Session::view_camera() const {
    std::lock_guard lock(state_mu_);
    return view_;
}

nlohmann::json Session::enqueue(std::function<nlohmann::json()> fn) {
    auto task = std::make_unique<Task>();
    task->run = std::move(fn);
    auto fut = task->done.get_future();
    {
        std::lock_guard lock(queue_mu_);
        if (stopping_) throw RequestError(503, "session is shutting down");
        queue_.push_back(std::move(task));
    }
    queue_cv_.notify_one();
    return fut.get();
}

void Session::worker() {
    for (;;) {
        std::unique_ptr<Task> task;
        {
            std::unique_lock lock(queue_mu_);
            queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (queue_.empty()) return;
            task = std::move(queue_.front());
            queue_.pop_front();
        }
        try {
            task->done.set_value(task->run());
        } catch (...) {
            task->done.set_exception(std::current_exception());
        }
    }
}

void Session::publish(std::shared_ptr<const AvatarCheckpoint> avatar, BodyParams params) {
    const auto old = snapshot();
    auto next = std::make_shared<SessionSnapshot>();
    next->ctx = old->ctx;
    next->decoded = avatar == old->avatar ? old->decoded
                                          : std::make_shared<const DecodedAvatar>(decode_avatar(*avatar, *old->ctx));
    next->avatar = std::move(avatar);
    next->params = std::move(params);
    next->version = old->version + 1;
    {
        std::lock_guard lock(state_mu_);
        snap_ = next;
    }
    broadcast(*next);
}

std::vector<std::uint8_t> Session::render_png(const SessionSnapshot& s, const Camera& cam, const BodyParams& params,
                                              const Vec3& background) const {
    const PosedAvatar posed = pose_avatar(*s.avatar, *s.ctx, *s.decoded, params);
    RasterSettings settings;
    settings.threads = opts_.render_threads;
    const RenderOutput r = rasterize(posed.surfels, cam, background, settings);
    return encode_png({cam.width, cam.height, 3, quantize8(r.color)});
}

void Session::broadcast(const SessionSnapshot& s) {
    std::lock_guard lock(sub_mu_);
    if (subs_.empty()) return;
    auto frame = std::make_shared<const std::vector<std::uint8_t>>(render_png(s, view_camera(), s.params, Vec3::Ones()));
    for (auto& [id, sink] : subs_) sink(frame);
}

int Session::subscribe(std::function<void(std::shared_ptr<const std::vector<std::uint8_t>>)> sink) {
    std::lock_guard lock(sub_mu_);
    const auto s = snapshot();
    auto frame = std::make_shared<const std::vector<std::uint8_t>>(render_png(*s, view_camera(), s->params, Vec3::Ones()));
    const int id = next_sub_++;
    sink(frame);
    subs_.emplace(id, std::move(sink));
    return id;
}

void Session::unsubscribe(int id) {
    std::lock_guard lock(sub_mu_);
    subs_.erase(id);
}

nlohmann::json Session::state() const {
    const auto s = snapshot();
    std::size_t undo_size;
    {
        std::lock_guard lock(state_mu_);
        undo_size = undo_.size();
    }
    bool recording;
    std::size_t keys;
    {
        std::lock_guard lock(record_mu_);
        recording = recording_;
        keys = keys_.size();
    }
    return {{"version", s->version},
            {"faces", s->avatar->num_faces()},
            {"vertices", s->ctx->body.num_vertices()},
            {"params", s->params.to_json()},
            {"canonical", s->avatar->canonical.to_json()},
            {"body_config", s->avatar->body_config.to_json()},
            {"constants", s->avatar->constants.to_json()},
            {"offset_mode", to_string(s->avatar->offset_mode)},
            {"fit", s->avatar->meta.to_json()},
            {"undo_depth", undo_size},
            {"undo_limit", opts_.undo_depth},
            {"recording", recording},
            {"recorded_keys", keys}};
}

std::vector<std::uint8_t> Session::render(const nlohmann::json& request) {
    const auto s = snapshot();
    const Camera cam = camera_of(request, opts_.view_size);
    const BodyParams params = params_of(request, *s);
    const Vec3 bg = background_of(request);
    {
        std::lock_guard lock(state_mu_);
        view_ = cam;
    }
    return render_png(*s, cam, params, bg);
}

nlohmann::json Session::pick(const nlohmann::json& request) {
    const auto s = snapshot();
    const Camera cam = camera_of(request, opts_.view_size);
    const BodyParams params = params_of(request, *s);
    std::vector<Vec2> polygon;
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    const bool box = request.contains("box");
    try {
        if (box) {
            const auto b = request.at("box").get<std::vector<double>>();
            if (b.size() != 4) throw std::invalid_argument("box");
            x0 = std::min(b[0], b[2]);
            x1 = std::max(b[0], b[2]);
            y0 = std::min(b[1], b[3]);
            y1 = std::max(b[1], b[3]);
        } else if (request.contains("polygon")) {
            for (const auto& p : request.at("polygon")) {
                const auto v = p.get<std::vector<double>>();
                if (v.size() != 2) throw std::invalid_argument("polygon");
                polygon.emplace_back(v[0], v[1]);
            }
            if (polygon.size() < 3) throw std::invalid_argument("polygon");
        } else {
            throw RequestError(400, "pick needs 'box' or 'polygon'", "box");
        }
    } catch (const RequestError&) {
        throw;
    } catch (const std::exception&) {
        const char* f = box ? "box" : "polygon";
        throw RequestError(400, std::string("field '") + f + "' is malformed", f);
    }
    const PosedAvatar posed = pose_avatar(*s->avatar, *s->ctx, *s->decoded, params);
    RasterSettings settings;
    settings.threads = opts_.render_threads;
    const RenderOutput r = rasterize(posed.surfels, cam, Vec3::Ones(), settings);
    std::set<int> faces;
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const bool sel = box ? (px >= x0 && px <= x1 && py >= y0 && py <= y1) : inside_polygon(polygon, px, py);
            const int id = r.id[static_cast<std::size_t>(y) * r.width + x];
            if (sel && id >= 0) faces.insert(id);
        }
    return {{"faces", std::vector<int>(faces.begin(), faces.end())}};
}

nlohmann::json Session::edit(const nlohmann::json& command) {
    EditCommand cmd;
    try {
        cmd = EditCommand::from_json(command);
    } catch (const ConfigError& e) {
        throw RequestError(400, e.what(), field_of(e.what()));
    }
    return enqueue([this, cmd] {
        const auto s = snapshot();
        EditOutcome out;
        try {
            out = apply_edit(*s->avatar, cmd, opts_.invert);
        } catch (const ConfigError& e) {
            throw RequestError(400, e.what(), field_of(e.what()));
        } catch (const Error& e) {
            throw RequestError(409, e.what());
        }
        {
            std::lock_guard lock(state_mu_);
            undo_.push_back(s->avatar);
            while (undo_.size() > opts_.undo_depth) undo_.pop_front();
        }
        const bool body_edit = cmd.kind == "shape" || cmd.kind == "pose" || cmd.kind == "expression";
        const BodyParams params = body_edit ? out.avatar.canonical : s->params;
        publish(std::make_shared<const AvatarCheckpoint>(std::move(out.avatar)), params);
        return nlohmann::json{{"ok", true},
                              {"changed_faces", out.changed_faces},
                              {"notices", out.notices},
                              {"report", out.report},
                              {"version", snapshot()->version}};
    });
}

nlohmann::json Session::undo() {
    return enqueue([this] {
        std::shared_ptr<const AvatarCheckpoint> prev;
        {
            std::lock_guard lock(state_mu_);
            if (undo_.empty()) throw RequestError(409, "nothing to undo");
            prev = undo_.back();
            undo_.pop_back();
        }
        const auto s = snapshot();
        const BodyParams params = prev->canonical == s->avatar->canonical ? s->params : prev->canonical;
        publish(prev, params);
        std::lock_guard lock(state_mu_);
        return nlohmann::json{{"ok", true}, {"version", snap_->version}, {"undo_depth", undo_.size()}};
    });
}

nlohmann::json Session::params(const nlohmann::json& request) {
    if (!request.is_object()) throw RequestError(400, "params request must be an object");
    return enqueue([this, request] {
        const auto s = snapshot();
        BodyParams p = s->params;
        if (request.value("reset", false)) {
            p = s->avatar->canonical;
        } else {
            try {
                auto add = [&](const char* key, std::vector<double>& dst) {
                    if (!request.contains(key)) return;
                    const auto v = request.at(key).get<std::vector<double>>();
                    if (v.size() != dst.size())
                        throw RequestError(400, std::string("field '") + key + "' needs " +
                                                    std::to_string(dst.size()) + " values", key);
                    for (std::size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
                };
                add("beta", p.beta);
                add("psi", p.psi);
                if (request.contains("theta")) {
                    const auto& th = request.at("theta");
                    if (!th.is_array() || th.size() != p.theta.size())
                        throw RequestError(400, "field 'theta' needs one [x, y, z] per joint", "theta");
                    for (std::size_t i = 0; i < p.theta.size(); ++i) {
                        const auto v = th[i].get<std::vector<double>>();
                        if (v.size() != 3) throw RequestError(400, "field 'theta' entries need 3 values", "theta");
                        p.theta[i] += Vec3(v[0], v[1], v[2]);
                    }
                }
                s->ctx->body.check_params(p);
            } catch (const RequestError&) {
                throw;
            } catch (const std::exception& e) {
                throw RequestError(400, std::string("params: ") + e.what());
            }
        }
        publish(s->avatar, p);
        return nlohmann::json{{"ok", true}, {"params", p.to_json()}, {"version", snapshot()->version}};
    });
}

nlohmann::json Session::record_start() {
    std::lock_guard lock(record_mu_);
    recording_ = true;
    keys_.clear();
    return {{"ok", true}, {"recording", true}};
}

nlohmann::json Session::record_key(const nlohmann::json& request) {
    const auto s = snapshot();
    const Camera cam = camera_of(request, opts_.view_size);
    std::lock_guard lock(record_mu_);
    if (!recording_) throw RequestError(409, "not recording");
    keys_.push_back({cam, s->params});
    return {{"ok", true}, {"index", keys_.size() - 1}};
}

nlohmann::json Session::record_stop() {
    std::vector<RecordKey> keys;
    {
        std::lock_guard lock(record_mu_);
        if (!recording_) throw RequestError(409, "not recording");
        recording_ = false;
        keys.swap(keys_);
    }
    const auto s = snapshot();
    nlohmann::json out = nlohmann::json::array();
    for (const auto& k : keys)
        out.push_back({{"camera", k.camera.to_json()},
                       {"params", k.params.to_json()},
                       {"png_base64", base64_encode(render_png(*s, k.camera, k.params, Vec3::Ones()))}});
    return {{"keys", out}};
}

std::vector<std::uint8_t> Session::checkpoint_bytes() const { return serialize_checkpoint(*snapshot()->avatar); }

nlohmann::json Session::save(const nlohmann::json& request) {
    const std::string path = require(request, "path").get<std::string>();
    try {
        save_checkpoint(*snapshot()->avatar, path);
    } catch (const Error& e) {
        throw RequestError(409, e.what());
    }
    return {{"ok", true}, {"path", path}};
}

// ---------------------------------------------------------------------------

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

std::pair<std::string, unsigned short> parse_address(const std::string& addr) {
    std::string host = "127.0.0.1", port = addr;
    if (const auto colon = addr.rfind(':'); colon != std::string::npos) {
        if (colon > 0) host = addr.substr(0, colon);
        port = addr.substr(colon + 1);
    }
    if (port.empty() || !std::all_of(port.begin(), port.end(), ::isdigit) || std::stoul(port) > 65535)
        throw ConfigError("invalid address '" + addr + "', expected host:port");
    return {host, static_cast<unsigned short>(std::stoul(port))};
}

struct EditorServer::Impl {
    std::shared_ptr<Session> session;
    std::string host;
    unsigned short port;
    asio::io_context ioc;
    std::optional<tcp::acceptor> acceptor;
    std::thread io_thread;
    std::mutex mu;
    std::condition_variable stopped_cv;
    bool stopped = false;
    std::vector<std::thread> connections;
    std::vector<std::shared_ptr<tcp::socket>> sockets;

    void accept_next() {
        acceptor->async_accept([this](beast::error_code ec, tcp::socket sock) {
            if (ec) return;
            auto s = std::make_shared<tcp::socket>(std::move(sock));
            {
                std::lock_guard lock(mu);
                if (stopped) return;
                sockets.push_back(s);
                connections.emplace_back([this, s] { handle(s); });
            }
            accept_next();
        });
    }

    using Request = http::request<http::string_body>;
    using Response = http::response<http::string_body>;

    static Response reply(const Request& req, http::status status, std::string body, const char* type) {
        Response res{status, req.version()};
        res.set(http::field::server, "gma-editor");
        res.set(http::field::content_type, type);
        res.keep_alive(req.keep_alive());
        res.body() = std::move(body);
        res.prepare_payload();
        return res;
    }

    static Response json_reply(const Request& req, const nlohmann::json& j, http::status st = http::status::ok) {
        return reply(req, st, j.dump(), "application/json");
    }

    static nlohmann::json body_json(const Request& req) {
        if (req.body().empty()) return nlohmann::json::object();
        try {
            return nlohmann::json::parse(req.body());
        } catch (const nlohmann::json::parse_error& e) {
            throw RequestError(400, std::string("malformed JSON: ") + e.what(), "body");
        }
    }

    Response route(const Request& req) {
        const std::string target(req.target());
        const auto path = target.substr(0, target.find('?'));
        const bool get = req.method() == http::verb::get, post = req.method() == http::verb::post;
        auto png = [&](const std::vector<std::uint8_t>& b) {
            return reply(req, http::status::ok, std::string(b.begin(), b.end()), "image/png");
        };
        try {
            if (path == "/v1/health" && get) return reply(req, http::status::ok, "ok", "text/plain");
            if (path == "/v1/state" && get) return json_reply(req, session->state());
            if (path == "/v1/checkpoint" && get) {
                const auto b = session->checkpoint_bytes();
                return reply(req, http::status::ok, std::string(b.begin(), b.end()), "application/octet-stream");
            }
            if (post) {
                if (path == "/v1/render") return png(session->render(body_json(req)));
                if (path == "/v1/pick") return json_reply(req, session->pick(body_json(req)));
                if (path == "/v1/edit") return json_reply(req, session->edit(body_json(req)));
                if (path == "/v1/undo") return json_reply(req, session->undo());
                if (path == "/v1/params") return json_reply(req, session->params(body_json(req)));
                if (path == "/v1/record/start") return json_reply(req, session->record_start());
                if (path == "/v1/record/key") return json_reply(req, session->record_key(body_json(req)));
                if (path == "/v1/record/stop") return json_reply(req, session->record_stop());
                if (path == "/v1/save") return json_reply(req, session->save(body_json(req)));
            }
            return json_reply(req, {{"error", "no route for " + std::string(req.method_string()) + " " + path}},
                              http::status::not_found);
        } catch (const RequestError& e) {
            nlohmann::json j{{"error", e.what()}};
            if (!e.field().empty()) j["field"] = e.field();
            return json_reply(req, j, static_cast<http::status>(e.status()));
        } catch (const std::exception& e) {
            return json_reply(req, {{"error", e.what()}}, http::status::internal_server_error);
        }
    }

    void stream(const std::shared_ptr<tcp::socket>& sock, const Request& req) {
        websocket::stream<tcp::socket&> ws(*sock);
        ws.accept(req);
        ws.binary(true);
        struct Queue {
            std::mutex mu;
            std::condition_variable cv;
            std::deque<std::shared_ptr<const std::vector<std::uint8_t>>> frames;
        };
        auto q = std::make_shared<Queue>();
        const int id = session->subscribe([q](std::shared_ptr<const std::vector<std::uint8_t>> f) {
            {
                std::lock_guard lock(q->mu);
                q->frames.push_back(std::move(f));
            }
            q->cv.notify_one();
        });
        beast::error_code ec;
        for (;;) {
            std::shared_ptr<const std::vector<std::uint8_t>> frame;
            {
                std::unique_lock lock(q->mu);
                q->cv.wait_for(lock, std::chrono::milliseconds(100), [&] { return !q->frames.empty(); });
                if (!q->frames.empty()) {
                    frame = q->frames.front();
                    q->frames.pop_front();
                }
            }
            {
                std::lock_guard lock(mu);
                if (stopped) break;
            }
            if (!frame) continue;
            ws.write(asio::buffer(*frame), ec);
            if (ec) break;
        }
        session->unsubscribe(id);
    }

    void handle(const std::shared_ptr<tcp::socket>& sock) {
        beast::flat_buffer buf;
        beast::error_code ec;
        for (;;) {
            Request req;
            http::request_parser<http::string_body> parser;
            parser.body_limit(64u << 20);
            http::read(*sock, buf, parser, ec);
            if (ec) break;
            req = parser.release();
            if (websocket::is_upgrade(req)) {
                if (req.target() == "/v1/stream") {
                    try {
                        stream(sock, req);
                    } catch (const std::exception&) {
                    }
                }
                break;
            }
            const Response res = route(req);
            http::write(*sock, res, ec);
            if (ec || !res.keep_alive()) break;
        }
        sock->shutdown(tcp::socket::shutdown_both, ec);
    }
};

EditorServer::EditorServer(std::shared_ptr<Session> session, std::string host, unsigned short port)
    : impl_(std::make_unique<Impl>()) {
    impl_->session = std::move(session);
    impl_->host = std::move(host);
    impl_->port = port;
}

EditorServer::~EditorServer() { stop(); }

unsigned short EditorServer::start() {
    beast::error_code ec;
    const auto addr = asio::ip::make_address(impl_->host, ec);
    if (ec) throw ConfigError("invalid host '" + impl_->host + "'");
    impl_->acceptor.emplace(impl_->ioc);
    const tcp::endpoint ep(addr, impl_->port);
    impl_->acceptor->open(ep.protocol());
    impl_->acceptor->set_option(asio::socket_base::reuse_address(true));
    impl_->acceptor->bind(ep, ec);
    if (ec) throw IoError("cannot bind " + impl_->host + ":" + std::to_string(impl_->port) + ": " + ec.message());
    impl_->acceptor->listen();
    const unsigned short bound = impl_->acceptor->local_endpoint().port();
    impl_->accept_next();
    impl_->io_thread = std::thread([this] { impl_->ioc.run(); });
    return bound;
}

void EditorServer::stop() {
    if (!impl_) return;
    std::vector<std::thread> conns;
    {
        std::lock_guard lock(impl_->mu);
        if (impl_->stopped) return;
        impl_->stopped = true;
        for (auto& s : impl_->sockets)
            if (s->is_open()) ::shutdown(s->native_handle(), SHUT_RDWR);
        conns.swap(impl_->connections);
    }
    impl_->stopped_cv.notify_all();
    asio::post(impl_->ioc, [this] {
        if (impl_->acceptor) impl_->acceptor->close();
    });
    impl_->ioc.stop();
    if (impl_->io_thread.joinable()) impl_->io_thread.join();
    for (auto& t : conns) t.join();
}

void EditorServer::wait() {
    std::unique_lock lock(impl_->mu);
    impl_->stopped_cv.wait(lock, [&] { return impl_->stopped; });
}

void serve(const AvatarCheckpoint& ckpt, const std::string& address, const SessionOptions& opts) {
    const auto [host, port] = parse_address(address);
    auto session = std::make_shared<Session>(ckpt, opts);
    EditorServer server(session, host, port);
    const unsigned short bound = server.start();
    std::cerr << "serving on http://" << host << ":" << bound << "/v1\n";
    asio::io_context signals_ctx;
    asio::signal_set signals(signals_ctx, SIGINT, SIGTERM);
    signals.async_wait([&](const beast::error_code&, int) { server.stop(); });
    signals_ctx.run();
}

}  // namespace gma
