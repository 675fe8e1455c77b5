#pragma once

#include "gma/avatar.hpp"
#include "gma/edit_ops.hpp"
#include "gma/errors.hpp"
#include "gma/splat_renderer.hpp"

#include <json.hpp>

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace gma {

/// A failed request: HTTP status plus the offending field, when known.
class RequestError : public Error {
public:
    RequestError(int status, std::string message, std::string field = {})
        : Error(std::move(message)), status_(status), field_(std::move(field)) {}
    int status() const noexcept { return status_; }
    const std::string& field() const noexcept { return field_; }

private:
    int status_;
    std::string field_;
};

/// Immutable view of the session; readers keep one alive while rendering.
struct SessionSnapshot {
    std::shared_ptr<const AvatarCheckpoint> avatar;
    std::shared_ptr<const BodyContext> ctx;
    std::shared_ptr<const DecodedAvatar> decoded;
    BodyParams params;
    std::uint64_t version = 0;
};

struct SessionOptions {
    std::size_t undo_depth = 16;
    int render_threads = 1;
    InvertConfig invert;
    int view_size = 256;  ///< default stream view resolution
};

/// One avatar session. Mutations (edit, undo, params) run on a single worker
/// thread in arrival order; reads render from the snapshot current at the
/// time they start.
class Session {
public:
    explicit Session(AvatarCheckpoint ckpt, SessionOptions opts = {});
    ~Session();
    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    std::shared_ptr<const SessionSnapshot> snapshot() const;

    nlohmann::json state() const;
    /// {camera, params?, width?, height?, background?} -> PNG bytes.
    std::vector<std::uint8_t> render(const nlohmann::json& request);
    /// {camera, params?, width?, height?, box: [x0, y0, x1, y1] | polygon: [[x, y], ...]} -> {faces}.
    nlohmann::json pick(const nlohmann::json& request);
    /// EditCommand JSON -> {ok, changed_faces, notices, report, version}.
    nlohmann::json edit(const nlohmann::json& command);
    nlohmann::json undo();
    /// {beta?, theta?, psi?} deltas, or {reset: true}.
    nlohmann::json params(const nlohmann::json& request);
    nlohmann::json record_start();
    /// {camera, width?, height?}: stores the camera with the current params.
    nlohmann::json record_key(const nlohmann::json& request);
    /// Keyframe path: {keys: [{camera, params, png_base64}]}.
    nlohmann::json record_stop();
    std::vector<std::uint8_t> checkpoint_bytes() const;
    nlohmann::json save(const nlohmann::json& request);

    /// Receives one PNG per state change until the returned id is unsubscribed.
    /// The first frame shows the state at subscription time.
    int subscribe(std::function<void(std::shared_ptr<const std::vector<std::uint8_t>>)> sink);
    void unsubscribe(int id);

private:
    struct Task {
        std::function<nlohmann::json()> run;
        std::promise<nlohmann::json> done;
    };
    struct RecordKey {
        Camera camera;
        BodyParams params;
    };

    nlohmann::json enqueue(std::function<nlohmann::json()> fn);
    void worker();
    void publish(std::shared_ptr<const AvatarCheckpoint> avatar, BodyParams params);
    std::vector<std::uint8_t> render_png(const SessionSnapshot& s, const Camera& cam, const BodyParams& params,
                                         const Vec3& background) const;
    Camera view_camera() const;
    void broadcast(const SessionSnapshot& s);

    SessionOptions opts_;
    mutable std::mutex state_mu_;
    std::shared_ptr<const SessionSnapshot> snap_;
    std::deque<std::shared_ptr<const AvatarCheckpoint>> undo_;
    Camera view_;

    std::mutex queue_mu_;
    std::condition_variable queue_cv_;
    std::deque<std::unique_ptr<Task>> queue_;
    bool stopping_ = false;
    std::thread worker_;

    mutable std::mutex record_mu_;
    bool recording_ = false;
    std::vector<RecordKey> keys_;

    std::mutex sub_mu_;
    int next_sub_ = 0;
    std::map<int, std::function<void(std::shared_ptr<const std::vector<std::uint8_t>>)>> subs_;
};

/// HTTP + WebSocket front end for a Session; every route lives under /v1.
class EditorServer {
public:
    EditorServer(std::shared_ptr<Session> session, std::string host, unsigned short port);
    ~EditorServer();
    /// Binds and starts serving in background threads; returns the bound port.
    unsigned short start();
    void stop();
    /// Blocks until stop() is called from another thread.
    void wait();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Parses "host:port" (or ":port" / "port").
std::pair<std::string, unsigned short> parse_address(const std::string& addr);

/// Runs the service until the process is interrupted.
void serve(const AvatarCheckpoint& ckpt, const std::string& address, const SessionOptions& opts = {});

}  // namespace gma
