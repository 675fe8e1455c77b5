#pragma once

#include "gma/synth_data.hpp"

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>

namespace gma::testing {

/// Directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "gma") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// 216-face body, cheap enough for many fits per test run.
inline BodyConfig tiny_body() {
    BodyConfig b;
    b.segments = 6;
    b.rings = 3;
    return b;
}

/// Reference subject on the tiny body plus an 8-frame 32x32 dataset, built
/// once per process.
struct TinyWorld {
    TempDir dir{"gma_tiny"};
    ReferenceScene scene;
    Dataset data;
};

inline const TinyWorld& tiny_world() {
    static TinyWorld world;
    static const bool built = [] {
        world.scene = generate_subject(tiny_body(), kStandardTexture, 3);
        world.data = render_dataset(world.scene, 8, 32, 32, OrbitSpec{}, MotionSpec{}, world.dir.path());
        return true;
    }();
    (void)built;
    return world;
}

}  // namespace gma::testing
