#include "gma/persistence.hpp"

#include "gma/errors.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

namespace gma {

namespace {

constexpr std::array<char, 4> kMagic{'G', 'M', 'A', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_array(std::vector<std::uint8_t>& out, const Eigen::MatrixXd& m) {
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
}

void put_chunk(std::vector<std::uint8_t>& out, const char* tag, const std::vector<std::uint8_t>& payload) {
    out.insert(out.end(), tag, tag + 4);
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
}

std::vector<std::uint8_t> mlp_payload(const MlpWeights& w) {
    std::vector<std::uint8_t> p;
    put_array(p, w.w1);
    put_array(p, w.b1);
    put_array(p, w.w2);
    put_array(p, w.b2);
    return p;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in bounded pieces
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = crc32(crc, bytes.data() + pos, n);
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

class ArrayReader {
public:
    ArrayReader(std::span<const std::uint8_t> bytes, std::string chunk) : bytes_(bytes), chunk_(std::move(chunk)) {}

    Eigen::MatrixXd next() {
        need(8);
        const std::uint32_t rows = get_u32(bytes_.data() + pos_), cols = get_u32(bytes_.data() + pos_ + 4);
        pos_ += 8;
        const std::uint64_t count = static_cast<std::uint64_t>(rows) * cols;
        if (count * 4 > bytes_.size() - pos_)
            throw DimensionError(chunk_ + ": array of " + std::to_string(rows) + "x" + std::to_string(cols) +
                                 " exceeds the chunk");
        Eigen::MatrixXd m(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r)
            for (std::uint32_t c = 0; c < cols; ++c) {
                m(r, c) = std::bit_cast<float>(get_u32(bytes_.data() + pos_));
                pos_ += 4;
            }
        return m;
    }

    void finish() const {
        if (pos_ != bytes_.size()) throw DimensionError(chunk_ + ": trailing bytes after the last array");
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw DimensionError(chunk_ + ": truncated array header");
    }
    std::span<const std::uint8_t> bytes_;
    std::string chunk_;
    std::size_t pos_ = 0;
};

MlpWeights read_mlp(std::span<const std::uint8_t> payload, const std::string& tag, Activation act) {
    ArrayReader r(payload, tag);
    MlpWeights w;
    w.activation = act;
    w.w1 = r.next();
    const Eigen::MatrixXd b1 = r.next();
    w.w2 = r.next();
    const Eigen::MatrixXd b2 = r.next();
    r.finish();
    if (b1.cols() != 1 || b2.cols() != 1) throw DimensionError(tag + ": biases must be column vectors");
    if (b1.rows() != w.w1.rows() || w.w2.cols() != w.w1.rows() || b2.rows() != w.w2.rows())
        throw DimensionError(tag + ": layer shapes do not chain");
    w.b1 = b1.col(0);
    w.b2 = b2.col(0);
    return w;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const AvatarCheckpoint& c) {
    c.validate();
    const nlohmann::json meta{{"body_config", c.body_config.to_json()},
                              {"canonical", c.canonical.to_json()},
                              {"constants", c.constants.to_json()},
                              {"offset_mode", to_string(c.offset_mode)},
                              {"activations",
                               {to_string(c.decoders.coarse.activation), to_string(c.decoders.fine.activation),
                                to_string(c.decoders.color.activation), to_string(c.decoders.scale.activation)}},
                              {"fit", c.meta.to_json()}};
    const std::string text = meta.dump();
    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    put_chunk(out, "META", std::vector<std::uint8_t>(text.begin(), text.end()));
    std::vector<std::uint8_t> p;
    put_array(p, c.features.geo);
    put_chunk(out, "FGEO", p);
    p.clear();
    put_array(p, c.features.tex);
    put_chunk(out, "FTEX", p);
    put_chunk(out, "W_FC", mlp_payload(c.decoders.coarse));
    put_chunk(out, "W_FF", mlp_payload(c.decoders.fine));
    put_chunk(out, "W_TC", mlp_payload(c.decoders.color));
    put_chunk(out, "W_TS", mlp_payload(c.decoders.scale));
    put_u32(out, crc_of(out));
    return out;
}

AvatarCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
        throw BadMagicError("not a GMA1 checkpoint (bad magic)");
    if (bytes.size() < 8) throw CheckpointError("checkpoint truncated before the checksum");
    const std::size_t body = bytes.size() - 4;
    const std::uint32_t stored = get_u32(bytes.data() + body);
    if (crc_of(bytes.first(body)) != stored) throw ChecksumError("checkpoint CRC mismatch");

    std::map<std::string, std::span<const std::uint8_t>> chunks;
    std::size_t pos = 4;
    while (pos < body) {
        if (body - pos < 8) throw CheckpointError("truncated chunk header at byte " + std::to_string(pos));
        const std::string tag(reinterpret_cast<const char*>(bytes.data() + pos), 4);
        const std::uint32_t len = get_u32(bytes.data() + pos + 4);
        pos += 8;
        if (len > body - pos) throw CheckpointError("chunk " + tag + " runs past the end of the file");
        if (!chunks.emplace(tag, bytes.subspan(pos, len)).second) throw CheckpointError("duplicate chunk " + tag);
        pos += len;
    }
    for (const char* tag : {"META", "FGEO", "FTEX", "W_FC", "W_FF", "W_TC", "W_TS"})
        if (!chunks.count(tag)) throw CheckpointError(std::string("missing chunk ") + tag);

    AvatarCheckpoint c;
    std::array<Activation, 4> act{};
    try {
        const auto& m = chunks["META"];
        const auto j = nlohmann::json::parse(m.begin(), m.end());
        c.body_config = BodyConfig::from_json(j.at("body_config"));
        c.canonical = BodyParams::from_json(j.at("canonical"));
        c.constants = CoreConstants::from_json(j.at("constants"));
        c.offset_mode = offset_mode_from_string(j.at("offset_mode").get<std::string>());
        const auto names = j.at("activations").get<std::vector<std::string>>();
        if (names.size() != 4) throw CheckpointError("META activations must list 4 decoders");
        for (int i = 0; i < 4; ++i) act[i] = activation_from_string(names[i]);
        c.meta = FitMetadata::from_json(j.at("fit"));
    } catch (const CheckpointError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("META: ") + e.what());
    } catch (const Error& e) {
        throw CheckpointError(std::string("META: ") + e.what());
    }

    auto features = [&](const char* tag) {
        ArrayReader r(chunks[tag], tag);
        Eigen::MatrixXd m = r.next();
        r.finish();
        return m;
    };
    c.features.geo = features("FGEO");
    c.features.tex = features("FTEX");
    c.decoders.coarse = read_mlp(chunks["W_FC"], "W_FC", act[0]);
    c.decoders.fine = read_mlp(chunks["W_FF"], "W_FF", act[1]);
    c.decoders.color = read_mlp(chunks["W_TC"], "W_TC", act[2]);
    c.decoders.scale = read_mlp(chunks["W_TS"], "W_TS", act[3]);
    try {
        c.validate();
    } catch (const ShapeError& e) {
        throw DimensionError(e.what());
    }
    return c;
}

void save_checkpoint(const AvatarCheckpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    // write then rename so readers never observe a partial file
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("cannot write " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

AvatarCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), {});
    return deserialize_checkpoint(bytes);
}

}  // namespace gma
