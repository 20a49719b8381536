#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "rfd/models/velocity_net.hpp"
#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/rng.hpp"

// Binary checkpoint layout (all integers and floats little-endian):
//
//   magic            8 bytes  "RFDCKPT\0"
//   format_version   u32
//   hyperparameters  6 x u32  input_dim width depth num_classes time_dim cond_dim
//   metadata         u32 count, then count x (string key, string value)
//   rng state        u64 seed, 4 x u64 state words, u8 has_cached_normal, f64 cached_normal
//   tensors          u32 count, then count x (string name, u32 rank, rank x u64 dims,
//                    prod(dims) x f64)
//   checksum         u64 FNV-1a over every preceding byte
//
// where `string` is a u32 byte length followed by the bytes.

namespace rfd {

inline constexpr std::array<char, 8> kCheckpointMagic = {'R', 'F', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    VelocityNet net;
    std::vector<std::pair<std::string, std::string>> meta;
    Rng::State rng_state;

    std::string meta_value(const std::string& key, const std::string& fallback = "") const {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        return fallback;
    }
};

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    const std::vector<char>& bytes() const noexcept { return buf_; }

private:
    std::vector<char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t position() const noexcept { return pos_; }

private:
    void need(std::size_t n) const {
        require(pos_ + n <= end_, ErrorCode::format, "checkpoint truncated");
    }
    const std::vector<char>& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a_bytes(const char* p, std::size_t n) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(p[i]);
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace detail

inline std::vector<char> encode_checkpoint(const VelocityNet& net,
                                           const std::vector<std::pair<std::string, std::string>>& meta,
                                           const Rng::State& rng_state) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.u32(kCheckpointVersion);
    const NetConfig& c = net.config();
    for (std::size_t v : {c.input_dim, c.width, c.depth, c.num_classes, c.time_dim, c.cond_dim})
        w.u32(static_cast<std::uint32_t>(v));
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        w.str(k);
        w.str(v);
    }
    w.u64(rng_state.seed);
    for (std::uint64_t s : rng_state.s) w.u64(s);
    w.u8(rng_state.has_cached_normal ? 1 : 0);
    w.f64(rng_state.cached_normal);
    w.u32(static_cast<std::uint32_t>(net.params().size()));
    for (const auto& p : net.params()) {
        w.str(p.name);
        w.u32(static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t d : p.value.shape()) w.u64(d);
        for (double x : p.value.data()) w.f64(x);
    }
    const auto& b = w.bytes();
    w.u64(detail::fnv1a_bytes(b.data(), b.size()));
    return w.bytes();
}

/// Decodes a checkpoint. When `expected` is given, the stored hyperparameters
/// must match it.
inline Checkpoint decode_checkpoint(const std::vector<char>& bytes, const NetConfig* expected = nullptr) {
    require(bytes.size() >= kCheckpointMagic.size() + 8, ErrorCode::format, "checkpoint truncated");
    require(std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()), ErrorCode::format,
            "bad checkpoint magic bytes");
    const std::size_t body = bytes.size() - 8;
    detail::ByteReader r(bytes, body);
    for (std::size_t i = 0; i < kCheckpointMagic.size(); ++i) r.u8();
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw Error(ErrorCode::version_mismatch,
                    "checkpoint format version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
    {
        std::uint64_t stored = 0;
        for (int i = 0; i < 8; ++i)
            stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + static_cast<std::size_t>(i)]))
                      << (8 * i);
        require(stored == detail::fnv1a_bytes(bytes.data(), body), ErrorCode::format,
                "checkpoint checksum mismatch (truncated or corrupted file)");
    }
    detail::ByteReader rb(bytes, body);
    for (std::size_t i = 0; i < kCheckpointMagic.size() + 4; ++i) rb.u8();
    NetConfig cfg;
    cfg.input_dim = rb.u32();
    cfg.width = rb.u32();
    cfg.depth = rb.u32();
    cfg.num_classes = rb.u32();
    cfg.time_dim = rb.u32();
    cfg.cond_dim = rb.u32();
    if (expected) {
        if (!(*expected == cfg))
            throw Error(ErrorCode::shape_mismatch,
                        "checkpoint hyperparameters (width " + std::to_string(cfg.width) + ", depth " +
                          std::to_string(cfg.depth) + ") disagree with the configured network (width " +
                          std::to_string(expected->width) + ", depth " + std::to_string(expected->depth) + ")");
    }
    Checkpoint ck;
    const std::uint32_t n_meta = rb.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = rb.str();
        std::string v = rb.str();
        ck.meta.emplace_back(std::move(k), std::move(v));
    }
    ck.rng_state.seed = rb.u64();
    for (auto& s : ck.rng_state.s) s = rb.u64();
    ck.rng_state.has_cached_normal = rb.u8() != 0;
    ck.rng_state.cached_normal = rb.f64();
    const std::uint32_t n_tensors = rb.u32();
    ParamSet params;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = rb.str();
        const std::uint32_t rank = rb.u32();
        require(rank <= 8, ErrorCode::format, "implausible tensor rank in checkpoint");
        Shape shape(rank);
        for (auto& d : shape) d = rb.u64();
        const std::size_t n = shape_size(shape);
        require(n <= body, ErrorCode::format, "tensor larger than checkpoint");
        std::vector<double> data(n);
        for (double& x : data) x = rb.f64();
        params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    require(rb.position() == body, ErrorCode::format, "trailing bytes in checkpoint");
    ck.net = VelocityNet(cfg, std::move(params));
    return ck;
}

inline void save_checkpoint(const VelocityNet& net, const std::vector<std::pair<std::string, std::string>>& meta,
                            const Rng::State& rng_state, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(net, meta, rng_state);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error(ErrorCode::io,
                        "cannot open " + tmp + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw Error(ErrorCode::io,
                        "write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::io,
                    "cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const NetConfig* expected = nullptr) {
    return decode_checkpoint(read_file_bytes(path), expected);
}

} // namespace rfd
