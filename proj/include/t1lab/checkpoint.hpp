#pragma once

// Binary parameter files. Little-endian throughout:
//   magic[4] ("T1PK" policy, "T1RF" reference)
//   u32 format version
//   u32 x5   V, W, E, H_d, layers
//   f64 x N  theta, N = exact parameter count of the architecture
// Optimizer files ("T1OM") share the header, then u64 step count, m, v.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "t1lab/error.hpp"
#include "t1lab/policy.hpp"
#include "t1lab/trainer.hpp"

namespace t1lab::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::string_view kPolicyMagic = "T1PK";
inline constexpr std::string_view kReferenceMagic = "T1RF";
inline constexpr std::string_view kOptimizerMagic = "T1OM";

namespace detail {
inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline std::uint64_t get_le(const unsigned char* p, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}
}  // namespace detail

inline std::vector<unsigned char> encode(std::string_view magic, const Architecture& arch,
                                         std::span<const double> theta) {
    std::vector<unsigned char> out(magic.begin(), magic.end());
    detail::put_u32(out, kFormatVersion);
    for (int d : {arch.vocab, arch.window, arch.embed, arch.hidden, arch.layers})
        detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double x : theta) detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
    return out;
}

struct Decoded {
    Architecture arch;
    std::vector<double> theta;
};

inline Decoded decode(std::string_view magic, std::span<const unsigned char> bytes) {
    constexpr std::size_t header = 4 + 4 + 5 * 4;
    if (bytes.size() < header) throw IoError("checkpoint truncated (header)");
    if (std::memcmp(bytes.data(), magic.data(), 4) != 0)
        throw IoError("bad checkpoint magic, expected " + std::string(magic));
    const auto version = static_cast<std::uint32_t>(detail::get_le(bytes.data() + 4, 4));
    if (version != kFormatVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    Decoded d;
    int* dims[] = {&d.arch.vocab, &d.arch.window, &d.arch.embed, &d.arch.hidden, &d.arch.layers};
    for (int i = 0; i < 5; ++i) *dims[i] = static_cast<int>(detail::get_le(bytes.data() + 8 + 4 * i, 4));
    d.arch.validate();
    const std::size_t n = d.arch.param_count();
    if (bytes.size() != header + 8 * n) throw IoError("checkpoint size does not match architecture");
    d.theta.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        d.theta[i] = std::bit_cast<double>(detail::get_le(bytes.data() + header + 8 * i, 8));
    return d;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), {});
}

inline void save(const std::filesystem::path& path, const PolicyParams& p) {
    p.validate();
    write_bytes(path, encode(kPolicyMagic, p.arch, p.theta));
}

inline void save(const std::filesystem::path& path, const ReferenceSnapshot& r) {
    write_bytes(path, encode(kReferenceMagic, r.arch, r.theta));
}

inline PolicyParams load_policy(const std::filesystem::path& path) {
    auto d = decode(kPolicyMagic, read_bytes(path));
    return PolicyParams{d.arch, std::move(d.theta)};
}

/// The step stamp is not part of the file; callers restore it from run state.
inline ReferenceSnapshot load_reference(const std::filesystem::path& path, std::uint64_t step = 0) {
    auto d = decode(kReferenceMagic, read_bytes(path));
    return ReferenceSnapshot{d.arch, std::move(d.theta), step};
}

inline void save(const std::filesystem::path& path, const Architecture& arch, const AdamState& opt) {
    const std::size_t n = arch.param_count();
    if (opt.m.size() != n || opt.v.size() != n) throw ShapeError("optimizer moments do not match architecture");
    std::vector<double> body;
    body.reserve(2 * n);
    body.insert(body.end(), opt.m.begin(), opt.m.end());
    body.insert(body.end(), opt.v.begin(), opt.v.end());
    auto bytes = encode(kOptimizerMagic, arch, {});
    detail::put_u64(bytes, opt.t);
    for (double x : body) detail::put_u64(bytes, std::bit_cast<std::uint64_t>(x));
    write_bytes(path, bytes);
}

inline AdamState load_optimizer(const std::filesystem::path& path, const Architecture& expected) {
    const auto bytes = read_bytes(path);
    constexpr std::size_t header = 4 + 4 + 5 * 4;
    if (bytes.size() < header + 8) throw IoError("optimizer file truncated: " + path.string());
    if (std::memcmp(bytes.data(), kOptimizerMagic.data(), 4) != 0) throw IoError("bad optimizer magic: " + path.string());
    Architecture a;
    int* dims[] = {&a.vocab, &a.window, &a.embed, &a.hidden, &a.layers};
    for (int i = 0; i < 5; ++i) *dims[i] = static_cast<int>(detail::get_le(bytes.data() + 8 + 4 * i, 4));
    if (a.vocab != expected.vocab || a.window != expected.window || a.embed != expected.embed ||
        a.hidden != expected.hidden || a.layers != expected.layers)
        throw IoError("optimizer architecture mismatch: " + path.string());
    const std::size_t n = expected.param_count();
    if (bytes.size() != header + 8 + 16 * n) throw IoError("optimizer file size mismatch: " + path.string());
    AdamState s(n);
    s.t = detail::get_le(bytes.data() + header, 8);
    const unsigned char* p = bytes.data() + header + 8;
    for (std::size_t i = 0; i < n; ++i) s.m[i] = std::bit_cast<double>(detail::get_le(p + 8 * i, 8));
    for (std::size_t i = 0; i < n; ++i) s.v[i] = std::bit_cast<double>(detail::get_le(p + 8 * (n + i), 8));
    return s;
}

}  // namespace t1lab::checkpoint
