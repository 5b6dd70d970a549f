#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "camnet/optim.hpp"
#include "camnet/tensor.hpp"

namespace camnet {

struct Keypoint {
    float xs, ys, xt, yt;   // pixel units
};

namespace detail {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
inline void put_u16(std::ostream& os, std::uint16_t v) {
    os.put(static_cast<char>(v & 0xff));
    os.put(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline std::uint8_t get_u8(std::istream& is) {
    const int c = is.get();
    if (c == EOF) throw CorruptionError("unexpected end of file");
    return static_cast<std::uint8_t>(c);
}
inline std::uint16_t get_u16(std::istream& is) {
    std::uint16_t v = get_u8(is);
    v |= static_cast<std::uint16_t>(get_u8(is)) << 8;
    return v;
}
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(is)) << (8 * i);
    return v;
}
inline float get_f32(std::istream& is) {
    const std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

// PNM header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw FormatError("truncated PNM header");
    return tok;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PPM (P6) / PGM (P5), 8-bit binary, maxval 255
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects [3,H,W]");
    const int h = image.dim(1), w = image.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for write: " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    const float* p = image.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            float v = p[c * n + i];
            v = std::min(std::max(v, 0.0f), 1.0f);
            detail::put_u8(os, static_cast<std::uint8_t>(std::lround(v * 255.0f)));
        }
    if (!os) throw FormatError("write failed: " + path);
}

inline Tensor<float> read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path);
    const std::string magic = detail::pnm_token(is);
    if (magic == "P3") throw FormatError("ASCII PPM not supported: " + path);
    if (magic != "P6") throw FormatError("not a P6 PPM: " + path);
    const int w = std::stoi(detail::pnm_token(is));
    const int h = std::stoi(detail::pnm_token(is));
    const int maxval = std::stoi(detail::pnm_token(is));
    if (maxval != 255) throw FormatError("unsupported maxval " + std::to_string(maxval) + ": " + path);
    Tensor<float> image = Tensor<float>::zeros({3, h, w});
    float* p = image.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            p[c * n + i] = static_cast<float>(detail::get_u8(is)) / 255.0f;
    return image;
}

inline void write_pgm(const std::string& path, const Tensor<float>& mask) {
    if (mask.rank() != 3 || mask.dim(0) != 1) throw ShapeError("write_pgm expects [1,H,W]");
    const int h = mask.dim(1), w = mask.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for write: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    const float* p = mask.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < n; ++i) {
        float v = std::min(std::max(p[i], 0.0f), 1.0f);
        detail::put_u8(os, static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
    if (!os) throw FormatError("write failed: " + path);
}

inline Tensor<float> read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path);
    const std::string magic = detail::pnm_token(is);
    if (magic == "P2") throw FormatError("ASCII PGM not supported: " + path);
    if (magic != "P5") throw FormatError("not a P5 PGM: " + path);
    const int w = std::stoi(detail::pnm_token(is));
    const int h = std::stoi(detail::pnm_token(is));
    const int maxval = std::stoi(detail::pnm_token(is));
    if (maxval != 255) throw FormatError("unsupported maxval " + std::to_string(maxval) + ": " + path);
    Tensor<float> mask = Tensor<float>::zeros({1, h, w});
    float* p = mask.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < n; ++i)
        p[i] = static_cast<float>(detail::get_u8(is)) / 255.0f;
    return mask;
}

// ---------------------------------------------------------------------------
// Flow file: magic "CAFL", u32 height, u32 width, f32 payload (x then y per
// cell, row-major), little endian, normalized-coordinate offsets.
// ---------------------------------------------------------------------------

inline void write_flow_file(const std::string& path, const Tensor<float>& flow) {
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("write_flow_file expects [2,h,w]");
    const int h = flow.dim(1), w = flow.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for write: " + path);
    os.write("CAFL", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(h));
    detail::put_u32(os, static_cast<std::uint32_t>(w));
    const float* p = flow.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < n; ++i) {
        detail::put_f32(os, p[i]);        // x
        detail::put_f32(os, p[n + i]);    // y
    }
    if (!os) throw FormatError("write failed: " + path);
}

inline Tensor<float> read_flow_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "CAFL", 4) != 0)
        throw FormatError("bad flow file magic: " + path);
    const int h = static_cast<int>(detail::get_u32(is));
    const int w = static_cast<int>(detail::get_u32(is));
    if (h <= 0 || w <= 0 || h > 1 << 20 || w > 1 << 20)
        throw CorruptionError("implausible flow extent in " + path);
    Tensor<float> flow = Tensor<float>::zeros({2, h, w});
    float* p = flow.data();
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    std::vector<char> payload(static_cast<std::size_t>(n) * 8);
    is.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (is.gcount() != static_cast<std::streamsize>(payload.size()))
        throw CorruptionError("flow payload truncated in " + path + ": expected " +
                              std::to_string(payload.size()) + " bytes, got " +
                              std::to_string(is.gcount()));
    for (std::int64_t i = 0; i < n; ++i) {
        float x, y;
        std::memcpy(&x, payload.data() + i * 8, 4);
        std::memcpy(&y, payload.data() + i * 8 + 4, 4);
        p[i] = x;
        p[n + i] = y;
    }
    return flow;
}

// ---------------------------------------------------------------------------
// Keypoint CSV: one "x_src,y_src,x_tgt,y_tgt" row per point, floats.
// ---------------------------------------------------------------------------

inline void write_kps_csv(const std::string& path, const std::vector<Keypoint>& kps) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open for write: " + path);
    char buf[160];
    for (const auto& k : kps) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g\n",
                      static_cast<double>(k.xs), static_cast<double>(k.ys),
                      static_cast<double>(k.xt), static_cast<double>(k.yt));
        os << buf;
    }
    if (!os) throw FormatError("write failed: " + path);
}

inline std::vector<Keypoint> read_kps_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open: " + path);
    std::vector<Keypoint> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        float vals[4];
        for (int i = 0; i < 4; ++i) {
            if (!std::getline(ls, field, ','))
                throw ParseError("line " + std::to_string(line_no) + " of " + path +
                                 ": expected 4 fields");
            try {
                vals[i] = std::stof(field);
            } catch (const std::exception&) {
                throw ParseError("line " + std::to_string(line_no) + " of " + path +
                                 ": bad float '" + field + "'");
            }
        }
        if (std::getline(ls, field, ','))
            throw ParseError("line " + std::to_string(line_no) + " of " + path +
                             ": expected 4 fields, got more");
        out.push_back({vals[0], vals[1], vals[2], vals[3]});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint archive: magic "CAMN", u32 version, u32 tensor count; per
// tensor: u16 name length, name bytes, u8 rank, u32 dims, f32 data (LE).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_named_tensors(const std::string& path, const NamedTensors<float>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for write: " + path);
    os.write("CAMN", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(entries.items.size()));
    for (const auto& [name, t] : entries.items) {
        if (name.size() > 0xffff) throw ConfigError("tensor name too long: " + name);
        detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u8(os, static_cast<std::uint8_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i)
            detail::put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
        for (std::int64_t i = 0; i < t.numel(); ++i) detail::put_f32(os, t.data()[i]);
    }
    if (!os) throw FormatError("write failed: " + path);
}

inline NamedTensors<float> load_named_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "CAMN", 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    const std::uint32_t count = detail::get_u32(is);
    NamedTensors<float> out;
    for (std::uint32_t ti = 0; ti < count; ++ti) {
        const std::uint16_t name_len = detail::get_u16(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (is.gcount() != name_len) throw CorruptionError("truncated tensor name in " + path);
        const int rank = detail::get_u8(is);
        Shape shape(static_cast<std::size_t>(rank));
        for (int i = 0; i < rank; ++i) shape[static_cast<std::size_t>(i)] = static_cast<int>(detail::get_u32(is));
        const std::int64_t n = shape_numel(shape);
        std::vector<float> data(static_cast<std::size_t>(n));
        std::vector<char> raw(static_cast<std::size_t>(n) * 4);
        is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (is.gcount() != static_cast<std::streamsize>(raw.size()))
            throw CorruptionError("truncated tensor '" + name + "' in " + path);
        std::memcpy(data.data(), raw.data(), raw.size());
        out.add(name, Tensor<float>::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

// Packs arbitrary text into an f32 tensor (length-prefixed raw bytes) so
// metadata can ride inside the checkpoint tensor format losslessly.
inline Tensor<float> pack_text(const std::string& text) {
    const std::size_t words = (text.size() + 3) / 4 + 1;
    std::vector<float> data(words, 0.0f);
    std::uint32_t len = static_cast<std::uint32_t>(text.size());
    std::memcpy(data.data(), &len, 4);
    if (!text.empty()) std::memcpy(data.data() + 1, text.data(), text.size());
    return Tensor<float>::from_data({static_cast<int>(words)}, std::move(data));
}

inline std::string unpack_text(const Tensor<float>& t) {
    if (t.numel() < 1) throw CorruptionError("packed text tensor empty");
    std::uint32_t len;
    std::memcpy(&len, t.data(), 4);
    if (static_cast<std::int64_t>((len + 3) / 4 + 1) > t.numel())
        throw CorruptionError("packed text length exceeds tensor payload");
    std::string out(len, '\0');
    if (len) std::memcpy(out.data(), t.data() + 1, len);
    return out;
}

}  // namespace camnet
