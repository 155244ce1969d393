#pragma once

// PPM (P6, 8-bit), PGM (P5, 16-bit big-endian samples) and the flat
// feature-map container (little-endian f64, HWC) with a JSON header.

#include "cags/binary_io.hpp"
#include "cags/renderer.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <span>
#include <vector>

namespace cags::io {

/// Row-major 16-bit image.
struct Image16 {
    int width = 0;
    int height = 0;
    std::vector<std::uint16_t> pixels;

    std::uint16_t at(int x, int y) const {
        return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
    }
    bool operator==(const Image16&) const = default;
};

inline std::vector<char> encode_pgm16(const Image16& img) {
    ByteWriter w;
    std::ostringstream hdr;
    hdr << "P5\n" << img.width << " " << img.height << "\n65535\n";
    w.put_bytes(hdr.str());
    for (std::uint16_t v : img.pixels) {
        w.put(static_cast<std::uint8_t>(v >> 8));
        w.put(static_cast<std::uint8_t>(v & 0xff));
    }
    return w.bytes();
}

inline Image16 decode_pgm16(std::span<const char> bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw ParseError("PGM header truncated", pos);
        return std::string(bytes.data() + start, pos - start);
    };
    if (token() != "P5") throw ParseError("not a binary PGM (P5)", 0);
    Image16 img;
    try {
        img.width = std::stoi(token());
        img.height = std::stoi(token());
        const int maxval = std::stoi(token());
        if (maxval < 256 || maxval > 65535) throw ParseError("only 16-bit PGM is supported", pos);
    } catch (const std::logic_error&) {
        throw ParseError("malformed PGM header", pos);
    }
    if (img.width < 0 || img.height < 0 || static_cast<std::uint64_t>(img.width) * static_cast<std::uint64_t>(img.height) > (1ull << 32))
        throw ParseError("implausible PGM dimensions", pos);
    ++pos;  // single whitespace before raster
    const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height);
    if (bytes.size() < pos + 2 * n) throw ParseError("PGM raster truncated", bytes.size());
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto hi = static_cast<std::uint8_t>(bytes[pos + 2 * i]);
        const auto lo = static_cast<std::uint8_t>(bytes[pos + 2 * i + 1]);
        img.pixels[i] = static_cast<std::uint16_t>((hi << 8) | lo);
    }
    return img;
}

inline void write_pgm16(const std::string& path, const Image16& img) { write_file(path, encode_pgm16(img)); }
inline Image16 read_pgm16(const std::string& path) { return decode_pgm16(read_file(path)); }

/// Writes a 3-channel map (values clamped to [0,1]) as binary PPM.
inline void write_ppm(const std::string& path, const FeatureMap& fm) {
    if (fm.channels() != 3) throw InvalidArgument("write_ppm: need a 3-channel map");
    ByteWriter w;
    std::ostringstream hdr;
    hdr << "P6\n" << fm.width << " " << fm.height << "\n255\n";
    w.put_bytes(hdr.str());
    for (std::size_t p = 0; p < fm.pixels(); ++p)
        for (int c = 0; c < 3; ++c) {
            const double v = std::clamp(fm.values(static_cast<Eigen::Index>(p), c), 0.0, 1.0);
            w.put(static_cast<std::uint8_t>(std::lround(v * 255.0)));
        }
    write_file(path, w.bytes());
}

/// `<prefix>.bin` holds HW*C little-endian doubles; `<prefix>.json` describes them.
inline void write_feature_map(const std::string& prefix, const FeatureMap& fm) {
    ByteWriter w;
    w.put_span(std::span<const double>(fm.values.data(), static_cast<std::size_t>(fm.values.size())));
    write_file(prefix + ".bin", w.bytes());
    nlohmann::ordered_json h;
    h["width"] = fm.width;
    h["height"] = fm.height;
    h["channels"] = fm.channels();
    h["dtype"] = "float64";
    h["byte_order"] = "little";
    h["layout"] = "HWC";
    h["data"] = std::filesystem::path(prefix + ".bin").filename().string();
    write_text(prefix + ".json", h.dump(2) + "\n");
}

inline FeatureMap read_feature_map(const std::string& prefix) {
    const auto h = nlohmann::json::parse(read_text(prefix + ".json"));
    FeatureMap fm;
    fm.width = h.at("width").get<int>();
    fm.height = h.at("height").get<int>();
    const int c = h.at("channels").get<int>();
    const auto bytes = read_file(prefix + ".bin");
    fm.values = RowMatrix(static_cast<Eigen::Index>(fm.width) * fm.height, c);
    ByteReader r(bytes);
    r.get_span(std::span<double>(fm.values.data(), static_cast<std::size_t>(fm.values.size())));
    return fm;
}

}  // namespace cags::io
