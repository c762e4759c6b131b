#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffrecon/core.hpp"

namespace diffrecon {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw IoError("unexpected end of file");
}
template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

inline void write_header(std::ostream& os, const char magic[4], uint32_t d0, uint32_t d1,
                         double elem_size) {
    write_bytes(os, magic, 4);
    write_pod<uint32_t>(os, 1u);  // version
    write_pod<uint32_t>(os, d0);
    write_pod<uint32_t>(os, d1);
    write_pod<double>(os, elem_size);
}

inline void read_header(std::istream& is, const char magic[4], uint32_t& d0, uint32_t& d1,
                        double& elem_size) {
    char m[4];
    read_bytes(is, m, 4);
    if (std::memcmp(m, magic, 4) != 0) throw IoError(std::string("bad magic, expected ") + magic);
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != 1) throw IoError("unsupported file version");
    d0 = read_pod<uint32_t>(is);
    d1 = read_pod<uint32_t>(is);
    elem_size = read_pod<double>(is);
}

}  // namespace detail

// "DRIM": image file. Header, then f32 values row-major.
inline void save_image(const Image& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_header(os, "DRIM", static_cast<uint32_t>(img.grid.nx),
                         static_cast<uint32_t>(img.grid.ny), img.grid.voxel_size);
    for (double v : img.values) detail::write_pod<float>(os, static_cast<float>(v));
}

inline Image load_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint32_t nx, ny;
    double vs;
    detail::read_header(is, "DRIM", nx, ny, vs);
    Image img(GridSpec{static_cast<int>(nx), static_cast<int>(ny), vs});
    for (double& v : img.values) v = detail::read_pod<float>(is);
    return img;
}

// "DRSN": sinogram file.
inline void save_sinogram(const Sinogram& s, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_header(os, "DRSN", static_cast<uint32_t>(s.proj.n_angles),
                         static_cast<uint32_t>(s.proj.n_bins), s.proj.bin_width);
    for (double v : s.values) detail::write_pod<float>(os, static_cast<float>(v));
}

inline Sinogram load_sinogram(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint32_t na, nb;
    double bw;
    detail::read_header(is, "DRSN", na, nb, bw);
    Sinogram s(ProjSpec{static_cast<int>(na), static_cast<int>(nb), bw});
    for (double& v : s.values) v = detail::read_pod<float>(is);
    return s;
}

// "DRLB": u8 tissue label map on a grid.
inline void save_labels(const std::vector<uint8_t>& labels, const GridSpec& grid,
                        const std::string& path) {
    if (labels.size() != static_cast<size_t>(grid.size()))
        throw IoError("label map size does not match grid");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_header(os, "DRLB", static_cast<uint32_t>(grid.nx),
                         static_cast<uint32_t>(grid.ny), grid.voxel_size);
    detail::write_bytes(os, labels.data(), labels.size());
}

inline std::vector<uint8_t> load_labels(const std::string& path, GridSpec& grid_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint32_t nx, ny;
    double vs;
    detail::read_header(is, "DRLB", nx, ny, vs);
    grid_out = GridSpec{static_cast<int>(nx), static_cast<int>(ny), vs};
    std::vector<uint8_t> labels(static_cast<size_t>(grid_out.size()));
    detail::read_bytes(is, labels.data(), labels.size());
    return labels;
}

// ---- PNG export (8-bit grayscale, zlib-compressed) ----

namespace detail {

inline void png_chunk(std::ostream& os, const char type[4], const std::vector<uint8_t>& data) {
    auto be32 = [](uint32_t v) {
        return std::array<uint8_t, 4>{static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                                      static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
    };
    auto len = be32(static_cast<uint32_t>(data.size()));
    write_bytes(os, len.data(), 4);
    std::vector<uint8_t> payload(type, type + 4);
    payload.insert(payload.end(), data.begin(), data.end());
    write_bytes(os, payload.data(), payload.size());
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
    auto c = be32(crc);
    write_bytes(os, c.data(), 4);
}

}  // namespace detail

inline void save_png_gray(const std::vector<uint8_t>& pixels, int width, int height,
                          const std::string& path) {
    if (pixels.size() != static_cast<size_t>(width) * height)
        throw IoError("png: pixel buffer size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    detail::write_bytes(os, sig, 8);

    std::vector<uint8_t> ihdr(13);
    auto put32 = [&](size_t off, uint32_t v) {
        ihdr[off] = static_cast<uint8_t>(v >> 24);
        ihdr[off + 1] = static_cast<uint8_t>(v >> 16);
        ihdr[off + 2] = static_cast<uint8_t>(v >> 8);
        ihdr[off + 3] = static_cast<uint8_t>(v);
    };
    put32(0, static_cast<uint32_t>(width));
    put32(4, static_cast<uint32_t>(height));
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 0;   // grayscale
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    detail::png_chunk(os, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve((static_cast<size_t>(width) + 1) * height);
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // no filter
        raw.insert(raw.end(), pixels.begin() + static_cast<size_t>(y) * width,
                   pixels.begin() + static_cast<size_t>(y + 1) * width);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png: zlib compression failed");
    comp.resize(comp_len);
    detail::png_chunk(os, "IDAT", comp);
    detail::png_chunk(os, "IEND", {});
}

// Min-max windowed grayscale export for human inspection.
inline void save_image_png(const Image& img, const std::string& path) {
    double lo = img.values[0], hi = img.values[0];
    for (double v : img.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<uint8_t> px(img.size());
    for (size_t i = 0; i < img.size(); ++i)
        px[i] = static_cast<uint8_t>(std::clamp(255.0 * (img.values[i] - lo) / span, 0.0, 255.0));
    save_png_gray(px, img.grid.nx, img.grid.ny, path);
}

// FNV-1a content hash used to tie adapter files to their base checkpoint.
inline uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<uint8_t>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    return h;
}

}  // namespace diffrecon
