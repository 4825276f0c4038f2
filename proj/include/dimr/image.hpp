#ifndef DIMR_IMAGE_HPP
#define DIMR_IMAGE_HPP

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dimr/tensor.hpp"

namespace dimr {

struct Image8 {
    size_t width = 0, height = 0, channels = 0; // channels 1 or 3
    std::vector<uint8_t> pixels;                // row-major, interleaved

    uint8_t& at(size_t x, size_t y, size_t c) { return pixels[(y * width + x) * channels + c]; }
    uint8_t at(size_t x, size_t y, size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/*----------------------------------- PPM -----------------------------------*/

inline void write_ppm(const std::string& path, const Image8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!os) throw IoError("write failed: " + path);
}

namespace image_detail {
inline int next_token(std::istream& is) {
    // skips whitespace and '#' comments in PNM headers
    int c = is.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = is.get();
        c = is.get();
    }
    int v = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
        any = true;
    }
    if (!any) throw IoError("pnm: malformed header token");
    return v;
}
} // namespace image_detail

inline Image8 read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char m0 = char(is.get()), m1 = char(is.get());
    if (m0 != 'P' || (m1 != '2' && m1 != '3' && m1 != '5' && m1 != '6'))
        throw IoError("pnm: unsupported magic in " + path + " (want P2/P3/P5/P6)");
    bool ascii = m1 == '2' || m1 == '3';
    size_t channels = (m1 == '3' || m1 == '6') ? 3 : 1;
    size_t w = size_t(image_detail::next_token(is));
    size_t h = size_t(image_detail::next_token(is));
    int maxval = image_detail::next_token(is);
    if (maxval <= 0 || maxval > 255) throw IoError("pnm: unsupported maxval " + std::to_string(maxval));
    Image8 img;
    img.width = w;
    img.height = h;
    img.channels = channels;
    img.pixels.resize(w * h * channels);
    if (ascii) {
        for (auto& p : img.pixels) p = uint8_t(image_detail::next_token(is) * 255 / maxval);
    } else {
        is.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
        if (!is) throw IoError("pnm: truncated pixel data in " + path);
        if (maxval != 255)
            for (auto& p : img.pixels) p = uint8_t(int(p) * 255 / maxval);
    }
    return img;
}

/*----------------------------------- PNG (stored deflate) -----------------------------------*/

namespace image_detail {

inline uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0) {
    static uint32_t table[256];
    static bool ready = false;
    if (!ready) {
        for (uint32_t n = 0; n < 256; ++n) {
            uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[n] = c;
        }
        ready = true;
    }
    crc ^= 0xffffffffu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

inline uint32_t adler32(const uint8_t* data, size_t len) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < len; ++i) {
        a = (a + data[i]) % 65521;
        b = (b + a) % 65521;
    }
    return (b << 16) | a;
}

inline void push_u32be(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x >> 24));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x));
}

inline void write_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& payload) {
    std::vector<uint8_t> buf;
    push_u32be(buf, uint32_t(payload.size()));
    buf.insert(buf.end(), type, type + 4);
    buf.insert(buf.end(), payload.begin(), payload.end());
    uint32_t crc = crc32(buf.data() + 4, buf.size() - 4);
    push_u32be(buf, crc);
    os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

} // namespace image_detail

// minimal RGB8/Gray8 PNG writer using uncompressed (stored) deflate blocks
inline void write_png(const std::string& path, const Image8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    image_detail::push_u32be(ihdr, uint32_t(img.width));
    image_detail::push_u32be(ihdr, uint32_t(img.height));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);          // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    image_detail::write_chunk(os, "IHDR", ihdr);

    // raw scanlines, filter byte 0 per row
    std::vector<uint8_t> raw;
    raw.reserve(img.height * (1 + img.width * img.channels));
    for (size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const uint8_t* row = &img.pixels[y * img.width * img.channels];
        raw.insert(raw.end(), row, row + img.width * img.channels);
    }

    std::vector<uint8_t> idat;
    idat.push_back(0x78); // zlib header, no compression preset
    idat.push_back(0x01);
    size_t pos = 0;
    while (pos < raw.size()) {
        size_t chunk = std::min<size_t>(65535, raw.size() - pos);
        bool last = pos + chunk == raw.size();
        idat.push_back(last ? 1 : 0);
        idat.push_back(uint8_t(chunk & 0xff));
        idat.push_back(uint8_t(chunk >> 8));
        idat.push_back(uint8_t(~chunk & 0xff));
        idat.push_back(uint8_t((~chunk >> 8) & 0xff));
        idat.insert(idat.end(), raw.begin() + long(pos), raw.begin() + long(pos + chunk));
        pos += chunk;
    }
    image_detail::push_u32be(idat, image_detail::adler32(raw.data(), raw.size()));
    image_detail::write_chunk(os, "IDAT", idat);
    image_detail::write_chunk(os, "IEND", {});
    if (!os) throw IoError("write failed: " + path);
}

/*----------------------------------- grids and resizing -----------------------------------*/

// de-normalize from [-1,1], clamp to [0,1], quantize
template <typename T>
Image8 render_sample(const Tensor<T>& sample) {
    if (sample.rank() != 3) throw ShapeError("render_sample: want [C,H,W], got " + shape_str(sample.shape));
    size_t C = sample.shape[0], H = sample.shape[1], W = sample.shape[2];
    if (C != 1 && C != 3) throw ShapeError("render_sample: can only render 1 or 3 channels, got " + std::to_string(C));
    Image8 img;
    img.width = W;
    img.height = H;
    img.channels = C;
    img.pixels.resize(W * H * C);
    for (size_t c = 0; c < C; ++c)
        for (size_t y = 0; y < H; ++y)
            for (size_t x = 0; x < W; ++x) {
                double v = (double(sample.data[(c * H + y) * W + x]) + 1.0) * 0.5;
                v = std::clamp(v, 0.0, 1.0);
                img.at(x, y, c) = uint8_t(std::lround(v * 255.0));
            }
    return img;
}

// tile a batch into rows x cols; unused cells stay black
template <typename T>
Image8 make_sample_grid(const std::vector<Tensor<T>>& samples, size_t rows, size_t cols) {
    if (samples.empty()) throw ShapeError("sample grid: no samples");
    if (rows * cols < samples.size())
        throw ShapeError("sample grid: " + std::to_string(rows) + "x" + std::to_string(cols) + " cells < " +
                         std::to_string(samples.size()) + " samples");
    Image8 first = render_sample(samples[0]);
    Image8 grid;
    grid.channels = first.channels;
    grid.width = first.width * cols;
    grid.height = first.height * rows;
    grid.pixels.assign(grid.width * grid.height * grid.channels, 0);
    for (size_t i = 0; i < samples.size(); ++i) {
        Image8 cell = render_sample(samples[i]);
        if (cell.width != first.width || cell.height != first.height || cell.channels != first.channels)
            throw ShapeError("sample grid: inconsistent sample shapes");
        size_t gx = (i % cols) * first.width, gy = (i / cols) * first.height;
        for (size_t y = 0; y < cell.height; ++y)
            for (size_t x = 0; x < cell.width; ++x)
                for (size_t c = 0; c < cell.channels; ++c) grid.at(gx + x, gy + y, c) = cell.at(x, y, c);
    }
    return grid;
}

template <typename T>
void write_sample_grid(const std::vector<Tensor<T>>& samples, const std::string& path, size_t rows, size_t cols,
                       bool also_png = true) {
    Image8 grid = make_sample_grid(samples, rows, cols);
    write_ppm(path, grid);
    if (also_png) {
        std::string png = path;
        size_t dot = png.rfind('.');
        png = (dot == std::string::npos ? png : png.substr(0, dot)) + ".png";
        write_png(png, grid);
    }
}

// box-filter downscale/upscale to a square side, averaging source cells
template <typename T>
Tensor<T> box_resize_to(const Image8& img, size_t side, size_t out_channels) {
    Tensor<T> out(Shape{out_channels, side, side});
    for (size_t oy = 0; oy < side; ++oy)
        for (size_t ox = 0; ox < side; ++ox) {
            size_t x0 = ox * img.width / side, x1 = std::max(x0 + 1, (ox + 1) * img.width / side);
            size_t y0 = oy * img.height / side, y1 = std::max(y0 + 1, (oy + 1) * img.height / side);
            x1 = std::min(x1, img.width);
            y1 = std::min(y1, img.height);
            for (size_t c = 0; c < out_channels; ++c) {
                double acc = 0;
                size_t n = 0;
                for (size_t y = y0; y < y1; ++y)
                    for (size_t x = x0; x < x1; ++x) {
                        size_t sc = img.channels == 1 ? 0 : std::min(c, img.channels - 1);
                        acc += img.at(x, y, sc);
                        ++n;
                    }
                out.data[(c * side + oy) * side + ox] = T(2.0 * (acc / double(n) / 255.0) - 1.0);
            }
        }
    return out;
}

} // namespace dimr

#endif
