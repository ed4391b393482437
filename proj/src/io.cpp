#include "pgsam/io.hpp"

#include <png.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace pgsam::io {

namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ValidationError("truncated binary header");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return f;
}

void write_png(const fs::path& path, std::size_t rows, std::size_t cols, int color_type,
               const std::vector<std::uint8_t>& bytes) {
    auto f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("failed to write " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = bytes.size() / std::max<std::size_t>(rows, 1);
    for (std::size_t r = 0; r < rows; ++r)
        png_write_row(png, const_cast<png_bytep>(bytes.data() + r * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Decodes any 8-bit PNG into the requested channel count (1 = gray, 3 = RGB).
std::vector<std::uint8_t> read_png(const fs::path& path, int channels, std::size_t& rows, std::size_t& cols) {
    auto f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("failed to read PNG " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    cols = png_get_image_width(png, info);
    rows = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    const bool is_gray = !(color & PNG_COLOR_MASK_COLOR) && color != PNG_COLOR_TYPE_PALETTE;
    if (channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    std::vector<std::uint8_t> bytes(rows * cols * channels);
    std::vector<png_bytep> row_ptrs(rows);
    for (std::size_t r = 0; r < rows; ++r) row_ptrs[r] = bytes.data() + r * cols * channels;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return bytes;
}

}  // namespace

void write_f32(std::ostream& os, const float* values, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(n * sizeof(float)));
    } else {
        for (std::size_t i = 0; i < n; ++i) put_le(os, std::bit_cast<std::uint32_t>(values[i]));
    }
}

void read_f32(std::istream& is, float* values, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        if (!is.read(reinterpret_cast<char*>(values), static_cast<std::streamsize>(n * sizeof(float))))
            throw ValidationError("truncated float32 payload");
    } else {
        for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<float>(get_le<std::uint32_t>(is));
    }
}

void write_channels(const fs::path& path, const std::vector<Image>& channels) {
    if (channels.empty()) throw ContractViolation("write_channels: no channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string());
    os.write("MSEQ", 4);
    put_le<std::uint16_t>(os, kChannelFileVersion);
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(channels.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(channels.front().rows()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(channels.front().cols()));
    for (const auto& ch : channels) {
        if (!ch.same_shape(channels.front())) throw ContractViolation("write_channels: channels not aligned");
        write_f32(os, ch.values().data(), ch.size());
    }
}

std::vector<Image> read_channels(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MSEQ", 4) != 0)
        throw ValidationError(path.string() + ": bad magic");
    const auto version = get_le<std::uint16_t>(is);
    if (version != kChannelFileVersion) throw ValidationError(path.string() + ": unsupported version");
    const auto c = get_le<std::uint16_t>(is);
    const auto h = get_le<std::uint32_t>(is);
    const auto w = get_le<std::uint32_t>(is);
    std::vector<Image> out;
    out.reserve(c);
    for (std::uint16_t k = 0; k < c; ++k) {
        Image img(h, w);
        read_f32(is, img.values().data(), img.size());
        out.push_back(std::move(img));
    }
    return out;
}

void write_mask_png(const fs::path& path, const BinaryGrid& mask) {
    std::vector<std::uint8_t> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.values()[i] ? 255 : 0;
    write_png(path, mask.rows(), mask.cols(), PNG_COLOR_TYPE_GRAY, bytes);
}

BinaryGrid read_mask_png(const fs::path& path) {
    std::size_t rows = 0, cols = 0;
    auto bytes = read_png(path, 1, rows, cols);
    BinaryGrid g(rows, cols);
    for (std::size_t i = 0; i < bytes.size(); ++i) g.values()[i] = bytes[i] >= 128 ? 1 : 0;
    return g;
}

void write_rgb_png(const fs::path& path, const RgbImage& image) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(image.size() * 3);
    for (const auto& p : image.values()) {
        bytes.push_back(p.r);
        bytes.push_back(p.g);
        bytes.push_back(p.b);
    }
    write_png(path, image.rows(), image.cols(), PNG_COLOR_TYPE_RGB, bytes);
}

RgbImage read_rgb_png(const fs::path& path) {
    std::size_t rows = 0, cols = 0;
    auto bytes = read_png(path, 3, rows, cols);
    RgbImage img(rows, cols);
    for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] = {bytes[3 * i], bytes[3 * i + 1], bytes[3 * i + 2]};
    return img;
}

void write_report_json(const fs::path& path, const data::ExpertReport& report, const std::string& slice_id) {
    json j;
    j["slice_id"] = slice_id;
    j["laterality"] = data::to_string(report.laterality);
    j["subregion"] = data::to_string(report.subregion);
    j["size_mm"] = report.size_mm;
    j["text"] = report.rendered_text.empty() ? data::render_report(report) : report.rendered_text;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string());
    os << j.dump(2) << "\n";
}

data::ExpertReport read_report_json(const fs::path& path, std::string* slice_id) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    json j;
    try {
        j = json::parse(is);
        data::ExpertReport r;
        r.laterality = data::parse_laterality(j.at("laterality").get<std::string>());
        r.subregion = data::parse_subregion(j.at("subregion").get<std::string>());
        r.size_mm = j.at("size_mm").get<std::array<double, 3>>();
        r.rendered_text = j.value("text", std::string{});
        if (r.rendered_text.empty()) r.rendered_text = data::render_report(r);
        if (slice_id) *slice_id = j.value("slice_id", std::string{});
        return r;
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": malformed report (" + e.what() + ")");
    }
}

}  // namespace pgsam::io
