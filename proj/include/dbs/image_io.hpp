#pragma once

// PFM and PNG codecs for disparity maps and images.

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/tensor.hpp"

namespace dbs {

enum class FormatErrorKind { kIo, kMalformedHeader, kTruncated, kUnsupported };

inline const char* to_string(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::kIo: return "io";
    case FormatErrorKind::kMalformedHeader: return "malformed header";
    case FormatErrorKind::kTruncated: return "truncated payload";
    case FormatErrorKind::kUnsupported: return "unsupported format";
  }
  return "?";
}

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

struct PfmImage {
  Tensor<float> map;  // H x W, row 0 at the top
  float scale = 1.0f;  // magnitude of the header scale
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reads one whitespace-delimited header token; PFM headers end each field with a single whitespace byte.
inline std::string pfm_token(const std::string& buf, std::size_t& pos) {
  while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  const std::size_t start = pos;
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos || pos >= buf.size()) throw FormatError(FormatErrorKind::kMalformedHeader, "unexpected end of PFM header");
  return buf.substr(start, pos - start);
}

inline std::uint32_t bswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

}  // namespace detail

inline PfmImage decode_pfm(const std::string& buf) {
  std::size_t pos = 0;
  const std::string magic = detail::pfm_token(buf, pos);
  if (magic == "PF") throw FormatError(FormatErrorKind::kUnsupported, "colour PFM ('PF') is not a disparity map");
  if (magic != "Pf") throw FormatError(FormatErrorKind::kMalformedHeader, "bad PFM magic '" + magic + "'");
  int width = 0, height = 0;
  double scale = 0;
  try {
    std::size_t used = 0;
    const std::string ws = detail::pfm_token(buf, pos);
    width = std::stoi(ws, &used);
    if (used != ws.size()) throw std::invalid_argument(ws);
    const std::string hs = detail::pfm_token(buf, pos);
    height = std::stoi(hs, &used);
    if (used != hs.size()) throw std::invalid_argument(hs);
    const std::string ss = detail::pfm_token(buf, pos);
    scale = std::stod(ss, &used);
    if (used != ss.size()) throw std::invalid_argument(ss);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("unparsable PFM header field: ") + e.what());
  }
  if (width <= 0 || height <= 0 || scale == 0 || !std::isfinite(scale))
    throw FormatError(FormatErrorKind::kMalformedHeader, "invalid PFM dimensions or scale");
  ++pos;  // single whitespace byte after the scale
  const bool little = scale < 0;
  const std::size_t count = static_cast<std::size_t>(width) * height;
  if (buf.size() < pos + count * 4)
    throw FormatError(FormatErrorKind::kTruncated, "PFM payload has " + std::to_string(buf.size() - std::min(pos, buf.size())) +
                                                     " bytes, expected " + std::to_string(count * 4));
  PfmImage out{Tensor<float>({height, width}), static_cast<float>(std::abs(scale))};
  const bool host_little = std::endian::native == std::endian::little;
  for (int r = 0; r < height; ++r) {
    // file rows run bottom to top
    const char* src = buf.data() + pos + static_cast<std::size_t>(height - 1 - r) * width * 4;
    for (int c = 0; c < width; ++c) {
      std::uint32_t bits;
      std::memcpy(&bits, src + c * 4, 4);
      if (little != host_little) bits = detail::bswap32(bits);
      float v;
      std::memcpy(&v, &bits, 4);
      out.map[static_cast<std::size_t>(r) * width + c] = v;
    }
  }
  return out;
}

inline PfmImage load_pfm(const std::filesystem::path& path) { return decode_pfm(detail::read_file(path)); }

// Writes a grayscale PFM in host byte order (negative scale on little-endian hosts).
inline std::string encode_pfm(const Tensor<float>& map, float scale = 1.0f) {
  if (map.ndim() != 2) throw std::invalid_argument("PFM maps must be 2-d");
  const int h = map.dim(0), w = map.dim(1);
  const bool host_little = std::endian::native == std::endian::little;
  std::ostringstream hdr;
  hdr << "Pf\n" << w << ' ' << h << '\n' << (host_little ? -std::abs(scale) : std::abs(scale)) << '\n';
  std::string out = hdr.str();
  const std::size_t off = out.size();
  out.resize(off + map.numel() * 4);
  for (int r = 0; r < h; ++r)
    std::memcpy(out.data() + off + static_cast<std::size_t>(h - 1 - r) * w * 4, map.ptr() + static_cast<std::size_t>(r) * w,
                static_cast<std::size_t>(w) * 4);
  return out;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatErrorKind::kIo, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_pfm(const std::filesystem::path& path, const Tensor<float>& map, float scale = 1.0f) {
  write_file_atomic(path, encode_pfm(map, scale));
}

// ---------------------------------------------------------------------------------------------
// PNG via libpng

struct PngData {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;  // row-major, interleaved channels
};

namespace detail {

struct PngReadCtx {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadCtx() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};
struct PngWriteCtx {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteCtx() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

inline PngData read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw FormatError(FormatErrorKind::kMalformedHeader, path.string() + " is not a PNG file");
  detail::PngReadCtx ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw FormatError(FormatErrorKind::kIo, "png_create_read_struct failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw FormatError(FormatErrorKind::kIo, "png_create_info_struct failed");
  PngData out;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> raw;
  if (setjmp(png_jmpbuf(ctx.png))) throw FormatError(FormatErrorKind::kTruncated, "libpng failed to decode " + path.string());
  png_init_io(ctx.png, fp.get());
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);
  out.width = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
  out.height = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
  out.bit_depth = png_get_bit_depth(ctx.png, ctx.info);
  const int color = png_get_color_type(ctx.png, ctx.info);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(ctx.png);
    out.bit_depth = 8;
  }
  if (color == PNG_COLOR_TYPE_GRAY && out.bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(ctx.png);
    out.bit_depth = 8;
  }
  if (out.bit_depth == 16 && std::endian::native == std::endian::little) png_set_swap(ctx.png);
  png_read_update_info(ctx.png, ctx.info);
  out.channels = png_get_channels(ctx.png, ctx.info);
  const std::size_t rowbytes = png_get_rowbytes(ctx.png, ctx.info);
  raw.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (int r = 0; r < out.height; ++r) rows[r] = raw.data() + rowbytes * r;
  png_read_image(ctx.png, rows.data());
  png_read_end(ctx.png, nullptr);
  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    std::memcpy(out.samples.data(), raw.data(), n * 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = raw[i];
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const PngData& img) {
  if ((img.bit_depth != 8 && img.bit_depth != 16) || (img.channels != 1 && img.channels != 3))
    throw FormatError(FormatErrorKind::kUnsupported, "only 8/16-bit gray or RGB PNG output is supported");
  if (img.samples.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw std::invalid_argument("PNG sample count does not match dimensions");
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(tmp.string().c_str(), "wb"));
    if (!fp) throw FormatError(FormatErrorKind::kIo, "cannot write " + tmp.string());
    detail::PngWriteCtx ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw FormatError(FormatErrorKind::kIo, "png_create_write_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw FormatError(FormatErrorKind::kIo, "png_create_info_struct failed");
    const int bytes = img.bit_depth / 8;
    const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels * bytes;
    std::vector<unsigned char> raw(rowbytes * img.height);
    for (std::size_t i = 0; i < img.samples.size(); ++i) {
      if (bytes == 2) {
        raw[2 * i] = static_cast<unsigned char>(img.samples[i] >> 8);  // PNG is big-endian
        raw[2 * i + 1] = static_cast<unsigned char>(img.samples[i] & 0xff);
      } else {
        raw[i] = static_cast<unsigned char>(img.samples[i]);
      }
    }
    std::vector<png_bytep> rows(img.height);
    for (int r = 0; r < img.height; ++r) rows[r] = raw.data() + rowbytes * r;
    if (setjmp(png_jmpbuf(ctx.png))) throw FormatError(FormatErrorKind::kIo, "libpng failed to encode " + path.string());
    png_init_io(ctx.png, fp.get());
    png_set_IHDR(ctx.png, ctx.info, img.width, img.height, img.bit_depth,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    png_write_image(ctx.png, rows.data());
    png_write_end(ctx.png, nullptr);
  }
  std::filesystem::rename(tmp, path);
}

struct KittiDisparity {
  Tensor<float> disparity;    // H x W pixels, 0 where invalid
  Tensor<std::uint8_t> valid;  // H x W
};

// 16-bit grayscale, disparity = value / 256, value 0 = no measurement.
inline KittiDisparity load_kitti_disparity_png(const std::filesystem::path& path) {
  const PngData png = read_png(path);
  if (png.bit_depth != 16 || png.channels != 1)
    throw FormatError(FormatErrorKind::kUnsupported, "KITTI disparity must be 16-bit single-channel, got " +
                                                         std::to_string(png.bit_depth) + "-bit x" + std::to_string(png.channels));
  KittiDisparity out{Tensor<float>({png.height, png.width}), Tensor<std::uint8_t>({png.height, png.width})};
  for (std::size_t i = 0; i < png.samples.size(); ++i) {
    const std::uint16_t v = png.samples[i];
    out.valid[i] = v != 0;
    out.disparity[i] = v == 0 ? 0.0f : static_cast<float>(v) / 256.0f;
  }
  return out;
}

// Inverse of the loader: round(d * 256) clamped to [1, 65535] for valid pixels, 0 elsewhere.
inline PngData encode_kitti_disparity(const Tensor<float>& disparity, const Tensor<std::uint8_t>* valid = nullptr) {
  if (disparity.ndim() != 2) throw std::invalid_argument("disparity map must be 2-d");
  PngData png{disparity.dim(1), disparity.dim(0), 1, 16, std::vector<std::uint16_t>(disparity.numel())};
  for (std::size_t i = 0; i < disparity.numel(); ++i) {
    const float d = disparity[i];
    const bool ok = (!valid || (*valid)[i]) && std::isfinite(d) && d >= 0.0f;
    png.samples[i] = ok ? static_cast<std::uint16_t>(std::clamp(std::lround(d * 256.0), 1L, 65535L)) : 0;
  }
  return png;
}

inline void write_kitti_disparity_png(const std::filesystem::path& path, const Tensor<float>& disparity,
                                      const Tensor<std::uint8_t>* valid = nullptr) {
  write_png(path, encode_kitti_disparity(disparity, valid));
}

// 3 x H x W image in [0,1] <-> 8-bit RGB PNG.
inline void write_rgb_png(const std::filesystem::path& path, const Tensor<float>& chw) {
  if (chw.ndim() != 3 || chw.dim(0) != 3) throw std::invalid_argument("RGB image must be 3 x H x W");
  const int h = chw.dim(1), w = chw.dim(2);
  PngData png{w, h, 3, 8, std::vector<std::uint16_t>(chw.numel())};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h * w; ++i)
      png.samples[static_cast<std::size_t>(i) * 3 + c] =
          static_cast<std::uint16_t>(std::lround(std::clamp(chw[static_cast<std::size_t>(c) * h * w + i], 0.0f, 1.0f) * 255.0f));
  write_png(path, png);
}

inline Tensor<float> load_rgb_png(const std::filesystem::path& path) {
  const PngData png = read_png(path);
  if (png.channels != 3 && png.channels != 1)
    throw FormatError(FormatErrorKind::kUnsupported, "expected RGB or gray image in " + path.string());
  const int h = png.height, w = png.width;
  const float maxv = png.bit_depth == 16 ? 65535.0f : 255.0f;
  Tensor<float> out({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h * w; ++i)
      out[static_cast<std::size_t>(c) * h * w + i] =
          static_cast<float>(png.samples[static_cast<std::size_t>(i) * png.channels + (png.channels == 3 ? c : 0)]) / maxv;
  return out;
}

}  // namespace dbs
