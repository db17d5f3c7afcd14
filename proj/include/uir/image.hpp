#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "uir/errors.hpp"
#include "uir/tensor.hpp"

namespace uir {

// RGB image, planar channel-major layout (c,y,x), values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  static constexpr int channels = 3;
  std::vector<double> data;  // size 3*height*width

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(3) * h * w, 0.0) {}
  Image(int h, int w, double r, double g, double b) : Image(h, w) {
    size_t plane = static_cast<size_t>(h) * w;
    std::fill(data.begin(), data.begin() + plane, r);
    std::fill(data.begin() + plane, data.begin() + 2 * plane, g);
    std::fill(data.begin() + 2 * plane, data.end(), b);
  }

  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }

  size_t plane_size() const { return static_cast<size_t>(height) * width; }
  double* plane(int c) { return data.data() + c * plane_size(); }
  const double* plane(int c) const { return data.data() + c * plane_size(); }

  bool same_size(const Image& o) const { return height == o.height && width == o.width; }

  Tensor to_tensor() const {
    Tensor t({3, height, width});
    t.data = data;
    return t;
  }
  static Image from_tensor(const Tensor& t) {
    Image im(t.dim(1), t.dim(2));
    im.data = t.data;
    return im;
  }

  void clamp01() {
    for (double& v : data) v = std::min(1.0, std::max(0.0, v));
  }
};

struct IlluminationMap {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // single channel

  IlluminationMap() = default;
  IlluminationMap(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0.0) {}
  double& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }

  Tensor to_tensor() const {
    Tensor t({1, height, width});
    t.data = data;
    return t;
  }
};

struct GradientMap {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // single channel, non-negative

  GradientMap() = default;
  GradientMap(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0.0) {}
  double& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }

  Tensor to_tensor() const {
    Tensor t({1, height, width});
    t.data = data;
    return t;
  }
};

// Rec.601 luma, the one luminance convention used across the codebase.
inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline std::vector<double> luminance_plane(const Image& im) {
  std::vector<double> out(im.plane_size());
  const double* r = im.plane(0);
  const double* g = im.plane(1);
  const double* b = im.plane(2);
  for (size_t i = 0; i < out.size(); ++i) out[i] = luma(r[i], g[i], b[i]);
  return out;
}

// ---------------------------------------------------------------------------
// PNG / JPEG I/O
// ---------------------------------------------------------------------------

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline Image decode_png(std::FILE* fp, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    raise(ErrorKind::UndecodableImage, "libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorKind::UndecodableImage, "corrupt PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);

  if (color_type != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorKind::NonRGBImage, "PNG is not 3-channel RGB: " + path);
  }
  if (bit_depth != 8 && bit_depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorKind::UndecodableImage, "unsupported PNG bit depth: " + path);
  }
  if (bit_depth == 16) png_set_swap(png);  // stored big-endian in the file
  png_read_update_info(png, info);

  size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> raw(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image im(static_cast<int>(h), static_cast<int>(w));
  if (bit_depth == 8) {
    for (png_uint_32 y = 0; y < h; ++y)
      for (png_uint_32 x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          im.at(c, static_cast<int>(y), static_cast<int>(x)) =
              raw[y * rowbytes + 3 * x + c] / 255.0;
  } else {
    const uint16_t* raw16 = reinterpret_cast<const uint16_t*>(raw.data());
    size_t stride = rowbytes / 2;
    for (png_uint_32 y = 0; y < h; ++y)
      for (png_uint_32 x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          im.at(c, static_cast<int>(y), static_cast<int>(x)) =
              raw16[y * stride + 3 * x + c] / 65535.0;
  }
  return im;
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  JpegErrorMgr* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  longjmp(mgr->jump, 1);
}

inline Image decode_jpeg(std::FILE* fp, const std::string& path) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    raise(ErrorKind::UndecodableImage, "corrupt JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  if (cinfo.output_components != 3) {
    jpeg_destroy_decompress(&cinfo);
    raise(ErrorKind::NonRGBImage, "JPEG is not 3-channel RGB: " + path);
  }
  int w = static_cast<int>(cinfo.output_width);
  int h = static_cast<int>(cinfo.output_height);
  Image im(h, w);
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  unsigned char* rowp = row.data();
  int y = 0;
  while (cinfo.output_scanline < cinfo.output_height) {
    jpeg_read_scanlines(&cinfo, &rowp, 1);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = row[3 * x + c] / 255.0;
    ++y;
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return im;
}

}  // namespace detail

inline Image load_image(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec))
    raise(ErrorKind::MissingFile, path.string());
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) raise(ErrorKind::MissingFile, path.string());
  std::unique_ptr<std::FILE, detail::FileCloser> guard(fp);

  unsigned char magic[8] = {0};
  size_t got = std::fread(magic, 1, 8, fp);
  std::rewind(fp);
  if (got >= 8 && png_sig_cmp(magic, 0, 8) == 0) return detail::decode_png(fp, path.string());
  if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return detail::decode_jpeg(fp, path.string());
  raise(ErrorKind::UndecodableImage, "not a PNG or JPEG file: " + path.string());
}

inline unsigned char quantize8(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(v * 255.0));
}

// Rounds pixel values to the 8-bit grid. The reliable bank stores labels in this
// representation so in-memory entries and their on-disk PNGs are bit-identical.
inline Image quantize_to_8bit(const Image& im) {
  Image out(im.height, im.width);
  for (size_t i = 0; i < im.data.size(); ++i) out.data[i] = quantize8(im.data[i]) / 255.0;
  return out;
}

inline void save_png(const Image& im, const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) raise(ErrorKind::IOFailure, "cannot open for write: " + path.string());
  std::unique_ptr<std::FILE, detail::FileCloser> guard(fp);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    raise(ErrorKind::IOFailure, "libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise(ErrorKind::IOFailure, "PNG write failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, im.width, im.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(static_cast<size_t>(im.width) * 3);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) row[3 * x + c] = quantize8(im.at(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// Plane helpers shared by image ops, augmentation and evaluation
// ---------------------------------------------------------------------------

// Bilinear resample with corner-aligned sampling, the fixed scheme everywhere.
inline void resize_bilinear_plane(const double* src, int sh, int sw, double* dst, int dh, int dw) {
  double sy = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
  double sx = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
  for (int y = 0; y < dh; ++y) {
    double fy = y * sy;
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, sh - 1);
    double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = x * sx;
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, sw - 1);
      double wx = fx - x0;
      double v00 = src[y0 * sw + x0], v01 = src[y0 * sw + x1];
      double v10 = src[y1 * sw + x0], v11 = src[y1 * sw + x1];
      dst[y * dw + x] =
          (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
    }
  }
}

inline Image resize_bilinear(const Image& im, int dh, int dw) {
  if (dh == im.height && dw == im.width) return im;
  Image out(dh, dw);
  for (int c = 0; c < 3; ++c)
    resize_bilinear_plane(im.plane(c), im.height, im.width, out.plane(c), dh, dw);
  return out;
}

inline std::vector<double> gaussian_kernel_1d(double sigma, int radius) {
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + radius] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur with replicate boundary.
inline void gaussian_blur_plane(const double* src, int h, int w, double* dst, double sigma,
                                int radius) {
  if (sigma <= 0.0 || radius <= 0) {
    std::copy(src, src + static_cast<size_t>(h) * w, dst);
    return;
  }
  std::vector<double> k = gaussian_kernel_1d(sigma, radius);
  std::vector<double> tmp(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        int xx = std::clamp(x + i, 0, w - 1);
        acc += k[i + radius] * src[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        int yy = std::clamp(y + i, 0, h - 1);
        acc += k[i + radius] * tmp[yy * w + x];
      }
      dst[y * w + x] = acc;
    }
}

inline Image gaussian_blur(const Image& im, double sigma, int radius) {
  Image out(im.height, im.width);
  for (int c = 0; c < 3; ++c)
    gaussian_blur_plane(im.plane(c), im.height, im.width, out.plane(c), sigma, radius);
  return out;
}

// ---------------------------------------------------------------------------
// Core operators
// ---------------------------------------------------------------------------

inline Image alpha_blend(const Image& x, const Image& y, double alpha) {
  require(x.same_size(y), ErrorKind::DimensionMismatch, "alpha_blend operands differ in size");
  if (alpha == 0.0) return y;
  if (alpha == 1.0) return x;
  Image out(x.height, x.width);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = alpha * x.data[i] + (1.0 - alpha) * y.data[i];
  return out;
}

// Forward first differences of the luminance channel with replicate boundary
// (the difference at the last row/column is zero), combined as sqrt(dx^2+dy^2).
inline GradientMap gradient_map(const Image& im) {
  std::vector<double> lum = luminance_plane(im);
  GradientMap g(im.height, im.width);
  int h = im.height, w = im.width;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dx = (x + 1 < w) ? lum[y * w + x + 1] - lum[y * w + x] : 0.0;
      double dy = (y + 1 < h) ? lum[(y + 1) * w + x] - lum[y * w + x] : 0.0;
      g.at(y, x) = std::sqrt(dx * dx + dy * dy);
    }
  return g;
}

inline GradientMap gradient_map_of_tensor(const Tensor& t) {
  return gradient_map(Image::from_tensor(t));
}

// Ambient light field estimate: per-pixel max over RGB smoothed by a wide
// Gaussian (sigma = min(H,W)/16). Values stay in [0,1]; no renormalization, so
// global brightening can only raise the map.
inline IlluminationMap estimate_illumination(const Image& im) {
  int h = im.height, w = im.width;
  std::vector<double> mx(static_cast<size_t>(h) * w);
  const double* r = im.plane(0);
  const double* g = im.plane(1);
  const double* b = im.plane(2);
  for (size_t i = 0; i < mx.size(); ++i) mx[i] = std::max(r[i], std::max(g[i], b[i]));
  double sigma = std::min(h, w) / 16.0;
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  IlluminationMap out(h, w);
  gaussian_blur_plane(mx.data(), h, w, out.data.data(), sigma, radius);
  return out;
}

}  // namespace uir
