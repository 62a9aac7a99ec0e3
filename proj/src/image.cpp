#include "eagle/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

#include "eagle/errors.hpp"

namespace eagle::img {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image from_interleaved(const std::vector<std::uint8_t>& rgb, int h, int w) {
  Image im(Shape{3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        im.data[(static_cast<std::size_t>(c) * h + y) * w + x] =
            rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  return im;
}

Image read_png_file(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::vector<std::uint8_t> rgb;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png decode failed: " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected png row layout: " + path);
  }
  rgb.resize(static_cast<std::size_t>(h) * w * 3);
  rows.resize(h);
  for (int y = 0; y < h; ++y) rows[y] = rgb.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_interleaved(rgb, h, w);
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_err_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image read_jpeg_file(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  jpeg_decompress_struct cinfo;
  JpegErr jerr;
  cinfo.err = jpeg_std_error(&jerr.mgr);
  jerr.mgr.error_exit = jpeg_err_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("jpeg decode failed: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(rgb, h, w);
}

}  // namespace

Image read_image(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  unsigned char magic[4] = {0, 0, 0, 0};
  const std::size_t n = std::fread(magic, 1, 4, f.get());
  f.reset();
  if (n >= 4 && magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
    return read_png_file(path);
  if (n >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg_file(path);
  throw IoError("unsupported image format: " + path);
}

void write_png(const std::string& path, const Image& im) {
  if (im.shape.size() != 3 || im.shape[0] != 3) throw InputError("write_png expects (3,H,W)");
  const int h = im.shape[1], w = im.shape[2];
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            im.data[(static_cast<std::size_t>(c) * h + y) * w + x];
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png encode failed: " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * w * 3);
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
}

Image resize_bilinear(const Image& im, int out_h, int out_w) {
  if (im.shape.size() != 3) throw InputError("resize expects (C,H,W)");
  const int ch = im.shape[0], h = im.shape[1], w = im.shape[2];
  if (out_h <= 0 || out_w <= 0) throw InputError("resize: bad output size");
  Image out(Shape{ch, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = std::clamp(fx - x0, 0.0, 1.0);
      for (int c = 0; c < ch; ++c) {
        const auto* p = im.data.data() + static_cast<std::size_t>(c) * h * w;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1]) +
                         wy * ((1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1]);
        out.data[(static_cast<std::size_t>(c) * out_h + oy) * out_w + ox] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Image center_crop(const Image& im, int out_h, int out_w) {
  if (im.shape.size() != 3) throw InputError("center_crop expects (C,H,W)");
  const int ch = im.shape[0], h = im.shape[1], w = im.shape[2];
  if (out_h > h || out_w > w) throw InputError("center_crop: output larger than input");
  const int y0 = (h - out_h) / 2, x0 = (w - out_w) / 2;
  Image out(Shape{ch, out_h, out_w});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < out_h; ++y)
      std::memcpy(out.data.data() + (static_cast<std::size_t>(c) * out_h + y) * out_w,
                  im.data.data() + (static_cast<std::size_t>(c) * h + y0 + y) * w + x0,
                  static_cast<std::size_t>(out_w));
  return out;
}

std::vector<Image> load_image_dir(const std::string& dir, int h, int w) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") paths.push_back(e.path().string());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<Image> out;
  out.reserve(paths.size());
  for (const auto& p : paths) {
    Image im = read_image(p);
    // scale shorter side to target, then crop the excess
    const int ih = im.shape[1], iw = im.shape[2];
    const double scale = std::max(static_cast<double>(h) / ih, static_cast<double>(w) / iw);
    const int rh = std::max(h, static_cast<int>(std::lround(ih * scale)));
    const int rw = std::max(w, static_cast<int>(std::lround(iw * scale)));
    out.push_back(center_crop(resize_bilinear(im, rh, rw), h, w));
  }
  return out;
}

}  // namespace eagle::img
