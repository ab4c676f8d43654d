#include "magic/image_io.hpp"

#include <png.h>
// jpeglib.h expects size_t and FILE to be declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <string>

namespace magic {

std::uint8_t to_byte(float v) {
  if (!(v > -1.0f)) return 0;
  if (v >= 1.0f) return 255;
  return static_cast<std::uint8_t>(std::lround((double(v) + 1.0) * 127.5));
}

float from_byte(std::uint8_t b) { return float(double(b) / 127.5 - 1.0); }

namespace {

Tensor4<float> from_rgb(const std::vector<std::uint8_t>& rgb, Index h, Index w) {
  Tensor4<float> out(1, 3, h, w);
  for (Index c = 0; c < 3; ++c) {
    float* dst = out.channel(0, c);
    for (Index p = 0; p < h * w; ++p) dst[p] = from_byte(rgb[static_cast<std::size_t>(p * 3 + c)]);
  }
  return out;
}

struct PngReader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<PngReader*>(png_get_io_ptr(png));
  if (r->pos + n > r->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, r->bytes.data() + r->pos, n);
  r->pos += n;
}

void png_warn_silent(png_structp, png_const_charp) {}
[[noreturn]] void png_fail_silent(png_structp png, png_const_charp) { png_longjmp(png, 1); }

struct RawImage {
  std::vector<std::uint8_t> rgb;
  std::vector<std::uint8_t*> rows;
  Index height = 0;
  Index width = 0;
};

// The setjmp helpers below keep every C++ object in caller-owned storage so that a
// longjmp never skips a destructor or observes a clobbered local.
bool decode_png_raw(PngReader* reader, RawImage* img) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail_silent, png_warn_silent);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, reader, png_read_mem);
  png_read_info(png, info);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != std::size_t(width) * 3) png_error(png, "unexpected row layout");
  img->rgb.resize(std::size_t(width) * height * 3);
  img->rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) img->rows[y] = img->rgb.data() + std::size_t(y) * width * 3;
  png_read_image(png, img->rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img->height = height;
  img->width = width;
  return true;
}

Tensor4<float> decode_png(std::span<const std::uint8_t> bytes) {
  PngReader reader{bytes};
  RawImage img;
  if (!decode_png_raw(&reader, &img)) throw IoError("png: corrupt or unsupported image");
  return from_rgb(img.rgb, img.height, img.width);
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_fail(j_common_ptr cinfo) { std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1); }
void jpeg_quiet(j_common_ptr, int) {}

bool decode_jpeg_raw(std::span<const std::uint8_t> bytes, jpeg_decompress_struct* cinfo, JpegError* err,
                     RawImage* img) {
  cinfo->err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_fail;
  err->mgr.emit_message = jpeg_quiet;
  if (setjmp(err->jump)) {
    jpeg_destroy_decompress(cinfo);
    return false;
  }
  jpeg_create_decompress(cinfo);
  jpeg_mem_src(cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(cinfo, TRUE);
  cinfo->out_color_space = JCS_RGB;
  jpeg_start_decompress(cinfo);
  const std::size_t stride = std::size_t(cinfo->output_width) * 3;
  img->rgb.resize(stride * cinfo->output_height);
  while (cinfo->output_scanline < cinfo->output_height) {
    JSAMPROW row = img->rgb.data() + std::size_t(cinfo->output_scanline) * stride;
    jpeg_read_scanlines(cinfo, &row, 1);
  }
  img->height = cinfo->output_height;
  img->width = cinfo->output_width;
  jpeg_finish_decompress(cinfo);
  jpeg_destroy_decompress(cinfo);
  return true;
}

Tensor4<float> decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  RawImage img;
  if (!decode_jpeg_raw(bytes, &cinfo, &err, &img)) throw IoError("jpeg: corrupt or unsupported image");
  return from_rgb(img.rgb, img.height, img.width);
}

void png_write_mem(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

void png_flush_noop(png_structp) {}

bool encode_png_raw(std::vector<std::uint8_t>* out, std::vector<png_bytep>* rows, png_uint_32 h, png_uint_32 w) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail_silent, png_warn_silent);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_mem, png_flush_noop);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows->data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace

Tensor4<float> decode_image(std::span<const std::uint8_t> bytes) {
  static const std::uint8_t kPng[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPng, 8) == 0) return decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return decode_jpeg(bytes);
  throw IoError("unrecognised image format");
}

Tensor4<float> read_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Tensor4<float>& image) {
  if (image.n() != 1 || image.c() != 3) throw ConfigError("encode_png: expects a (1, 3, H, W) image");
  const Index h = image.h(), w = image.w();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
  for (Index c = 0; c < 3; ++c) {
    const float* src = image.channel(0, c);
    for (Index p = 0; p < h * w; ++p) rgb[static_cast<std::size_t>(p * 3 + c)] = to_byte(src[p]);
  }
  std::vector<std::uint8_t> out;
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (Index y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = rgb.data() + y * w * 3;
  if (!encode_png_raw(&out, &rows, png_uint_32(h), png_uint_32(w))) throw IoError("png: encoding failed");
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor4<float>& image) {
  const auto bytes = encode_png(image);
  write_file(path, bytes);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor4<float> resize_bilinear(const Tensor4<float>& x, Index height, Index width) {
  Tensor4<float> out(x.n(), x.c(), height, width);
  const double sy = double(x.h()) / double(height), sx = double(x.w()) / double(width);
  auto axis = [](Index i, double scale, Index size, Index& i0, Index& i1, double& frac) {
    const double s = std::clamp((double(i) + 0.5) * scale - 0.5, 0.0, double(size - 1));
    i0 = Index(std::floor(s));
    i1 = std::min(i0 + 1, size - 1);
    frac = s - double(i0);
  };
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c) {
      const float* src = x.channel(n, c);
      float* dst = out.channel(n, c);
      for (Index r = 0; r < height; ++r) {
        Index r0, r1;
        double fr;
        axis(r, sy, x.h(), r0, r1, fr);
        for (Index q = 0; q < width; ++q) {
          Index c0, c1;
          double fc;
          axis(q, sx, x.w(), c0, c1, fc);
          const double top = (1 - fc) * src[r0 * x.w() + c0] + fc * src[r0 * x.w() + c1];
          const double bottom = (1 - fc) * src[r1 * x.w() + c0] + fc * src[r1 * x.w() + c1];
          dst[r * width + q] = float((1 - fr) * top + fr * bottom);
        }
      }
    }
  return out;
}

}  // namespace magic
