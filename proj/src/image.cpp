// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <zlib.h>

#if FEATINV_HAVE_JPEG
#include <jpeglib.h>
#endif
#if FEATINV_HAVE_PNG
#include <png.h>
#endif

#include "featinv/error.hpp"

namespace featinv {

Image::Image(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h) {
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = fill[0];
    rgb[i + 1] = fill[1];
    rgb[i + 2] = fill[2];
  }
}

namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError(path.string() + ": only binary PPM (P6) is supported");
  auto next_int = [&in, &path]() {
    int v = 0;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      if (!(in >> v)) throw FormatError(path.string() + ": bad PPM header");
      return v;
    }
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError(path.string() + ": unsupported PPM geometry");
  in.get();
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw FormatError(path.string() + ": truncated PPM payload");
  return img;
}

#if FEATINV_HAVE_JPEG
struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

Image read_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!f) throw FormatError("cannot open image " + path.string());
  Image img;
  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = [](j_common_ptr c) {
    auto* mgr = reinterpret_cast<JpegErrorManager*>(c->err);
    (*c->err->format_message)(c, mgr->message);
    std::longjmp(mgr->jump, 1);
  };
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(path.string() + ": " + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}
#endif

#if FEATINV_HAVE_PNG
Image read_png(const std::filesystem::path& path) {
  png_image pimg{};
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pimg, path.c_str())) {
    throw FormatError(path.string() + ": " + pimg.message);
  }
  pimg.format = PNG_FORMAT_RGB;
  Image img;
  img.width = static_cast<int>(pimg.width);
  img.height = static_cast<int>(pimg.height);
  img.rgb.resize(PNG_IMAGE_SIZE(pimg));
  if (!png_image_finish_read(&pimg, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&pimg);
    throw FormatError(path.string() + ": " + pimg.message);
  }
  return img;
}
#endif

void put_u32_be(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>(v >> 16));
  s.push_back(static_cast<char>(v >> 8));
  s.push_back(static_cast<char>(v));
}

void png_chunk(std::ofstream& out, const char* type, const std::string& data) {
  std::string buf;
  put_u32_be(buf, static_cast<std::uint32_t>(data.size()));
  buf.append(type, 4);
  buf += data;
  const auto crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data() + 4), static_cast<uInt>(buf.size() - 4)));
  put_u32_be(buf, crc);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::uint8_t clamp_u8(float v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

float cubic(float x) {
  // Keys kernel, a = -0.5 (matches PIL's bicubic).
  constexpr float a = -0.5f;
  x = std::fabs(x);
  if (x < 1.0f) return ((a + 2.0f) * x - (a + 3.0f)) * x * x + 1.0f;
  if (x < 2.0f) return (((x - 5.0f) * x + 8.0f) * x - 4.0f) * a;
  return 0.0f;
}

// Separable resampling with an antialiasing support stretch when
// downscaling, in the style of PIL's resample.
std::vector<float> resample_axis(const std::vector<float>& src, int in_len, int out_len, int stride, int count,
                                 Interpolation interp, bool horizontal, int other_len) {
  const float scale = static_cast<float>(in_len) / static_cast<float>(out_len);
  const float filter_scale = std::max(scale, 1.0f);
  const float support = (interp == Interpolation::kBicubic ? 2.0f : 1.0f) * filter_scale;
  std::vector<float> dst(static_cast<std::size_t>(out_len) * other_len * count);
  for (int o = 0; o < out_len; ++o) {
    const float center = (static_cast<float>(o) + 0.5f) * scale;
    const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
    const int hi = std::min(in_len, static_cast<int>(std::ceil(center + support)));
    std::vector<float> w(static_cast<std::size_t>(hi - lo));
    float total = 0.0f;
    for (int i = lo; i < hi; ++i) {
      const float x = (static_cast<float>(i) + 0.5f - center) / filter_scale;
      const float k = interp == Interpolation::kBicubic ? cubic(x) : std::max(0.0f, 1.0f - std::fabs(x));
      w[static_cast<std::size_t>(i - lo)] = k;
      total += k;
    }
    if (total != 0.0f) {
      for (auto& v : w) v /= total;
    }
    for (int t = 0; t < other_len; ++t) {
      for (int c = 0; c < count; ++c) {
        float acc = 0.0f;
        for (int i = lo; i < hi; ++i) {
          const std::size_t si = horizontal
                                     ? (static_cast<std::size_t>(t) * in_len + i) * count + c
                                     : (static_cast<std::size_t>(i) * other_len + t) * count + c;
          acc += w[static_cast<std::size_t>(i - lo)] * src[si];
        }
        const std::size_t di = horizontal ? (static_cast<std::size_t>(t) * out_len + o) * count + c
                                          : (static_cast<std::size_t>(o) * other_len + t) * count + c;
        dst[di] = acc;
      }
    }
  }
  (void)stride;
  return dst;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".ppm") return read_ppm(path);
#if FEATINV_HAVE_JPEG
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
#endif
#if FEATINV_HAVE_PNG
  if (ext == ".png") return read_png(path);
#endif
  throw FormatError("unsupported image format: " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (img.width * 3 + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(img.at(0, y)), static_cast<std::size_t>(img.width) * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string z(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw FormatError("png: compression failed");
  }
  z.resize(bound);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", z);
  png_chunk(out, "IEND", "");
}

Image resize(const Image& img, int width, int height, Interpolation interp) {
  if (width == img.width && height == img.height) return img;
  std::vector<float> src(img.rgb.begin(), img.rgb.end());
  auto h = resample_axis(src, img.width, width, 3, 3, interp, true, img.height);
  auto v = resample_axis(h, img.height, height, 3, 3, interp, false, width);
  Image out;
  out.width = width;
  out.height = height;
  out.rgb.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out.rgb[i] = clamp_u8(v[i]);
  return out;
}

Image center_crop(const Image& img, int size) {
  if (img.width < size || img.height < size) throw ShapeError("centre crop larger than image");
  const int x0 = static_cast<int>(std::lround((img.width - size) / 2.0));
  const int y0 = static_cast<int>(std::lround((img.height - size) / 2.0));
  Image out(size, size);
  for (int y = 0; y < size; ++y) {
    std::memcpy(out.at(0, y), img.at(x0, y0 + y), static_cast<std::size_t>(size) * 3);
  }
  return out;
}

Image preprocess_image(const Image& img, const Preprocess& p) {
  Image work = img;
  if (p.resize_shorter > 0) {
    const int shorter = std::min(work.width, work.height);
    const double s = static_cast<double>(p.resize_shorter) / shorter;
    const int w = work.width <= work.height ? p.resize_shorter : static_cast<int>(std::lround(work.width * s));
    const int h = work.height <= work.width ? p.resize_shorter : static_cast<int>(std::lround(work.height * s));
    work = resize(work, w, h, p.interpolation);
  }
  if (p.crop > 0) work = center_crop(work, p.crop);
  return work;
}

Tensor to_input_tensor(const Image& img, const Preprocess& p) {
  const Image work = preprocess_image(img, p);
  const Index hw = static_cast<Index>(work.width) * work.height;
  Matrix m(3, hw);
  for (Index i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = static_cast<float>(work.rgb[static_cast<std::size_t>(i) * 3 + c]) / 255.0f;
      m(c, i) = (v - p.mean[c]) / p.std[c];
    }
  }
  return Tensor::spatial(std::move(m), work.height, work.width);
}

}  // namespace featinv
