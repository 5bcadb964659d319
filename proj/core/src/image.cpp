#include "gz/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "gz/error.hpp"

namespace gz {

template <typename Dtype>
void to_tensor_into(const Image& img, Tensor<Dtype>& batch, int n) {
  if (batch.ndim() != 4 || batch.c() != img.channels || batch.h() != img.height ||
      batch.w() != img.width) {
    throw ShapeError("image " + std::to_string(img.channels) + "x" + std::to_string(img.height) +
                     "x" + std::to_string(img.width) + " does not fit batch " +
                     shape_str(batch.shape()));
  }
  Dtype* out = batch.sample(n);
  // 0..255 -> [-1, 1]
  constexpr Dtype scale = Dtype{2} / Dtype{255};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out[i] = static_cast<Dtype>(img.pixels[i]) * scale - Dtype{1};
}

template <typename Dtype>
Tensor<Dtype> to_tensor(const Image& img) {
  Tensor<Dtype> t({1, img.channels, img.height, img.width});
  to_tensor_into(img, t, 0);
  return t;
}

template Tensor<float> to_tensor<float>(const Image&);
template Tensor<double> to_tensor<double>(const Image&);
template void to_tensor_into<float>(const Image&, Tensor<float>&, int);
template void to_tensor_into<double>(const Image&, Tensor<double>&, int);

namespace {

struct Tap {
  int i0;
  int i1;
  float f;  // weight of i1
};

std::vector<Tap> taps(int in, int out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, static_cast<float>(s - i0)};
  }
  return t;
}

}  // namespace

std::vector<float> resize_bilinear(std::span<const float> grid, int h, int w, int out_h, int out_w) {
  if (grid.size() != static_cast<std::size_t>(h) * w || out_h < 1 || out_w < 1) {
    throw ArgumentError("resize_bilinear: bad grid dimensions");
  }
  const auto ty = taps(h, out_h);
  const auto tx = taps(w, out_w);
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const Tap& a = ty[y];
    for (int x = 0; x < out_w; ++x) {
      const Tap& b = tx[x];
      const float v00 = grid[static_cast<std::size_t>(a.i0) * w + b.i0];
      const float v01 = grid[static_cast<std::size_t>(a.i0) * w + b.i1];
      const float v10 = grid[static_cast<std::size_t>(a.i1) * w + b.i0];
      const float v11 = grid[static_cast<std::size_t>(a.i1) * w + b.i1];
      const float top = v00 + (v01 - v00) * b.f;
      const float bot = v10 + (v11 - v10) * b.f;
      out[static_cast<std::size_t>(y) * out_w + x] = top + (bot - top) * a.f;
    }
  }
  return out;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (img.height == height && img.width == width) return img;
  Image out(img.channels, height, width);
  std::vector<float> plane(static_cast<std::size_t>(img.height) * img.width);
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane.size(); ++i) {
      plane[i] = img.pixels[static_cast<std::size_t>(c) * plane.size() + i];
    }
    const auto r = resize_bilinear(plane, img.height, img.width, height, width);
    for (std::size_t i = 0; i < r.size(); ++i) {
      out.pixels[static_cast<std::size_t>(c) * r.size() + i] =
          static_cast<std::uint8_t>(std::clamp(std::lround(r[i]), 0L, 255L));
    }
  }
  return out;
}

Image center_crop_resize(const Image& img, int side) {
  const int s = std::min(img.height, img.width);
  const int top = (img.height - s) / 2;
  const int left = (img.width - s) / 2;
  Image crop(img.channels, s, s);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) crop.at(c, y, x) = img.at(c, top + y, left + x);
  return resize_bilinear(crop, side, side);
}

Image pad_crop(const Image& img, int pad, int top, int left) {
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      const int sy = top + y - pad;
      if (sy < 0 || sy >= img.height) continue;
      for (int x = 0; x < img.width; ++x) {
        const int sx = left + x - pad;
        if (sx < 0 || sx >= img.width) continue;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

namespace {

int read_header_int(std::istream& in, const std::string& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw IoError(path, "not a binary netpbm image");
  int v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    if (v > 1 << 20) throw IoError(path, "netpbm header value too large");
    ch = in.get();
  }
  return v;  // the single whitespace after maxval has been consumed
}

}  // namespace

Image read_netpbm(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(p, "cannot open image");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw IoError(p, "not a binary netpbm image");
  }
  const int channels = magic[1] == '6' ? 3 : 1;
  const int w = read_header_int(in, p);
  const int h = read_header_int(in, p);
  const int maxval = read_header_int(in, p);
  if (w < 1 || h < 1 || maxval != 255) throw IoError(p, "unsupported netpbm geometry or maxval");
  std::vector<std::uint8_t> interleaved(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(interleaved.data()), static_cast<std::streamsize>(interleaved.size()));
  if (in.gcount() != static_cast<std::streamsize>(interleaved.size())) {
    throw IoError(p, "truncated netpbm pixel data");
  }
  Image img(channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = interleaved[(static_cast<std::size_t>(y) * w + x) * channels + c];
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3) throw ArgumentError("write_ppm needs a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot write image");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.put(static_cast<char>(img.at(c, y, x)));
  if (!out) throw IoError(path.string(), "write failed");
}

void write_pgm(const std::filesystem::path& path, int height, int width,
               std::span<const std::uint8_t> gray) {
  if (gray.size() != static_cast<std::size_t>(height) * width) {
    throw ArgumentError("write_pgm: pixel count does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot write image");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw IoError(path.string(), "write failed");
}

}  // namespace gz
