#include "pcas/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pcas/logging.hpp"

namespace pcas {

namespace {

uint8_t to_u8(double v) {
  const double s = std::round(v * 255.0);
  return static_cast<uint8_t>(std::clamp(s, 0.0, 255.0));
}

void skip_pnm_whitespace(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
}

struct PnmHeader {
  int w = 0, h = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& is, const char* magic,
                          const std::filesystem::path& path) {
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != magic[0] || m1 != magic[1])
    throw Error("bad magic in " + path.string());
  PnmHeader hd;
  skip_pnm_whitespace(is);
  is >> hd.w;
  skip_pnm_whitespace(is);
  is >> hd.h;
  skip_pnm_whitespace(is);
  is >> hd.maxval;
  is.get();  // single whitespace before raster
  if (!is || hd.w <= 0 || hd.h <= 0 || hd.maxval != 255)
    throw Error("unsupported PNM header in " + path.string());
  return hd;
}

void put_u32le(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

void put_u16le(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t get_u16le(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3)
    throw Error("write_ppm: image must be 3xHxW");
  const int h = image.shape[1], w = image.shape[2];
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_ppm: cannot open " + path.string());
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<size_t>(x) * 3 + c] = to_u8(image.at(c, y, x));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw Error("write_ppm: write failed for " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("read_ppm: cannot open " + path.string());
  const PnmHeader hd = read_pnm_header(is, "P6", path);
  Tensor img({3, hd.h, hd.w});
  std::vector<uint8_t> row(static_cast<size_t>(hd.w) * 3);
  for (int y = 0; y < hd.h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw Error("read_ppm: truncated raster in " + path.string());
    for (int x = 0; x < hd.w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const SemanticMask& mask) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_pgm: cannot open " + path.string());
  os << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(mask.data.data()),
           static_cast<std::streamsize>(mask.data.size()));
  if (!os) throw Error("write_pgm: write failed for " + path.string());
}

SemanticMask read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("read_pgm: cannot open " + path.string());
  const PnmHeader hd = read_pnm_header(is, "P5", path);
  SemanticMask mask(hd.h, hd.w);
  is.read(reinterpret_cast<char*>(mask.data.data()),
          static_cast<std::streamsize>(mask.data.size()));
  if (!is) throw Error("read_pgm: truncated raster in " + path.string());
  return mask;
}

void write_wav(const std::filesystem::path& path, const std::vector<double>& samples,
               int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_wav: cannot open " + path.string());
  const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  put_u32le(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put_u32le(os, 16);
  put_u16le(os, 1);  // PCM
  put_u16le(os, 1);  // mono
  put_u32le(os, static_cast<uint32_t>(sample_rate));
  put_u32le(os, static_cast<uint32_t>(sample_rate * 2));
  put_u16le(os, 2);   // block align
  put_u16le(os, 16);  // bits
  os.write("data", 4);
  put_u32le(os, data_bytes);
  for (double s : samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const int v = static_cast<int>(std::lround(clamped * 32767.0));
    put_u16le(os, static_cast<uint16_t>(static_cast<int16_t>(v)));
  }
  if (!os) throw Error("write_wav: write failed for " + path.string());
}

std::vector<double> read_wav(const std::filesystem::path& path, int* sample_rate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("read_wav: cannot open " + path.string());
  char tag[5] = {0};
  is.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw Error("read_wav: not RIFF: " + path.string());
  get_u32le(is);
  is.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw Error("read_wav: not WAVE: " + path.string());

  int sr = 0;
  std::vector<double> samples;
  while (is.read(tag, 4)) {
    const uint32_t size = get_u32le(is);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      const uint16_t fmt = get_u16le(is);
      const uint16_t channels = get_u16le(is);
      sr = static_cast<int>(get_u32le(is));
      get_u32le(is);
      get_u16le(is);
      const uint16_t bits = get_u16le(is);
      if (fmt != 1 || channels != 1 || bits != 16)
        throw Error("read_wav: only 16-bit PCM mono supported: " + path.string());
      if (size > 16) is.ignore(size - 16);
    } else if (std::strncmp(tag, "data", 4) == 0) {
      const size_t n = size / 2;
      samples.resize(n);
      for (size_t i = 0; i < n; ++i)
        samples[i] = static_cast<int16_t>(get_u16le(is)) / 32767.0;
    } else {
      is.ignore(size);
    }
  }
  if (sr == 0) throw Error("read_wav: missing fmt chunk in " + path.string());
  if (sample_rate != nullptr) *sample_rate = sr;
  return samples;
}

Tensor bilinear_resize(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) throw Error("bilinear_resize: image must be CxHxW");
  const int ch = image.shape[0], h = image.shape[1], w = image.shape[2];
  Tensor out({ch, out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    double sy = (y + 0.5) * static_cast<double>(h) / out_h - 0.5;
    sy = std::clamp(sy, 0.0, h - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      double sx = (x + 0.5) * static_cast<double>(w) / out_w - 0.5;
      sx = std::clamp(sx, 0.0, w - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < ch; ++c)
        out.at(c, y, x) = (1 - fy) * ((1 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1)) +
                          fy * ((1 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1));
    }
  }
  return out;
}

Tensor crop_image(const Tensor& image, int x0, int y0, int w, int h) {
  if (image.rank() != 3) throw Error("crop_image: image must be CxHxW");
  const int ch = image.shape[0], ih = image.shape[1], iw = image.shape[2];
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > iw || y0 + h > ih)
    throw Error("crop_image: box outside image");
  Tensor out({ch, h, w});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
  return out;
}

}  // namespace pcas
