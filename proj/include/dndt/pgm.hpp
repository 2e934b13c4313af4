#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "dndt/errors.hpp"
#include "dndt/image.hpp"

namespace dndt {

// Binary PGM (P5), 16-bit, maxval 65535, big-endian sample order. Values are
// rounded to the nearest integer and clamped to [0, 65535] on write.

inline void write_pgm16(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoError::Code::open_failed, "cannot open for write: " + path);
  out << "P5\n" << img.width << " " << img.height << "\n65535\n";
  std::string buf;
  buf.reserve(img.pix.size() * 2);
  for (double v : img.pix) {
    long long q = std::llround(v);
    if (q < 0) q = 0;
    if (q > 65535) q = 65535;
    buf.push_back(static_cast<char>((q >> 8) & 0xFF));
    buf.push_back(static_cast<char>(q & 0xFF));
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError(IoError::Code::truncated, "short write: " + path);
}

namespace detail {
// Reads the next header token, skipping whitespace and '#' comment lines.
inline std::string pgm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
    } else if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      while ((c = in.get()) != EOF && !std::isspace(c) && c != '#')
        tok.push_back(static_cast<char>(c));
      if (c == '#') in.unget();
      return tok;
    }
  }
  return tok;
}
}  // namespace detail

inline Image read_pgm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoError::Code::open_failed, "cannot open: " + path);
  if (detail::pgm_token(in) != "P5")
    throw IoError(IoError::Code::bad_magic, "not a binary PGM: " + path);
  int w = 0, h = 0;
  long maxval = 0;
  try {
    w = std::stoi(detail::pgm_token(in));
    h = std::stoi(detail::pgm_token(in));
    maxval = std::stol(detail::pgm_token(in));
  } catch (const std::exception&) {
    throw IoError(IoError::Code::bad_format, "unparsable PGM header: " + path);
  }
  if (w <= 0 || h <= 0)
    throw IoError(IoError::Code::bad_format, "bad PGM dimensions: " + path);
  if (maxval != 65535)
    throw IoError(IoError::Code::bad_format, "expected 16-bit PGM (maxval 65535): " + path);
  // The single whitespace byte after maxval was already consumed by the
  // tokenizer; raster data starts here.
  Image img(h, w);
  std::string raw(static_cast<std::size_t>(w) * h * 2, '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError(IoError::Code::truncated, "truncated PGM raster: " + path);
  for (std::size_t i = 0; i < img.pix.size(); ++i) {
    const auto hi = static_cast<unsigned char>(raw[2 * i]);
    const auto lo = static_cast<unsigned char>(raw[2 * i + 1]);
    img.pix[i] = static_cast<double>((static_cast<unsigned>(hi) << 8) | lo);
  }
  return img;
}

}  // namespace dndt
