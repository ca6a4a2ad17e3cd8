#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "hsf/cube.hpp"

namespace hsf {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw IOError("truncated HSC header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_hsc(const std::filesystem::path& path, const HsiCube& cube) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot open " + path.string() + " for writing");
  os.write("HSC1", 4);
  put_u32(os, static_cast<std::uint32_t>(cube.width()));
  put_u32(os, static_cast<std::uint32_t>(cube.height()));
  put_u32(os, static_cast<std::uint32_t>(cube.bands()));
  for (Eigen::Index i = 0; i < cube.size(); ++i)
    put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(cube.data()[i])));
  if (!os) throw IOError("write failed for " + path.string());
}

HsiCube read_hsc(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IOError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "HSC1", 4) != 0)
    throw IOError(path.string() + " is not an HSC1 file");
  const auto w = get_u32(is), h = get_u32(is), s = get_u32(is);
  if (w == 0 || h == 0 || s == 0) throw IOError(path.string() + ": zero extent in header");
  HsiCube cube(w, h, s);
  for (Eigen::Index i = 0; i < cube.size(); ++i)
    cube.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(is)));
  return cube;
}

void write_band_pgm(const std::filesystem::path& path, const HsiCube& cube, Eigen::Index band) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot open " + path.string() + " for writing");
  os << "P5\n" << cube.width() << ' ' << cube.height() << "\n255\n";
  const auto b = cube.band(band);
  for (Eigen::Index r = 0; r < cube.height(); ++r)
    for (Eigen::Index c = 0; c < cube.width(); ++c) {
      const double v = std::clamp(b(r, c), 0.0, 1.0);
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

}  // namespace hsf
