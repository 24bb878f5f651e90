#include "dana/util/pnm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace dana::util {

namespace {

void write_header(std::ofstream& out, const char* magic, std::size_t h, std::size_t w) {
  out << magic << '\n' << w << ' ' << h << "\n255\n";
}

std::ifstream read_header(const std::filesystem::path& path, const std::string& magic, std::size_t& h,
                          std::size_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string m;
  int maxval = 0;
  in >> m >> w >> h >> maxval;
  if (m != magic || maxval != 255 || !in) throw std::runtime_error(path.string() + ": not a " + magic + " file");
  in.get();
  return in;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<double>& rgb) {
  if (rgb.size() != height * width * 3) throw std::invalid_argument("write_ppm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_header(out, "P6", height, width);
  std::vector<char> bytes(rgb.size());
  std::transform(rgb.begin(), rgb.end(), bytes.begin(), [](double v) {
    return static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> read_ppm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  auto in = read_header(path, "P6", height, width);
  std::vector<char> bytes(height * width * 3);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated payload");
  std::vector<double> rgb(bytes.size());
  std::transform(bytes.begin(), bytes.end(), rgb.begin(),
                 [](char b) { return static_cast<std::uint8_t>(b) / 255.0; });
  return rgb;
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != height * width) throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_header(out, "P5", height, width);
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height,
                                   std::size_t& width) {
  auto in = read_header(path, "P5", height, width);
  std::vector<std::uint8_t> gray(height * width);
  in.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated payload");
  return gray;
}

}  // namespace dana::util
