#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dana::util {

/// Binary P6 with 8-bit channels. `rgb` holds h*w*3 values in [0, 1],
/// quantized with round-to-nearest.
void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<double>& rgb);
/// Reads a binary P6 (maxval 255) back into [0, 1] reals.
std::vector<double> read_ppm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

/// Binary P5 from 8-bit gray levels.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height,
                                   std::size_t& width);

}  // namespace dana::util
