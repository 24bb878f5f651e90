#include "dana/detector/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dana::detector {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw CheckpointError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(kCheckpointMagic, 8);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, ckpt.config_hash);
    put<std::uint64_t>(os, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put<std::uint64_t>(os, d);
      for (double v : t.data()) put<double>(os, v);
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_hash = get<std::uint64_t>(is);
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    if (len > 4096) throw CheckpointError("corrupt tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint truncated");
    const auto rank = get<std::uint32_t>(is);
    if (rank > 8) throw CheckpointError("corrupt rank for " + name);
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(is);
      if (d == 0 || d > (std::size_t{1} << 32)) throw CheckpointError("corrupt dims for " + name);
      n *= d;
    }
    std::vector<double> values(n);
    for (auto& v : values) v = get<double>(is);
    ckpt.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

std::vector<std::uint8_t> attention_image(const Tensor& attention, std::size_t position, std::size_t h,
                                          std::size_t w) {
  if (attention.rank() != 2 || attention.dim(1) != h * w) {
    throw ShapeError("attention_image: expected M x " + std::to_string(h * w) + ", got " +
                     shape_str(attention.shape()));
  }
  if (position >= attention.dim(0)) {
    throw std::out_of_range("query position " + std::to_string(position) + " out of range");
  }
  const auto row = attention.data().subspan(position * h * w, h * w);
  const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  std::vector<std::uint8_t> out(h * w, 128);
  const double span = *hi - *lo;
  if (!(span > 0)) return out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (row[i] - *lo) / span));
  }
  return out;
}

}  // namespace dana::detector
