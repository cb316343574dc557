#include "fmfl/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fmfl {
namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_unsigned_v<T>);
  std::array<char, sizeof(T)> buf;
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf.data(), buf.size());
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size()))
    throw Error("checkpoint: truncated file");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& os, const ArchSpec& arch, const ParamSet& params) {
  if (!matches(params, arch)) throw DimensionError("checkpoint: parameters do not match arch");
  os.write("FMFL", 4);
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, arch.mode == InputMode::vector ? 0 : 1);
  put_le<std::uint32_t>(os, arch.input_dim);
  put_le<std::uint32_t>(os, arch.vocab_size);
  put_le<std::uint32_t>(os, arch.num_classes);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(arch.hidden_sizes.size()));
  for (int h : arch.hidden_sizes) put_le<std::uint32_t>(os, h);
  put_le<std::uint32_t>(os, arch.extra_pairs);
  put_le<std::uint32_t>(os, arch.extra_width);
  const Vec flat = flatten(params);
  put_le<std::uint64_t>(os, static_cast<std::uint64_t>(flat.size()));
  for (double x : flat) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(x));
  if (!os) throw Error("checkpoint: write failed");
}

std::pair<ArchSpec, ParamSet> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FMFL", 4) != 0)
    throw Error("checkpoint: bad magic");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  ArchSpec arch;
  const auto mode = get_le<std::uint32_t>(is);
  if (mode > 1) throw Error("checkpoint: bad input mode");
  arch.mode = mode == 0 ? InputMode::vector : InputMode::token;
  arch.input_dim = static_cast<int>(get_le<std::uint32_t>(is));
  arch.vocab_size = static_cast<int>(get_le<std::uint32_t>(is));
  arch.num_classes = static_cast<int>(get_le<std::uint32_t>(is));
  const auto n_hidden = get_le<std::uint32_t>(is);
  if (n_hidden > 1024) throw Error("checkpoint: implausible hidden layer count");
  for (std::uint32_t i = 0; i < n_hidden; ++i)
    arch.hidden_sizes.push_back(static_cast<int>(get_le<std::uint32_t>(is)));
  arch.extra_pairs = static_cast<int>(get_le<std::uint32_t>(is));
  arch.extra_width = static_cast<int>(get_le<std::uint32_t>(is));
  arch.validate();
  const auto count = get_le<std::uint64_t>(is);
  if (count != static_cast<std::uint64_t>(param_count(arch)))
    throw Error("checkpoint: parameter count does not match architecture");
  Vec flat(static_cast<Index>(count));
  for (auto& x : flat) x = std::bit_cast<double>(get_le<std::uint64_t>(is));
  if (!flat.allFinite()) throw NonFiniteError("checkpoint: non-finite parameter");
  return {arch, unflatten<double>(arch, flat)};
}

void save_checkpoint(const std::string& path, const ArchSpec& arch, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open " + path);
  write_checkpoint(os, arch, params);
}

std::pair<ArchSpec, ParamSet> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace fmfl
