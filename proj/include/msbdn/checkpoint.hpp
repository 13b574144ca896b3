#pragma once

// MSBC checkpoint:
//   "MSBC", u32 version, u32-prefixed network config text,
//   u32 entry count, per entry { u32-prefixed name, MSBT tensor },
//   u8 flag; if 1: u64 step, u32 count, per entry { name, MSBT m, MSBT v }.
// All integers little-endian.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "msbdn/config.hpp"
#include "msbdn/network.hpp"
#include "msbdn/parameters.hpp"
#include "msbdn/tensor_io.hpp"

namespace msbdn {

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'S', 'B', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  NetworkConfig config;
  ParameterStore<T> params;
  /// Completed optimizer steps, present when ADAM state was stored.
  std::optional<std::uint64_t> step;
};

template <class T>
void write_checkpoint(std::ostream& os, const NetworkConfig& cfg, const ParameterStore<T>& params,
                      std::optional<std::uint64_t> step) {
  os.write(kCheckpointMagic.data(), 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_string(os, format_network_config(cfg));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    io::write_string(os, e.name);
    write_tensor(os, e.value);
  }
  io::write_u8(os, step ? 1 : 0);
  if (!step) return;
  io::write_le<std::uint64_t>(os, *step);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    io::write_string(os, e.name);
    write_tensor(os, e.adam_m);
    write_tensor(os, e.adam_v);
  }
}

/// Writes to a temporary file first so an interrupted save never clobbers the
/// previous checkpoint.
template <class T>
void save_checkpoint(const std::string& path, const NetworkConfig& cfg, const ParameterStore<T>& params,
                     std::optional<std::uint64_t> step = std::nullopt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot open " + tmp + " for writing");
    write_checkpoint(os, cfg, params, step);
    os.flush();
    if (!os) throw DataError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

template <class T>
Checkpoint<T> read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  io::read_exact(is, magic.data(), 4, "checkpoint magic");
  if (magic != kCheckpointMagic) throw DataError("bad checkpoint magic (expected MSBC)");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint<T> ck;
  try {
    ck.config = parse_network_config(io::read_string(is));
    ck.config.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  ck.params = make_parameters<T>(ck.config);
  const auto count = io::read_le<std::uint32_t>(is);
  if (count != ck.params.size())
    throw DataError("checkpoint has " + std::to_string(count) + " entries, config expects " +
                    std::to_string(ck.params.size()));
  auto read_into = [&](const std::string& name, Tensor<T>& dst) {
    Tensor<T> t = read_tensor<T>(is);
    if (t.shape() != dst.shape())
      throw DataError("checkpoint entry " + name + " has shape " + to_string(t.shape()) + ", expected " +
                      to_string(dst.shape()));
    dst = std::move(t);
  };
  for (auto& e : ck.params) {
    const auto name = io::read_string(is);
    if (name != e.name) throw DataError("checkpoint entry '" + name + "' where '" + e.name + "' was expected");
    read_into(name, e.value);
  }
  const auto flag = io::read_u8(is);
  if (flag > 1) throw DataError("bad optimizer-state flag " + std::to_string(flag));
  if (flag == 1) {
    ck.step = io::read_le<std::uint64_t>(is);
    if (io::read_le<std::uint32_t>(is) != ck.params.size()) throw DataError("optimizer state entry count mismatch");
    for (auto& e : ck.params) {
      const auto name = io::read_string(is);
      if (name != e.name) throw DataError("optimizer state entry '" + name + "' where '" + e.name + "' was expected");
      read_into(name, e.adam_m);
      read_into(name, e.adam_v);
    }
  }
  return ck;
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  try {
    return read_checkpoint<T>(is);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace msbdn
