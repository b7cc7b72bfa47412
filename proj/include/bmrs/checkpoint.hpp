#pragma once

#include <filesystem>
#include <iosfwd>

#include "bmrs/network.hpp"

namespace bmrs {

// Binary layout (little endian):
//   "BMRS" | u32 version | u32 layer count | u32 rank, u32 dims... (input shape)
//   per layer: u32 tag, then
//     dense:   tensor weight, tensor bias
//     conv2d:  u32 stride, u32 padding, tensor weight, tensor bias
//     maxpool: u32 size
//     gate:    f64 log_lo, f64 log_hi, u32 n, f64[n] mu, f64[n] log_sigma,
//              u64[n] ids, alive bitset (ceil(n/8) bytes, bit i of byte i/8)
//   tensor = u32 rank, u32 dims..., f64 payload
// Adam moments are not stored.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Network& net, std::ostream& out);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(std::istream& in);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace bmrs
