#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "afa/tensor.hpp"

namespace afa {

// AFAT layout, little-endian:
//   bytes 0-3   magic "AFAT"
//   u16         version (= 1)
//   u16         rank (1..4)
//   u32 x rank  extents
//   f32 x prod  payload, row-major
inline constexpr std::uint16_t kTensorFileVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Throws FormatError naming the byte offset of the first problem.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor_file(const std::filesystem::path& path);

/// Rounds every value to the nearest float, i.e. what a save/load cycle yields.
void round_to_f32(Tensor& t);

}  // namespace afa
