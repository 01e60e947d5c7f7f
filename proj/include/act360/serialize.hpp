#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "act360/tensor.hpp"

namespace act360 {

/// Binary tensor container, little-endian:
///   "ACTT" | version u32 | rank u32 | extents u64[rank] | dtype u8 | payload
/// dtype 0 is real32, 1 is int8.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

enum class DType : std::uint8_t { Real32 = 0, Int8 = 1 };

using AnyTensor = std::variant<Tensor, Int8Tensor>;

void write_tensor(std::ostream& os, const Tensor& t);
void write_tensor(std::ostream& os, const Int8Tensor& t);

AnyTensor read_any_tensor(std::istream& is);
/// Reads a real32 tensor; an int8 record is rejected.
Tensor read_tensor(std::istream& is);
Int8Tensor read_int8_tensor(std::istream& is);

/// Serialized byte count without writing anything.
std::size_t serialized_size(const Shape& shape, DType dtype);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace act360
