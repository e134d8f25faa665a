#pragma once

#include <cstdint>
#include <string>

#include "metaalign/nn.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

/// Binary container: 8-byte magic, u32 version, u64 parameter count, then per
/// parameter its name, rank, dims and raw little-endian IEEE-754 doubles.
void save(const std::string& path, const ParamStore& params);

/// Throws IoError naming the path when the file is missing, truncated or malformed.
ParamStore load(const std::string& path);

/// Replaces the model's parameters with the stored ones. The stored set must
/// match the model's names and shapes exactly.
void restore(nn::ModelBundle& model, const ParamStore& stored, const std::string& path);

}  // namespace metaalign::checkpoint
