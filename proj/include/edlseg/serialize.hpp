#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edlseg/tensor.hpp"

namespace edlseg {

// Flat binary tensor container: magic "EDTN", u32 dtype (1 = f64, 2 = i32),
// u32 ndim, u64 dims, then the little-endian payload.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

void save_i32(const std::string& path, const std::vector<std::int32_t>& data,
              const std::vector<std::size_t>& dims);
std::pair<std::vector<std::int32_t>, std::vector<std::size_t>> load_i32(
    const std::string& path);

}  // namespace edlseg
