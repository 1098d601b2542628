#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include <json.hpp>

namespace ieegclip {

// "arr1" array file: a raw little-endian f32 payload at `path` plus a JSON
// sidecar at `path + ".json"` holding {shape, sample_rate_hz, t0,
// channel_ids, dtype: "f32"} and any extra keys the producer adds.
struct Arr1 {
  std::vector<std::size_t> shape;  // row-major; 2-D in practice
  std::vector<float> data;
  nlohmann::json meta = nlohmann::json::object();

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

std::filesystem::path arr1_sidecar_path(const std::filesystem::path& payload);

void write_arr1(const std::filesystem::path& path, const Arr1& array);
Arr1 read_arr1(const std::filesystem::path& path);
nlohmann::json read_arr1_meta(const std::filesystem::path& path);

}  // namespace ieegclip
