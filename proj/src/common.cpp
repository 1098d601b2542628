#include "ieegclip/arr1.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <mutex>

namespace ieegclip {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_spec: return "invalid_spec";
    case ErrorKind::insufficient_data: return "insufficient_data";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::unknown_channel: return "unknown_channel";
    case ErrorKind::empty_dataset: return "empty_dataset";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::config: return "config";
    case ErrorKind::state: return "state";
  }
  return "unknown";
}

namespace {
std::mutex g_sink_mutex;
WarningSink g_sink;
}  // namespace

void set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_sink_mutex);
  g_sink = std::move(sink);
}

void warn(std::string_view message) {
  std::lock_guard lock(g_sink_mutex);
  if (g_sink) {
    g_sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

// ---------------------------------------------------------------------------
// arr1

std::filesystem::path arr1_sidecar_path(const std::filesystem::path& payload) {
  auto p = payload;
  p += ".json";
  return p;
}

void write_arr1(const std::filesystem::path& path, const Arr1& array) {
  std::size_t expected = 1;
  for (auto s : array.shape) expected *= s;
  if (array.shape.empty() || expected != array.data.size()) {
    throw Error(ErrorKind::shape_mismatch, "arr1: shape does not match payload size");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "arr1: cannot open " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(array.data.data()),
              static_cast<std::streamsize>(array.data.size() * sizeof(float)));
  } else {
    for (float v : array.data) {
      auto bits = __builtin_bswap32(std::bit_cast<std::uint32_t>(v));
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!out) throw Error(ErrorKind::io, "arr1: write failed for " + path.string());

  nlohmann::json meta = array.meta;
  meta["shape"] = array.shape;
  meta["dtype"] = "f32";
  std::ofstream side(arr1_sidecar_path(path));
  if (!side) throw Error(ErrorKind::io, "arr1: cannot write sidecar for " + path.string());
  side << meta.dump(2) << '\n';
}

nlohmann::json read_arr1_meta(const std::filesystem::path& path) {
  std::ifstream side(arr1_sidecar_path(path));
  if (!side) throw Error(ErrorKind::io, "arr1: missing sidecar for " + path.string());
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, "arr1: bad sidecar for " + path.string() + ": " + e.what());
  }
  if (meta.value("dtype", std::string{}) != "f32" || !meta.contains("shape")) {
    throw Error(ErrorKind::format, "arr1: sidecar must declare dtype f32 and shape");
  }
  return meta;
}

Arr1 read_arr1(const std::filesystem::path& path) {
  Arr1 array;
  array.meta = read_arr1_meta(path);
  array.shape = array.meta.at("shape").get<std::vector<std::size_t>>();
  std::size_t n = 1;
  for (auto s : array.shape) n *= s;

  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw Error(ErrorKind::io, "arr1: cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != n * sizeof(float)) {
    throw Error(ErrorKind::format, "arr1: payload size mismatch for " + path.string());
  }
  in.seekg(0);
  array.data.resize(n);
  in.read(reinterpret_cast<char*>(array.data.data()), static_cast<std::streamsize>(bytes));
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : array.data) v = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(v)));
  }
  return array;
}

}  // namespace ieegclip
