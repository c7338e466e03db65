#pragma once

#include <filesystem>
#include <string>

#include "mclaro/array.hpp"

#include "json.hpp"

namespace mclaro::io {

using json = nlohmann::ordered_json;

// Raw little-endian array files with a JSON sidecar at <path>.json.
// dtype strings: "float32", "complex64" (re/im interleaved), "uint8",
// "int32", "float64".

void save_f32(const std::filesystem::path& path, const RGrid& a, json sidecar);
void save_c64(const std::filesystem::path& path, const CGrid& a, json sidecar);
void save_u8(const std::filesystem::path& path, const MaskGrid& a, json sidecar);
void save_i32(const std::filesystem::path& path, const LabelGrid& a, json sidecar);
void save_f64(const std::filesystem::path& path, const RGrid& a, json sidecar);

RGrid load_f32(const std::filesystem::path& path);
CGrid load_c64(const std::filesystem::path& path);
MaskGrid load_u8(const std::filesystem::path& path);
LabelGrid load_i32(const std::filesystem::path& path);
RGrid load_f64(const std::filesystem::path& path);

json load_sidecar(const std::filesystem::path& path);  // of the array at `path`
void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

// FNV-1a over the canonical dump; used to key stage artifacts to the
// config sections that produced them.
std::string config_hash(const json& j);

}  // namespace mclaro::io
