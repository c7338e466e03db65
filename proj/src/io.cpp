#include "mclaro/io.hpp"

#include <cstring>
#include <fstream>

namespace mclaro::io {
namespace {

void write_bytes(const std::filesystem::path& path, const void* data,
                 size_t n) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f.write(reinterpret_cast<const char*>(data), (std::streamsize)n);
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open for read: " + path.string());
  const auto n = f.tellg();
  f.seekg(0);
  std::vector<char> buf((size_t)n);
  f.read(buf.data(), n);
  if (!f) throw std::runtime_error("read failed: " + path.string());
  return buf;
}

json sidecar_common(const std::string& dtype, const std::vector<int>& shape,
                    json extra) {
  json j;
  j["dims"] = shape;
  j["dtype"] = dtype;
  for (auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

void write_sidecar(const std::filesystem::path& path, const json& j) {
  write_json(path.string() + ".json", j);
}

std::vector<int> sidecar_dims(const std::filesystem::path& path,
                              const std::string& want_dtype) {
  json j = load_sidecar(path);
  if (j.at("dtype").get<std::string>() != want_dtype) {
    throw std::runtime_error("dtype mismatch in " + path.string() + ".json");
  }
  return j.at("dims").get<std::vector<int>>();
}

}  // namespace

void save_f32(const std::filesystem::path& path, const RGrid& a, json sc) {
  std::vector<float> buf(a.numel());
  for (std::int64_t i = 0; i < a.numel(); ++i) buf[i] = (float)a[i];
  write_bytes(path, buf.data(), buf.size() * sizeof(float));
  write_sidecar(path, sidecar_common("float32", a.shape(), std::move(sc)));
}

void save_c64(const std::filesystem::path& path, const CGrid& a, json sc) {
  std::vector<float> buf(2 * a.numel());
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    buf[2 * i] = (float)a[i].real();
    buf[2 * i + 1] = (float)a[i].imag();
  }
  write_bytes(path, buf.data(), buf.size() * sizeof(float));
  write_sidecar(path, sidecar_common("complex64", a.shape(), std::move(sc)));
}

void save_u8(const std::filesystem::path& path, const MaskGrid& a, json sc) {
  write_bytes(path, a.data(), (size_t)a.numel());
  write_sidecar(path, sidecar_common("uint8", a.shape(), std::move(sc)));
}

void save_i32(const std::filesystem::path& path, const LabelGrid& a, json sc) {
  write_bytes(path, a.data(), (size_t)a.numel() * sizeof(std::int32_t));
  write_sidecar(path, sidecar_common("int32", a.shape(), std::move(sc)));
}

void save_f64(const std::filesystem::path& path, const RGrid& a, json sc) {
  write_bytes(path, a.data(), (size_t)a.numel() * sizeof(double));
  write_sidecar(path, sidecar_common("float64", a.shape(), std::move(sc)));
}

RGrid load_f32(const std::filesystem::path& path) {
  RGrid a(sidecar_dims(path, "float32"));
  auto buf = read_bytes(path);
  if ((std::int64_t)buf.size() != a.numel() * 4)
    throw std::runtime_error("size mismatch: " + path.string());
  const float* p = reinterpret_cast<const float*>(buf.data());
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = p[i];
  return a;
}

CGrid load_c64(const std::filesystem::path& path) {
  CGrid a(sidecar_dims(path, "complex64"));
  auto buf = read_bytes(path);
  if ((std::int64_t)buf.size() != a.numel() * 8)
    throw std::runtime_error("size mismatch: " + path.string());
  const float* p = reinterpret_cast<const float*>(buf.data());
  for (std::int64_t i = 0; i < a.numel(); ++i)
    a[i] = Cplx(p[2 * i], p[2 * i + 1]);
  return a;
}

MaskGrid load_u8(const std::filesystem::path& path) {
  MaskGrid a(sidecar_dims(path, "uint8"));
  auto buf = read_bytes(path);
  if ((std::int64_t)buf.size() != a.numel())
    throw std::runtime_error("size mismatch: " + path.string());
  std::memcpy(a.data(), buf.data(), buf.size());
  return a;
}

LabelGrid load_i32(const std::filesystem::path& path) {
  LabelGrid a(sidecar_dims(path, "int32"));
  auto buf = read_bytes(path);
  if ((std::int64_t)buf.size() != a.numel() * 4)
    throw std::runtime_error("size mismatch: " + path.string());
  std::memcpy(a.data(), buf.data(), buf.size());
  return a;
}

RGrid load_f64(const std::filesystem::path& path) {
  RGrid a(sidecar_dims(path, "float64"));
  auto buf = read_bytes(path);
  if ((std::int64_t)buf.size() != a.numel() * 8)
    throw std::runtime_error("size mismatch: " + path.string());
  std::memcpy(a.data(), buf.data(), buf.size());
  return a;
}

json load_sidecar(const std::filesystem::path& path) {
  return read_json(path.string() + ".json");
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f << j.dump(2) << "\n";
}

json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for read: " + path.string());
  return json::parse(f);
}

std::string config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return std::string(buf);
}

}  // namespace mclaro::io
