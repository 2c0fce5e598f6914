#pragma once

// VOL1 container: 4 magic bytes "VOL1", one JSON header line ending in '\n'
// with keys {"dims","spacing","dtype","order"}, then the raw little-endian
// payload. Volumes and probability maps use f32le, masks use u8.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exseg/errors.hpp"
#include "exseg/volume.hpp"

namespace exseg {

static_assert(std::endian::native == std::endian::little,
              "VOL1 payloads are written by memcpy and assume a little-endian host");

inline std::string slurp_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::Io, "cannot open for reading: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), Err::Io, "read failed: " + path);
  return bytes;
}

inline void spit_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Err::Io, "cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  require(out.good(), Err::Io, "write failed: " + path);
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

inline std::string vol1_bytes(const Dims3& dims, const Spacing3& spacing,
                              const char* dtype, const void* payload,
                              std::size_t payload_bytes) {
  nlohmann::ordered_json h;
  h["dims"] = {dims.nx, dims.ny, dims.nz};
  h["spacing"] = {spacing.sx, spacing.sy, spacing.sz};
  h["dtype"] = dtype;
  h["order"] = "x-fastest";
  std::string out = "VOL1" + h.dump() + "\n";
  const std::size_t head = out.size();
  out.resize(head + payload_bytes);
  std::memcpy(out.data() + head, payload, payload_bytes);
  return out;
}

struct Vol1Raw {
  Dims3 dims;
  Spacing3 spacing;
  std::string dtype;
  const char* payload = nullptr;  // points into the backing string
  std::size_t payload_bytes = 0;
  std::string backing;
};

inline Vol1Raw parse_vol1(const std::string& path, const std::string& expected_dtype) {
  Vol1Raw r;
  r.backing = slurp_file(path);
  const std::string& b = r.backing;
  require(b.size() >= 4 && b.compare(0, 4, "VOL1") == 0, Err::BadMagic,
          "not a VOL1 file: " + path);
  const std::size_t nl = b.find('\n', 4);
  require(nl != std::string::npos, Err::HeaderMismatch, "missing header terminator: " + path);
  nlohmann::json h = nlohmann::json::parse(b.begin() + 4, b.begin() + nl, nullptr,
                                           /*allow_exceptions=*/false);
  require(!h.is_discarded() && h.is_object(), Err::HeaderMismatch,
          "malformed header JSON: " + path);
  require(h.contains("dims") && h.contains("spacing") && h.contains("dtype") &&
              h.contains("order"),
          Err::HeaderMismatch, "header missing required keys: " + path);
  require(h["order"] == "x-fastest", Err::HeaderMismatch, "unsupported linear order: " + path);
  r.dtype = h["dtype"].get<std::string>();
  require(r.dtype == expected_dtype, Err::HeaderMismatch,
          "dtype is " + r.dtype + ", expected " + expected_dtype + ": " + path);
  const auto& jd = h["dims"];
  require(jd.is_array() && jd.size() == 3, Err::HeaderMismatch, "bad dims: " + path);
  r.dims = {jd[0].get<int>(), jd[1].get<int>(), jd[2].get<int>()};
  require(r.dims.nx > 0 && r.dims.ny > 0 && r.dims.nz > 0, Err::HeaderMismatch,
          "non-positive dims: " + path);
  const auto& js = h["spacing"];
  require(js.is_array() && js.size() == 3, Err::HeaderMismatch, "bad spacing: " + path);
  r.spacing = {js[0].get<double>(), js[1].get<double>(), js[2].get<double>()};
  require(r.spacing.sx > 0 && r.spacing.sy > 0 && r.spacing.sz > 0, Err::HeaderMismatch,
          "non-positive spacing: " + path);
  r.payload = b.data() + nl + 1;
  r.payload_bytes = b.size() - nl - 1;
  const std::size_t elem = (r.dtype == "u8") ? 1 : 4;
  require(r.payload_bytes == r.dims.count() * elem, Err::HeaderMismatch,
          "declared count does not match payload size: " + path);
  return r;
}

}  // namespace detail

inline void write_volume(const Volume3D& v, const std::string& path) {
  spit_file(path, detail::vol1_bytes(v.dims, v.spacing, "f32le", v.data.data(),
                                     v.data.size() * sizeof(float)));
}

inline Volume3D read_volume(const std::string& path) {
  auto r = detail::parse_vol1(path, "f32le");
  Volume3D v{r.dims, r.spacing, std::vector<float>(r.dims.count())};
  std::memcpy(v.data.data(), r.payload, r.payload_bytes);
  return v;
}

// Masks and probability maps carry no physical spacing of their own; the
// header records the unit spacing placeholder (1,1,1).
inline void write_trinary(const TrinaryMask& m, const std::string& path) {
  spit_file(path, detail::vol1_bytes(m.dims, Spacing3{}, "u8", m.labels.data(),
                                     m.labels.size()));
}

inline TrinaryMask read_trinary(const std::string& path) {
  auto r = detail::parse_vol1(path, "u8");
  TrinaryMask m{r.dims, std::vector<std::uint8_t>(r.dims.count())};
  std::memcpy(m.labels.data(), r.payload, r.payload_bytes);
  for (std::uint8_t v : m.labels) {
    require(v <= 2, Err::HeaderMismatch, "trinary label outside {0,1,2}: " + path);
  }
  return m;
}

inline void write_binary(const BinaryMask& m, const std::string& path) {
  spit_file(path, detail::vol1_bytes(m.dims, Spacing3{}, "u8", m.labels.data(),
                                     m.labels.size()));
}

inline BinaryMask read_binary(const std::string& path) {
  auto r = detail::parse_vol1(path, "u8");
  BinaryMask m{r.dims, std::vector<std::uint8_t>(r.dims.count())};
  std::memcpy(m.labels.data(), r.payload, r.payload_bytes);
  for (std::uint8_t v : m.labels) {
    require(v <= 1, Err::HeaderMismatch, "binary label outside {0,1}: " + path);
  }
  return m;
}

inline void write_probmap(const ProbMap& p, const std::string& path) {
  spit_file(path, detail::vol1_bytes(p.dims, Spacing3{}, "f32le", p.probs.data(),
                                     p.probs.size() * sizeof(float)));
}

inline ProbMap read_probmap(const std::string& path) {
  auto r = detail::parse_vol1(path, "f32le");
  ProbMap p{r.dims, std::vector<float>(r.dims.count())};
  std::memcpy(p.probs.data(), r.payload, r.payload_bytes);
  return p;
}

inline void write_extremes(const ExtremePoints& e, const std::string& path) {
  nlohmann::ordered_json j;
  j["xmin"] = {e.x_min.x, e.x_min.y, e.x_min.z};
  j["xmax"] = {e.x_max.x, e.x_max.y, e.x_max.z};
  j["ymin"] = {e.y_min.x, e.y_min.y, e.y_min.z};
  j["ymax"] = {e.y_max.x, e.y_max.y, e.y_max.z};
  j["zmin"] = {e.z_min.x, e.z_min.y, e.z_min.z};
  j["zmax"] = {e.z_max.x, e.z_max.y, e.z_max.z};
  spit_file(path, j.dump(2) + "\n");
}

inline ExtremePoints read_extremes(const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(slurp_file(path), nullptr, false);
  require(!j.is_discarded() && j.is_object(), Err::HeaderMismatch,
          "malformed extreme-point JSON: " + path);
  const auto pt = [&](const char* key) {
    require(j.contains(key) && j[key].is_array() && j[key].size() == 3, Err::HeaderMismatch,
            std::string("missing/bad key ") + key + ": " + path);
    return Voxel{j[key][0].get<int>(), j[key][1].get<int>(), j[key][2].get<int>()};
  };
  return ExtremePoints{pt("xmin"), pt("xmax"), pt("ymin"),
                       pt("ymax"), pt("zmin"), pt("zmax")};
}

}  // namespace exseg
