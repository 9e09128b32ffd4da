#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pshop/error.hpp"
#include "pshop/volume.hpp"

namespace pshop {

namespace fs = std::filesystem;

/// One study: an image with optional reference labels.
struct Case {
  std::string id;
  Volume4D image;
  std::optional<LabelVolume> mask;
  std::string source;
};

// ---------------------------------------------------------------------------
// NIfTI-1 (single file, optionally gzip-compressed)
// ---------------------------------------------------------------------------

namespace nifti {

enum Datatype : std::int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
  uint16 = 512,
};

constexpr int kHeaderSize = 348;

namespace detail {

template <typename T>
T load(const std::uint8_t* p, bool swap) {
  std::array<std::uint8_t, sizeof(T)> b;
  std::memcpy(b.data(), p, sizeof(T));
  if (swap) std::reverse(b.begin(), b.end());
  T v;
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

template <typename T>
void store(std::uint8_t* p, T v) {
  std::array<std::uint8_t, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  std::memcpy(p, b.data(), sizeof(T));
}

inline std::vector<std::uint8_t> read_all(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw Error(ErrorCode::io, "cannot open " + path);
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf;
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw Error(ErrorCode::io, "read error in " + path);
  return out;
}

inline bool gz_path(const std::string& path) { return path.size() > 3 && path.ends_with(".gz"); }

inline void write_all(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  if (gz_path(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw Error(ErrorCode::io, "cannot create " + path);
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw Error(ErrorCode::io, "write error in " + path);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write error in " + path);
}

}  // namespace detail

/// Reads a 3-D `n+1` file. The NIfTI i/j/k axes map to W/H/C; scl_slope and
/// scl_inter are applied when the slope is non-zero.
inline Volume4D read(const std::string& path) {
  const auto bytes = detail::read_all(path);
  if (bytes.size() < kHeaderSize) throw Error(ErrorCode::format, path + " is too short for a NIfTI header");
  const std::uint8_t* h = bytes.data();
  bool swap = false;
  if (detail::load<std::int32_t>(h, false) != kHeaderSize) {
    swap = true;
    if (detail::load<std::int32_t>(h, true) != kHeaderSize) throw Error(ErrorCode::format, path + " is not NIfTI-1");
  }
  if (std::memcmp(h + 344, "n+1", 4) != 0)
    throw Error(ErrorCode::format, path + ": only single-file NIfTI-1 (magic n+1) is supported");
  std::array<std::int16_t, 8> dim{};
  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) {
    dim[i] = detail::load<std::int16_t>(h + 40 + 2 * i, swap);
    pixdim[i] = detail::load<float>(h + 76 + 4 * i, swap);
  }
  const auto datatype = detail::load<std::int16_t>(h + 70, swap);
  const auto vox_offset = static_cast<std::size_t>(detail::load<float>(h + 108, swap));
  const float slope = detail::load<float>(h + 112, swap);
  const float inter = detail::load<float>(h + 116, swap);
  if (dim[0] < 1 || dim[0] > 7) throw Error(ErrorCode::format, path + ": bad dim[0]");
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw Error(ErrorCode::format, path + ": only 3-D volumes are supported");
  const int nx = dim[1], ny = dim[0] >= 2 ? dim[2] : 1, nz = dim[0] >= 3 ? dim[3] : 1;
  if (nx < 1 || ny < 1 || nz < 1) throw Error(ErrorCode::format, path + ": non-positive dimension");

  std::size_t bpv = 0;
  switch (datatype) {
    case uint8: bpv = 1; break;
    case int16: case uint16: bpv = 2; break;
    case int32: case float32: bpv = 4; break;
    case float64: bpv = 8; break;
    default: throw Error(ErrorCode::format, path + ": unsupported datatype " + std::to_string(datatype));
  }
  const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
  if (bytes.size() < vox_offset + n * bpv) throw Error(ErrorCode::format, path + ": truncated voxel data");

  Volume4D v(Dims{ny, nx, nz}, 1);
  auto spacing_of = [](float p) { return p > 0.0f ? static_cast<double>(p) : 1.0; };
  v.spacing = Spacing{spacing_of(pixdim[2]), spacing_of(pixdim[1]), spacing_of(pixdim[3])};
  const std::uint8_t* src = bytes.data() + vox_offset;
  const bool scale = slope != 0.0f && std::isfinite(slope);
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const std::size_t q = (static_cast<std::size_t>(k) * ny + j) * nx + i;
        const std::uint8_t* p = src + q * bpv;
        double x = 0.0;
        switch (datatype) {
          case uint8: x = *p; break;
          case int16: x = detail::load<std::int16_t>(p, swap); break;
          case uint16: x = detail::load<std::uint16_t>(p, swap); break;
          case int32: x = detail::load<std::int32_t>(p, swap); break;
          case float32: x = detail::load<float>(p, swap); break;
          case float64: x = detail::load<double>(p, swap); break;
        }
        if (scale) x = x * slope + inter;
        if (!std::isfinite(x)) x = 0.0;
        v.at(j, i, k) = static_cast<float>(x);
      }
  return v;
}

/// Writes a 3-D volume (channel 0) as float32 NIfTI-1; `.gz` paths are compressed.
template <typename T>
void write(const std::string& path, const Grid<T>& v) {
  const Dims d = v.dims();
  const bool labels = std::is_same_v<T, std::uint8_t>;
  const std::size_t bpv = labels ? 1 : 4;
  std::vector<std::uint8_t> out(352 + d.voxels() * bpv, 0);
  std::uint8_t* h = out.data();
  detail::store<std::int32_t>(h, kHeaderSize);
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(d.w), static_cast<std::int16_t>(d.h),
                                static_cast<std::int16_t>(d.c), 1, 1, 1, 1};
  const Spacing sp = v.spacing.value_or(Spacing{});
  const float pix[8] = {1.0f, static_cast<float>(sp.dx), static_cast<float>(sp.dy), static_cast<float>(sp.dz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) {
    detail::store<std::int16_t>(h + 40 + 2 * i, dims[i]);
    detail::store<float>(h + 76 + 4 * i, pix[i]);
  }
  detail::store<std::int16_t>(h + 70, labels ? uint8 : float32);
  detail::store<std::int16_t>(h + 72, static_cast<std::int16_t>(bpv * 8));
  detail::store<float>(h + 108, 352.0f);
  detail::store<float>(h + 112, 1.0f);
  detail::store<std::int16_t>(h + 252, 0);  // qform_code
  detail::store<std::int16_t>(h + 254, 0);  // sform_code
  std::memcpy(h + 344, "n+1", 4);
  std::uint8_t* dst = out.data() + 352;
  for (int k = 0; k < d.c; ++k)
    for (int j = 0; j < d.h; ++j)
      for (int i = 0; i < d.w; ++i, dst += bpv) {
        if constexpr (std::is_same_v<T, std::uint8_t>) *dst = v.at(j, i, k);
        else detail::store<float>(dst, static_cast<float>(v.at(j, i, k)));
      }
  detail::write_all(path, out);
}

}  // namespace nifti

// ---------------------------------------------------------------------------
// Raw float32 + JSON sidecar
// ---------------------------------------------------------------------------

namespace raw {

inline std::string sidecar_path(const std::string& path) { return fs::path(path).replace_extension(".json").string(); }

/// Little-endian float32 voxels in H, W, C (channel-last) order; the sidecar
/// holds {"shape": [H, W, C], "spacing": [dy, dx, dz], "channels": K}.
inline Volume4D read(const std::string& path) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw Error(ErrorCode::io, "missing sidecar " + sidecar_path(path));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, sidecar_path(path) + ": " + e.what());
  }
  if (!meta.contains("shape")) throw Error(ErrorCode::format, sidecar_path(path) + ": missing shape");
  const auto& s = meta.at("shape");
  const Dims d{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  const int k = meta.value("channels", 1);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t n = d.voxels() * static_cast<std::size_t>(k);
  if (bytes.size() != n * 4)
    throw Error(ErrorCode::format, path + ": expected " + std::to_string(n * 4) + " bytes, found " + std::to_string(bytes.size()));
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = nifti::detail::load<float>(bytes.data() + 4 * i, std::endian::native == std::endian::big);
  Volume4D v(d, k, std::move(data));
  if (meta.contains("spacing")) {
    const auto& sp = meta.at("spacing");
    v.spacing = Spacing{sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
  }
  return v;
}

template <typename T>
void write(const std::string& path, const Grid<T>& v) {
  std::vector<std::uint8_t> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) nifti::detail::store<float>(bytes.data() + 4 * i, static_cast<float>(v.data()[i]));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  nlohmann::json meta = {{"shape", {v.dims().h, v.dims().w, v.dims().c}}, {"channels", v.channels()}};
  if (v.spacing) meta["spacing"] = {v.spacing->dy, v.spacing->dx, v.spacing->dz};
  std::ofstream js(sidecar_path(path));
  js << meta.dump(2) << '\n';
  if (!out || !js) throw Error(ErrorCode::io, "write error in " + path);
}

}  // namespace raw

// ---------------------------------------------------------------------------
// Dataset ingestion
// ---------------------------------------------------------------------------

enum class FileFormat { nifti, raw };

/// Splits "dir/case01_mask.nii.gz" into stem "case01_mask" and its format.
inline std::optional<std::pair<std::string, FileFormat>> classify(const fs::path& p) {
  const std::string name = p.filename().string();
  for (const auto& [ext, fmt] : {std::pair<std::string, FileFormat>{".nii.gz", FileFormat::nifti},
                                 {".nii", FileFormat::nifti},
                                 {".raw", FileFormat::raw}})
    if (name.size() > ext.size() && name.ends_with(ext)) return std::make_pair(name.substr(0, name.size() - ext.size()), fmt);
  return std::nullopt;
}

inline Volume4D read_volume(const std::string& path) {
  const auto kind = classify(path);
  if (!kind) throw Error(ErrorCode::format, "unknown extension: " + path);
  return kind->second == FileFormat::nifti ? nifti::read(path) : raw::read(path);
}

/// Rounds a volume to integer labels in [0, 255].
inline LabelVolume to_labels(const Volume4D& v) {
  LabelVolume out(v.dims(), 1);
  out.spacing = v.spacing;
  for (std::size_t i = 0; i < v.voxels(); ++i) {
    const long x = std::lround(v.data()[i * v.channels()]);
    if (x < 0 || x > 255) throw Error(ErrorCode::format, "label value " + std::to_string(x) + " out of range");
    out.data()[i] = static_cast<std::uint8_t>(x);
  }
  return out;
}

inline Volume4D to_volume(const LabelVolume& m) {
  Volume4D out(m.dims(), 1, std::vector<float>(m.data().begin(), m.data().end()));
  out.spacing = m.spacing;
  return out;
}

struct IngestResult {
  std::vector<Case> cases;
  std::vector<std::string> errors;  // one diagnostic per rejected file or case
};

/// Reads every image in `path` (a directory or a single image file) and
/// pairs it with a `<stem>_mask` file when one exists.
inline IngestResult ingest(const std::string& path) {
  IngestResult result;
  if (!fs::exists(path)) throw Error(ErrorCode::io, "no such path: " + path);
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
  } else {
    files.push_back(path);
  }
  std::sort(files.begin(), files.end());

  std::map<std::string, fs::path> images, masks;
  for (const auto& f : files) {
    const auto kind = classify(f);
    if (!kind) {
      if (f.extension() != ".json") result.errors.push_back(f.string() + ": unknown extension");
      continue;
    }
    const auto& stem = kind->first;
    if (stem.ends_with("_mask")) masks[stem.substr(0, stem.size() - 5)] = f;
    else images[stem] = f;
  }
  for (const auto& [stem, file] : masks)
    if (!images.contains(stem)) result.errors.push_back(file.string() + ": mask without image");

  for (const auto& [stem, file] : images) {
    try {
      Case c;
      c.id = stem;
      c.source = file.string();
      c.image = read_volume(file.string());
      if (auto m = masks.find(stem); m != masks.end()) {
        LabelVolume mask = to_labels(read_volume(m->second.string()));
        if (mask.dims() != c.image.dims())
          throw Error(ErrorCode::invalid_shape, "mask shape " + to_string(mask.dims()) + " differs from image shape " +
                                                    to_string(c.image.dims()));
        c.mask = std::move(mask);
      }
      result.cases.push_back(std::move(c));
    } catch (const std::exception& e) {
      result.errors.push_back(stem + ": " + e.what());
    }
  }
  return result;
}

}  // namespace pshop
