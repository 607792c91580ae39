#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "volume.hpp"

namespace gcaseg {

// Single-file, uncompressed, little-endian NIfTI-1 with 3-D uint8/int16/float32 payloads.

enum class NiftiDtype : std::int16_t { kUint8 = 2, kInt16 = 4, kFloat32 = 16 };

class NiftiError : public std::runtime_error {
 public:
  enum class Kind { kIo, kBadMagic, kUnsupportedDtype, kUnsupportedLayout, kTruncated };
  NiftiError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace nifti {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;  // header + empty extension flag

// Byte offsets within the 348-byte header.
inline constexpr std::size_t kOffSizeofHdr = 0, kOffDim = 40, kOffDatatype = 70, kOffBitpix = 72, kOffPixdim = 76,
                             kOffVoxOffset = 108, kOffSclSlope = 112, kOffSclInter = 116, kOffXyztUnits = 123,
                             kOffMagic = 344;

static_assert(std::endian::native == std::endian::little, "NIfTI IO assumes a little-endian host");

template <class V>
V load(const std::uint8_t* p) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  return v;
}
template <class V>
void store(std::uint8_t* p, V v) {
  std::memcpy(p, &v, sizeof(V));
}

inline int bytes_per_voxel(NiftiDtype t) {
  switch (t) {
    case NiftiDtype::kUint8: return 1;
    case NiftiDtype::kInt16: return 2;
    case NiftiDtype::kFloat32: return 4;
  }
  return 0;
}

template <class V>
constexpr NiftiDtype dtype_of() {
  if constexpr (std::is_same_v<V, std::uint8_t>) return NiftiDtype::kUint8;
  else if constexpr (std::is_same_v<V, std::int16_t>) return NiftiDtype::kInt16;
  else {
    static_assert(std::is_same_v<V, float>, "supported voxel types: uint8, int16, float32");
    return NiftiDtype::kFloat32;
  }
}

}  // namespace nifti

struct NiftiImage {
  std::array<std::int64_t, 3> file_dims{};  // (nx, ny, nz) as stored in dim[1..3]
  Spacing spacing;
  NiftiDtype dtype = NiftiDtype::kFloat32;
  std::vector<std::uint8_t> raw;  // x fastest

  Extents extents() const { return {file_dims[2], file_dims[1], file_dims[0]}; }

  template <class V>
  Volume<V> as() const {
    if (dtype != nifti::dtype_of<V>()) throw NiftiError(NiftiError::Kind::kUnsupportedDtype, "NIfTI payload dtype does not match the requested voxel type");
    Volume<V> v(extents());
    std::memcpy(v.data.data(), raw.data(), raw.size());
    return v;
  }

  // Any supported dtype widened to float.
  Volume<float> to_float() const {
    Volume<float> v(extents());
    const auto n = v.size();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto* p = raw.data() + i * nifti::bytes_per_voxel(dtype);
      switch (dtype) {
        case NiftiDtype::kUint8: v[i] = *p; break;
        case NiftiDtype::kInt16: v[i] = nifti::load<std::int16_t>(p); break;
        case NiftiDtype::kFloat32: v[i] = nifti::load<float>(p); break;
      }
    }
    return v;
  }
};

inline NiftiImage parse_nifti(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>") {
  using namespace nifti;
  using K = NiftiError::Kind;
  if (bytes.size() < kHeaderSize) throw NiftiError(K::kTruncated, source + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  const auto* h = bytes.data();
  const auto sizeof_hdr = load<std::int32_t>(h + kOffSizeofHdr);
  if (std::memcmp(h + kOffMagic, "n+1\0", 4) != 0) {
    if (std::memcmp(h + kOffMagic, "ni1\0", 4) == 0)
      throw NiftiError(K::kUnsupportedLayout, source + ": two-file (.hdr/.img) NIfTI is not supported");
    throw NiftiError(K::kBadMagic, source + ": not a NIfTI-1 file (bad magic)");
  }
  if (sizeof_hdr != 348) {
    if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == 348u)
      throw NiftiError(K::kUnsupportedLayout, source + ": big-endian NIfTI is not supported");
    throw NiftiError(K::kBadMagic, source + ": not a NIfTI-1 file (sizeof_hdr " + std::to_string(sizeof_hdr) + ")");
  }

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[static_cast<std::size_t>(i)] = load<std::int16_t>(h + kOffDim + 2 * i);
  if (dim[0] < 1 || dim[0] > 7) throw NiftiError(K::kUnsupportedLayout, source + ": dim[0] = " + std::to_string(dim[0]));
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[static_cast<std::size_t>(i)] != 1)
      throw NiftiError(K::kUnsupportedLayout, source + ": only 3-D volumes are supported (dim[" + std::to_string(i) + "] = " +
                                                  std::to_string(dim[static_cast<std::size_t>(i)]) + ")");

  NiftiImage img;
  for (int i = 1; i <= 3; ++i) {
    const std::int64_t d = i <= dim[0] ? dim[static_cast<std::size_t>(i)] : 1;
    if (d < 1) throw NiftiError(K::kUnsupportedLayout, source + ": nonpositive dim[" + std::to_string(i) + "]");
    img.file_dims[static_cast<std::size_t>(i - 1)] = d;
  }

  const auto dt = load<std::int16_t>(h + kOffDatatype);
  if (dt != 2 && dt != 4 && dt != 16)
    throw NiftiError(K::kUnsupportedDtype, source + ": unsupported datatype code " + std::to_string(dt) + " (supported: uint8=2, int16=4, float32=16)");
  img.dtype = static_cast<NiftiDtype>(dt);

  auto pix = [&](int i) {
    const float v = load<float>(h + kOffPixdim + 4 * i);
    return v > 0 ? double(v) : 1.0;
  };
  img.spacing = Spacing{pix(3), pix(2), pix(1)};

  const float vox_offset = load<float>(h + kOffVoxOffset);
  const auto offset = static_cast<std::size_t>(vox_offset < float(kHeaderSize) ? kVoxOffset : vox_offset);
  const auto n = static_cast<std::size_t>(img.file_dims[0] * img.file_dims[1] * img.file_dims[2]) * static_cast<std::size_t>(bytes_per_voxel(img.dtype));
  if (bytes.size() < offset + n)
    throw NiftiError(K::kTruncated, source + ": truncated payload (" + std::to_string(bytes.size() < offset ? 0 : bytes.size() - offset) +
                                        " of " + std::to_string(n) + " bytes)");
  img.raw.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return img;
}

template <class V>
std::vector<std::uint8_t> encode_nifti(const Volume<V>& v, const Spacing& spacing) {
  using namespace nifti;
  for (auto d : v.dims)
    if (d < 1 || d > 32767) throw std::invalid_argument("encode_nifti: extent " + std::to_string(d) + " not representable");
  std::vector<std::uint8_t> out(kVoxOffset + v.data.size() * sizeof(V), 0);
  auto* h = out.data();
  store<std::int32_t>(h + kOffSizeofHdr, 348);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(v.dims[2]), static_cast<std::int16_t>(v.dims[1]),
                               static_cast<std::int16_t>(v.dims[0]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store(h + kOffDim + 2 * i, dim[i]);
  store(h + kOffDatatype, static_cast<std::int16_t>(dtype_of<V>()));
  store(h + kOffBitpix, static_cast<std::int16_t>(8 * sizeof(V)));
  const float pixdim[8] = {1.0f, float(spacing.x), float(spacing.y), float(spacing.z), 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) store(h + kOffPixdim + 4 * i, pixdim[i]);
  store(h + kOffVoxOffset, float(kVoxOffset));
  store(h + kOffSclSlope, 1.0f);
  store(h + kOffSclInter, 0.0f);
  h[kOffXyztUnits] = 2;  // mm
  std::memcpy(h + kOffMagic, "n+1\0", 4);
  std::memcpy(h + kVoxOffset, v.data.data(), v.data.size() * sizeof(V));
  return out;
}

inline NiftiImage read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NiftiError(NiftiError::Kind::kIo, path.string() + ": cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_nifti(bytes, path.string());
}

template <class V>
void write_volume(const std::filesystem::path& path, const Volume<V>& v, const Spacing& spacing) {
  const auto bytes = encode_nifti(v, spacing);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw NiftiError(NiftiError::Kind::kIo, path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw NiftiError(NiftiError::Kind::kIo, path.string() + ": write failed");
}

}  // namespace gcaseg
