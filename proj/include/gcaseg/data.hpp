#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "nifti.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace gcaseg {

inline constexpr std::int64_t kNumModalities = 4;
inline constexpr std::array<const char*, 4> kModalityNames = {"t1", "t1ce", "t2", "flair"};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Case {
  std::string id;
  Tensor<float> image;  // [4, D, H, W] in T1, T1ce, T2, FLAIR order
  LabelVolume labels;
  Spacing spacing;

  Extents extents() const { return labels.dims; }
};

inline void validate_case(const Case& c, std::int64_t channels = kNumModalities) {
  if (!c.image.defined() || c.image.ndim() != 4 || c.image.dim(0) != channels)
    throw DataError("case " + c.id + ": image must be [" + std::to_string(channels) + ",D,H,W]");
  const Extents e{c.image.dim(1), c.image.dim(2), c.image.dim(3)};
  if (e != c.labels.dims) throw DataError("case " + c.id + ": image extents " + to_string(e) + " differ from labels " + to_string(c.labels.dims));
  try {
    check_labels(c.labels);
  } catch (const std::out_of_range& ex) {
    throw DataError("case " + c.id + ": " + ex.what());
  }
}

// splitmix64 finaliser; used to derive independent seeds from tuples.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ull;
  return h;
}

inline std::uint64_t case_seed(std::uint64_t base, std::uint64_t index) { return mix64(mix64(base) ^ index); }

inline std::uint64_t augment_seed(std::uint64_t global, const std::string& case_id, std::uint64_t epoch) {
  return mix64(mix64(global ^ fnv1a(case_id)) + epoch);
}

// ---------------------------------------------------------------- synthetic

// Per-tissue modality means (T1, T1ce, T2, FLAIR). Invented phantom constants.
struct TissueMeans {
  std::array<float, 4> brain{0.6f, 0.6f, 0.5f, 0.5f};
  std::array<float, 4> necrotic{0.3f, 0.3f, 0.9f, 0.6f};  // label 1
  std::array<float, 4> edema{0.45f, 0.5f, 0.9f, 1.0f};    // label 2
  std::array<float, 4> enhancing{0.4f, 1.0f, 0.7f, 0.7f}; // label 3
};

inline constexpr float kSyntheticNoiseSigma = 0.1f;

// Spherical brain of radius 0.46*size around the volume centre, zero outside.
// Inside it a tumour: edema ellipsoid (2) containing an enhancing ellipsoid (3)
// whose interior core ellipsoid is necrotic (1). Semi-axes are drawn per axis;
// the core is at least 1 voxel and each shell at least 1 voxel thick.
inline Case generate_synthetic_case(std::uint64_t seed, std::int64_t size, Spacing spacing = {}, std::string id = {}) {
  if (size != 16 && size != 32 && size != 64) throw std::invalid_argument("synthetic size must be 16, 32 or 64");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double n = static_cast<double>(size), mid = (n - 1) / 2, brain_r = 0.46 * n;

  std::array<double, 3> ed_r, et_r, core_r, centre;
  for (int a = 0; a < 3; ++a) {
    core_r[a] = std::max(1.0, (0.06 + 0.04 * u01(rng)) * n);
    et_r[a] = core_r[a] + std::max(1.0, (0.04 + 0.03 * u01(rng)) * n);
    ed_r[a] = et_r[a] + std::max(1.5, (0.05 + 0.06 * u01(rng)) * n);
  }
  const double max_ed = std::max({ed_r[0], ed_r[1], ed_r[2]});
  const double reach = std::max(0.0, brain_r - max_ed - 0.5);
  // Uniform offset in the ball of radius `reach` so the tumour stays in the brain.
  for (;;) {
    std::array<double, 3> o;
    for (auto& v : o) v = (2 * u01(rng) - 1) * reach;
    if (o[0] * o[0] + o[1] * o[1] + o[2] * o[2] <= reach * reach) {
      for (int a = 0; a < 3; ++a) centre[a] = mid + o[a];
      break;
    }
  }

  auto inside = [&](const std::array<double, 3>& r, double z, double y, double x) {
    const double dz = (z - centre[0]) / r[0], dy = (y - centre[1]) / r[1], dx = (x - centre[2]) / r[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  };

  const TissueMeans means;
  Case c;
  c.id = id.empty() ? "synthetic_" + std::to_string(seed) : std::move(id);
  c.spacing = spacing;
  c.labels = LabelVolume({size, size, size});
  c.image = Tensor<float>({kNumModalities, size, size, size});
  std::normal_distribution<float> noise(0.0f, kSyntheticNoiseSigma);
  const auto vox = size * size * size;
  for (std::int64_t z = 0; z < size; ++z)
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double dz = z - mid, dy = y - mid, dx = x - mid;
        if (dz * dz + dy * dy + dx * dx > brain_r * brain_r) continue;
        std::uint8_t l = 0;
        if (inside(core_r, z, y, x)) l = 1;
        else if (inside(et_r, z, y, x)) l = 3;
        else if (inside(ed_r, z, y, x)) l = 2;
        const auto i = c.labels.index(z, y, x);
        c.labels[i] = l;
        const auto& m = l == 0 ? means.brain : l == 1 ? means.necrotic : l == 2 ? means.edema : means.enhancing;
        for (int ch = 0; ch < 4; ++ch) c.image[ch * vox + i] = m[static_cast<std::size_t>(ch)] + noise(rng);
      }
  return c;
}

// ------------------------------------------------------------ preprocessing

// Per channel (x - mean) / max(std, 1e-8) over voxels where any channel is
// nonzero; voxels outside that mask stay zero.
inline Tensor<float> znormalize(const Tensor<float>& image) {
  check_shape(image.ndim() == 4, "znormalize", "image must be [C,D,H,W]");
  const auto C = image.dim(0), n = image.numel() / std::max<std::int64_t>(C, 1);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < C; ++c)
      if (image[c * n + i] != 0.0f) {
        mask[static_cast<std::size_t>(i)] = 1;
        break;
      }
    count += mask[static_cast<std::size_t>(i)];
  }
  Tensor<float> out = image.clone();
  if (count == 0) return out;
  for (std::int64_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    for (std::int64_t i = 0; i < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) mean += image[c * n + i];
    mean /= static_cast<double>(count);
    for (std::int64_t i = 0; i < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) {
        const double d = image[c * n + i] - mean;
        var += d * d;
      }
    const double sd = std::max(std::sqrt(var / static_cast<double>(count)), 1e-8);
    for (std::int64_t i = 0; i < n; ++i)
      out[c * n + i] = mask[static_cast<std::size_t>(i)] ? static_cast<float>((image[c * n + i] - mean) / sd) : 0.0f;
  }
  return out;
}

// Centre crop where larger than roi, symmetric zero pad (extra voxel after) where smaller.
inline Case crop_or_pad(const Case& in, const Extents& roi) {
  for (auto r : roi)
    if (r < 1) throw std::invalid_argument("crop_or_pad: roi extents must be >= 1");
  const auto src = in.extents();
  // dst index i maps to src index i + shift (may fall outside -> zero).
  std::array<std::int64_t, 3> shift;
  for (int a = 0; a < 3; ++a) shift[a] = src[a] >= roi[a] ? (src[a] - roi[a]) / 2 : -((roi[a] - src[a]) / 2);
  const auto C = in.image.dim(0), ns = in.labels.size(), nd = roi[0] * roi[1] * roi[2];
  Case out;
  out.id = in.id;
  out.spacing = in.spacing;
  out.labels = LabelVolume(roi);
  out.image = Tensor<float>({C, roi[0], roi[1], roi[2]});
  for (std::int64_t z = 0; z < roi[0]; ++z) {
    const auto sz = z + shift[0];
    if (sz < 0 || sz >= src[0]) continue;
    for (std::int64_t y = 0; y < roi[1]; ++y) {
      const auto sy = y + shift[1];
      if (sy < 0 || sy >= src[1]) continue;
      for (std::int64_t x = 0; x < roi[2]; ++x) {
        const auto sx = x + shift[2];
        if (sx < 0 || sx >= src[2]) continue;
        const auto di = out.labels.index(z, y, x), si = in.labels.index(sz, sy, sx);
        out.labels[di] = in.labels[si];
        for (std::int64_t c = 0; c < C; ++c) out.image[c * nd + di] = in.image[c * ns + si];
      }
    }
  }
  return out;
}

// ------------------------------------------------------------- augmentation

struct AugmentOptions {
  double flip_prob = 0.5;
  bool rotate = true;
  double brightness_lo = 0.9, brightness_hi = 1.1;
};

struct AugmentDraw {
  std::array<bool, 3> flip{};  // z, y, x
  int rot90 = 0;               // quarter turns in the (y, x) plane
  std::vector<double> scale;   // per image channel
};

// Draws come straight off mt19937_64 in a fixed order (flip z, y, x; rotation;
// one scale per channel) using only the raw 64-bit output, so the sequence is
// the same on every standard library.
inline AugmentDraw draw_augmentation(std::uint64_t seed, std::int64_t channels, const AugmentOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  auto unit = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  AugmentDraw d;
  for (auto& f : d.flip) f = unit() < opt.flip_prob;
  const auto r = rng() >> 62;
  d.rot90 = opt.rotate ? static_cast<int>(r) : 0;
  for (std::int64_t c = 0; c < channels; ++c) d.scale.push_back(opt.brightness_lo + (opt.brightness_hi - opt.brightness_lo) * unit());
  return d;
}

// Source voxel feeding output voxel (z, y, x) under rotation-after-flips.
inline std::array<std::int64_t, 3> augment_source(const AugmentDraw& d, const Extents& e, std::int64_t z, std::int64_t y, std::int64_t x) {
  const auto H = e[1], W = e[2];
  std::int64_t sy = y, sx = x;
  switch (d.rot90 & 3) {
    case 1: sy = x, sx = W - 1 - y; break;
    case 2: sy = H - 1 - y, sx = W - 1 - x; break;
    case 3: sy = H - 1 - x, sx = y; break;
    default: break;
  }
  std::array<std::int64_t, 3> s{z, sy, sx};
  for (int a = 0; a < 3; ++a)
    if (d.flip[static_cast<std::size_t>(a)]) s[a] = e[a] - 1 - s[a];
  return s;
}

inline Case apply_augmentation(const Case& in, const AugmentDraw& d) {
  const auto e = in.extents();
  if (d.rot90 % 2 != 0 && e[1] != e[2]) throw ShapeError("augment: quarter-turn rotation needs equal in-plane extents, got " + to_string(e));
  const auto C = in.image.dim(0), n = in.labels.size();
  check_shape(static_cast<std::int64_t>(d.scale.size()) == C, "augment", "scale count does not match channels");
  Case out;
  out.id = in.id;
  out.spacing = in.spacing;
  out.labels = LabelVolume(e);
  out.image = Tensor<float>(in.image.shape());
  for (std::int64_t z = 0; z < e[0]; ++z)
    for (std::int64_t y = 0; y < e[1]; ++y)
      for (std::int64_t x = 0; x < e[2]; ++x) {
        const auto s = augment_source(d, e, z, y, x);
        const auto di = out.labels.index(z, y, x), si = in.labels.index(s[0], s[1], s[2]);
        out.labels[di] = in.labels[si];
        for (std::int64_t c = 0; c < C; ++c)
          out.image[c * n + di] = static_cast<float>(in.image[c * n + si] * d.scale[static_cast<std::size_t>(c)]);
      }
  return out;
}

inline Case augment(const Case& in, std::uint64_t seed, const AugmentOptions& opt = {}) {
  const auto e = in.extents();
  if (opt.rotate && !(e[0] == e[1] && e[1] == e[2]))
    throw ShapeError("augment: rotation requires a cubic volume, got " + to_string(e));
  return apply_augmentation(in, draw_augmentation(seed, in.image.dim(0), opt));
}

// ---------------------------------------------------------------- binarize

inline BinaryMask binarize(const LabelVolume& labels) {
  BinaryMask m(labels.dims);
  for (std::int64_t i = 0; i < labels.size(); ++i) m[i] = labels[i] > 0;
  return m;
}

inline Tensor<float> append_mask_channel(const Tensor<float>& image, const BinaryMask& mask) {
  check_shape(image.ndim() == 4 && Extents{image.dim(1), image.dim(2), image.dim(3)} == mask.dims, "append_mask_channel",
              "image " + to_string(image.shape()) + " does not match mask " + to_string(mask.dims));
  auto v = image.values();
  v.reserve(v.size() + mask.data.size());
  for (auto b : mask.data) v.push_back(static_cast<float>(b));
  return Tensor<float>({image.dim(0) + 1, image.dim(1), image.dim(2), image.dim(3)}, std::move(v));
}

// ------------------------------------------------------------------- folds

struct SplitPlan {
  std::int64_t n_folds = 5;
  std::int64_t fold = 4;
  std::uint64_t seed = 42;
};

struct Split {
  std::vector<std::string> train, val;
  std::map<std::string, std::int64_t> assignment;
};

// Sorted, de-duplicated ids shuffled by Fisher-Yates on mt19937_64(seed)
// (j = rng() % (i + 1), explicit for cross-library stability); the case at
// shuffled position p goes to fold p % n_folds.
inline Split split_folds(std::vector<std::string> ids, const SplitPlan& plan) {
  if (plan.n_folds < 2) throw std::invalid_argument("n_folds must be >= 2");
  if (plan.fold < 0 || plan.fold >= plan.n_folds)
    throw std::out_of_range("fold " + std::to_string(plan.fold) + " outside [0, " + std::to_string(plan.n_folds) + ")");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw std::invalid_argument("duplicate case ids in split");
  if (static_cast<std::int64_t>(ids.size()) < plan.n_folds)
    throw std::invalid_argument(std::to_string(ids.size()) + " cases cannot fill " + std::to_string(plan.n_folds) + " folds");
  std::mt19937_64 rng(plan.seed);
  for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[rng() % (i + 1)]);
  Split s;
  for (std::size_t p = 0; p < ids.size(); ++p) s.assignment[ids[p]] = static_cast<std::int64_t>(p) % plan.n_folds;
  for (const auto& [id, f] : s.assignment) (f == plan.fold ? s.val : s.train).push_back(id);
  return s;
}

// ----------------------------------------------------------- dataset on disk

// <root>/<id>/{t1,t1ce,t2,flair,seg}.nii plus <root>/manifest.txt (one id per line).

inline const char* kManifestName = "manifest.txt";

inline void write_case(const std::filesystem::path& root, const Case& c) {
  validate_case(c);
  const auto dir = root / c.id;
  std::filesystem::create_directories(dir);
  const auto n = c.labels.size();
  for (std::int64_t m = 0; m < kNumModalities; ++m) {
    Volume<float> v(c.labels.dims);
    std::copy_n(c.image.values().begin() + m * n, n, v.data.begin());
    write_volume(dir / (std::string(kModalityNames[static_cast<std::size_t>(m)]) + ".nii"), v, c.spacing);
  }
  write_volume(dir / "seg.nii", c.labels, c.spacing);
}

inline LabelVolume read_labels(const std::filesystem::path& path) {
  const auto img = read_volume(path);
  LabelVolume l(img.extents());
  const auto f = img.to_float();
  for (std::int64_t i = 0; i < l.size(); ++i) {
    const float v = f[i];
    if (!(v >= 0 && v < kNumLabels && v == std::floor(v)))
      throw DataError(path.string() + ": label value " + std::to_string(v) + " outside {0,1,2,3}");
    l[i] = static_cast<std::uint8_t>(v);
  }
  return l;
}

// Stacks the four modality files; labels are optional (inference input).
inline Case read_case(const std::filesystem::path& dir, std::string id = {}, bool with_labels = true) {
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + ": case directory not found");
  Case c;
  c.id = id.empty() ? dir.filename().string() : std::move(id);
  std::vector<float> values;
  Extents e{};
  for (std::int64_t m = 0; m < kNumModalities; ++m) {
    const auto img = read_volume(dir / (std::string(kModalityNames[static_cast<std::size_t>(m)]) + ".nii"));
    if (m == 0) {
      e = img.extents();
      c.spacing = img.spacing;
    } else if (img.extents() != e) {
      throw DataError(dir.string() + ": modality extents disagree");
    }
    const auto v = img.to_float();
    values.insert(values.end(), v.data.begin(), v.data.end());
  }
  c.image = Tensor<float>({kNumModalities, e[0], e[1], e[2]}, std::move(values));
  c.labels = with_labels ? read_labels(dir / "seg.nii") : LabelVolume(e);
  if (c.labels.dims != e) throw DataError(dir.string() + ": seg extents differ from images");
  return c;
}

inline void write_manifest(const std::filesystem::path& root, const std::vector<std::string>& ids) {
  std::ofstream out(root / kManifestName, std::ios::trunc);
  if (!out) throw DataError((root / kManifestName).string() + ": cannot write");
  for (const auto& id : ids) out << id << '\n';
}

inline std::vector<std::string> read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / kManifestName);
  if (!in) throw DataError((root / kManifestName).string() + ": manifest not found");
  std::vector<std::string> ids;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

inline std::vector<Case> load_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw DataError(root.string() + ": data directory not found");
  std::vector<Case> out;
  for (const auto& id : read_manifest(root)) {
    out.push_back(read_case(root / id, id));
    validate_case(out.back());
  }
  return out;
}

// Name used for synthetic case i.
inline std::string synthetic_case_id(std::int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04lld", static_cast<long long>(i));
  return buf;
}

}  // namespace gcaseg
