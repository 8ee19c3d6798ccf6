#pragma once

// Synthetic still-to-video dataset: parameterized face-like templates rendered
// per identity (one clean still, several degraded video ROIs), geometric
// augmentations, blur synthesis, triplet batch assembly and hard-triplet
// mining.  Everything is a pure function of its seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stv/losses.hpp"
#include "stv/tensor.hpp"
#include "stv/tmask.hpp"

namespace stv::data {

// --- affine warping ----------------------------------------------------------------

/// Inverse-map affine warp about the image center with bilinear sampling and
/// border replication.  `inv` maps destination to source offsets:
/// src = inv * (dst - center) + center - (tx, ty).
struct AffineInverse {
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1;
  double tx = 0, ty = 0;  // forward translation in pixels (x = cols, y = rows)
};

struct WarpResult {
  Tensor image;
  double coverage = 1.0;  // fraction of samples taken inside the source frame
};

inline WarpResult warp_affine(const Tensor& img, const AffineInverse& inv) {
  if (img.rank() != 3)
    throw ShapeError("warp_affine: [C,H,W] image required, got " + shape_str(img.shape));
  const std::size_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
  const double cy = (static_cast<double>(H) - 1.0) / 2.0;
  const double cx = (static_cast<double>(W) - 1.0) / 2.0;
  Tensor out(img.shape);
  std::size_t inside = 0;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double dx = static_cast<double>(c) - cx - inv.tx;
      const double dy = static_cast<double>(r) - cy - inv.ty;
      const double sx = inv.m00 * dx + inv.m01 * dy + cx;
      const double sy = inv.m10 * dx + inv.m11 * dy + cy;
      if (sx >= 0.0 && sx <= static_cast<double>(W - 1) && sy >= 0.0 &&
          sy <= static_cast<double>(H - 1))
        ++inside;
      const double cls_x = std::clamp(sx, 0.0, static_cast<double>(W - 1));
      const double cls_y = std::clamp(sy, 0.0, static_cast<double>(H - 1));
      const std::size_t x0 = static_cast<std::size_t>(cls_x);
      const std::size_t y0 = static_cast<std::size_t>(cls_y);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const std::size_t y1 = std::min(y0 + 1, H - 1);
      const double wx = cls_x - static_cast<double>(x0);
      const double wy = cls_y - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double* plane = &img.data[ch * H * W];
        const double v = (1 - wy) * ((1 - wx) * plane[y0 * W + x0] + wx * plane[y0 * W + x1]) +
                         wy * ((1 - wx) * plane[y1 * W + x0] + wx * plane[y1 * W + x1]);
        out.data[ch * H * W + r * W + c] = v;
      }
    }
  }
  return {std::move(out), static_cast<double>(inside) / static_cast<double>(H * W)};
}

inline AffineInverse rotate_about_center(double degrees) {
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  // inverse rotation
  return {std::cos(rad), std::sin(rad), -std::sin(rad), std::cos(rad), 0, 0};
}

inline AffineInverse shear_x(double factor) {
  // forward: x' = x + factor*y  ->  inverse: x = x' - factor*y
  return {1.0, -factor, 0.0, 1.0, 0, 0};
}

inline AffineInverse translate_px(double tx, double ty) { return {1, 0, 0, 1, tx, ty}; }

inline AffineInverse scale_about_center(double s) {
  if (s <= 0.0) throw DomainError("scale_about_center: non-positive scale");
  return {1.0 / s, 0, 0, 1.0 / s, 0, 0};
}

inline Tensor mirror_horizontal(const Tensor& img) {
  if (img.rank() != 3)
    throw ShapeError("mirror_horizontal: [C,H,W] image required, got " +
                     shape_str(img.shape));
  const std::size_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
  Tensor out(img.shape);
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c)
        out.data[ch * H * W + r * W + c] = img.data[ch * H * W + r * W + (W - 1 - c)];
  return out;
}

// --- still augmentation -------------------------------------------------------------

enum class AugmentKind { shear, mirror, rotate, translate };

/// One augmentation; the applied magnitude is drawn uniformly from [lo, hi]
/// (exact when lo == hi).  translate uses (lo,hi) for x and (lo2,hi2) for y.
struct AugmentOp {
  AugmentKind kind = AugmentKind::mirror;
  double lo = 0.0, hi = 0.0;
  double lo2 = 0.0, hi2 = 0.0;

  static AugmentOp mirror() { return {AugmentKind::mirror, 0, 0, 0, 0}; }
  static AugmentOp rotate(double degrees) { return {AugmentKind::rotate, degrees, degrees, 0, 0}; }
  static AugmentOp shear(double f) { return {AugmentKind::shear, f, f, 0, 0}; }
  static AugmentOp translate(double tx, double ty) {
    return {AugmentKind::translate, tx, tx, ty, ty};
  }
};

inline constexpr double kMinFaceCoverage = 0.5;

/// One output ROI per op; throws when a transform leaves less than half of
/// the output sampled from inside the source frame.
inline std::vector<Tensor> augment_still(const Tensor& roi, const std::vector<AugmentOp>& ops,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed));
  std::vector<Tensor> out;
  out.reserve(ops.size());
  for (const auto& op : ops) {
    auto draw = [&rng](double lo, double hi) {
      if (lo == hi) return lo;
      return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    if (op.kind == AugmentKind::mirror) {
      out.push_back(mirror_horizontal(roi));
      continue;
    }
    AffineInverse inv;
    switch (op.kind) {
      case AugmentKind::rotate: inv = rotate_about_center(draw(op.lo, op.hi)); break;
      case AugmentKind::shear: inv = shear_x(draw(op.lo, op.hi)); break;
      case AugmentKind::translate: {
        inv = translate_px(draw(op.lo, op.hi), draw(op.lo2, op.hi2));
        break;
      }
      default: break;
    }
    WarpResult wr = warp_affine(roi, inv);
    if (wr.coverage < kMinFaceCoverage)
      throw DomainError("augment_still: transform leaves only " +
                        std::to_string(wr.coverage * 100.0) + "% of the frame covered");
    out.push_back(std::move(wr.image));
  }
  return out;
}

/// Default augmentation set used for fine-tuning: mirror, rotations, shears
/// and translations with ranges that keep a 48x40 face in frame.
inline std::vector<AugmentOp> default_augment_ops() {
  return {
      AugmentOp::mirror(),
      {AugmentKind::rotate, -10.0, 10.0, 0, 0},
      {AugmentKind::shear, -0.1, 0.1, 0, 0},
      {AugmentKind::translate, -4.0, 4.0, -4.0, 4.0},
  };
}

// --- blur synthesis ------------------------------------------------------------------

enum class BlurKind { out_of_focus, motion };

struct BlurParams {
  double radius = 0.0;   // out_of_focus disk radius, pixels
  double length = 1.0;   // motion length, pixels (>= 1)
  double angle_deg = 0;  // motion direction
};

namespace detail {

struct Kernel {
  std::size_t size = 1;  // odd
  std::vector<double> w;
};

inline Kernel disk_kernel(double radius) {
  if (radius < 0.0) throw DomainError("synthesize_blur: negative radius");
  const long r = static_cast<long>(std::floor(radius));
  const std::size_t size = static_cast<std::size_t>(2 * r + 1);
  Kernel k{size, std::vector<double>(size * size, 0.0)};
  double total = 0.0;
  for (long dy = -r; dy <= r; ++dy)
    for (long dx = -r; dx <= r; ++dx)
      if (static_cast<double>(dx * dx + dy * dy) <= radius * radius + 1e-12) {
        k.w[static_cast<std::size_t>((dy + r) * (2 * r + 1) + dx + r)] = 1.0;
        total += 1.0;
      }
  for (double& v : k.w) v /= total;
  return k;
}

inline Kernel line_kernel(double length, double angle_deg) {
  if (length < 1.0) throw DomainError("synthesize_blur: motion length must be >= 1");
  const int n = static_cast<int>(std::lround(length));
  const double rad = angle_deg * 3.14159265358979323846 / 180.0;
  const double ux = std::cos(rad), uy = std::sin(rad);
  const long r = static_cast<long>(std::ceil((static_cast<double>(n) - 1.0) / 2.0));
  const std::size_t size = static_cast<std::size_t>(2 * r + 1);
  Kernel k{size, std::vector<double>(size * size, 0.0)};
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) - (static_cast<double>(n) - 1.0) / 2.0;
    const double x = t * ux + static_cast<double>(r);
    const double y = t * uy + static_cast<double>(r);
    // bilinear splat
    const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
    const double wx = x - static_cast<double>(x0), wy = y - static_cast<double>(y0);
    auto splat = [&](long yy, long xx, double wgt) {
      if (yy < 0 || xx < 0 || yy >= static_cast<long>(size) || xx >= static_cast<long>(size))
        return;
      k.w[static_cast<std::size_t>(yy) * size + static_cast<std::size_t>(xx)] += wgt;
    };
    splat(y0, x0, (1 - wy) * (1 - wx));
    splat(y0, x0 + 1, (1 - wy) * wx);
    splat(y0 + 1, x0, wy * (1 - wx));
    splat(y0 + 1, x0 + 1, wy * wx);
  }
  double total = 0.0;
  for (double v : k.w) total += v;
  for (double& v : k.w) v /= total;
  return k;
}

inline Tensor convolve_replicate(const Tensor& img, const Kernel& k) {
  const std::size_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
  if (k.size > H || k.size > W)
    throw DomainError("synthesize_blur: kernel " + std::to_string(k.size) +
                      " larger than image " + std::to_string(H) + "x" + std::to_string(W));
  const long r = static_cast<long>(k.size / 2);
  Tensor out(img.shape);
  for (std::size_t ch = 0; ch < C; ++ch) {
    const double* plane = &img.data[ch * H * W];
    double* oplane = &out.data[ch * H * W];
    for (long y = 0; y < static_cast<long>(H); ++y)
      for (long x = 0; x < static_cast<long>(W); ++x) {
        double s = 0.0;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long yy = std::clamp(y + dy, 0L, static_cast<long>(H) - 1);
            const long xx = std::clamp(x + dx, 0L, static_cast<long>(W) - 1);
            s += k.w[static_cast<std::size_t>((dy + r) * static_cast<long>(k.size) + dx + r)] *
                 plane[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
          }
        oplane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = s;
      }
  }
  return out;
}

}  // namespace detail

/// Out-of-focus (normalized disk) or motion (normalized line) blur with
/// replicated borders; kernels sum to one, shape is preserved.
inline Tensor synthesize_blur(const Tensor& roi, BlurKind kind, const BlurParams& p) {
  if (roi.rank() != 3)
    throw ShapeError("synthesize_blur: [C,H,W] image required, got " + shape_str(roi.shape));
  const detail::Kernel k = kind == BlurKind::out_of_focus
                               ? detail::disk_kernel(p.radius)
                               : detail::line_kernel(p.length, p.angle_deg);
  if (k.size == 1) return roi;  // delta kernel
  return detail::convolve_replicate(roi, k);
}

// --- synthetic dataset -----------------------------------------------------------------

struct Degradations {
  double rotate_deg = 3.0;
  double translate_px = 1.5;
  double scale_jitter = 0.04;
  double illum_lo = 0.92, illum_hi = 1.08;
  double blur_radius_max = 1.6;
  double motion_len_max = 3.0;
  double noise_std = 0.015;
};

struct RoiGeometry {
  std::size_t height = 48;
  std::size_t width = 40;
};

struct IdentityEntry {
  int id = 0;
  Tensor still;                // [1,H,W], clean render
  std::vector<Tensor> videos;  // degraded variants, temporal order
};

struct Dataset {
  std::vector<IdentityEntry> identities;
  std::uint64_t seed = 0;
  RoiGeometry geometry;

  std::size_t n_stills() const { return identities.size(); }
  std::size_t n_videos() const {
    std::size_t n = 0;
    for (const auto& e : identities) n += e.videos.size();
    return n;
  }
};

namespace detail {

// per-identity face template parameters, stratified so identities are
// separable along every axis
struct FaceParams {
  double face_ry, face_rx, face_shade, bg_shade;
  double eye_dy, eye_dx, eye_r, eye_shade;
  double nose_len, nose_w, nose_shade;
  double mouth_dy, mouth_rx, mouth_ry, mouth_shade;
  double mark_y, mark_x, mark_r, mark_shade;
  // coarse intra-face stripe texture; separates identities under
  // illumination changes where plain shades would not
  double stripe_angle, stripe_freq, stripe_contrast, stripe_phase;
};

inline std::vector<FaceParams> stratified_face_params(std::uint64_t seed, std::size_t k) {
  struct Range {
    double lo, hi;
  };
  // ranges as fractions of H or W; margins keep a constant background band
  const Range ranges[] = {
      {0.28, 0.36},   // face_ry (of H)
      {0.26, 0.34},   // face_rx (of W)
      {0.45, 0.85},   // face_shade
      {0.05, 0.22},   // bg_shade
      {0.08, 0.16},   // eye_dy (of H)
      {0.10, 0.18},   // eye_dx (of W)
      {0.030, 0.060}, // eye_r (of H)
      {0.05, 0.35},   // eye_shade (relative)
      {0.10, 0.20},   // nose_len (of H)
      {0.018, 0.042}, // nose_w (of W)
      {0.25, 0.60},   // nose_shade (relative)
      {0.16, 0.26},   // mouth_dy (of H)
      {0.08, 0.18},   // mouth_rx (of W)
      {0.015, 0.040}, // mouth_ry (of H)
      {0.10, 0.45},   // mouth_shade (relative)
      {-0.15, 0.15},  // mark_y (of H, offset from center)
      {-0.15, 0.15},  // mark_x (of W)
      {0.02, 0.05},   // mark_r
      {0.3, 1.6},     // mark_shade (relative, can brighten)
      {0.0, 3.14159}, // stripe_angle
      {0.20, 0.70},   // stripe_freq (cycles per 10 px)
      {0.10, 0.22},   // stripe_contrast
      {0.0, 6.28318}, // stripe_phase
  };
  constexpr std::size_t P = sizeof(ranges) / sizeof(ranges[0]);
  // one stratified permutation per parameter
  std::vector<std::vector<std::size_t>> perms(P);
  for (std::size_t p = 0; p < P; ++p) {
    perms[p].resize(k);
    for (std::size_t i = 0; i < k; ++i) perms[p][i] = i;
    std::mt19937_64 prng(mix_seed(seed, 1000 + p));
    std::shuffle(perms[p].begin(), perms[p].end(), prng);
  }
  std::vector<FaceParams> out(k);
  for (std::size_t id = 0; id < k; ++id) {
    std::mt19937_64 rng(mix_seed(seed, 2000, id));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double vals[P];
    for (std::size_t p = 0; p < P; ++p) {
      const double slot = (static_cast<double>(perms[p][id]) + u(rng)) /
                          static_cast<double>(k);
      vals[p] = ranges[p].lo + (ranges[p].hi - ranges[p].lo) * slot;
    }
    out[id] = FaceParams{vals[0],  vals[1],  vals[2],  vals[3],  vals[4],  vals[5],
                         vals[6],  vals[7],  vals[8],  vals[9],  vals[10], vals[11],
                         vals[12], vals[13], vals[14], vals[15], vals[16], vals[17],
                         vals[18], vals[19], vals[20], vals[21], vals[22]};
  }
  return out;
}

inline void draw_ellipse(Tensor& img, double cy, double cx, double ry, double rx,
                         double shade) {
  const std::size_t H = img.shape[1], W = img.shape[2];
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double dy = (static_cast<double>(r) - cy) / ry;
      const double dx = (static_cast<double>(c) - cx) / rx;
      const double d = dy * dy + dx * dx;
      if (d <= 1.0) {
        // soft half-pixel edge
        const double edge = std::min(1.0, (1.0 - d) * std::min(ry, rx) * 2.0);
        double& px = img.data[r * W + c];
        px = px * (1.0 - edge) + shade * edge;
      }
    }
}

inline Tensor render_face(const FaceParams& fp, const RoiGeometry& g) {
  const double H = static_cast<double>(g.height), W = static_cast<double>(g.width);
  Tensor img({1, g.height, g.width}, fp.bg_shade);
  const double cy = (H - 1.0) / 2.0, cx = (W - 1.0) / 2.0;
  draw_ellipse(img, cy, cx, fp.face_ry * H, fp.face_rx * W, fp.face_shade);
  // stripe texture confined to the face ellipse
  {
    const double ux = std::cos(fp.stripe_angle), uy = std::sin(fp.stripe_angle);
    const double freq = 2.0 * 3.14159265358979323846 * fp.stripe_freq / 10.0;
    for (std::size_t r = 0; r < g.height; ++r)
      for (std::size_t c = 0; c < g.width; ++c) {
        const double dy = (static_cast<double>(r) - cy) / (fp.face_ry * H * 0.92);
        const double dx = (static_cast<double>(c) - cx) / (fp.face_rx * W * 0.92);
        if (dy * dy + dx * dx > 1.0) continue;
        const double t = (static_cast<double>(c) * ux + static_cast<double>(r) * uy) * freq +
                         fp.stripe_phase;
        img.data[r * g.width + c] += fp.stripe_contrast * std::sin(t);
      }
  }
  const double eye_shade = fp.face_shade * fp.eye_shade;
  draw_ellipse(img, cy - fp.eye_dy * H, cx - fp.eye_dx * W, fp.eye_r * H, fp.eye_r * H,
               eye_shade);
  draw_ellipse(img, cy - fp.eye_dy * H, cx + fp.eye_dx * W, fp.eye_r * H, fp.eye_r * H,
               eye_shade);
  draw_ellipse(img, cy + fp.nose_len * H * 0.5, cx, fp.nose_len * H * 0.5, fp.nose_w * W,
               fp.face_shade * fp.nose_shade);
  draw_ellipse(img, cy + fp.mouth_dy * H, cx, fp.mouth_ry * H, fp.mouth_rx * W,
               fp.face_shade * fp.mouth_shade);
  draw_ellipse(img, cy + fp.mark_y * H, cx + fp.mark_x * W, fp.mark_r * H, fp.mark_r * H,
               std::clamp(fp.face_shade * fp.mark_shade, 0.0, 1.0));
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace detail

/// Deterministic synthetic dataset: one clean still per identity plus
/// degraded video ROIs (pose jitter, illumination, blur, noise).
inline Dataset generate_synthetic_dataset(std::uint64_t seed, std::size_t n_identities,
                                          const RoiGeometry& geometry,
                                          std::size_t videos_per_identity = 4,
                                          const Degradations& deg = {}) {
  if (n_identities < 2)
    throw DomainError("generate_synthetic_dataset: need >= 2 identities, got " +
                      std::to_string(n_identities));
  if (geometry.height < 16 || geometry.width < 16)
    throw DomainError("generate_synthetic_dataset: degenerate geometry " +
                      std::to_string(geometry.height) + "x" + std::to_string(geometry.width));
  Dataset ds;
  ds.seed = seed;
  ds.geometry = geometry;
  auto params = detail::stratified_face_params(seed, n_identities);
  for (std::size_t id = 0; id < n_identities; ++id) {
    IdentityEntry entry;
    entry.id = static_cast<int>(id);
    entry.still = detail::render_face(params[id], geometry);
    for (std::size_t v = 0; v < videos_per_identity; ++v) {
      std::mt19937_64 rng(mix_seed(seed, id, 7919 + v));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      // pose jitter: rotation + scale + translation in one warp
      const double rot = (u(rng) * 2.0 - 1.0) * deg.rotate_deg;
      const double sc = 1.0 + (u(rng) * 2.0 - 1.0) * deg.scale_jitter;
      const double tx = (u(rng) * 2.0 - 1.0) * deg.translate_px;
      const double ty = (u(rng) * 2.0 - 1.0) * deg.translate_px;
      AffineInverse rotinv = rotate_about_center(rot);
      AffineInverse inv;
      const double s = 1.0 / sc;
      inv.m00 = rotinv.m00 * s;
      inv.m01 = rotinv.m01 * s;
      inv.m10 = rotinv.m10 * s;
      inv.m11 = rotinv.m11 * s;
      inv.tx = tx;
      inv.ty = ty;
      Tensor frame = warp_affine(entry.still, inv).image;
      // illumination
      const double gain = deg.illum_lo + u(rng) * (deg.illum_hi - deg.illum_lo);
      for (double& px : frame.data) px = std::clamp(px * gain, 0.0, 1.0);
      // blur: alternate disk / motion
      if (v % 2 == 0) {
        BlurParams bp;
        bp.radius = u(rng) * deg.blur_radius_max;
        frame = synthesize_blur(frame, BlurKind::out_of_focus, bp);
      } else {
        BlurParams bp;
        bp.length = 1.0 + u(rng) * (deg.motion_len_max - 1.0);
        bp.angle_deg = u(rng) * 180.0;
        frame = synthesize_blur(frame, BlurKind::motion, bp);
      }
      // sensor noise
      std::normal_distribution<double> noise(0.0, deg.noise_std);
      for (double& px : frame.data) px = std::clamp(px + noise(rng), 0.0, 1.0);
      entry.videos.push_back(std::move(frame));
    }
    ds.identities.push_back(std::move(entry));
  }
  return ds;
}

// --- triplet batches and mining -------------------------------------------------------

/// (still, positive video, negative video) with labels; label(T) == label(P).
struct RoiTriplet {
  Tensor still;
  Tensor positive;
  Tensor negative;
  int label_anchor = 0;
  int label_negative = 0;
};

struct TripletBatch {
  std::vector<RoiTriplet> triplets;

  std::size_t size() const { return triplets.size(); }

  void validate() const {
    if (triplets.empty()) throw DomainError("TripletBatch: empty batch");
    for (const auto& t : triplets)
      if (t.label_anchor == t.label_negative)
        throw DomainError("TripletBatch: negative shares the anchor label " +
                          std::to_string(t.label_anchor));
  }
};

enum class SamplingStrategy { uniform, hard };
enum class MiningPolicy { hardest, semi_hard };

/// Hard-triplet mining over L2-normalized embeddings.  hardest: per anchor,
/// farthest same-class positive and nearest other-class negative.  semi_hard:
/// nearest negative farther than the positive but within `margin` of it
/// (squared distances); anchors with no qualifying negative are skipped.
inline std::vector<losses::IndexTriplet> mine_hard_triplets(const Tensor& embeddings,
                                                            const std::vector<int>& labels,
                                                            MiningPolicy policy,
                                                            double margin) {
  if (embeddings.rank() != 2)
    throw ShapeError("mine_hard_triplets: embeddings must be [n,d]");
  const std::size_t n = embeddings.shape[0], d = embeddings.shape[1];
  if (labels.size() != n)
    throw ShapeError("mine_hard_triplets: label count mismatch");
  std::vector<losses::IndexTriplet> out;
  auto sqd = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = embeddings.data[a * d + k] - embeddings.data[b * d + k];
      s += diff * diff;
    }
    return s;
  };
  for (std::size_t a = 0; a < n; ++a) {
    // farthest positive
    double worst_p = -1.0;
    std::size_t pi = n;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double dd = sqd(a, p);
      if (dd > worst_p) {
        worst_p = dd;
        pi = p;
      }
    }
    if (pi == n) continue;  // no positive available
    double best_n = std::numeric_limits<double>::infinity();
    std::size_t ni = n;
    for (std::size_t m = 0; m < n; ++m) {
      if (labels[m] == labels[a]) continue;
      const double dd = sqd(a, m);
      if (policy == MiningPolicy::semi_hard &&
          !(dd > worst_p && dd < worst_p + margin))
        continue;
      if (dd < best_n) {
        best_n = dd;
        ni = m;
      }
    }
    if (ni == n) continue;  // no qualifying negative
    out.push_back({a, pi, ni});
  }
  return out;
}

namespace detail {

struct VideoRef {
  std::size_t identity;
  std::size_t frame;
};

inline std::vector<VideoRef> video_index(const Dataset& ds) {
  std::vector<VideoRef> refs;
  for (std::size_t i = 0; i < ds.identities.size(); ++i)
    for (std::size_t f = 0; f < ds.identities[i].videos.size(); ++f)
      refs.push_back({i, f});
  return refs;
}

}  // namespace detail

/// Assembles an L-triplet batch.  `uniform` draws anchors and negatives
/// uniformly; `hard` mines over the supplied video-ROI embeddings (dataset
/// video order) and falls back to uniform when mining yields nothing.
inline TripletBatch build_triplet_batch(const Dataset& ds, std::size_t L,
                                        SamplingStrategy strategy,
                                        const losses::EmbeddingBatch* embeddings,
                                        std::uint64_t seed) {
  if (ds.identities.size() < 2)
    throw DomainError("build_triplet_batch: need >= 2 identities");
  if (L < 1) throw DomainError("build_triplet_batch: batch size must be >= 1");
  const auto refs = detail::video_index(ds);
  TripletBatch batch;
  std::mt19937_64 rng(mix_seed(seed, 0xb417c4));
  auto uniform_triplet = [&]() {
    const std::size_t a = rng() % ds.identities.size();
    std::size_t b = rng() % (ds.identities.size() - 1);
    if (b >= a) ++b;
    const auto& ia = ds.identities[a];
    const auto& ib = ds.identities[b];
    RoiTriplet t;
    t.still = ia.still;
    t.positive = ia.videos[rng() % ia.videos.size()];
    t.negative = ib.videos[rng() % ib.videos.size()];
    t.label_anchor = ia.id;
    t.label_negative = ib.id;
    return t;
  };
  if (strategy == SamplingStrategy::hard) {
    if (!embeddings)
      throw DomainError("build_triplet_batch: hard strategy requires video embeddings");
    if (embeddings->size() != refs.size())
      throw ShapeError("build_triplet_batch: " + std::to_string(embeddings->size()) +
                       " embeddings for " + std::to_string(refs.size()) + " video ROIs");
    auto mined = mine_hard_triplets(embeddings->embeddings, embeddings->labels,
                                    MiningPolicy::hardest, 0.0);
    for (std::size_t i = 0; i < mined.size() && batch.triplets.size() < L; ++i) {
      const auto& m = mined[i];
      const auto& ia = ds.identities[refs[m.anchor].identity];
      const auto& in = ds.identities[refs[m.negative].identity];
      RoiTriplet t;
      t.still = ia.still;
      t.positive = ia.videos[refs[m.anchor].frame];
      t.negative = in.videos[refs[m.negative].frame];
      t.label_anchor = ia.id;
      t.label_negative = in.id;
      batch.triplets.push_back(std::move(t));
    }
  }
  while (batch.triplets.size() < L) batch.triplets.push_back(uniform_triplet());
  batch.validate();
  return batch;
}

// --- portable graymap/pixmap I/O and manifests -------------------------------------------

inline void write_pnm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || (img.shape[0] != 1 && img.shape[0] != 3))
    throw ShapeError("write_pnm: [1|3,H,W] image required, got " + shape_str(img.shape));
  const std::size_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_pnm: cannot open " + path);
  f << (C == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double v = std::clamp(img.data[ch * H * W + r * W + c], 0.0, 1.0);
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  if (!f) throw IoError("write_pnm: write failure on " + path);
}

inline Tensor read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_pnm: cannot open " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255)
    throw IoError("read_pnm: unsupported header in " + path);
  f.get();  // single whitespace after header
  const std::size_t C = magic == "P5" ? 1 : 3;
  Tensor img({C, h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const int byte = f.get();
        if (byte < 0) throw IoError("read_pnm: truncated payload in " + path);
        img.data[ch * h * w + r * w + c] = static_cast<double>(byte) / 255.0;
      }
  return img;
}

/// Writes images plus `manifest.txt` rows `<id> <still|video> <filename>`.
inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("save_dataset: cannot open manifest in " + dir);
  manifest << "# id role filename\n";
  for (const auto& e : ds.identities) {
    char name[64];
    std::snprintf(name, sizeof(name), "id%03d_still.pgm", e.id);
    write_pnm((fs::path(dir) / name).string(), e.still);
    manifest << e.id << " still " << name << "\n";
    for (std::size_t v = 0; v < e.videos.size(); ++v) {
      std::snprintf(name, sizeof(name), "id%03d_video%03zu.pgm", e.id, v);
      write_pnm((fs::path(dir) / name).string(), e.videos[v]);
      manifest << e.id << " video " << name << "\n";
    }
  }
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("load_dataset: missing manifest in " + dir);
  Dataset ds;
  std::map<int, IdentityEntry> entries;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int id = 0;
    std::string role, filename;
    if (!(ls >> id >> role >> filename))
      throw IoError("load_dataset: malformed manifest row '" + line + "'");
    Tensor img = read_pnm((fs::path(dir) / filename).string());
    auto& e = entries[id];
    e.id = id;
    if (role == "still")
      e.still = std::move(img);
    else if (role == "video")
      e.videos.push_back(std::move(img));
    else
      throw IoError("load_dataset: unknown role '" + role + "'");
  }
  for (auto& [id, e] : entries) {
    if (e.still.numel() == 0)
      throw IoError("load_dataset: identity " + std::to_string(id) + " has no still");
    ds.identities.push_back(std::move(e));
  }
  if (!ds.identities.empty()) {
    ds.geometry.height = ds.identities[0].still.shape[1];
    ds.geometry.width = ds.identities[0].still.shape[2];
  }
  return ds;
}

}  // namespace stv::data
