#pragma once

#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uir/image.hpp"
#include "uir/rng.hpp"

namespace uir {

enum class AugKind { weak, strong, labeled };

enum class AugOp { resize, crop, rotate, color_jitter, gaussian_blur, gray_scale };

inline const char* to_string(AugKind k) {
  switch (k) {
    case AugKind::weak: return "weak";
    case AugKind::strong: return "strong";
    case AugKind::labeled: return "labeled";
  }
  return "?";
}

// Augmentation policy. `rng_seed` fully determines every random draw, so the
// same (image, policy) pair always produces the same output.
struct AugmentationPolicy {
  AugKind kind = AugKind::weak;
  int target_h = 0;
  int target_w = 0;
  uint64_t rng_seed = 0;
  std::set<AugOp> enabled_ops;

  // strong-augmentation parameter ranges
  double jitter_lo = 0.6;        // brightness/contrast/saturation factor range
  double jitter_hi = 1.4;
  double hue_delta = 0.1;        // hue shift drawn from [-hue_delta, hue_delta]
  double blur_sigma_lo = 0.1;
  double blur_sigma_hi = 2.0;
  double gray_prob = 0.2;

  static AugmentationPolicy weak_policy(int h, int w, uint64_t seed) {
    AugmentationPolicy p;
    p.kind = AugKind::weak;
    p.target_h = h;
    p.target_w = w;
    p.rng_seed = seed;
    p.enabled_ops = {AugOp::resize};
    return p;
  }

  static AugmentationPolicy strong_policy(int h, int w, uint64_t seed) {
    AugmentationPolicy p;
    p.kind = AugKind::strong;
    p.target_h = h;
    p.target_w = w;
    p.rng_seed = seed;
    p.enabled_ops = {AugOp::resize, AugOp::color_jitter, AugOp::gaussian_blur, AugOp::gray_scale};
    return p;
  }

  static AugmentationPolicy labeled_policy(int h, int w, uint64_t seed) {
    AugmentationPolicy p;
    p.kind = AugKind::labeled;
    p.target_h = h;
    p.target_w = w;
    p.rng_seed = seed;
    p.enabled_ops = {AugOp::resize, AugOp::crop, AugOp::rotate};
    return p;
  }

  void validate() const {
    require(target_h >= 8 && target_w >= 8, ErrorKind::InvalidPolicy,
            "target size below minimum resolution");
    const std::set<AugOp> strong_allowed = {AugOp::resize, AugOp::color_jitter,
                                            AugOp::gaussian_blur, AugOp::gray_scale};
    const std::set<AugOp> labeled_allowed = {AugOp::resize, AugOp::crop, AugOp::rotate};
    switch (kind) {
      case AugKind::weak:
        require(enabled_ops == std::set<AugOp>{AugOp::resize}, ErrorKind::InvalidPolicy,
                "weak policy must enable exactly {resize}");
        break;
      case AugKind::strong:
        require(enabled_ops.count(AugOp::resize) == 1, ErrorKind::InvalidPolicy,
                "strong policy must enable resize");
        for (AugOp op : enabled_ops)
          require(strong_allowed.count(op) == 1, ErrorKind::InvalidPolicy,
                  "strong policy enables a non-photometric op");
        break;
      case AugKind::labeled:
        for (AugOp op : enabled_ops)
          require(labeled_allowed.count(op) == 1, ErrorKind::InvalidPolicy,
                  "labeled policy enables a photometric op");
        if (enabled_ops.count(AugOp::rotate))
          require(target_h == target_w, ErrorKind::InvalidPolicy,
                  "rotation requires a square target");
        break;
    }
  }
};

namespace detail {

inline void trace_push(std::vector<std::string>* trace, const std::string& line) {
  if (trace) trace->push_back(line);
}

inline Image rotate90k(const Image& im, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return im;
  int h = im.height, w = im.width;
  Image out(k % 2 == 0 ? h : w, k % 2 == 0 ? w : h);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        // clockwise quarter turns
        switch (k) {
          case 1: out.at(c, x, h - 1 - y) = im.at(c, y, x); break;
          case 2: out.at(c, h - 1 - y, w - 1 - x) = im.at(c, y, x); break;
          case 3: out.at(c, w - 1 - x, y) = im.at(c, y, x); break;
        }
      }
  return out;
}

inline Image crop(const Image& im, int y0, int x0, int h, int w) {
  Image out(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = im.at(c, y0 + y, x0 + x);
  return out;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  double mx = std::max({r, g, b});
  double mn = std::min({r, g, b});
  double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1) { r1 = c; g1 = x; }
  else if (hp < 2) { r1 = x; g1 = c; }
  else if (hp < 3) { g1 = c; b1 = x; }
  else if (hp < 4) { g1 = x; b1 = c; }
  else if (hp < 5) { r1 = x; b1 = c; }
  else { r1 = c; b1 = x; }
  double m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

inline Image color_jitter(const Image& im, double fb, double fc, double fs, double dh) {
  Image out = im;
  size_t n = out.plane_size();
  double* r = out.plane(0);
  double* g = out.plane(1);
  double* b = out.plane(2);
  for (size_t i = 0; i < n; ++i) {
    double R = r[i] * fb, G = g[i] * fb, B = b[i] * fb;           // brightness
    R = 0.5 + fc * (R - 0.5);                                     // contrast about mid-gray
    G = 0.5 + fc * (G - 0.5);
    B = 0.5 + fc * (B - 0.5);
    double y = luma(R, G, B);                                     // saturation
    R = y + fs * (R - y);
    G = y + fs * (G - y);
    B = y + fs * (B - y);
    if (dh != 0.0) {
      R = std::clamp(R, 0.0, 1.0);
      G = std::clamp(G, 0.0, 1.0);
      B = std::clamp(B, 0.0, 1.0);
      double hh, ss, vv;
      rgb_to_hsv(R, G, B, hh, ss, vv);
      hsv_to_rgb(hh + dh, ss, vv, R, G, B);
    }
    r[i] = std::clamp(R, 0.0, 1.0);
    g[i] = std::clamp(G, 0.0, 1.0);
    b[i] = std::clamp(B, 0.0, 1.0);
  }
  return out;
}

inline Image to_grayscale(const Image& im) {
  Image out(im.height, im.width);
  std::vector<double> y = luminance_plane(im);
  for (int c = 0; c < 3; ++c)
    std::copy(y.begin(), y.end(), out.plane(c));
  return out;
}

}  // namespace detail

// Applies the policy. Geometry first, photometric ops after, all parameters
// drawn from Rng(policy.rng_seed) in a fixed order. Optional trace receives one
// line per applied op.
inline Image augment(const Image& im, const AugmentationPolicy& policy,
                     std::vector<std::string>* trace = nullptr) {
  policy.validate();
  Rng rng(policy.rng_seed);
  Image out = im;

  if (policy.kind == AugKind::labeled) {
    if (policy.enabled_ops.count(AugOp::crop)) {
      require(im.height >= policy.target_h && im.width >= policy.target_w,
              ErrorKind::InvalidPolicy, "crop target larger than source");
      int y0 = rng.uniform_int(im.height - policy.target_h + 1);
      int x0 = rng.uniform_int(im.width - policy.target_w + 1);
      out = detail::crop(out, y0, x0, policy.target_h, policy.target_w);
      detail::trace_push(trace, "crop y=" + std::to_string(y0) + " x=" + std::to_string(x0) +
                                    " h=" + std::to_string(policy.target_h) +
                                    " w=" + std::to_string(policy.target_w));
    } else if (policy.enabled_ops.count(AugOp::resize)) {
      out = resize_bilinear(out, policy.target_h, policy.target_w);
      detail::trace_push(trace, "resize h=" + std::to_string(policy.target_h) +
                                    " w=" + std::to_string(policy.target_w));
    }
    if (policy.enabled_ops.count(AugOp::rotate)) {
      int k = rng.uniform_int(4);
      out = detail::rotate90k(out, k);
      detail::trace_push(trace, "rotate k=" + std::to_string(k));
    }
    return out;
  }

  // weak and strong both start with a deterministic resize to the target
  out = resize_bilinear(out, policy.target_h, policy.target_w);
  detail::trace_push(trace, "resize h=" + std::to_string(policy.target_h) +
                                " w=" + std::to_string(policy.target_w));
  if (policy.kind == AugKind::weak) return out;

  if (policy.enabled_ops.count(AugOp::color_jitter)) {
    double fb = rng.uniform(policy.jitter_lo, policy.jitter_hi);
    double fc = rng.uniform(policy.jitter_lo, policy.jitter_hi);
    double fs = rng.uniform(policy.jitter_lo, policy.jitter_hi);
    double dh = rng.uniform(-policy.hue_delta, policy.hue_delta);
    out = detail::color_jitter(out, fb, fc, fs, dh);
    std::ostringstream os;
    os << "color_jitter b=" << fb << " c=" << fc << " s=" << fs << " h=" << dh;
    detail::trace_push(trace, os.str());
  }
  if (policy.enabled_ops.count(AugOp::gaussian_blur)) {
    double sigma = rng.uniform(policy.blur_sigma_lo, policy.blur_sigma_hi);
    int radius = static_cast<int>(std::ceil(2.0 * sigma));
    out = gaussian_blur(out, sigma, radius);
    std::ostringstream os;
    os << "gaussian_blur sigma=" << sigma << " radius=" << radius;
    detail::trace_push(trace, os.str());
  }
  if (policy.enabled_ops.count(AugOp::gray_scale)) {
    double u = rng.uniform();
    if (u < policy.gray_prob) {
      out = detail::to_grayscale(out);
      detail::trace_push(trace, "gray_scale");
    }
  }
  out.clamp01();
  return out;
}

// Applies one shared geometric transform to a registered pair.
inline std::pair<Image, Image> augment_pair(const Image& x, const Image& y,
                                            const AugmentationPolicy& policy,
                                            std::vector<std::string>* trace = nullptr) {
  require(x.same_size(y), ErrorKind::DimensionMismatch, "augment_pair operands differ in size");
  require(policy.kind == AugKind::labeled, ErrorKind::InvalidPolicy,
          "augment_pair requires a labeled policy");
  policy.validate();
  std::vector<std::string> local_trace;
  Image ax = augment(x, policy, &local_trace);
  // replaying the recorded draws on y applies the identical geometry
  Image ay = y;
  for (const std::string& line : local_trace) {
    std::istringstream is(line);
    std::string op;
    is >> op;
    if (op == "crop") {
      int y0 = 0, x0 = 0, h = 0, w = 0;
      std::string kv;
      while (is >> kv) {
        auto eq = kv.find('=');
        int v = std::stoi(kv.substr(eq + 1));
        if (kv[0] == 'y') y0 = v;
        else if (kv[0] == 'x') x0 = v;
        else if (kv[0] == 'h') h = v;
        else if (kv[0] == 'w') w = v;
      }
      ay = detail::crop(ay, y0, x0, h, w);
    } else if (op == "resize") {
      int h = 0, w = 0;
      std::string kv;
      while (is >> kv) {
        auto eq = kv.find('=');
        int v = std::stoi(kv.substr(eq + 1));
        if (kv[0] == 'h') h = v;
        else w = v;
      }
      ay = resize_bilinear(ay, h, w);
    } else if (op == "rotate") {
      std::string kv;
      is >> kv;
      ay = detail::rotate90k(ay, std::stoi(kv.substr(kv.find('=') + 1)));
    }
  }
  if (trace) trace->insert(trace->end(), local_trace.begin(), local_trace.end());
  return {std::move(ax), std::move(ay)};
}

// Replays the geometric ops of a recorded trace onto an image. Photometric
// records are ignored.
inline Image replay_geometric_trace(const Image& im, const std::vector<std::string>& trace) {
  Image out = im;
  for (const std::string& line : trace) {
    std::istringstream is(line);
    std::string op;
    is >> op;
    if (op == "crop") {
      int y0 = 0, x0 = 0, h = 0, w = 0;
      std::string kv;
      while (is >> kv) {
        auto eq = kv.find('=');
        int v = std::stoi(kv.substr(eq + 1));
        if (kv[0] == 'y') y0 = v;
        else if (kv[0] == 'x') x0 = v;
        else if (kv[0] == 'h') h = v;
        else if (kv[0] == 'w') w = v;
      }
      out = detail::crop(out, y0, x0, h, w);
    } else if (op == "resize") {
      int h = 0, w = 0;
      std::string kv;
      while (is >> kv) {
        auto eq = kv.find('=');
        int v = std::stoi(kv.substr(eq + 1));
        if (kv[0] == 'h') h = v;
        else w = v;
      }
      out = resize_bilinear(out, h, w);
    } else if (op == "rotate") {
      std::string kv;
      is >> kv;
      out = detail::rotate90k(out, std::stoi(kv.substr(kv.find('=') + 1)));
    }
  }
  return out;
}

}  // namespace uir
