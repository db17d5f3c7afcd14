#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "uir/autodiff.hpp"
#include "uir/checkpoint.hpp"
#include "uir/image.hpp"
#include "uir/rng.hpp"

namespace uir {

// Restoration network configuration. Three parallel streams at scales
// 1, 1/2, 1/4 with channel widths C, 2C, 4C; a dilated-convolution block (MDB)
// heads each stream, the full-resolution stream carries the illumination
// guidance block (IGB), the two lower streams carry non-local attention when
// enabled, and every stream ends in a residual contextual block (RCB).
// Attention feature fusion (AFF) merges streams and branches.
struct ModelConfig {
  int base_channels = 8;
  int num_streams = 3;  // fixed
  std::vector<int> mdb_dilations{1, 2, 3, 4};
  bool use_nlsa = false;
  bool use_deformable = false;
  int patch_h = 32;
  int patch_w = 32;

  void validate() const {
    require(num_streams == 3, ErrorKind::InvalidConfig, "num_streams is fixed at 3");
    require(!mdb_dilations.empty(), ErrorKind::InvalidConfig, "mdb_dilations must be non-empty");
    for (int d : mdb_dilations)
      require(d >= 1, ErrorKind::InvalidConfig, "mdb dilation rates must be >= 1");
    require(base_channels >= static_cast<int>(mdb_dilations.size()) &&
                base_channels % static_cast<int>(mdb_dilations.size()) == 0,
            ErrorKind::InvalidConfig, "base_channels must be a positive multiple of the dilation count");
    int div = 1 << (num_streams - 1);
    require(patch_h % div == 0 && patch_w % div == 0, ErrorKind::InvalidConfig,
            "patch size must be divisible by " + std::to_string(div));
    require(patch_h >= 8 && patch_w >= 8, ErrorKind::InvalidConfig, "patch below minimum size");
  }

  std::string digest_string() const {
    std::string s = "aimnet|c=" + std::to_string(base_channels) + "|streams=" +
                    std::to_string(num_streams) + "|dil=";
    for (size_t i = 0; i < mdb_dilations.size(); ++i)
      s += (i ? "," : "") + std::to_string(mdb_dilations[i]);
    s += std::string("|nlsa=") + (use_nlsa ? "1" : "0");
    s += std::string("|deform=") + (use_deformable ? "1" : "0");
    return s;
  }
  uint64_t digest() const { return fnv1a64(digest_string()); }

  // Calibrated toward the published parameter budget (~1.675M); exact widths
  // are not public, so this approaches rather than matches the count.
  static ModelConfig paper_scale() {
    ModelConfig c;
    c.base_channels = 44;
    c.use_nlsa = true;
    c.use_deformable = true;
    c.patch_h = 256;
    c.patch_w = 256;
    return c;
  }

  static ModelConfig desk() {
    ModelConfig c;
    c.base_channels = 8;
    c.patch_h = 32;
    c.patch_w = 32;
    return c;
  }
};

struct ModelWeights {
  std::map<std::string, Tensor> params;
  int version = 1;

  bool all_finite() const {
    for (const auto& [k, v] : params)
      if (!v.all_finite()) return false;
    return true;
  }
};

struct ModelOutput {
  Tensor restored;  // (3,H,W), pre-clamp
  Tensor gradient;  // (1,H,W)
};

namespace aimnet_detail {

struct ParamDef {
  std::string name;
  std::vector<int> dims;
  int fan_in;
};

inline void conv_def(std::vector<ParamDef>& defs, const std::string& name, int cout, int cin,
                     int k) {
  defs.push_back({name + ".w", {cout, cin, k, k}, cin * k * k});
  defs.push_back({name + ".b", {cout}, cin * k * k});
}

inline void rcb_defs(std::vector<ParamDef>& defs, const std::string& prefix, int c) {
  int hidden = std::max(c / 4, 1);
  conv_def(defs, prefix + ".c1", c, c, 3);
  conv_def(defs, prefix + ".c2", c, c, 3);
  conv_def(defs, prefix + ".ca1", hidden, c, 1);
  conv_def(defs, prefix + ".ca2", c, hidden, 1);
}

inline void aff_defs(std::vector<ParamDef>& defs, const std::string& prefix, int c) {
  int hidden = std::max(c / 4, 1);
  conv_def(defs, prefix + ".z", c, 2 * c, 1);
  conv_def(defs, prefix + ".l1", hidden, c, 1);
  conv_def(defs, prefix + ".l2", c, hidden, 1);
  conv_def(defs, prefix + ".g1", hidden, c, 1);
  conv_def(defs, prefix + ".g2", c, hidden, 1);
}

inline std::vector<ParamDef> param_defs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamDef> defs;
  int C = cfg.base_channels;
  int D = static_cast<int>(cfg.mdb_dilations.size());

  conv_def(defs, "head", C, 3, 3);
  conv_def(defs, "illum", C, 1, 3);
  conv_def(defs, "down1", 2 * C, C, 3);
  conv_def(defs, "down2", 4 * C, 2 * C, 3);

  for (int s = 0; s < cfg.num_streams; ++s) {
    int cs = C << s;
    std::string sp = "s" + std::to_string(s);
    for (int i = 0; i < D; ++i)
      conv_def(defs, sp + ".mdb.b" + std::to_string(i), cs / D, cs, 3);
    conv_def(defs, sp + ".mdb.fuse", cs, cs, 1);
    if (s == 0) {
      conv_def(defs, sp + ".igb.sft", cs, cs, 3);
      conv_def(defs, sp + ".igb.gamma", cs, cs, 3);
      conv_def(defs, sp + ".igb.beta", cs, cs, 3);
      conv_def(defs, sp + ".igb.conv", cs, cs, 3);
      if (cfg.use_deformable) conv_def(defs, sp + ".igb.offset", 18, cs, 3);
    }
    if (s > 0 && cfg.use_nlsa) {
      int cq = std::max(cs / 2, 1);
      conv_def(defs, sp + ".nlsa.q", cq, cs, 1);
      conv_def(defs, sp + ".nlsa.k", cq, cs, 1);
      conv_def(defs, sp + ".nlsa.v", cs, cs, 1);
      conv_def(defs, sp + ".nlsa.out", cs, cs, 1);
    }
    rcb_defs(defs, sp + ".rcb", cs);
  }

  conv_def(defs, "up1", C, 2 * C, 1);
  conv_def(defs, "up2", C, 4 * C, 1);
  aff_defs(defs, "aff01", C);
  aff_defs(defs, "aff012", C);

  conv_def(defs, "gb.c1", C, 1, 3);
  conv_def(defs, "gb.c2", C, 2 * C, 3);
  rcb_defs(defs, "gb.rcb1", C);
  rcb_defs(defs, "gb.rcb2", C);
  conv_def(defs, "gb.c3", C, C, 3);

  aff_defs(defs, "afff", C);
  conv_def(defs, "out", 4, C, 3);
  return defs;
}

}  // namespace aimnet_detail

// Deterministic fan-in-scaled uniform initialization; each parameter draws
// from a stream derived from (seed, name), so the name set alone fixes the
// result regardless of construction order.
inline ModelWeights build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelWeights w;
  for (const auto& def : aimnet_detail::param_defs(cfg)) {
    Tensor t(def.dims);
    Rng rng(derive_seed(seed, def.name));
    double bound = std::sqrt(1.0 / def.fan_in);
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    w.params.emplace(def.name, std::move(t));
  }
  return w;
}

inline int64_t count_parameters(const ModelWeights& w) {
  int64_t n = 0;
  for (const auto& [k, v] : w.params) n += v.numel();
  return n;
}

// Tape-level forward pass shared by training and inference.
class ModelGraph {
 public:
  ModelGraph(ad::Tape& t, const ModelConfig& cfg, const ModelWeights& weights, bool trainable)
      : t_(t), cfg_(cfg) {
    for (const auto& [name, tensor] : weights.params)
      vars_.emplace(name, t_.leaf(tensor, trainable));
  }

  // Access to parameter leaves (for gradient readout after backward).
  const std::map<std::string, ad::Var>& param_vars() const { return vars_; }

  std::pair<ad::Var, ad::Var> forward(ad::Var x, ad::Var xl, ad::Var grad_in) {
    const Tensor& xv = t_.value(x);
    require(xv.ndim() == 3 && xv.dim(0) == 3, ErrorKind::ShapeMismatch, "input must be (3,H,W)");
    int H = xv.dim(1), W = xv.dim(2);
    int div = 1 << (cfg_.num_streams - 1);
    require(H % div == 0 && W % div == 0, ErrorKind::ShapeMismatch,
            "spatial size must be divisible by " + std::to_string(div));
    const Tensor& lv = t_.value(xl);
    require(lv.dim(1) == H && lv.dim(2) == W, ErrorKind::ShapeMismatch,
            "illumination map size mismatch");

    using namespace ad;
    Var f0 = lrelu(t_, conv(x, "head"));
    Var il = lrelu(t_, conv(xl, "illum"));
    Var d1 = lrelu(t_, conv(f0, "down1", 2));
    Var d2 = lrelu(t_, conv(d1, "down2", 2));

    std::vector<Var> stream_out(3);
    Var stream_in[3] = {f0, d1, d2};
    for (int s = 0; s < 3; ++s) {
      std::string sp = "s" + std::to_string(s);
      Var h = mdb(stream_in[s], sp + ".mdb");
      if (s == 0) h = igb(h, il, sp + ".igb");
      if (s > 0 && cfg_.use_nlsa) h = nlsa(h, sp + ".nlsa");
      stream_out[s] = rcb(h, sp + ".rcb");
    }

    Var u1 = conv(ad::bilinear_resize(t_, stream_out[1], H, W), "up1");
    Var u2 = conv(ad::bilinear_resize(t_, stream_out[2], H, W), "up2");
    Var r01 = aff(stream_out[0], u1, "aff01");
    Var restored_feat = aff(r01, u2, "aff012");

    // gradient branch: coarse gradient map plus full-resolution stream features
    Var g1 = lrelu(t_, conv(grad_in, "gb.c1"));
    Var g2 = lrelu(t_, conv(concat_channels(t_, {g1, stream_out[0]}), "gb.c2"));
    Var g3 = rcb(g2, "gb.rcb1");
    g3 = rcb(g3, "gb.rcb2");
    Var grad_feat = conv(g3, "gb.c3");

    Var fused = aff(restored_feat, grad_feat, "afff");
    Var out4 = conv(fused, "out");
    Var restored = slice_channels(t_, out4, 0, 3);
    Var gmap = slice_channels(t_, out4, 3, 1);
    return {restored, gmap};
  }

 private:
  ad::Var pv(const std::string& name) const {
    auto it = vars_.find(name);
    require(it != vars_.end(), ErrorKind::InvalidConfig, "missing model parameter " + name);
    return it->second;
  }

  ad::Var conv(ad::Var x, const std::string& name, int stride = 1, int dil = 1) {
    return ad::conv2d(t_, x, pv(name + ".w"), pv(name + ".b"), stride, dil);
  }

  ad::Var mdb(ad::Var x, const std::string& prefix) {
    std::vector<ad::Var> branches;
    for (size_t i = 0; i < cfg_.mdb_dilations.size(); ++i) {
      int d = cfg_.mdb_dilations[i];
      branches.push_back(
          ad::lrelu(t_, conv(x, prefix + ".b" + std::to_string(i), 1, d)));
    }
    ad::Var z = conv(ad::concat_channels(t_, branches), prefix + ".fuse");
    return ad::lrelu(t_, ad::add(t_, z, x));
  }

  // spatial feature transformation from the illumination features, then a
  // (possibly deformable) convolution
  ad::Var igb(ad::Var x, ad::Var illum_feat, const std::string& prefix) {
    ad::Var sft = ad::lrelu(t_, conv(illum_feat, prefix + ".sft"));
    ad::Var gamma = conv(sft, prefix + ".gamma");
    ad::Var beta = conv(sft, prefix + ".beta");
    ad::Var modulated = ad::add(t_, ad::add(t_, x, ad::mul(t_, x, gamma)), beta);
    if (cfg_.use_deformable) {
      ad::Var offsets = conv(modulated, prefix + ".offset");
      return ad::lrelu(t_, ad::deform_conv2d(t_, modulated, offsets, pv(prefix + ".conv.w"),
                                             pv(prefix + ".conv.b")));
    }
    return ad::lrelu(t_, conv(modulated, prefix + ".conv"));
  }

  // non-local attention against a pooled key/value grid (at most 16x16)
  ad::Var nlsa(ad::Var x, const std::string& prefix) {
    const Tensor& xv = t_.value(x);
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    int ph = std::min(H, 16), pw = std::min(W, 16);
    ad::Var pooled = ad::adaptive_avg_pool(t_, x, ph, pw);
    ad::Var q = conv(x, prefix + ".q");
    ad::Var k = conv(pooled, prefix + ".k");
    ad::Var v = conv(pooled, prefix + ".v");
    int cq = t_.value(q).dim(0);
    int P = ph * pw;
    ad::Var qm = ad::reshape(t_, q, {cq, H * W});
    ad::Var km = ad::reshape(t_, k, {cq, P});
    ad::Var vm = ad::reshape(t_, v, {C, P});
    ad::Var scores = ad::scale(t_, ad::matmul(t_, qm, km, true, false), 1.0 / std::sqrt(cq));
    ad::Var att = ad::softmax_rows(t_, scores);               // (HW, P)
    ad::Var o = ad::matmul(t_, vm, att, false, true);         // (C, HW)
    ad::Var omap = ad::reshape(t_, o, {C, H, W});
    return ad::add(t_, x, conv(omap, prefix + ".out"));
  }

  ad::Var rcb(ad::Var x, const std::string& prefix) {
    ad::Var r = ad::lrelu(t_, conv(x, prefix + ".c1"));
    r = conv(r, prefix + ".c2");
    ad::Var ca = ad::global_avg_pool(t_, r);
    ca = ad::relu(t_, conv(ca, prefix + ".ca1"));
    ca = ad::sigmoid(t_, conv(ca, prefix + ".ca2"));
    r = ad::mul_channel(t_, r, ca);
    return ad::add(t_, x, r);
  }

  // A = sigmoid(local(Z) + global(Z)) with Z = 1x1 conv of the concatenation;
  // output blends the two inputs: Y + A*(X-Y).
  ad::Var aff(ad::Var x, ad::Var y, const std::string& prefix) {
    ad::Var z = conv(ad::concat_channels(t_, {x, y}), prefix + ".z");
    ad::Var loc = conv(ad::lrelu(t_, conv(ad::avg_pool3x3_same(t_, z), prefix + ".l1")),
                       prefix + ".l2");
    ad::Var glob = conv(ad::lrelu(t_, conv(ad::global_avg_pool(t_, z), prefix + ".g1")),
                        prefix + ".g2");
    ad::Var a = ad::sigmoid(t_, ad::add_channel(t_, loc, glob));
    return ad::add(t_, y, ad::mul(t_, a, ad::sub(t_, x, y)));
  }

  ad::Tape& t_;
  const ModelConfig& cfg_;
  std::map<std::string, ad::Var> vars_;
};

// Plain forward: deterministic inference given weights and inputs.
inline ModelOutput forward(const ModelWeights& weights, const Image& x,
                           const IlluminationMap& xl, const ModelConfig& cfg) {
  require(x.height == xl.height && x.width == xl.width, ErrorKind::ShapeMismatch,
          "image and illumination map size mismatch");
  ad::Tape t;
  ModelGraph graph(t, cfg, weights, false);
  ad::Var vx = t.constant(x.to_tensor());
  ad::Var vl = t.constant(xl.to_tensor());
  ad::Var vg = t.constant(gradient_map(x).to_tensor());
  auto [restored, gmap] = graph.forward(vx, vl, vg);
  ModelOutput out{t.value(restored), t.value(gmap)};
  require(out.restored.all_finite() && out.gradient.all_finite(), ErrorKind::NonFiniteActivation,
          "non-finite activation in forward pass");
  return out;
}

}  // namespace uir
