#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "uir/autodiff.hpp"
#include "uir/checkpoint.hpp"
#include "uir/rng.hpp"
#include "uir/tensor.hpp"

namespace uir {

// Two fixed-backbone profiles:
//  - perceptual16: taps at the second rectifier of stages 1-2 and the third of
//    stage 3 (relu1_2, relu2_2, relu3_3).
//  - contrastive19: taps at the first rectifier of each stage (relu1_1 ..
//    relu5_1), default tap weights 1/32, 1/16, 1/8, 1/4, 1.
enum class ExtractorProfile { perceptual16, contrastive19 };

inline const char* to_string(ExtractorProfile p) {
  return p == ExtractorProfile::perceptual16 ? "perceptual16" : "contrastive19";
}

struct FeatureExtractorConfig {
  ExtractorProfile profile = ExtractorProfile::perceptual16;
  int num_stages = 0;              // 0 selects the profile default (3 or 5)
  std::vector<int> stage_widths;   // empty selects the profile default
  std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
  std::array<double, 3> norm_std{0.229, 0.224, 0.225};

  int stages() const {
    if (num_stages > 0) return num_stages;
    return profile == ExtractorProfile::perceptual16 ? 3 : 5;
  }

  std::vector<int> widths() const {
    if (!stage_widths.empty()) return stage_widths;
    std::vector<int> def = profile == ExtractorProfile::perceptual16
                               ? std::vector<int>{64, 128, 256}
                               : std::vector<int>{64, 128, 256, 512, 512};
    def.resize(stages(), def.back());
    return def;
  }

  // convolutions per stage, counted up to and including the tap
  std::vector<int> convs_per_stage() const {
    int n = stages();
    std::vector<int> out;
    if (profile == ExtractorProfile::perceptual16) {
      std::vector<int> full{2, 2, 3};
      for (int i = 0; i < n; ++i) out.push_back(full[std::min<size_t>(i, full.size() - 1)]);
    } else {
      // all stages but the last need their full conv stack to feed the next
      // stage; the last stage only needs conv1 for its tap
      std::vector<int> full{2, 2, 4, 4, 4};
      for (int i = 0; i < n - 1; ++i) out.push_back(full[std::min<size_t>(i, full.size() - 1)]);
      out.push_back(1);
    }
    return out;
  }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> names;
    auto convs = convs_per_stage();
    for (int s = 0; s < stages(); ++s) {
      int tap_conv = profile == ExtractorProfile::perceptual16 ? convs[s] : 1;
      names.push_back("relu" + std::to_string(s + 1) + "_" + std::to_string(tap_conv));
    }
    return names;
  }

  int min_input() const { return 2 << (stages() - 1); }  // >=2 px at the deepest tap

  std::string digest_string() const {
    std::string s = std::string("fx|") + to_string(profile) + "|stages=" + std::to_string(stages());
    for (int w : widths()) s += "," + std::to_string(w);
    return s;
  }
  uint64_t digest() const { return fnv1a64(digest_string()); }
};

class FeatureExtractor {
 public:
  static FeatureExtractor seeded_random(FeatureExtractorConfig cfg, uint64_t seed) {
    FeatureExtractor fx;
    fx.cfg_ = std::move(cfg);
    for (const auto& def : fx.param_defs()) {
      Tensor t(def.dims);
      Rng rng(derive_seed(seed, def.name));
      double bound = std::sqrt(1.0 / def.fan_in);
      for (double& v : t.data) v = rng.uniform(-bound, bound);
      fx.weights_.emplace(def.name, std::move(t));
    }
    return fx;
  }

  static FeatureExtractor from_checkpoint(const std::filesystem::path& path,
                                          const FeatureExtractorConfig& cfg) {
    Checkpoint ck = Checkpoint::load(path);
    require(ck.config_digest == cfg.digest(), ErrorKind::InvalidConfig,
            "extractor checkpoint does not match config: " + path.string());
    FeatureExtractor fx;
    fx.cfg_ = cfg;
    for (const auto& def : fx.param_defs()) {
      auto it = ck.arrays.find(def.name);
      require(it != ck.arrays.end(), ErrorKind::InvalidConfig,
              "extractor checkpoint missing " + def.name);
      require(it->second.dims == def.dims, ErrorKind::ShapeMismatch,
              "extractor array shape mismatch for " + def.name);
      fx.weights_.emplace(def.name, it->second);
    }
    return fx;
  }

  void save_checkpoint(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.config_digest = cfg_.digest();
    ck.metadata["kind"] = "feature_extractor";
    ck.metadata["config"] = cfg_.digest_string();
    ck.arrays = weights_;
    ck.save(path);
  }

  const FeatureExtractorConfig& config() const { return cfg_; }
  std::vector<std::string> tap_names() const { return cfg_.tap_names(); }
  int min_input() const { return cfg_.min_input(); }

  // Default contrastive tap weights: the last K entries of 1/32,1/16,1/8,1/4,1.
  std::vector<double> default_tap_weights() const {
    std::vector<double> full{1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0};
    int n = cfg_.stages();
    return std::vector<double>(full.end() - n, full.end());
  }

  // Builds the tap subgraph on a tape. Weights enter as frozen leaves, so
  // gradients flow to the input but never to the extractor.
  std::vector<ad::Var> extract_vars(ad::Tape& t, ad::Var x) const {
    const Tensor& xv = t.value(x);
    require(xv.ndim() == 3 && xv.dim(0) == 3, ErrorKind::ShapeMismatch,
            "extractor input must be (3,H,W)");
    require(xv.dim(1) >= min_input() && xv.dim(2) >= min_input(), ErrorKind::InputTooSmall,
            "extractor input below minimum " + std::to_string(min_input()));

    std::vector<double> scale(3), shift(3);
    for (int c = 0; c < 3; ++c) {
      scale[c] = 1.0 / cfg_.norm_std[c];
      shift[c] = -cfg_.norm_mean[c] / cfg_.norm_std[c];
    }
    ad::Var h = ad::channel_affine(t, x, scale, shift);

    std::vector<ad::Var> taps;
    auto convs = cfg_.convs_per_stage();
    int tap_conv_first = cfg_.profile == ExtractorProfile::contrastive19;
    for (int s = 0; s < cfg_.stages(); ++s) {
      if (s > 0) h = ad::maxpool2(t, h);
      for (int c = 0; c < convs[s]; ++c) {
        h = ad::conv2d(t, h, pvar(t, layer_name(s, c) + ".w"), pvar(t, layer_name(s, c) + ".b"));
        h = ad::relu(t, h);
        bool is_tap = tap_conv_first ? (c == 0) : (c == convs[s] - 1);
        if (is_tap) taps.push_back(h);
      }
    }
    return taps;
  }

  std::map<std::string, Tensor> extract(const Tensor& x) const {
    ad::Tape t;
    ad::Var vx = t.constant(x);
    std::vector<ad::Var> taps = extract_vars(t, vx);
    std::map<std::string, Tensor> out;
    auto names = tap_names();
    for (size_t i = 0; i < taps.size(); ++i) out.emplace(names[i], t.value(taps[i]));
    return out;
  }

  const std::map<std::string, Tensor>& weights() const { return weights_; }

 private:
  struct ParamDef {
    std::string name;
    std::vector<int> dims;
    int fan_in;
  };

  static std::string layer_name(int stage, int conv) {
    return "stage" + std::to_string(stage + 1) + ".conv" + std::to_string(conv + 1);
  }

  std::vector<ParamDef> param_defs() const {
    std::vector<ParamDef> defs;
    auto widths = cfg_.widths();
    auto convs = cfg_.convs_per_stage();
    int cin = 3;
    for (int s = 0; s < cfg_.stages(); ++s) {
      for (int c = 0; c < convs[s]; ++c) {
        int cout = widths[s];
        int fan = cin * 9;
        defs.push_back({layer_name(s, c) + ".w", {cout, cin, 3, 3}, fan});
        defs.push_back({layer_name(s, c) + ".b", {cout}, fan});
        cin = cout;
      }
    }
    return defs;
  }

  ad::Var pvar(ad::Tape& t, const std::string& name) const {
    auto it = weights_.find(name);
    require(it != weights_.end(), ErrorKind::InvalidConfig, "extractor missing weight " + name);
    return t.leaf(it->second, false);
  }

  FeatureExtractorConfig cfg_;
  std::map<std::string, Tensor> weights_;
};

// Weighted sum over taps of mean absolute feature difference. Taps missing
// from `tap_weights` contribute zero.
inline double feature_distance(const FeatureExtractor& fx, const Tensor& a, const Tensor& b,
                               const std::map<std::string, double>& tap_weights) {
  require(a.dims == b.dims, ErrorKind::ShapeMismatch, "feature_distance operand shape mismatch");
  for (const auto& [name, w] : tap_weights)
    require(w >= 0.0, ErrorKind::NegativeWeight, "negative tap weight for " + name);
  auto fa = fx.extract(a);
  auto fb = fx.extract(b);
  double total = 0.0;
  for (const auto& [name, w] : tap_weights) {
    if (w == 0.0) continue;
    auto ita = fa.find(name);
    if (ita == fa.end()) continue;
    const Tensor& ta = ita->second;
    const Tensor& tb = fb.at(name);
    double acc = 0.0;
    for (size_t i = 0; i < ta.data.size(); ++i) acc += std::fabs(ta.data[i] - tb.data[i]);
    total += w * acc / static_cast<double>(ta.numel());
  }
  return total;
}

}  // namespace uir
