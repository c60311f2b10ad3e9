#pragma once

#include <memory>
#include <string>
#include <vector>

#include "misod/nn/encoder.hpp"
#include "misod/nn/gim.hpp"

namespace misod {

// Table-III style configuration switches.
struct AblationFlags {
  bool branch_supervision = true;   // off: no S1/S2 heads, no L_d
  bool global_interaction = true;   // off: no GIM, no g path in MIBs, no L_g
  bool modality_interaction = true; // off: each branch sees only its own
                                    // previous output (late fusion)
  bool single_decoder = false;      // one stream on concatenated features
  bool share_branch_weights = false;
};

inline void validate_flags(const AblationFlags& f) {
  if (f.single_decoder && f.share_branch_weights)
    throw ConfigError(
        "single_decoder has one stream; share_branch_weights does not apply");
  if (f.single_decoder && !f.modality_interaction)
    throw ConfigError(
        "single_decoder fuses modalities structurally; it cannot be combined "
        "with modality_interaction=off");
}

// One multi-interaction block: fuses the previous decoded features (m), the
// current-level encoder features (a) and the global context (g), each
// adjusted to the a-level resolution and channel width, by plain summation.
template <typename T>
class MultiInteractionBlock {
 public:
  MultiInteractionBlock() = default;
  // g_in == 0 disables the global branch.
  MultiInteractionBlock(int m_in, int a_in, int g_in, int out, RngStream& rng,
                        int attention_reduction = 16)
      : ca_a_(a_in, rng, attention_reduction),
        conv_a_(a_in, out, 3, rng),
        ca_m_(m_in, rng, attention_reduction),
        conv_m_(m_in, out, 3, rng),
        use_global_(g_in > 0) {
    if (use_global_) conv_g_ = ConvBlock<T>(g_in, out, 3, rng);
    fuse_ = ConvBlock<T>(out, out, 3, rng);
  }

  Var<T> forward(const Var<T>& m_prev, const Var<T>& a, const Var<T>& g) {
    const int h = a.shape().h, w = a.shape().w;
    Var<T> a_t = conv_a_.forward(ca_a_.forward(a));
    Var<T> m_t = conv_m_.forward(resample(ca_m_.forward(m_prev), h, w));
    internal_check(a_t.shape() == m_t.shape(),
                   "mib: path shapes diverged after resampling");
    Var<T> acc = add(m_t, a_t);
    if (use_global_) {
      internal_check(g.defined(), "mib: global path enabled but no g given");
      Var<T> g_t = conv_g_.forward(resample(g, h, w));
      internal_check(g_t.shape() == a_t.shape(),
                     "mib: global path shape diverged");
      acc = add(acc, g_t);
    }
    return fuse_.forward(acc);
  }

  void set_training(bool on) {
    ca_a_.set_training(on);
    conv_a_.set_training(on);
    ca_m_.set_training(on);
    conv_m_.set_training(on);
    if (use_global_) conv_g_.set_training(on);
    fuse_.set_training(on);
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    ca_a_.collect(refs, join_name(prefix, "ca_a"));
    conv_a_.collect(refs, join_name(prefix, "conv_a"));
    ca_m_.collect(refs, join_name(prefix, "ca_m"));
    conv_m_.collect(refs, join_name(prefix, "conv_m"));
    if (use_global_) conv_g_.collect(refs, join_name(prefix, "conv_g"));
    fuse_.collect(refs, join_name(prefix, "fuse"));
  }

 private:
  ChannelAttention<T> ca_a_;
  ConvBlock<T> conv_a_;
  ChannelAttention<T> ca_m_;
  ConvBlock<T> conv_m_;
  ConvBlock<T> conv_g_;
  bool use_global_ = false;
  ConvBlock<T> fuse_;
};

// Final decoder state at the shallowest decoded level. In single-decoder
// mode only z_rgb is populated (the lone stream).
template <typename T>
struct MIBState {
  int level = 2;
  Var<T> z_rgb, z_t;
};

// The cascaded MIB decoder. Normal mode runs two mirrored branches whose m
// input is the channel-concatenation of both branches' previous outputs
// (bootstrap: [R5 || T5]).
template <typename T>
class SiameseDecoder {
 public:
  SiameseDecoder() = default;
  SiameseDecoder(const std::array<int, 4>& level_channels, int stem_channels,
                 int out_channels, int g_channels, const AblationFlags& flags,
                 bool with_stem_group, RngStream& rng,
                 int attention_reduction = 16)
      : flags_(flags), with_stem_group_(with_stem_group) {
    validate_flags(flags);
    const int c2 = level_channels[0], c3 = level_channels[1],
              c4 = level_channels[2], c5 = level_channels[3];
    const int g_in = flags.global_interaction ? g_channels : 0;
    const int out = out_channels;
    if (with_stem_group && stem_channels <= 0)
      throw ConfigError("stem MIB group requested but backbone has no stem");

    // per-level (m_in, a_in) wiring
    struct LevelSpec {
      int level, m_in, a_in;
    };
    std::vector<LevelSpec> specs;
    if (flags.single_decoder) {
      specs = {{4, 2 * c5, 2 * c4}, {3, out, 2 * c3}, {2, out, 2 * c2}};
      if (with_stem_group) specs.push_back({1, out, 2 * stem_channels});
    } else if (flags.modality_interaction) {
      specs = {{4, 2 * c5, c4}, {3, 2 * out, c3}, {2, 2 * out, c2}};
      if (with_stem_group) specs.push_back({1, 2 * out, stem_channels});
    } else {
      specs = {{4, c5, c4}, {3, out, c3}, {2, out, c2}};
      if (with_stem_group) specs.push_back({1, out, stem_channels});
    }
    for (const auto& s : specs) {
      levels_.push_back(s.level);
      rgb_blocks_.push_back(std::make_shared<MultiInteractionBlock<T>>(
          s.m_in, s.a_in, g_in, out, rng, attention_reduction));
      if (flags.single_decoder) {
        t_blocks_.push_back(nullptr);
      } else if (flags.share_branch_weights) {
        t_blocks_.push_back(rgb_blocks_.back());
      } else {
        t_blocks_.push_back(std::make_shared<MultiInteractionBlock<T>>(
            s.m_in, s.a_in, g_in, out, rng, attention_reduction));
      }
    }
  }

  // g may be undefined when global interaction is off; it is ignored then.
  MIBState<T> decode(const FeaturePyramid<T>& rgb, const FeaturePyramid<T>& t,
                     const Var<T>& g) {
    auto level_feature = [](const FeaturePyramid<T>& p, int level) {
      switch (level) {
        case 1: return p.stem;
        case 2: return p.level2;
        case 3: return p.level3;
        case 4: return p.level4;
        default: return p.level5;
      }
    };
    MIBState<T> state;
    if (flags_.single_decoder) {
      Var<T> m = concat_channels<T>({rgb.level5, t.level5});
      Var<T> z;
      for (std::size_t i = 0; i < levels_.size(); ++i) {
        Var<T> a = concat_channels<T>(
            {level_feature(rgb, levels_[i]), level_feature(t, levels_[i])});
        z = rgb_blocks_[i]->forward(m, a, g);
        m = z;
      }
      state.level = levels_.back();
      state.z_rgb = z;
      return state;
    }
    if (flags_.modality_interaction) {
      Var<T> m = concat_channels<T>({rgb.level5, t.level5});
      Var<T> z_r, z_t;
      for (std::size_t i = 0; i < levels_.size(); ++i) {
        z_r = rgb_blocks_[i]->forward(m, level_feature(rgb, levels_[i]), g);
        z_t = t_blocks_[i]->forward(m, level_feature(t, levels_[i]), g);
        m = concat_channels<T>({z_r, z_t});
      }
      state.level = levels_.back();
      state.z_rgb = z_r;
      state.z_t = z_t;
      return state;
    }
    // late fusion: each branch decodes on its own
    Var<T> m_r = rgb.level5, m_t = t.level5;
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      m_r = rgb_blocks_[i]->forward(m_r, level_feature(rgb, levels_[i]), g);
      m_t = t_blocks_[i]->forward(m_t, level_feature(t, levels_[i]), g);
    }
    state.level = levels_.back();
    state.z_rgb = m_r;
    state.z_t = m_t;
    return state;
  }

  bool single_stream() const { return flags_.single_decoder; }

  void set_training(bool on) {
    for (std::size_t i = 0; i < rgb_blocks_.size(); ++i) {
      rgb_blocks_[i]->set_training(on);
      if (t_blocks_[i] && t_blocks_[i] != rgb_blocks_[i])
        t_blocks_[i]->set_training(on);
    }
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    for (std::size_t i = 0; i < rgb_blocks_.size(); ++i) {
      const std::string lv = "mib" + std::to_string(levels_[i]);
      if (flags_.single_decoder) {
        rgb_blocks_[i]->collect(refs, join_name(prefix, "stream." + lv));
      } else if (flags_.share_branch_weights) {
        rgb_blocks_[i]->collect(refs, join_name(prefix, "shared." + lv));
      } else {
        rgb_blocks_[i]->collect(refs, join_name(prefix, "rgb." + lv));
        t_blocks_[i]->collect(refs, join_name(prefix, "t." + lv));
      }
    }
  }

 private:
  AblationFlags flags_;
  bool with_stem_group_ = false;
  std::vector<int> levels_;
  std::vector<std::shared_ptr<MultiInteractionBlock<T>>> rgb_blocks_;
  std::vector<std::shared_ptr<MultiInteractionBlock<T>>> t_blocks_;
};

// The four predicted maps; entries are undefined when the configuration
// removes them (s1/s2 under single_decoder or branch_supervision=off, sg
// under global_interaction=off).
template <typename T>
struct SaliencyOutputs {
  Var<T> s1, s2, sf, sg;
};

// Score heads: two branch heads, and the final head that fuses the two
// branch features by concatenation + channel attention.
template <typename T>
class SaliencyHeads {
 public:
  SaliencyHeads() = default;
  SaliencyHeads(int z_channels, bool branch_heads, bool single_stream,
                RngStream& rng, int attention_reduction = 16)
      : branch_heads_(branch_heads && !single_stream),
        single_stream_(single_stream) {
    const int fuse_in = single_stream ? z_channels : 2 * z_channels;
    fuse_ca_ = ChannelAttention<T>(fuse_in, rng, attention_reduction);
    score_f_ = Conv2dLayer<T>(fuse_in, 1, 1, 1, 0, /*bias=*/true, rng);
    if (branch_heads_) {
      score_1_ = Conv2dLayer<T>(z_channels, 1, 1, 1, 0, true, rng);
      score_2_ = Conv2dLayer<T>(z_channels, 1, 1, 1, 0, true, rng);
    }
  }

  // 1x1 score conv -> sigmoid -> bilinear resample to target
  Var<T> branch_score(const Conv2dLayer<T>& head, const Var<T>& z,
                      int target_h, int target_w) const {
    return resample(sigmoid(head.forward(z)), target_h, target_w);
  }

  SaliencyOutputs<T> forward(const MIBState<T>& state, int target_h,
                             int target_w) {
    SaliencyOutputs<T> out;
    Var<T> fused = single_stream_
                       ? state.z_rgb
                       : concat_channels<T>({state.z_rgb, state.z_t});
    out.sf = resample(sigmoid(score_f_.forward(fuse_ca_.forward(fused))),
                      target_h, target_w);
    if (branch_heads_) {
      out.s1 = branch_score(score_1_, state.z_rgb, target_h, target_w);
      out.s2 = branch_score(score_2_, state.z_t, target_h, target_w);
    }
    return out;
  }

  bool has_branch_heads() const { return branch_heads_; }

  void set_training(bool on) { fuse_ca_.set_training(on); }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    fuse_ca_.collect(refs, join_name(prefix, "fuse_ca"));
    score_f_.collect(refs, join_name(prefix, "score_f"));
    if (branch_heads_) {
      score_1_.collect(refs, join_name(prefix, "score_1"));
      score_2_.collect(refs, join_name(prefix, "score_2"));
    }
  }

 private:
  bool branch_heads_ = false;
  bool single_stream_ = false;
  ChannelAttention<T> fuse_ca_;
  Conv2dLayer<T> score_f_;
  Conv2dLayer<T> score_1_, score_2_;
};

enum class BackboneVariant { kVgg16, kResNet50, kResNet50Plus };

inline std::string backbone_variant_name(BackboneVariant v) {
  switch (v) {
    case BackboneVariant::kVgg16: return "vgg16";
    case BackboneVariant::kResNet50: return "resnet50";
    default: return "resnet50plus";
  }
}
inline BackboneVariant backbone_variant_from_name(const std::string& s) {
  if (s == "vgg16") return BackboneVariant::kVgg16;
  if (s == "resnet50") return BackboneVariant::kResNet50;
  if (s == "resnet50plus") return BackboneVariant::kResNet50Plus;
  throw ConfigError("unknown backbone variant: " + s);
}

struct NetworkConfig {
  BackboneVariant backbone = BackboneVariant::kVgg16;
  int width_div = 1;       // channel divisor for reduced test configurations
  int input_size = 352;
  int decoder_channels = 128;  // before width_div
  int gim_channels = 256;      // before width_div
  std::vector<int> pool_sizes = {1, 5, 9, 13};
  int attention_reduction = 16;
  AblationFlags ablation;
  std::uint64_t seed = 1;
};

template <typename T>
struct ForwardResult {
  SaliencyOutputs<T> maps;
  MIBState<T> state;  // final MIB state (z at the shallowest decoded level)
  Var<T> g;           // global context, undefined when the GIM is off
};

// The complete model: dual encoder, GIM, Siamese decoder, heads.
template <typename T>
class Network {
 public:
  explicit Network(const NetworkConfig& cfg) : cfg_(cfg) {
    validate_flags(cfg.ablation);
    if (cfg.input_size % 16 != 0)
      throw ConfigError("input_size must be divisible by 16");
    RngStream rng(cfg.seed);
    const Backbone bb = cfg.backbone == BackboneVariant::kVgg16
                            ? Backbone::kVgg16
                            : Backbone::kResNet50;
    encoder_ = std::make_unique<DualEncoder<T>>(bb, cfg.width_div, rng);
    const auto ch = encoder_->rgb().level_channels();
    const auto strides = encoder_->rgb().level_strides();
    const int gc = scaled_channels(cfg.gim_channels, cfg.width_div);
    const int dc = scaled_channels(cfg.decoder_channels, cfg.width_div);
    const int l5 = cfg.input_size / strides[3];
    if (cfg.ablation.global_interaction) {
      gim_ = std::make_unique<GlobalInfoModule<T>>(
          ch[3], gc, clipped_pool_sizes(cfg.pool_sizes, l5, l5), rng,
          cfg.attention_reduction);
    }
    const bool stem_group = cfg.backbone == BackboneVariant::kResNet50Plus;
    decoder_ = SiameseDecoder<T>(ch, encoder_->rgb().stem_channels(), dc, gc,
                                 cfg.ablation, stem_group, rng,
                                 cfg.attention_reduction);
    heads_ = SaliencyHeads<T>(dc, cfg.ablation.branch_supervision,
                              cfg.ablation.single_decoder, rng,
                              cfg.attention_reduction);
  }

  ForwardResult<T> forward(const Var<T>& rgb, const Var<T>& thermal) {
    if (!(rgb.shape() == thermal.shape()))
      throw InputError("modality pair shapes differ: " + rgb.shape().str() +
                       " vs " + thermal.shape().str());
    FeaturePyramid<T> pr = encoder_->extract(rgb, Stream::kRgb);
    FeaturePyramid<T> pt = encoder_->extract(thermal, Stream::kThermal);
    return forward_from_pyramids(pr, pt, rgb.shape().h, rgb.shape().w);
  }

  // Entry point below the encoder; tests use it to inject a perturbed g.
  ForwardResult<T> forward_from_pyramids(const FeaturePyramid<T>& pr,
                                         const FeaturePyramid<T>& pt,
                                         int target_h, int target_w,
                                         const Var<T>& g_override = {}) {
    ForwardResult<T> out;
    Var<T> g = g_override;
    Var<T> s_g;
    if (gim_ && !g_override.defined()) {
      GlobalContext<T> ctx = gim_->forward(pr.level5, pt.level5);
      g = ctx.g;
      s_g = ctx.s_g;
    }
    out.state = decoder_.decode(pr, pt, g);
    out.maps = heads_.forward(out.state, target_h, target_w);
    if (cfg_.ablation.global_interaction) {
      out.maps.sg = s_g;
      out.g = g;
    }
    return out;
  }

  DualEncoder<T>& encoder() { return *encoder_; }
  GlobalInfoModule<T>* gim() { return gim_.get(); }
  SiameseDecoder<T>& decoder() { return decoder_; }
  SaliencyHeads<T>& heads() { return heads_; }
  const NetworkConfig& config() const { return cfg_; }

  void set_training(bool on) {
    encoder_->set_training(on);
    if (gim_) gim_->set_training(on);
    decoder_.set_training(on);
    heads_.set_training(on);
  }

  void collect(ParamRefs<T>& refs) {
    encoder_->collect(refs, "encoder");
    if (gim_) gim_->collect(refs, "gim");
    decoder_.collect(refs, "decoder");
    heads_.collect(refs, "heads");
  }

 private:
  NetworkConfig cfg_;
  std::unique_ptr<DualEncoder<T>> encoder_;
  std::unique_ptr<GlobalInfoModule<T>> gim_;
  SiameseDecoder<T> decoder_;
  SaliencyHeads<T> heads_;
};

}  // namespace misod
