#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "misod/core/serialize.hpp"
#include "misod/nn/blocks.hpp"

namespace misod {

enum class Backbone { kVgg16, kResNet50 };

inline std::string backbone_name(Backbone b) {
  return b == Backbone::kVgg16 ? "vgg16" : "resnet50";
}
inline Backbone backbone_from_name(const std::string& s) {
  if (s == "vgg16") return Backbone::kVgg16;
  if (s == "resnet50") return Backbone::kResNet50;
  throw ConfigError("unknown backbone: " + s);
}

enum class Stream { kRgb, kThermal };

// Per-modality encoded features. Levels 2..5 carry strides {4, 8, 16, 16}
// for vgg16 (the level-5 stage keeps stride 16 because its trailing pool is
// removed) and {4, 8, 16, 32} for resnet50. `stem` is only populated by
// resnet50 (stride-4 features ahead of the residual stages).
template <typename T>
struct FeaturePyramid {
  Var<T> level2, level3, level4, level5;
  Var<T> stem;
  Backbone backbone_id = Backbone::kVgg16;
};

template <typename T>
struct BackboneBase {
  virtual ~BackboneBase() = default;
  virtual FeaturePyramid<T> forward(const Var<T>& x) = 0;
  virtual void collect(ParamRefs<T>& refs, const std::string& prefix) = 0;
  virtual void set_training(bool on) = 0;
  virtual Backbone id() const = 0;
  virtual std::array<int, 4> level_channels() const = 0;
  virtual std::array<int, 4> level_strides() const = 0;
  virtual int stem_channels() const = 0;
};

inline int scaled_channels(int base, int width_div) {
  return std::max(1, base / std::max(1, width_div));
}

inline void check_encoder_input(const Shape4& s) {
  if (s.c != 3)
    throw InputError("encoder input must have 3 channels, got " +
                     std::to_string(s.c));
  if (s.h % 16 != 0 || s.w % 16 != 0)
    throw InputError("encoder input size " + std::to_string(s.h) + "x" +
                     std::to_string(s.w) + " is not divisible by 16");
}

// Truncated VGG16: the 13 conv layers with the last pooling stage removed,
// so the conv5 block stays at stride 16. Shallowest (stride-1/2) features
// are not exposed.
template <typename T>
class Vgg16Backbone : public BackboneBase<T> {
 public:
  Vgg16Backbone(int width_div, RngStream& rng) : width_div_(width_div) {
    static constexpr int kBase[13] = {64,  64,  128, 128, 256, 256, 256,
                                      512, 512, 512, 512, 512, 512};
    int in_c = 3;
    convs_.reserve(13);
    for (int i = 0; i < 13; ++i) {
      const int out_c = scaled_channels(kBase[i], width_div);
      convs_.emplace_back(in_c, out_c, 3, 1, 1, /*bias=*/true, rng);
      in_c = out_c;
    }
  }

  FeaturePyramid<T> forward(const Var<T>& x) override {
    check_encoder_input(x.shape());
    FeaturePyramid<T> pyr;
    pyr.backbone_id = Backbone::kVgg16;
    Var<T> h = x;
    auto stage = [&](int first, int count) {
      for (int i = first; i < first + count; ++i)
        h = relu(convs_[i].forward(h));
    };
    stage(0, 2);
    h = max_pool2d(h, 2, 2);
    stage(2, 2);
    h = max_pool2d(h, 2, 2);
    pyr.level2 = h;
    stage(4, 3);
    h = max_pool2d(h, 2, 2);
    pyr.level3 = h;
    stage(7, 3);
    h = max_pool2d(h, 2, 2);
    pyr.level4 = h;
    stage(10, 3);
    pyr.level5 = h;
    return pyr;
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) override {
    static constexpr const char* kNames[13] = {
        "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2",
        "conv3_3", "conv4_1", "conv4_2", "conv4_3", "conv5_1", "conv5_2",
        "conv5_3"};
    for (int i = 0; i < 13; ++i)
      convs_[i].collect(refs, join_name(prefix, kNames[i]));
  }

  void set_training(bool) override {}  // no normalization layers

  Backbone id() const override { return Backbone::kVgg16; }
  std::array<int, 4> level_channels() const override {
    return {scaled_channels(128, width_div_), scaled_channels(256, width_div_),
            scaled_channels(512, width_div_),
            scaled_channels(512, width_div_)};
  }
  std::array<int, 4> level_strides() const override { return {4, 8, 16, 16}; }
  int stem_channels() const override { return 0; }

 private:
  int width_div_;
  std::vector<Conv2dLayer<T>> convs_;
};

template <typename T>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(int in_c, int mid_c, int out_c, int stride, RngStream& rng)
      : conv1_(in_c, mid_c, 1, 1, 0, false, rng),
        bn1_(mid_c),
        conv2_(mid_c, mid_c, 3, stride, 1, false, rng),
        bn2_(mid_c),
        conv3_(mid_c, out_c, 1, 1, 0, false, rng),
        bn3_(out_c),
        has_down_(stride != 1 || in_c != out_c) {
    if (has_down_) {
      down_conv_ = Conv2dLayer<T>(in_c, out_c, 1, stride, 0, false, rng);
      down_bn_ = BatchNorm2dLayer<T>(out_c);
    }
  }

  Var<T> forward(const Var<T>& x) {
    Var<T> h = relu(bn1_.forward(conv1_.forward(x)));
    h = relu(bn2_.forward(conv2_.forward(h)));
    h = bn3_.forward(conv3_.forward(h));
    Var<T> skip = has_down_ ? down_bn_.forward(down_conv_.forward(x)) : x;
    return relu(add(h, skip));
  }

  void set_training(bool on) {
    bn1_.set_training(on);
    bn2_.set_training(on);
    bn3_.set_training(on);
    if (has_down_) down_bn_.set_training(on);
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    conv1_.collect(refs, join_name(prefix, "conv1"));
    bn1_.collect(refs, join_name(prefix, "bn1"));
    conv2_.collect(refs, join_name(prefix, "conv2"));
    bn2_.collect(refs, join_name(prefix, "bn2"));
    conv3_.collect(refs, join_name(prefix, "conv3"));
    bn3_.collect(refs, join_name(prefix, "bn3"));
    if (has_down_) {
      down_conv_.collect(refs, join_name(prefix, "down.conv"));
      down_bn_.collect(refs, join_name(prefix, "down.bn"));
    }
  }

 private:
  Conv2dLayer<T> conv1_, conv2_, conv3_;
  BatchNorm2dLayer<T> bn1_, bn2_, bn3_;
  Conv2dLayer<T> down_conv_;
  BatchNorm2dLayer<T> down_bn_;
  bool has_down_ = false;
};

// ResNet50: levels 2..5 are the four residual stage outputs (strides
// 4/8/16/32); the stride-4 stem features feed the optional extra MIB group.
template <typename T>
class ResNet50Backbone : public BackboneBase<T> {
 public:
  ResNet50Backbone(int width_div, RngStream& rng)
      : width_div_(width_div),
        stem_conv_(3, scaled_channels(64, width_div), 7, 2, 3, false, rng),
        stem_bn_(scaled_channels(64, width_div)) {
    static constexpr int kBlocks[4] = {3, 4, 6, 3};
    static constexpr int kMid[4] = {64, 128, 256, 512};
    int in_c = scaled_channels(64, width_div);
    for (int s = 0; s < 4; ++s) {
      const int mid = scaled_channels(kMid[s], width_div);
      const int out = scaled_channels(kMid[s] * 4, width_div);
      const int stride = s == 0 ? 1 : 2;
      std::vector<Bottleneck<T>> stage;
      stage.emplace_back(in_c, mid, out, stride, rng);
      for (int b = 1; b < kBlocks[s]; ++b)
        stage.emplace_back(out, mid, out, 1, rng);
      stages_.push_back(std::move(stage));
      in_c = out;
    }
  }

  FeaturePyramid<T> forward(const Var<T>& x) override {
    check_encoder_input(x.shape());
    FeaturePyramid<T> pyr;
    pyr.backbone_id = Backbone::kResNet50;
    Var<T> h = relu(stem_bn_.forward(stem_conv_.forward(x)));
    h = max_pool2d(h, 3, 2, 1);
    pyr.stem = h;
    for (auto& block : stages_[0]) h = block.forward(h);
    pyr.level2 = h;
    for (auto& block : stages_[1]) h = block.forward(h);
    pyr.level3 = h;
    for (auto& block : stages_[2]) h = block.forward(h);
    pyr.level4 = h;
    for (auto& block : stages_[3]) h = block.forward(h);
    pyr.level5 = h;
    return pyr;
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) override {
    stem_conv_.collect(refs, join_name(prefix, "stem.conv"));
    stem_bn_.collect(refs, join_name(prefix, "stem.bn"));
    for (int s = 0; s < 4; ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect(refs, join_name(prefix, "layer" +
                                                          std::to_string(s + 1) +
                                                          "." +
                                                          std::to_string(b)));
  }

  void set_training(bool on) override {
    stem_bn_.set_training(on);
    for (auto& stage : stages_)
      for (auto& block : stage) block.set_training(on);
  }

  Backbone id() const override { return Backbone::kResNet50; }
  std::array<int, 4> level_channels() const override {
    return {scaled_channels(256, width_div_),
            scaled_channels(512, width_div_),
            scaled_channels(1024, width_div_),
            scaled_channels(2048, width_div_)};
  }
  std::array<int, 4> level_strides() const override { return {4, 8, 16, 32}; }
  int stem_channels() const override {
    return scaled_channels(64, width_div_);
  }

 private:
  int width_div_;
  Conv2dLayer<T> stem_conv_;
  BatchNorm2dLayer<T> stem_bn_;
  std::vector<std::vector<Bottleneck<T>>> stages_;
};

template <typename T>
std::unique_ptr<BackboneBase<T>> make_backbone(Backbone b, int width_div,
                                               RngStream& rng) {
  if (b == Backbone::kVgg16)
    return std::make_unique<Vgg16Backbone<T>>(width_div, rng);
  return std::make_unique<ResNet50Backbone<T>>(width_div, rng);
}

// Pretrained single-stream classification weights in the container format;
// applied identically to both streams, which then train independently.
template <typename T>
struct EncoderWeights {
  Backbone backbone_id = Backbone::kVgg16;
  NamedTensors<T> tensors;
};

template <typename T>
EncoderWeights<T> load_pretrained(const std::filesystem::path& path,
                                  Backbone expected) {
  EncoderWeights<T> w;
  w.tensors = NamedTensors<T>::load(path);
  auto it = w.tensors.meta.find("backbone_id");
  if (it == w.tensors.meta.end())
    throw LoadError("weight file " + path.string() +
                    " declares no backbone_id");
  w.backbone_id = backbone_from_name(it->second);
  if (w.backbone_id != expected)
    throw LoadError("weight file is for backbone '" + it->second +
                    "' but '" + backbone_name(expected) + "' was requested");
  return w;
}

// Two independent streams with identical architecture.
template <typename T>
class DualEncoder {
 public:
  DualEncoder(Backbone b, int width_div, RngStream& rng)
      : rgb_(make_backbone<T>(b, width_div, rng)),
        thermal_(make_backbone<T>(b, width_div, rng)) {}

  FeaturePyramid<T> extract(const Var<T>& image, Stream stream) {
    return (stream == Stream::kRgb ? *rgb_ : *thermal_).forward(image);
  }

  // Initializes both streams from one set of classification weights.
  // Missing tensors and shape mismatches are collected and reported together.
  void apply_pretrained(const EncoderWeights<T>& w) {
    if (w.backbone_id != rgb_->id())
      throw LoadError("pretrained weights are for '" +
                      backbone_name(w.backbone_id) + "', encoder is '" +
                      backbone_name(rgb_->id()) + "'");
    for (BackboneBase<T>* stream : {rgb_.get(), thermal_.get()}) {
      ParamRefs<T> refs;
      stream->collect(refs, "");
      std::string problems;
      auto assign = [&](const std::string& name, Tensor<T>* dst) {
        auto it = w.tensors.tensors.find(name);
        if (it == w.tensors.tensors.end()) {
          problems += (problems.empty() ? "" : ", ") + name + " (missing)";
          return;
        }
        if (!(it->second.shape() == dst->shape())) {
          problems += (problems.empty() ? "" : ", ") + name + " (shape " +
                      it->second.shape().str() + ", expected " +
                      dst->shape().str() + ")";
          return;
        }
        *dst = it->second;
      };
      for (auto& [name, var] : refs.params) assign(name, &var->value());
      for (auto& [name, buf] : refs.buffers) assign(name, buf);
      if (!problems.empty())
        throw LoadError("pretrained weight problems: " + problems);
    }
  }

  BackboneBase<T>& rgb() { return *rgb_; }
  BackboneBase<T>& thermal() { return *thermal_; }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    rgb_->collect(refs, join_name(prefix, "rgb"));
    thermal_->collect(refs, join_name(prefix, "t"));
  }

  void set_training(bool on) {
    rgb_->set_training(on);
    thermal_->set_training(on);
  }

 private:
  std::unique_ptr<BackboneBase<T>> rgb_;
  std::unique_ptr<BackboneBase<T>> thermal_;
};

}  // namespace misod
