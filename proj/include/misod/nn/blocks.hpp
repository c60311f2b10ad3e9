#pragma once

#include <string>
#include <vector>

#include "misod/core/module.hpp"
#include "misod/core/ops.hpp"

namespace misod {

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int in_c, int out_c, int k, int stride, int pad, bool with_bias,
              RngStream& rng)
      : stride_(stride), pad_(pad) {
    if (k < 1 || in_c < 1 || out_c < 1)
      throw ConfigError("conv layer: channels and kernel must be positive");
    weight_ = make_param(
        he_normal_init<T>({out_c, in_c, k, k}, in_c * k * k, rng));
    if (with_bias) bias_ = make_param(Tensor<T>(1, out_c, 1, 1));
  }

  Var<T> forward(const Var<T>& x) const {
    return conv2d(x, weight_, bias_, stride_, pad_);
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    refs.add_param(join_name(prefix, "weight"), &weight_);
    if (bias_.defined()) refs.add_param(join_name(prefix, "bias"), &bias_);
  }

  int out_channels() const { return weight_.shape().n; }
  int in_channels() const { return weight_.shape().c; }
  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }

 private:
  Var<T> weight_;
  Var<T> bias_;  // undefined when the layer has none
  int stride_ = 1;
  int pad_ = 0;
};

template <typename T>
class BatchNorm2dLayer {
 public:
  BatchNorm2dLayer() = default;
  explicit BatchNorm2dLayer(int channels)
      : gamma_(make_param(Tensor<T>(1, channels, 1, 1, T(1)))),
        beta_(make_param(Tensor<T>(1, channels, 1, 1, T(0)))),
        running_mean_(1, channels, 1, 1, T(0)),
        running_var_(1, channels, 1, 1, T(1)) {}

  Var<T> forward(const Var<T>& x) {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_,
                      training_);
  }

  void set_training(bool on) { training_ = on; }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    refs.add_param(join_name(prefix, "gamma"), &gamma_);
    refs.add_param(join_name(prefix, "beta"), &beta_);
    refs.add_buffer(join_name(prefix, "running_mean"), &running_mean_);
    refs.add_buffer(join_name(prefix, "running_var"), &running_var_);
  }

 private:
  Var<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  bool training_ = true;
};

// Spatial-size-preserving conv unit spec; kernel must be odd so that
// pad = k/2 keeps H and W.
struct ConvBlockSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 3;

  void validate() const {
    if (in_channels < 1 || out_channels < 1)
      throw ConfigError("conv block: channel counts must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError("conv block: kernel size must be positive odd");
  }
};

// Conv(*): convolution + batch normalization + ReLU, spatial size preserved.
template <typename T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(ConvBlockSpec spec, RngStream& rng) : spec_(spec) {
    spec.validate();
    conv_ = Conv2dLayer<T>(spec.in_channels, spec.out_channels,
                           spec.kernel_size, 1, spec.kernel_size / 2,
                           /*with_bias=*/false, rng);
    bn_ = BatchNorm2dLayer<T>(spec.out_channels);
  }
  ConvBlock(int in_c, int out_c, int k, RngStream& rng)
      : ConvBlock(ConvBlockSpec{in_c, out_c, k}, rng) {}

  Var<T> forward(const Var<T>& x) {
    if (x.shape().c != spec_.in_channels)
      throw ConfigError("conv block: input has " +
                        std::to_string(x.shape().c) + " channels, expected " +
                        std::to_string(spec_.in_channels));
    return relu(bn_.forward(conv_.forward(x)));
  }

  void set_training(bool on) { bn_.set_training(on); }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    conv_.collect(refs, join_name(prefix, "conv"));
    bn_.collect(refs, join_name(prefix, "bn"));
  }

  const ConvBlockSpec& spec() const { return spec_; }

 private:
  ConvBlockSpec spec_;
  Conv2dLayer<T> conv_;
  BatchNorm2dLayer<T> bn_;
};

// CA(*): CBAM-style channel attention with the shared MLP replaced by a
// 1x1-conv bottleneck (reduce -> BN -> ReLU -> expand), applied to both the
// average-pooled and max-pooled channel vectors; the summed responses pass
// through a sigmoid and rescale the input per channel.
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(int channels, RngStream& rng, int reduction = 16)
      : channels_(channels) {
    if (channels < 1)
      throw ConfigError("channel attention: channels must be positive");
    const int mid = std::max(1, channels / reduction);
    reduce_ = Conv2dLayer<T>(channels, mid, 1, 1, 0, /*bias=*/false, rng);
    bn_ = BatchNorm2dLayer<T>(mid);
    expand_ = Conv2dLayer<T>(mid, channels, 1, 1, 0, /*bias=*/false, rng);
  }

  Var<T> forward(const Var<T>& x) {
    if (x.shape().c != channels_)
      throw ConfigError("channel attention: input has " +
                        std::to_string(x.shape().c) + " channels, expected " +
                        std::to_string(channels_));
    Var<T> w = attention_weights(x);
    return broadcast_mul(x, w);
  }

  // (N, C, 1, 1) sigmoid gate, exposed for tests
  Var<T> attention_weights(const Var<T>& x) {
    Var<T> avg = mlp(global_avg_pool(x));
    Var<T> mx = mlp(global_max_pool(x));
    return sigmoid(add(avg, mx));
  }

  void set_training(bool on) { bn_.set_training(on); }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    reduce_.collect(refs, join_name(prefix, "reduce"));
    bn_.collect(refs, join_name(prefix, "bn"));
    expand_.collect(refs, join_name(prefix, "expand"));
  }

 private:
  Var<T> mlp(const Var<T>& pooled) {
    return expand_.forward(relu(bn_.forward(reduce_.forward(pooled))));
  }

  int channels_ = 0;
  Conv2dLayer<T> reduce_;
  BatchNorm2dLayer<T> bn_;
  Conv2dLayer<T> expand_;
};

// UP(*) and the general resampler; bilinear with half-pixel centers.
template <typename T>
Var<T> resample(const Var<T>& x, int target_h, int target_w) {
  return bilinear_resize(x, target_h, target_w);
}

}  // namespace misod
