#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "misod/nn/blocks.hpp"

namespace misod {

// Global context G (stride 16 for vgg16) plus its auxiliary saliency score.
template <typename T>
struct GlobalContext {
  Var<T> g;
  Var<T> s_g;
};

// Clips the pyramid pool grid sizes to the available spatial extent and
// drops duplicates; at the 352x352 production size (h = w = 22) nothing is
// clipped, this only matters for reduced test configurations.
inline std::vector<int> clipped_pool_sizes(std::vector<int> sizes, int h,
                                           int w) {
  std::set<int> kept;
  for (int n : sizes) kept.insert(std::min({n, h, w}));
  return {kept.begin(), kept.end()};
}

// Global information module: fuses the top features of both modalities,
// pools them at several grid sizes for multi-receptive-field context, and
// reconstructs a single context map.
template <typename T>
class GlobalInfoModule {
 public:
  GlobalInfoModule() = default;
  // in_c5: per-modality channel count of the level-5 features.
  GlobalInfoModule(int in_c5, int g_channels, std::vector<int> pool_sizes,
                   RngStream& rng, int attention_reduction = 16)
      : pool_sizes_(std::move(pool_sizes)),
        ca_(2 * in_c5, rng, attention_reduction),
        reduce_(2 * in_c5, g_channels, 3, rng),
        score_(g_channels, 1, 1, 1, 0, /*bias=*/true, rng) {
    internal_check(!pool_sizes_.empty(), "gim: no pool sizes");
    for (int n : pool_sizes_) {
      internal_check(n >= 1, "gim: pool size must be >= 1");
      branches_.emplace_back(g_channels, g_channels, 3, rng);
    }
    fuse_ = ConvBlock<T>(
        static_cast<int>(pool_sizes_.size() + 1) * g_channels, g_channels, 3,
        rng);
  }

  GlobalContext<T> forward(const Var<T>& r5, const Var<T>& t5) {
    if (!(r5.shape() == t5.shape()))
      throw ConfigError("gim: modal feature shapes differ, " +
                        r5.shape().str() + " vs " + t5.shape().str());
    const int h = r5.shape().h, w = r5.shape().w;
    Var<T> f = reduce_.forward(ca_.forward(concat_channels<T>({r5, t5})));
    std::vector<Var<T>> parts;
    for (std::size_t i = 0; i < pool_sizes_.size(); ++i) {
      Var<T> pooled = adaptive_max_pool2d(f, pool_sizes_[i]);
      parts.push_back(resample(branches_[i].forward(pooled), h, w));
    }
    parts.push_back(f);
    GlobalContext<T> out;
    out.g = fuse_.forward(concat_channels<T>(parts));
    out.s_g = sigmoid(score_.forward(out.g));
    return out;
  }

  const std::vector<int>& pool_sizes() const { return pool_sizes_; }

  void set_training(bool on) {
    ca_.set_training(on);
    reduce_.set_training(on);
    for (auto& b : branches_) b.set_training(on);
    fuse_.set_training(on);
  }

  void collect(ParamRefs<T>& refs, const std::string& prefix) {
    ca_.collect(refs, join_name(prefix, "ca"));
    reduce_.collect(refs, join_name(prefix, "reduce"));
    for (std::size_t i = 0; i < branches_.size(); ++i)
      branches_[i].collect(
          refs, join_name(prefix, "branch" + std::to_string(pool_sizes_[i])));
    fuse_.collect(refs, join_name(prefix, "fuse"));
    score_.collect(refs, join_name(prefix, "score"));
  }

 private:
  std::vector<int> pool_sizes_;
  ChannelAttention<T> ca_;
  ConvBlock<T> reduce_;
  std::vector<ConvBlock<T>> branches_;
  ConvBlock<T> fuse_;
  Conv2dLayer<T> score_;
};

}  // namespace misod
