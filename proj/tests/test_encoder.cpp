#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "misod/nn/encoder.hpp"
#include "test_util.hpp"

using namespace misod;
using misod::test::random_tensor;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() /
           ("misod_enc_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

// single-stream weight container for a backbone instance
template <typename T>
NamedTensors<T> snapshot_stream(BackboneBase<T>& stream,
                                const std::string& backbone_id) {
  ParamRefs<T> refs;
  stream.collect(refs, "");
  NamedTensors<T> file;
  file.meta["backbone_id"] = backbone_id;
  for (auto& [name, var] : refs.params) file.tensors[name] = var->value();
  for (auto& [name, buf] : refs.buffers) file.tensors[name] = *buf;
  return file;
}

}  // namespace

TEST_CASE("vgg16 pyramid strides and channels") {
  RngStream rng(21);
  Vgg16Backbone<float> bb(1, rng);
  Tensor<float> img(1, 3, 64, 64);
  for (std::size_t i = 0; i < img.numel(); ++i)
    img[i] = static_cast<float>(rng.uniform01());
  NoGradGuard ng;
  auto pyr = bb.forward(Var<float>(img));
  REQUIRE(pyr.level2.shape() == Shape4{1, 128, 16, 16});
  REQUIRE(pyr.level3.shape() == Shape4{1, 256, 8, 8});
  REQUIRE(pyr.level4.shape() == Shape4{1, 512, 4, 4});
  REQUIRE(pyr.level5.shape() == Shape4{1, 512, 4, 4});
  REQUIRE_FALSE(pyr.stem.defined());
  REQUIRE(bb.level_strides() == std::array<int, 4>{4, 8, 16, 16});
}

TEST_CASE("vgg16 stride invariants hold across input sizes") {
  RngStream rng(22);
  Vgg16Backbone<float> bb(8, rng);
  NoGradGuard ng;
  for (int size : {32, 48, 96}) {
    Tensor<float> img(1, 3, size, size, 0.25f);
    auto pyr = bb.forward(Var<float>(img));
    REQUIRE(pyr.level2.shape().h == size / 4);
    REQUIRE(pyr.level3.shape().h == size / 8);
    REQUIRE(pyr.level4.shape().h == size / 16);
    REQUIRE(pyr.level5.shape().h == size / 16);
  }
}

TEST_CASE("zero image yields finite features") {
  RngStream rng(23);
  Vgg16Backbone<double> bb(8, rng);
  Tensor<double> img(1, 3, 32, 32, 0.0);
  NoGradGuard ng;
  auto pyr = bb.forward(Var<double>(img));
  REQUIRE(pyr.level2.value().all_finite());
  REQUIRE(pyr.level5.value().all_finite());
}

TEST_CASE("indivisible input size is rejected before compute") {
  RngStream rng(24);
  Vgg16Backbone<float> bb(8, rng);
  Tensor<float> img(1, 3, 100, 100, 0.0f);
  REQUIRE_THROWS_AS(bb.forward(Var<float>(img)), InputError);
  Tensor<float> wrong_c(1, 4, 32, 32, 0.0f);
  REQUIRE_THROWS_AS(bb.forward(Var<float>(wrong_c)), InputError);
}

TEST_CASE("resnet50 pyramid strides, channels and stem tap") {
  RngStream rng(25);
  ResNet50Backbone<float> bb(8, rng);
  bb.set_training(false);
  Tensor<float> img(1, 3, 64, 64, 0.1f);
  NoGradGuard ng;
  auto pyr = bb.forward(Var<float>(img));
  REQUIRE(pyr.stem.shape() == Shape4{1, 8, 16, 16});
  REQUIRE(pyr.level2.shape() == Shape4{1, 32, 16, 16});
  REQUIRE(pyr.level3.shape() == Shape4{1, 64, 8, 8});
  REQUIRE(pyr.level4.shape() == Shape4{1, 128, 4, 4});
  REQUIRE(pyr.level5.shape() == Shape4{1, 256, 2, 2});
  REQUIRE(bb.level_strides() == std::array<int, 4>{4, 8, 16, 32});
}

TEST_CASE("dual encoder: identical shapes, independent streams") {
  RngStream rng(26);
  DualEncoder<double> enc(Backbone::kVgg16, 8, rng);
  Tensor<double> rgb = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  Tensor<double> th = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  NoGradGuard ng;
  auto pr = enc.extract(Var<double>(rgb), Stream::kRgb);
  auto pt = enc.extract(Var<double>(th), Stream::kThermal);
  REQUIRE(pr.level2.shape() == pt.level2.shape());
  REQUIRE(pr.level5.shape() == pt.level5.shape());

  // nudge one stream's first conv; the other stream must be untouched
  ParamRefs<double> refs;
  enc.collect(refs, "encoder");
  bool nudged = false;
  for (auto& [name, var] : refs.params) {
    if (name == "encoder.rgb.conv1_1.weight") {
      var->value()[0] += 0.5;
      nudged = true;
    }
  }
  REQUIRE(nudged);
  auto pr2 = enc.extract(Var<double>(rgb), Stream::kRgb);
  auto pt2 = enc.extract(Var<double>(th), Stream::kThermal);
  bool rgb_changed = false;
  for (std::size_t i = 0; i < pr.level5.value().numel(); ++i)
    rgb_changed |= pr.level5.value()[i] != pr2.level5.value()[i];
  REQUIRE(rgb_changed);
  for (std::size_t i = 0; i < pt.level5.value().numel(); ++i)
    REQUIRE(pt.level5.value()[i] == pt2.level5.value()[i]);
}

TEST_CASE("pretrained weight container round trip") {
  RngStream rng(27);
  const auto dir = temp_dir();
  const auto path = dir / "vgg16_div8.bin";

  // author a donor backbone and persist its stream weights
  Vgg16Backbone<float> donor(8, rng);
  auto file = snapshot_stream<float>(donor, "vgg16");
  REQUIRE(file.tensors.size() == 26);  // 13 conv weights + 13 biases
  file.save(path);

  auto weights = load_pretrained<float>(path, Backbone::kVgg16);
  REQUIRE(weights.backbone_id == Backbone::kVgg16);

  DualEncoder<float> enc(Backbone::kVgg16, 8, rng);
  enc.apply_pretrained(weights);
  // both streams now carry the donor parameters
  for (BackboneBase<float>* stream : {&enc.rgb(), &enc.thermal()}) {
    ParamRefs<float> refs;
    stream->collect(refs, "");
    int convs_loaded = 0;
    for (auto& [name, var] : refs.params) {
      auto it = file.tensors.find(name);
      REQUIRE(it != file.tensors.end());
      for (std::size_t i = 0; i < var->value().numel(); ++i)
        REQUIRE(var->value()[i] == it->second[i]);
      if (name.ends_with(".weight")) ++convs_loaded;
    }
    REQUIRE(convs_loaded == 13);
  }
  fs::remove_all(dir);
}

TEST_CASE("pretrained load errors") {
  RngStream rng(28);
  const auto dir = temp_dir();

  SECTION("backbone mismatch is rejected") {
    ResNet50Backbone<float> donor(8, rng);
    auto file = snapshot_stream<float>(donor, "resnet50");
    const auto path = dir / "resnet50.bin";
    file.save(path);
    REQUIRE_THROWS_MATCHES(
        load_pretrained<float>(path, Backbone::kVgg16), LoadError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("resnet50")));
  }

  SECTION("truncated tensor is named") {
    Vgg16Backbone<float> donor(8, rng);
    auto file = snapshot_stream<float>(donor, "vgg16");
    const auto path = dir / "vgg16_trunc.bin";
    file.save(path);
    fs::resize_file(path, fs::file_size(path) - 16);
    REQUIRE_THROWS_MATCHES(
        load_pretrained<float>(path, Backbone::kVgg16), LoadError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("conv5_3")));
  }

  SECTION("missing and misshaped tensors are listed") {
    Vgg16Backbone<float> donor(8, rng);
    auto file = snapshot_stream<float>(donor, "vgg16");
    file.tensors.erase("conv3_2.bias");
    file.tensors["conv1_1.weight"] = Tensor<float>(2, 3, 3, 3);
    const auto path = dir / "vgg16_bad.bin";
    file.save(path);
    auto weights = load_pretrained<float>(path, Backbone::kVgg16);
    DualEncoder<float> enc(Backbone::kVgg16, 8, rng);
    try {
      enc.apply_pretrained(weights);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("conv3_2.bias") != std::string::npos);
      REQUIRE(msg.find("conv1_1.weight") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}
