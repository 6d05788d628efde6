#include <cmath>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "semiuf/network.hpp"
#include "semiuf/ops.hpp"

using namespace semiuf;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

template <class T>
Var<T> cvar(Tensor<T> t) {
  return Var<T>::leaf(std::move(t), false);
}

template <class T>
void zero_param(ParamStore<T>& ps, const std::string& name) {
  ps[name].mutable_value().fill(T(0));
}

template <class T>
void zero_conv(ParamStore<T>& ps, const std::string& name) {
  zero_param(ps, name + ".weight");
  zero_param(ps, name + ".bias");
}

// Expected parameter table, written out from the documented naming scheme.
std::map<std::string, Shape> manifest(const NetConfig& cfg) {
  std::map<std::string, Shape> m;
  auto conv = [&](const std::string& n, int co, int ci, int k) {
    m[n + ".weight"] = {co, ci, k, k};
    m[n + ".bias"] = {co};
  };
  const auto& e = cfg.embed_dims;
  const int side = 2 * cfg.window_size - 1;
  conv("shallow", e[0], 3, 3);
  for (int i = 0; i < 5; ++i) {
    const std::string s = "stage" + std::to_string(i);
    const int c = e[i], hidden = cfg.mlp_hidden(i);
    for (int j = 0; j < cfg.depths[i]; ++j) {
      const std::string b = s + ".block" + std::to_string(j);
      m[b + ".norm1.gamma"] = {c};
      m[b + ".norm1.beta"] = {c};
      conv(b + ".attn.qkv", 3 * c, c, 1);
      m[b + ".attn.rel_bias"] = {cfg.num_heads[i], side * side};
      conv(b + ".attn.vconv", c, c, 3);
      conv(b + ".attn.proj", c, c, 1);
      m[b + ".norm2.gamma"] = {c};
      m[b + ".norm2.beta"] = {c};
      conv(b + ".mlp.fc1", hidden, c, 1);
      conv(b + ".mlp.fc2", c, hidden, 1);
    }
    if (cfg.use_mdb_fusion) {
      conv(s + ".rb.conv1", c, c, 3);
      conv(s + ".rb.conv2", c, c, 3);
    }
  }
  conv("down0", e[1], e[0], 3);
  conv("down1", e[2], e[1], 3);
  conv("up0", 4 * e[3], e[2], 3);
  conv("up1", 4 * e[4], e[3], 3);
  conv("fuse0", e[3], e[3] + e[1], 1);
  conv("fuse1", e[4], e[4] + e[0], 1);
  conv("tail.down", e[4], e[4], 3);
  conv("tail.conv", 12, e[4], 3);
  conv("ueb.conv1", e[4], cfg.ueb_input == UebInput::decoder ? e[4] : 3, 3);
  conv("ueb.conv2", 1, e[4], 3);
  return m;
}

ParamStore<double> block_store(int c, int heads, int ws, std::uint64_t seed) {
  ParamStore<double> ps;
  Rng rng(seed);
  add_block_params(ps, "blk", c, 2 * c, heads, ws, rng);
  return ps;
}

}  // namespace

TEST_CASE("parameter names and shapes follow the manifest table") {
  NetConfig variants[3];
  variants[1].use_mdb_fusion = false;
  variants[2].embed_dims = {8, 16, 24, 16, 8};
  variants[2].depths = {2, 1, 3, 1, 2};
  variants[2].num_heads = {1, 2, 3, 2, 1};
  variants[2].ueb_input = UebInput::image;
  for (const auto& cfg : variants) {
    DehazeNet<float> net(cfg, 0);
    const auto expect = manifest(cfg);
    REQUIRE(net.params().names().size() == expect.size());
    std::size_t total = 0;
    for (const auto& [name, shape] : expect) {
      REQUIRE_MESSAGE(net.params().contains(name), name);
      CHECK(net.params()[name].shape() == shape);
      total += shape_numel(shape);
    }
    CHECK(net.params().parameter_count() == total);
    CHECK(expected_parameter_count(cfg) == total);
  }
}

TEST_CASE("forward shape contract") {
  DehazeNet<float> net(NetConfig{}, 1);
  const auto img = ImageBatch(random_tensor<float>({1, 3, 32, 32}, 2, 0, 1));
  const ForwardOutput o = forward(net, img, true);
  CHECK(o.dehazed.tensor().shape() == Shape{1, 3, 32, 32});
  REQUIRE(o.log_theta.has_value());
  CHECK(o.log_theta->tensor().shape() == Shape{1, 1, 32, 32});
  CHECK_FALSE(forward(net, img, false).log_theta.has_value());

  const ForwardOutput o2 = forward(net, ImageBatch(random_tensor<float>({2, 3, 64, 64}, 3, 0, 1)), false);
  CHECK(o2.kl_embedding.shape() == Shape{2, 64});
}

TEST_CASE("forward accepts 32, 64 and 96 and rejects 30 with a diagnostic") {
  DehazeNet<float> net(NetConfig{}, 1);
  for (int s : {32, 64, 96}) {
    const auto o = forward(net, ImageBatch(Tensor<float>({1, 3, s, s}, 0.5f)), true);
    CHECK(o.dehazed.tensor().shape() == Shape{1, 3, s, s});
  }
  CHECK_THROWS_AS(forward(net, ImageBatch(Tensor<float>({1, 3, 30, 32}, 0.5f)), false), ShapeError);
  CHECK_THROWS_AS(net.forward(Var<float>::leaf(Tensor<float>({1, 3, 30, 30}, 0.5f)), false), ShapeError);
}

TEST_CASE("forward is deterministic and its outputs respect their ranges") {
  DehazeNet<float> net(NetConfig{}, 5);
  const auto img = ImageBatch(random_tensor<float>({2, 3, 32, 32}, 6, 0, 1));
  const auto a = forward(net, img, true), b = forward(net, img, true);
  CHECK(a.dehazed.tensor().vec() == b.dehazed.tensor().vec());
  CHECK(a.log_theta->tensor().vec() == b.log_theta->tensor().vec());
  CHECK(a.kl_embedding.vec() == b.kl_embedding.vec());
  for (float v : a.dehazed.tensor().vec()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  DehazeNet<float> same_seed(NetConfig{}, 5);
  CHECK(forward(same_seed, img, false).dehazed.tensor().vec() == a.dehazed.tensor().vec());
}

TEST_CASE("kl embedding is the spatial mean of the tapped stage") {
  DehazeNet<double> net(NetConfig{}, 7);
  const auto img = cvar(random_tensor<double>({1, 3, 32, 32}, 8, 0, 1));
  const auto o = net.forward(img, false);
  // Recompute the first three stages by hand.
  const auto& ps = net.params();
  const NetConfig& cfg = net.config();
  auto x0 = mix_dehazeformer_block(ps, "stage0", shallow_extract(ps, img), 1, 4, 1, true);
  auto x1 = mix_dehazeformer_block(ps, "stage1", conv_layer(ps, "down0", x0, 2, 1), 1, 4, 2, true);
  auto x2 = mix_dehazeformer_block(ps, "stage2", conv_layer(ps, "down1", x1, 2, 1), cfg.depths[2], 4, 4, true);
  const auto& f = x2.value();
  for (int c = 0; c < f.dim(1); ++c) {
    double m = 0;
    for (int i = 0; i < f.dim(2); ++i)
      for (int j = 0; j < f.dim(3); ++j) m += f.at(0, c, i, j);
    m /= f.dim(2) * f.dim(3);
    CHECK(o.kl_embedding.value()[c] == doctest::Approx(m).epsilon(1e-12));
  }
}

TEST_CASE("block with zeroed output projections is the identity") {
  auto ps = block_store(16, 2, 4, 1);
  zero_conv(ps, "blk.attn.proj");
  zero_conv(ps, "blk.mlp.fc2");
  const auto x = random_tensor<double>({1, 16, 8, 8}, 9);
  for (bool shift : {false, true}) {
    const auto y = dehazeformer_block(ps, "blk", cvar(x), 4, 2, shift).value();
    CHECK(y.shape() == x.shape());
    CHECK(y.vec() == x.vec());
  }
}

TEST_CASE("shifted block with zero attention and zero conv keeps the shortcut") {
  auto ps = block_store(8, 1, 4, 2);
  zero_conv(ps, "blk.attn.qkv");
  zero_conv(ps, "blk.attn.vconv");
  zero_conv(ps, "blk.mlp.fc2");
  const auto x = random_tensor<double>({1, 8, 8, 8}, 10);
  const auto y = dehazeformer_block(ps, "blk", cvar(x), 4, 1, true).value();
  // Attention over V = 0 is zero, so only the projection bias remains.
  const auto& pb = ps["blk.attn.proj.bias"].value();
  double worst = 0;
  for (int c = 0; c < 8; ++c)
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) worst = std::max(worst, std::abs(y.at(0, c, i, j) - x.at(0, c, i, j) - pb[c]));
  CHECK(worst < 1e-12);
}

TEST_CASE("block output shape for [1,16,8,8]") {
  auto ps = block_store(16, 4, 4, 3);
  CHECK(dehazeformer_block(ps, "blk", cvar(random_tensor<double>({1, 16, 8, 8}, 11)), 4, 4, false).shape() ==
        Shape{1, 16, 8, 8});
}

TEST_CASE("w_mhsa_pc with identity projections and zero conv is dense attention") {
  const int c = 4, ws = 4;
  ParamStore<double> ps;
  Rng rng(3);
  add_block_params(ps, "blk", c, 8, 1, ws, rng);
  auto& qkv = ps["blk.attn.qkv.weight"].mutable_value();
  qkv.fill(0);
  for (int part = 0; part < 3; ++part)
    for (int i = 0; i < c; ++i) qkv.at(part * c + i, i, 0, 0) = 1;
  zero_param(ps, "blk.attn.qkv.bias");
  zero_conv(ps, "blk.attn.vconv");
  auto& proj = ps["blk.attn.proj.weight"].mutable_value();
  proj.fill(0);
  for (int i = 0; i < c; ++i) proj.at(i, i, 0, 0) = 1;
  zero_param(ps, "blk.attn.proj.bias");
  zero_param(ps, "blk.attn.rel_bias");

  const auto x = random_tensor<double>({1, c, ws, ws}, 12);
  const auto y = w_mhsa_pc(ps, "blk.attn", cvar(x), ws, 1, false).value();
  double worst = 0;
  const int n = ws * ws;
  for (int i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double z = 0;
    for (int j = 0; j < n; ++j) {
      double dot = 0;
      for (int ch = 0; ch < c; ++ch) dot += x.at(0, ch, i / ws, i % ws) * x.at(0, ch, j / ws, j % ws);
      s[j] = std::exp(dot / 2.0);
      z += s[j];
    }
    for (int ch = 0; ch < c; ++ch) {
      double ref = 0;
      for (int j = 0; j < n; ++j) ref += s[j] / z * x.at(0, ch, j / ws, j % ws);
      worst = std::max(worst, std::abs(y.at(0, ch, i / ws, i % ws) - ref));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("mix block reduces to stacked blocks when the RB output conv is zero") {
  ParamStore<double> ps;
  Rng rng(4);
  add_mdb_params(ps, "m", 24, 2, 48, 2, 4, true, rng);
  zero_conv(ps, "m.rb.conv2");
  const auto x = cvar(random_tensor<double>({1, 24, 8, 8}, 13));
  const auto y = mix_dehazeformer_block(ps, "m", x, 2, 4, 2, true).value();
  CHECK(y.shape() == Shape{1, 24, 8, 8});
  const auto df = dehazeformer_block(ps, "m.block1", dehazeformer_block(ps, "m.block0", x, 4, 2, false), 4, 2, true);
  CHECK(y.vec() == df.value().vec());
}

TEST_CASE("depth-1 mix block equals DF then RB then add") {
  ParamStore<double> ps;
  Rng rng(5);
  add_mdb_params(ps, "m", 8, 1, 16, 1, 4, true, rng);
  const auto x = cvar(random_tensor<double>({1, 8, 8, 8}, 14));
  const auto y = mix_dehazeformer_block(ps, "m", x, 1, 4, 1, true).value();
  const auto df = dehazeformer_block(ps, "m.block0", x, 4, 1, false);
  const auto rb = conv_layer(ps, "m.rb.conv2", ops::relu(conv_layer(ps, "m.rb.conv1", df, 1, 1)), 1, 1);
  CHECK(y.vec() == ops::add(rb, df).value().vec());
}

TEST_CASE("uncertainty head: bias passthrough and clamp") {
  ParamStore<double> ps;
  Rng rng(6);
  add_conv_params(ps, "ueb.conv1", 8, 8, 3, rng);
  add_conv_params(ps, "ueb.conv2", 1, 8, 3, rng);
  const auto f = cvar(random_tensor<double>({2, 8, 8, 8}, 15));
  zero_param(ps, "ueb.conv2.weight");
  ps["ueb.conv2.bias"].mutable_value()[0] = -1.25;
  const auto passthrough = ueb_head(ps, f).value();
  for (double v : passthrough.vec()) CHECK(v == -1.25);

  for (auto& v : ps["ueb.conv2.weight"].mutable_value().vec()) v = 1e4;
  for (auto& v : ps["ueb.conv1.weight"].mutable_value().vec()) v = std::abs(v) * 1e3;
  const auto big = ueb_head(ps, cvar(random_tensor<double>({1, 8, 8, 8}, 16, 0, 1))).value();
  double hi = -1e9, lo = 1e9;
  for (double v : big.vec()) {
    hi = std::max(hi, v);
    lo = std::min(lo, v);
  }
  CHECK(hi <= 8.0);
  CHECK(lo >= -8.0);
  CHECK(hi == 8.0);
}

TEST_CASE("with every residual branch zeroed the generator is the bare U-Net path") {
  NetConfig cfg;
  DehazeNet<double> net(cfg, 9);
  auto& ps = net.params();
  for (const auto& name : ps.names())
    if (name.find(".attn.proj.") != std::string::npos || name.find(".mlp.fc2.") != std::string::npos ||
        name.find(".rb.conv2.") != std::string::npos)
      zero_param(ps, name);
  const auto img = cvar(random_tensor<double>({1, 3, 32, 32}, 17, 0, 1));
  const auto o = net.forward(img, false);
  auto x0 = shallow_extract(ps, img);
  auto x1 = conv_layer(ps, "down0", x0, 2, 1);
  auto x2 = conv_layer(ps, "down1", x1, 2, 1);
  auto x3 = conv_layer(ps, "fuse0", ops::concat_channels(ops::pixel_shuffle(conv_layer(ps, "up0", x2, 1, 1), 2), x1), 1, 0);
  auto x4 = conv_layer(ps, "fuse1", ops::concat_channels(ops::pixel_shuffle(conv_layer(ps, "up1", x3, 1, 1), 2), x0), 1, 0);
  auto rec = ops::pixel_shuffle(conv_layer(ps, "tail.conv", conv_layer(ps, "tail.down", x4, 2, 1), 1, 1), 2);
  const auto ref = ops::clamp(rec, 0.0, 1.0).value();
  CHECK(max_abs_diff(o.dehazed.value(), ref) < 1e-12);
}

TEST_CASE("global skip adds the hazy input before the clamp") {
  NetConfig cfg;
  cfg.global_skip = true;
  DehazeNet<double> net(cfg, 10);
  zero_conv(net.params(), "tail.conv");
  const auto x = random_tensor<double>({1, 3, 32, 32}, 18, 0, 1);
  CHECK(max_abs_diff(net.forward(cvar(x), false).dehazed.value(), x) < 1e-15);
}

TEST_CASE("freezing the uncertainty head leaves the rest trainable") {
  DehazeNet<float> net(NetConfig{}, 11);
  net.freeze_uncertainty_head(true);
  for (const auto& name : net.params().names())
    CHECK(net.params().is_frozen(name) == (name.rfind("ueb.", 0) == 0));
  net.freeze_all(true);
  for (const auto& name : net.params().names()) CHECK(net.params().is_frozen(name));
}

TEST_CASE("discriminator produces a 1/16 resolution score map") {
  Discriminator<float> d(1);
  CHECK(d.params().names().size() == 8);
  const auto y = d.forward(cvar(random_tensor<float>({2, 3, 64, 64}, 19, 0, 1)));
  CHECK(y.shape() == Shape{2, 1, 4, 4});
  CHECK(d.params()["disc.l0.weight"].shape() == Shape{16, 3, 4, 4});
  CHECK(d.params()["disc.l3.weight"].shape() == Shape{1, 64, 4, 4});
}

TEST_CASE("generator and discriminator checkpoints are not interchangeable") {
  DehazeNet<float> net(NetConfig{}, 1);
  Discriminator<float> d(1);
  CHECK_THROWS_AS(net.load(d.to_checkpoint()), CheckpointError);
  CHECK_THROWS_AS(d.load(net.to_checkpoint(Role::teacher)), CheckpointError);
}
