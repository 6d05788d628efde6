#include <cstring>

#include "doctest.h"
#include "helpers.hpp"
#include "semiuf/core.hpp"
#include "semiuf/network.hpp"

using namespace semiuf;
using testutil::TempDir;

namespace {

Checkpoint single_tensor_ckpt(Shape shape, std::vector<float> data) {
  Checkpoint ck;
  ck.role = Role::teacher;
  ck.tensors["w"] = NamedTensor{std::move(shape), std::move(data)};
  return ck;
}

}  // namespace

TEST_CASE("checkpoint round trip of a zero tensor") {
  TempDir dir("ck");
  const auto ck = single_tensor_ckpt({2, 2}, std::vector<float>(4, 0.0f));
  save_checkpoint(ck, dir / "z.sufc");
  const Checkpoint back = load_checkpoint(dir / "z.sufc");
  REQUIRE(back.tensors.size() == 1);
  CHECK(back.tensors.at("w").shape == Shape{2, 2});
  CHECK(back.tensors.at("w").data == std::vector<float>(4, 0.0f));
}

TEST_CASE("checkpoint round trip of a million random values is bit exact") {
  TempDir dir("ck");
  const auto t = testutil::random_tensor<float>({1000, 1000}, 5, -3, 3);
  Checkpoint ck = single_tensor_ckpt({1000, 1000}, t.vec());
  ck.rng_state = Rng(9).state();
  save_checkpoint(ck, dir / "r.sufc");
  const Checkpoint back = load_checkpoint(dir / "r.sufc");
  const auto& d = back.tensors.at("w").data;
  REQUIRE(d.size() == t.size());
  CHECK(std::memcmp(d.data(), t.data(), d.size() * sizeof(float)) == 0);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(payload_sha256(back) == payload_sha256(ck));
}

TEST_CASE("checkpoint file starts with the SUFC magic and version 1") {
  TempDir dir("ck");
  save_checkpoint(single_tensor_ckpt({1}, {1.0f}), dir / "m.sufc");
  const std::string bytes = testutil::read_file(dir / "m.sufc");
  REQUIRE(bytes.size() > 8);
  CHECK(bytes.substr(0, 4) == "SUFC");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == 1u);
}

TEST_CASE("tampered payload byte is rejected by the checksum") {
  TempDir dir("ck");
  const auto t = testutil::random_tensor<float>({4, 8}, 1);
  save_checkpoint(single_tensor_ckpt({4, 8}, t.vec()), dir / "t.sufc");
  std::string bytes = testutil::read_file(dir / "t.sufc");
  bytes[bytes.size() - 3] ^= 0x10;
  testutil::write_file(dir / "t.sufc", bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "t.sufc"), CheckpointError);
  try {
    load_checkpoint(dir / "t.sufc");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }
}

TEST_CASE("truncated checkpoint raises an error instead of crashing") {
  TempDir dir("ck");
  DehazeNet<float> net(NetConfig{}, 3);
  save_checkpoint(net.to_checkpoint(Role::teacher), dir / "full.sufc");
  const std::string bytes = testutil::read_file(dir / "full.sufc");
  for (double frac : {0.5, 0.1, 0.99}) {
    testutil::write_file(dir / "cut.sufc", bytes.substr(0, static_cast<std::size_t>(bytes.size() * frac)));
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.sufc"), CheckpointError);
  }
  testutil::write_file(dir / "cut.sufc", "");
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.sufc"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.sufc"), CheckpointError);
}

TEST_CASE("saved teacher checkpoint reloads with the teacher role") {
  TempDir dir("ck");
  DehazeNet<float> net(NetConfig{}, 3);
  save_checkpoint(net.to_checkpoint(Role::teacher), dir / "t.sufc");
  const Checkpoint ck = load_checkpoint(dir / "t.sufc");
  CHECK(ck.role == Role::teacher);
  CHECK(ck.config == NetConfig{});
  DehazeNet<float> other(NetConfig{}, 4);
  other.load(ck);
  CHECK(payload_sha256(other.to_checkpoint(Role::teacher)) == payload_sha256(ck));
}

TEST_CASE("checkpoint with different embed dims is a config mismatch") {
  TempDir dir("ck");
  NetConfig small;
  small.embed_dims = {8, 16, 32, 16, 8};
  DehazeNet<float> net(small, 1);
  save_checkpoint(net.to_checkpoint(Role::teacher), dir / "s.sufc");
  CHECK_THROWS_AS(load_checkpoint(dir / "s.sufc", NetConfig{}), CheckpointError);
  DehazeNet<float> expecting_default(NetConfig{}, 1);
  CHECK_THROWS_AS(expecting_default.load(load_checkpoint(dir / "s.sufc")), CheckpointError);
  CHECK_NOTHROW(load_checkpoint(dir / "s.sufc", small));
}

TEST_CASE("crc32 matches the standard check value") {
  const char* s = "123456789";
  CHECK(crc32_of(s, 9) == 0xCBF43926u);
}

TEST_CASE("seeded rng streams") {
  Rng a(0), b(0), c(1);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  CHECK(Rng(0).split(1).next_u64() == Rng(0).split(1).next_u64());
  CHECK(Rng(0).split(1).seed() != Rng(0).split(2).seed());
  CHECK(Rng(0).split(1).seed() != Rng(1).split(1).seed());
}

TEST_CASE("rng state restores the stream") {
  Rng a(17);
  for (int i = 0; i < 5; ++i) a.next_u64();
  const std::string st = a.state();
  const auto expect = a.next_u64();
  Rng b(99);
  b.set_state(st);
  CHECK(b.next_u64() == expect);
}

TEST_CASE("default loss weights are the six published values") {
  const LossWeights w;
  CHECK(w.lambda1 == 1.0);
  CHECK(w.lambda2 == 1e-2);
  CHECK(w.lambda3 == 2.0);
  CHECK(w.lambda4 == 1e-2);
  CHECK(w.lambda5 == 1e-5);
  CHECK(w.lambda6 == 1e-6);
  const RunConfig cfg;
  CHECK(cfg.lr == 1e-4);
  CHECK(cfg.batch_size == 2);
  CHECK(cfg.epochs_teacher == 100);
  CHECK(cfg.epochs_student == 60);
}

TEST_CASE("desk-scale default network config") {
  const NetConfig n;
  CHECK(n.embed_dims == std::array<int, 5>{16, 32, 64, 32, 16});
  CHECK(n.depths == std::array<int, 5>{1, 1, 2, 1, 1});
  CHECK(n.num_heads == std::array<int, 5>{1, 2, 4, 2, 1});
  CHECK(n.window_size == 4);
  CHECK(n.mlp_ratio == 2.0);
  CHECK(n.kl_tap_stage == 2);
  CHECK_FALSE(n.global_skip);
  CHECK(n.size_multiple() == 16);
}

TEST_CASE("config text round trip and errors") {
  RunConfig cfg;
  cfg.net.embed_dims = {8, 16, 32, 16, 8};
  cfg.weights.lambda3 = 0.5;
  cfg.lr = 3e-4;
  cfg.seed = 42;
  cfg.use_kl = false;
  const RunConfig back = parse_config_text(config_to_text(cfg));
  CHECK(back.net == cfg.net);
  CHECK(back.weights == cfg.weights);
  CHECK(back.lr == cfg.lr);
  CHECK(back.seed == 42u);
  CHECK_FALSE(back.use_kl);

  const RunConfig parsed = parse_config_text("# comment\n\nlr = 0.001\nembed_dims=4,8,8,8,4\n");
  CHECK(parsed.lr == 0.001);
  CHECK(parsed.net.embed_dims == std::array<int, 5>{4, 8, 8, 8, 4});

  CHECK_THROWS_AS(parse_config_text("bogus=1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("lr\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("lr=abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("embed_dims=1,2,3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("batch_size=0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("num_heads=1,3,4,2,1\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/semiuf.cfg"), ConfigError);
}

TEST_CASE("image batch validates shape and range") {
  CHECK_NOTHROW(ImageBatch(Tensor<float>({1, 3, 4, 4}, 0.5f)));
  CHECK_THROWS_AS(ImageBatch(Tensor<float>({1, 2, 4, 4}, 0.5f)), ShapeError);
  CHECK_THROWS_AS(ImageBatch(Tensor<float>({1, 3, 4, 4}, 1.5f)), std::domain_error);
  Tensor<float> nan({1, 3, 2, 2}, 0.5f);
  nan[3] = std::nanf("");
  CHECK_THROWS_AS(ImageBatch{nan}, std::domain_error);
  CHECK_THROWS_AS(ImageBatch(Tensor<float>({1, 3, 30, 32}, 0.5f)).require_divisible(16), ShapeError);

  const ImageBatch a(Tensor<float>({1, 3, 2, 2}, 0.25f)), b(Tensor<float>({1, 3, 2, 2}, 0.75f));
  const ImageBatch s = ImageBatch::stack({a, b});
  CHECK(s.batch() == 2);
  CHECK(s.item(1).tensor()[0] == 0.75f);
}

TEST_CASE("log uncertainty map enforces its clamp range") {
  CHECK_NOTHROW(LogUncertaintyMap(Tensor<float>({1, 1, 2, 2}, -8.0f)));
  CHECK_THROWS_AS(LogUncertaintyMap(Tensor<float>({1, 1, 2, 2}, 8.5f)), std::domain_error);
  CHECK_THROWS_AS(LogUncertaintyMap(Tensor<float>({1, 3, 2, 2}, 0.0f)), ShapeError);
}

TEST_CASE("reflect pad mirrors without repeating the edge and crop undoes it") {
  Tensor<float> img({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) img[i] = static_cast<float>(i);
  const Tensor<float> p = reflect_pad(img, 4);
  REQUIRE(p.shape() == Shape{1, 1, 4, 4});
  // Row 3 mirrors row 1, column 3 mirrors column 1.
  CHECK(p.at(0, 0, 3, 0) == img.at(0, 0, 1, 0));
  CHECK(p.at(0, 0, 0, 3) == img.at(0, 0, 0, 1));
  CHECK(p.at(0, 0, 3, 3) == img.at(0, 0, 1, 1));
  const Tensor<float> c = crop(p, 3, 3);
  CHECK(c.vec() == img.vec());
  CHECK(reflect_pad(img, 3).vec() == img.vec());
  CHECK_THROWS_AS(reflect_pad(Tensor<float>({1, 1, 2, 2}), 8), ShapeError);
}
