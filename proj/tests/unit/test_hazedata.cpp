#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "semiuf/hazedata.hpp"
#include "semiuf/losses.hpp"

using namespace semiuf;
using testutil::TempDir;

namespace {

double image_std(const Tensor<float>& t) {
  double m = 0, s = 0;
  for (float v : t.vec()) m += v;
  m /= static_cast<double>(t.size());
  for (float v : t.vec()) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(t.size()));
}

double mean_dark_channel(const ImageBatch& img) {
  const auto dc = dark_channel(img.tensor().cast<double>(), 7);
  double m = 0;
  for (double v : dc.vec()) m += v;
  return m / static_cast<double>(dc.size());
}

template <class B>
concept HasClean = requires(B b) { b.clean; };

}  // namespace

TEST_CASE("clean images are seeded, in range and non-degenerate") {
  Rng a(3), b(3);
  const auto x = make_clean_image(a, 64, 64), y = make_clean_image(b, 64, 64);
  CHECK(x.tensor().vec() == y.tensor().vec());
  double stds = 0;
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const auto img = make_clean_image(rng, 32, 32);
    for (float v : img.tensor().vec()) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    stds += image_std(img.tensor());
  }
  CHECK(stds / 100 > 0.05);
}

TEST_CASE("depth fields are bounded and smooth") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto d = make_depth_field(rng, 64, 64);
    double grad = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const float v = d[static_cast<std::size_t>(y * 64 + x)];
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 3.0f);
        if (x + 1 < 64) grad = std::max(grad, double(std::abs(d[y * 64 + x + 1] - v)));
        if (y + 1 < 64) grad = std::max(grad, double(std::abs(d[(y + 1) * 64 + x] - v)));
      }
    CHECK(grad < 0.5);
  }
}

TEST_CASE("scattering model limits and hand value") {
  Rng rng(7);
  const auto clean = make_clean_image(rng, 16, 16);
  HazeParams p;
  p.depth = make_depth_field(rng, 16, 16);
  p.beta = 0.0;
  CHECK(synthesize_haze(clean, p).tensor().vec() == clean.tensor().vec());

  p.beta = 1.0;
  p.airlight = 0.9;
  p.depth = Tensor<float>({16, 16}, 200.0f);
  const auto opaque = synthesize_haze(clean, p);
  for (float v : opaque.tensor().vec()) CHECK(v == doctest::Approx(0.9f));

  HazeParams q;
  q.airlight = 1.0;
  q.beta = 1.0;
  q.depth = Tensor<float>({1, 1}, static_cast<float>(-std::log(0.4)));
  const ImageBatch half(Tensor<float>({1, 3, 1, 1}, 0.5f));
  CHECK(synthesize_haze(half, q).tensor()[0] == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("haze stays in range, is monotone in airlight and inverts exactly") {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const auto clean = make_clean_image(rng, 16, 16);
    HazeParams p;
    p.depth = make_depth_field(rng, 16, 16);
    p.beta = rng.uniform(0.6, 1.8);
    p.airlight = rng.uniform(0.7, 0.95);
    const auto hazy = synthesize_haze(clean, p);
    HazeParams brighter = p;
    brighter.airlight = p.airlight + 0.05;
    const auto hazy2 = synthesize_haze(clean, brighter);
    for (std::size_t k = 0; k < hazy.tensor().size(); ++k) {
      const float v = hazy.tensor()[k];
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
      if (clean.tensor()[k] < p.airlight) CHECK(hazy2.tensor()[k] >= v);
    }
    double worst = 0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const double t = std::exp(-p.beta * p.depth[static_cast<std::size_t>(y * 16 + x)]);
          // float32 storage error grows as 1/t
          if (t < 0.1) continue;
          const double j = (hazy.tensor().at(0, c, y, x) - p.airlight * (1 - t)) / t;
          worst = std::max(worst, std::abs(j - clean.tensor().at(0, c, y, x)));
        }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("per-channel airlight overrides the scalar") {
  HazeParams p;
  p.airlight_rgb = std::array<double, 3>{0.7, 0.8, 0.9};
  p.depth = Tensor<float>({1, 1}, 500.0f);
  const auto hazy = synthesize_haze(ImageBatch(Tensor<float>({1, 3, 1, 1}, 0.1f)), p);
  CHECK(hazy.tensor()[0] == doctest::Approx(0.7f));
  CHECK(hazy.tensor()[2] == doctest::Approx(0.9f));
}

TEST_CASE("dataset sizes, determinism and ground-truth isolation") {
  DatasetSpec spec;
  spec.n_paired = 8;
  spec.n_unpaired_real = 4;
  spec.height = spec.width = 32;
  spec.seed = 1;
  const Dataset a = Dataset::build(spec), b = Dataset::build(spec);
  CHECK(a.paired().size() == 8);
  CHECK(a.real().size() == 4);
  CHECK(a.heldout_size() == 4);
  CHECK(a.height() == 32);

  auto it = a.paired_iterator(1, 5);
  CHECK(it.batches_per_epoch() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(it.epoch() == 0);
    it.next();
  }
  it.next();
  CHECK(it.epoch() == 1);

  auto ia = a.paired_iterator(2, 3), ib = b.paired_iterator(2, 3);
  const auto ba = ia.next(), bb = ib.next();
  CHECK(ba.hazy.tensor().vec() == bb.hazy.tensor().vec());
  CHECK(ba.clean.tensor().vec() == bb.clean.tensor().vec());
  CHECK(ba.hazy.batch() == 2);

  static_assert(HasClean<PairedBatch>);
  static_assert(!HasClean<UnpairedBatch>);

  auto odd = a.paired_iterator(3, 0);
  CHECK(odd.batches_per_epoch() == 3);
  odd.next();
  odd.next();
  CHECK(odd.next().hazy.batch() == 2);
}

TEST_CASE("sample metadata stays in the documented ranges") {
  DatasetSpec spec;
  spec.n_paired = 40;
  spec.n_unpaired_real = 40;
  spec.height = spec.width = 16;
  const Dataset d = Dataset::build(spec);
  for (const auto& s : d.paired()) {
    CHECK(s.airlight >= 0.7);
    CHECK(s.airlight <= 1.0);
    CHECK(s.beta >= 0.6);
    CHECK(s.beta <= 1.8);
  }
  for (const auto& s : d.real()) {
    CHECK(s.beta >= 1.2);
    CHECK(s.beta <= 2.5);
  }
}

TEST_CASE("real split differs from the synthetic split") {
  DatasetSpec spec;
  spec.n_paired = 100;
  spec.n_unpaired_real = 100;
  spec.height = spec.width = 32;
  spec.seed = 4;
  const Dataset d = Dataset::build(spec);
  double syn = 0, real = 0;
  for (const auto& s : d.paired()) syn += mean_dark_channel(s.hazy);
  for (const auto& s : d.real()) real += mean_dark_channel(s.hazy);
  CHECK(std::abs(syn / 100 - real / 100) > 0.01);
}

TEST_CASE("save and load round trip with manifest") {
  TempDir dir("ds");
  DatasetSpec spec;
  spec.n_paired = 4;
  spec.n_unpaired_real = 2;
  spec.height = spec.width = 16;
  spec.seed = 8;
  const Dataset d = Dataset::build(spec);
  d.save(dir.path());

  int pngs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path()))
    if (e.path().extension() == ".png") ++pngs;
  CHECK(pngs == 6);

  std::ifstream in(dir / "manifest.tsv");
  std::string line;
  int rows = 0, paired = 0;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string idx, file, a, beta, seed, split;
    REQUIRE(static_cast<bool>(is >> idx >> file >> a >> beta >> seed >> split));
    paired += split == "paired";
    ++rows;
  }
  CHECK(rows == 6);
  CHECK(paired == 4);

  const Dataset back = Dataset::load(dir.path());
  REQUIRE(back.paired().size() == 4);
  REQUIRE(back.real().size() == 2);
  REQUIRE(back.heldout_size() == 2);
  // PNG storage quantizes to 8 bits.
  CHECK(testutil::max_abs_diff(back.paired()[0].clean.tensor(), d.paired()[0].clean.tensor()) <= 0.5 / 255 + 1e-6);
  CHECK(testutil::max_abs_diff(back.real()[1].hazy.tensor(), d.real()[1].hazy.tensor()) <= 0.5 / 255 + 1e-6);
  CHECK(back.paired()[2].beta == d.paired()[2].beta);

  TempDir again("ds");
  Dataset::build(spec).save(again.path());
  CHECK(testutil::read_file(again / "manifest.tsv") == testutil::read_file(dir / "manifest.tsv"));
}

TEST_CASE("loading a directory without a manifest fails cleanly") {
  TempDir dir("ds");
  CHECK_THROWS(Dataset::load(dir.path()));
  testutil::write_file(dir / "manifest.tsv", "0\tx.png\t0.8\n");
  CHECK_THROWS(Dataset::load(dir.path()));
}
