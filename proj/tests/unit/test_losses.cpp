#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "semiuf/losses.hpp"

using namespace semiuf;
using testutil::random_tensor;

namespace {

using D = Var<double>;

D cvar(Tensor<double> t) { return D::leaf(std::move(t), false); }

// [1,3,1,n] images whose channel-summed residual per pixel is `r[i]`,
// placed entirely on channel 1.
std::pair<Tensor<double>, Tensor<double>> residual_pair(const std::vector<double>& r) {
  const int n = static_cast<int>(r.size());
  Tensor<double> gt({1, 3, 1, n}, 0.5), pred({1, 3, 1, n}, 0.5);
  for (int i = 0; i < n; ++i) pred.at(0, 1, 0, i) = 0.5 - r[i];
  return {gt, pred};
}

Tensor<double> theta_map(const std::vector<double>& v) {
  return Tensor<double>({1, 1, 1, static_cast<int>(v.size())}, v);
}

double loss_ue_value(double r, double log_theta) {
  auto [gt, pred] = residual_pair({r});
  return loss_ue(cvar(gt), cvar(pred), cvar(theta_map({log_theta}))).item();
}

double mean_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Laplace likelihood and loss_ue

TEST_CASE("laplace log-likelihood values") {
  const Tensor<double> img({1, 3, 2, 2}, 0.3);
  const auto ll = laplace_loglik(img, img, Tensor<double>({1, 1, 2, 2}, 0.0));
  for (double v : ll.vec())
    CHECK(v == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  auto [gt, pred] = residual_pair({1.0});
  gt.fill(1.0);
  pred.fill(1.0);
  pred.at(0, 0, 0, 0) = 0.0;
  CHECK(laplace_loglik(gt, pred, theta_map({0.0}))[0] == doctest::Approx(-1.0 - std::log(2.0)));

  const double base = laplace_loglik(img, img, Tensor<double>({1, 1, 2, 2}, 0.4))[0];
  const double bumped = laplace_loglik(img, img, Tensor<double>({1, 1, 2, 2}, 1.4))[0];
  CHECK(base - bumped == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("loss_ue is zero for zero residual at unit scale") {
  const auto img = random_tensor<double>({2, 3, 4, 4}, 1, 0, 1);
  CHECK(loss_ue(cvar(img), cvar(img), cvar(Tensor<double>({2, 1, 4, 4}, 0.0))).item() == 0.0);
}

TEST_CASE("loss_ue at ln theta = 0 is the mean channel-summed L1") {
  const auto gt = random_tensor<double>({2, 3, 4, 4}, 2, 0, 1);
  const auto pred = random_tensor<double>({2, 3, 4, 4}, 3, 0, 1);
  const double ue = loss_ue(cvar(gt), cvar(pred), cvar(Tensor<double>({2, 1, 4, 4}, 0.0))).item();
  const double l1 = pixel_l1(cvar(gt), cvar(pred)).item();
  CHECK(ue == doctest::Approx(l1).epsilon(1e-14));
  CHECK(l1 == doctest::Approx(3.0 * mean_abs_diff(gt, pred)).epsilon(1e-14));
}

TEST_CASE("loss_ue minimum sits at theta = r/2") {
  for (double r : {0.1, 0.5, 2.0}) {
    double best = std::numeric_limits<double>::infinity(), arg = 0;
    const double step = 1e-3;
    for (double lt = -8.0; lt <= 8.0; lt += step) {
      const double v = loss_ue_value(r, lt);
      if (v < best) {
        best = v;
        arg = lt;
      }
    }
    CAPTURE(r);
    CHECK(std::abs(arg - std::log(r / 2)) <= step);
    CHECK(best == doctest::Approx(2.0 + 2.0 * std::log(r / 2)).epsilon(1e-6));
  }
  CHECK(loss_ue_value(0.5, std::log(0.25)) == doctest::Approx(-0.7725887).epsilon(1e-6));
}

// ---------------------------------------------------------------------------
// Uncertainty-guided terms

TEST_CASE("loss_ugs hand values") {
  auto [gt, pred] = residual_pair({0.2, 0.4});
  CHECK(loss_ugs(cvar(gt), cvar(pred), theta_map({0.0, 1.0})).item() == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(loss_ugs(cvar(gt), cvar(gt), theta_map({0.0, 1.0})).item() == 0.0);
  CHECK(loss_ugs(cvar(gt), cvar(pred), theta_map({0.7, 0.7})).item() == 0.0);
}

TEST_CASE("loss_ugu hand values") {
  auto [pseudo, redehazed] = residual_pair({0.3, 0.1});
  CHECK(loss_ugu(cvar(pseudo), cvar(redehazed), theta_map({-1.0, 1.0})).item() ==
        doctest::Approx(0.1).epsilon(1e-14));
  CHECK(loss_ugu(cvar(pseudo), cvar(pseudo), theta_map({-1.0, 1.0})).item() == 0.0);
  CHECK(loss_ugu(cvar(pseudo), cvar(redehazed), theta_map({-3.0, -3.0})).item() == 0.0);
}

TEST_CASE("guided L1 ignores a constant shift of the uncertainty map") {
  const auto gt = random_tensor<double>({2, 3, 8, 8}, 4, 0, 1);
  const auto pred = random_tensor<double>({2, 3, 8, 8}, 5, 0, 1);
  // Dyadic values keep the shifted differences exact.
  Tensor<double> lt({2, 1, 8, 8});
  Rng rng(6);
  for (auto& v : lt.vec()) v = rng.uniform_int(-64, 64) / 16.0;
  for (double shift : {0.5, -2.0, 3.25}) {
    Tensor<double> moved = lt;
    for (auto& v : moved.vec()) v += shift;
    CHECK(loss_ugs(cvar(gt), cvar(pred), lt).item() == loss_ugs(cvar(gt), cvar(pred), moved).item());
  }
}

TEST_CASE("guided L1 is positively homogeneous in the residual") {
  const auto gt = random_tensor<double>({1, 3, 8, 8}, 7, 0, 1);
  const auto pred = random_tensor<double>({1, 3, 8, 8}, 8, 0, 1);
  const auto lt = random_tensor<double>({1, 1, 8, 8}, 9, -2, 2);
  const double base = loss_ugs(cvar(gt), cvar(pred), lt).item();
  // alpha a power of two so scaling is exact.
  for (double alpha : {0.25, 2.0, 8.0}) {
    Tensor<double> g2 = gt, p2 = pred;
    for (auto& v : g2.vec()) v *= alpha;
    for (auto& v : p2.vec()) v *= alpha;
    CHECK(loss_ugs(cvar(g2), cvar(p2), lt).item() == doctest::Approx(alpha * base).epsilon(1e-14));
  }
}

TEST_CASE("guided L1 minimum is taken per image") {
  // Image 0 has ln theta {0, 1}; image 1 has {5, 5}. A batch-level minimum
  // would give image 1 positive weights.
  Tensor<double> gt({2, 3, 1, 2}, 0.5), pred({2, 3, 1, 2}, 0.5);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 2; ++i) pred.at(n, 0, 0, i) = 0.1;
  const Tensor<double> lt({2, 1, 1, 2}, std::vector<double>{0.0, 1.0, 5.0, 5.0});
  CHECK(loss_ugs(cvar(gt), cvar(pred), lt).item() == doctest::Approx(0.4 / 4).epsilon(1e-14));
}

// ---------------------------------------------------------------------------
// Adversarial, identity, dark channel, TV, KL

TEST_CASE("least-squares adversarial terms") {
  const D ones = cvar(Tensor<double>({2, 1, 4, 4}, 1.0));
  const D zeros = cvar(Tensor<double>({2, 1, 4, 4}, 0.0));
  CHECK(lsgan_generator(ones).item() == 0.0);
  CHECK(lsgan_generator(zeros).item() == 1.0);
  CHECK(lsgan_discriminator(ones, zeros).item() == 0.0);
  CHECK(lsgan_discriminator(zeros, ones).item() == 1.0);
}

TEST_CASE("loss_identity values") {
  const auto clean = random_tensor<double>({1, 3, 6, 6}, 10, 0, 0.9);
  CHECK(loss_identity(cvar(clean), cvar(clean)).item() == 0.0);
  Tensor<double> shifted = clean;
  for (auto& v : shifted.vec()) v += 0.1;
  CHECK(loss_identity(cvar(clean), cvar(shifted)).item() == doctest::Approx(0.1).epsilon(1e-12));
  const auto other = random_tensor<double>({1, 3, 6, 6}, 11, 0, 1);
  CHECK(loss_identity(cvar(clean), cvar(other)).item() ==
        doctest::Approx(mean_abs_diff(clean, other)).epsilon(1e-14));
}

TEST_CASE("dark channel") {
  for (double c : {0.0, 0.37}) {
    const auto dc = dark_channel(Tensor<double>({1, 3, 5, 5}, c), 3);
    for (double v : dc.vec()) CHECK(v == c);
  }
  Tensor<double> img({1, 3, 5, 5}, 1.0);
  for (int ch = 0; ch < 3; ++ch) img.at(0, ch, 2, 2) = 0.0;
  const auto dc = dark_channel(img, 3);
  REQUIRE(dc.shape() == Shape{1, 5, 5});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const bool near = std::abs(i - 2) <= 1 && std::abs(j - 2) <= 1;
      CHECK(dc[static_cast<std::size_t>(i * 5 + j)] == (near ? 0.0 : 1.0));
    }
  // The channel minimum comes first.
  Tensor<double> rgb({1, 3, 1, 1}, std::vector<double>{0.7, 0.2, 0.9});
  CHECK(dark_channel(rgb, 1)[0] == 0.2);
}

TEST_CASE("loss_dc values and gradient support") {
  CHECK(loss_dc(cvar(Tensor<double>({1, 3, 8, 8}, 0.0)), 3).item() == 0.0);
  CHECK(loss_dc(cvar(Tensor<double>({1, 3, 8, 8}, 1.0)), 3).item() == 1.0);

  auto img = D::leaf(random_tensor<double>({1, 3, 5, 5}, 12, 0.2, 1.0), true);
  img.mutable_value().at(0, 2, 2, 2) = 0.05;
  loss_dc(img, 3).backward();
  // Nine windows contain the global minimum at (2,2); each of the 25 output
  // pixels passes 1/25 to its own argmin.
  double total = 0;
  for (double g : img.grad().vec()) {
    CHECK(g >= 0.0);
    total += g;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(img.grad().at(0, 2, 2, 2) == doctest::Approx(9.0 / 25.0).epsilon(1e-14));
}

TEST_CASE("loss_tv values") {
  CHECK(loss_tv(cvar(Tensor<double>({1, 3, 4, 4}, 0.6))).item() == 0.0);
  const int w = 9;
  Tensor<double> ramp({1, 3, 1, w});
  for (int c = 0; c < 3; ++c)
    for (int x = 0; x < w; ++x) ramp.at(0, c, 0, x) = x / double(w - 1);
  CHECK(loss_tv(cvar(ramp)).item() == doctest::Approx(1.0 / (w - 1)).epsilon(1e-14));
  Tensor<double> checker({1, 3, 2, 2});
  for (int c = 0; c < 3; ++c) {
    checker.at(0, c, 0, 1) = 1.0;
    checker.at(0, c, 1, 0) = 1.0;
  }
  CHECK(loss_tv(cvar(checker)).item() == 2.0);
}

TEST_CASE("loss_kl values") {
  const D syn = cvar(Tensor<double>({1, 2}, std::vector<double>{1.0, 0.0}));
  const D real = cvar(Tensor<double>({1, 2}, std::vector<double>{0.0, 0.0}));
  const double p0 = 1.0 / (1.0 + std::exp(-1.0)), p1 = 1.0 - p0;
  const double ref = p0 * std::log(p0 / 0.5) + p1 * std::log(p1 / 0.5);
  const double kl = loss_kl(real, syn).item();
  CHECK(kl == doctest::Approx(ref).epsilon(1e-14));
  CHECK(std::abs(kl - 0.1115) < 1e-3);
  CHECK(loss_kl(syn, syn).item() == 0.0);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto a = cvar(random_tensor<double>({3, 8}, 100 + s, -4, 4));
    const auto b = cvar(random_tensor<double>({3, 8}, 200 + s, -4, 4));
    CHECK(loss_kl(a, b).item() >= -1e-9);
    CHECK(loss_kl(a, a, 0.5).item() == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  }
}

TEST_CASE("loss_kl sends gradient only to the real embedding") {
  auto real = D::leaf(random_tensor<double>({2, 4}, 13), true);
  auto syn = D::leaf(random_tensor<double>({2, 4}, 14), true);
  loss_kl(real, syn).backward();
  CHECK(real.has_grad());
  CHECK_FALSE(syn.has_grad());
}

// ---------------------------------------------------------------------------
// Composite objectives

TEST_CASE("composite weighted totals with default weights") {
  const LossWeights w;
  CHECK(weighted_total(Stage::teacher, Branch::supervised, {{"ue", 0.0}, {"adv", 0.0}}, w) == 0.0);
  CHECK(weighted_total(Stage::teacher, Branch::supervised, {{"ue", 1.0}, {"adv", 1.0}}, w) ==
        doctest::Approx(1.01).epsilon(1e-15));
  CHECK(weighted_total(Stage::teacher, Branch::unsupervised, {{"ide", 1.0}, {"dc", 1.0}, {"tv", 1.0}}, w) ==
        doctest::Approx(2.01001).epsilon(1e-15));
  CHECK(weighted_total(Stage::student, Branch::unsupervised,
                       {{"ugu", 1.0}, {"dc", 1.0}, {"tv", 1.0}, {"kl", 1.0}}, w) ==
        doctest::Approx(2.010011).epsilon(1e-15));
  CHECK(weighted_total(Stage::student, Branch::supervised, {{"ugs", 1.0}, {"adv", 1.0}}, w) ==
        doctest::Approx(1.01).epsilon(1e-15));
  CHECK_THROWS_AS(weighted_total(Stage::teacher, Branch::supervised, {{"ue", 1.0}}, w), std::invalid_argument);
}

TEST_CASE("ablation switches change the component set") {
  const LossWeights w;
  RunConfig no_unc;
  no_unc.use_uncertainty = false;
  CHECK(component_weights(Stage::teacher, Branch::supervised, w, no_unc).count("l1") == 1);
  CHECK(component_weights(Stage::student, Branch::unsupervised, w, no_unc).count("ide") == 1);
  RunConfig no_kl;
  no_kl.use_kl = false;
  CHECK(component_weights(Stage::student, Branch::unsupervised, w, no_kl).at("kl") == 0.0);
}

TEST_CASE("loss reports from real networks add up") {
  DehazeNet<float> teacher(NetConfig{}, 1), student(NetConfig{}, 1);
  Discriminator<float> disc(2);
  teacher.freeze_all(true);
  const ImageBatch hazy(random_tensor<float>({2, 3, 32, 32}, 20, 0, 1));
  const ImageBatch clean(random_tensor<float>({2, 3, 32, 32}, 21, 0, 1));
  const ImageBatch real(random_tensor<float>({2, 3, 32, 32}, 22, 0, 1));
  const LossBatch batch{&hazy, &clean, &real};
  const LossWeights w;
  for (Branch br : {Branch::supervised, Branch::unsupervised}) {
    for (const LossReport& r : {teacher_loss(teacher, disc, batch, w, br).report,
                                student_loss(student, teacher, disc, batch, w, br).report}) {
      CHECK(std::abs(r.total - r.weighted_sum()) <= 1e-6 * std::max(1.0, std::abs(r.total)));
      for (const auto& [k, v] : r.components) {
        CAPTURE(k);
        CHECK(std::isfinite(v));
      }
    }
  }
}

TEST_CASE("student identical to teacher: KL term equals the teacher's own cross-domain KL") {
  DehazeNet<float> teacher(NetConfig{}, 3), student(NetConfig{}, 3);
  Discriminator<float> disc(4);
  teacher.freeze_all(true);
  const ImageBatch hazy(random_tensor<float>({2, 3, 32, 32}, 23, 0, 1));
  const ImageBatch clean(random_tensor<float>({2, 3, 32, 32}, 24, 0, 1));
  const ImageBatch real(random_tensor<float>({2, 3, 32, 32}, 25, 0, 1));
  const auto r = student_loss(student, teacher, disc, {&hazy, &clean, &real}, LossWeights{}, Branch::unsupervised);
  const auto vs = forward(teacher, hazy, false).kl_embedding;
  const auto vr = forward(teacher, real, false).kl_embedding;
  const double ref = loss_kl(Var<float>::leaf(vr), Var<float>::leaf(vs)).item();
  CHECK(r.report.components.at("kl") == doctest::Approx(ref).epsilon(1e-6));
  CHECK(r.report.components.at("kl") > 0.0);

  const auto same = student_loss(student, teacher, disc, {&hazy, &clean, &hazy}, LossWeights{}, Branch::unsupervised);
  CHECK(same.report.components.at("kl") == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("log fields list components then the total") {
  LossReport r;
  r.components = {{"adv", 0.5}, {"ue", 0.25}};
  r.weights = {{"adv", 0.01}, {"ue", 1.0}};
  r.total = 0.255;
  CHECK(r.log_fields() == "adv=0.5\tue=0.25\ttotal=0.255");
}
