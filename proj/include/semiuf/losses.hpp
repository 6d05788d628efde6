#pragma once

// Loss terms for the teacher and student objectives. Each term is a fused
// autograd op with a hand-written gradient; tests/unit/test_losses.cpp and
// the gradcheck command compare them against finite differences.
//
// Pixel-norm convention: ||r||_1 at a pixel is the sum over the three colour
// channels, and N is the number of pixels (B*H*W). The single-channel
// log-uncertainty map broadcasts across channels.

#include <map>
#include <optional>
#include <string>

#include "semiuf/autograd.hpp"
#include "semiuf/core.hpp"
#include "semiuf/network.hpp"

namespace semiuf {

// ln p(gt | pred) = -||gt - pred||_1 / theta - 2 ln theta - ln 2, per pixel. [B,1,H,W].
template <class T>
Tensor<T> laplace_loglik(const Tensor<T>& gt, const Tensor<T>& pred, const Tensor<T>& log_theta);

// (1/N) sum_i exp(-ln theta_i) ||gt_i - pred_i||_1 + 2 ln theta_i
template <class T>
Var<T> loss_ue(const Var<T>& gt, const Var<T>& pred, const Var<T>& log_theta);

// (1/N) sum_i (ln theta_i - min ln theta) ||target_i - pred_i||_1 with the
// minimum taken per image and the whole weight map detached.
template <class T>
Var<T> uncertainty_guided_l1(const Var<T>& target, const Var<T>& pred, const Tensor<T>& log_theta);

template <class T>
Var<T> loss_ugs(const Var<T>& gt, const Var<T>& pred_student, const Tensor<T>& log_theta) {
  return uncertainty_guided_l1(gt, pred_student, log_theta);
}

template <class T>
Var<T> loss_ugu(const Var<T>& pseudo_clean, const Var<T>& re_dehazed,
                const Tensor<T>& log_theta_real) {
  return uncertainty_guided_l1(pseudo_clean, re_dehazed, log_theta_real);
}

// (1/N) sum_i ||target_i - pred_i||_1: the ln(theta) = 0 special case of loss_ue.
template <class T>
Var<T> pixel_l1(const Var<T>& target, const Var<T>& pred);

// mean |G(clean) - clean| over every element.
template <class T>
Var<T> loss_identity(const Var<T>& clean, const Var<T>& net_output_on_clean);

// Least-squares GAN terms on raw discriminator scores.
template <class T>
Var<T> lsgan_generator(const Var<T>& d_fake);
template <class T>
Var<T> lsgan_discriminator(const Var<T>& d_real, const Var<T>& d_fake);

enum class AdvMode { generator, discriminator };

// generator: mean (D(fake)-1)^2; discriminator: 0.5 mean (D(real)-1)^2 + 0.5 mean D(fake)^2.
// `real` is required exactly in discriminator mode.
template <class T>
Var<T> loss_adversarial(const Discriminator<T>& disc, const Var<T>& fake, AdvMode mode,
                        const std::optional<Var<T>>& real = std::nullopt);

// Minimum over colour channels, then over a patch x patch window with
// edge-replicated borders. Returns [B,H,W].
template <class T>
Tensor<T> dark_channel(const Tensor<T>& img, int patch = 7);

// mean of dark_channel(img, patch)
template <class T>
Var<T> loss_dc(const Var<T>& img, int patch = 7);

// Anisotropic TV: mean |horizontal difference| + mean |vertical difference|.
template <class T>
Var<T> loss_tv(const Var<T>& img);

// Batch mean of KL(softmax(v_syn/t) || softmax(v_real/t)); v_syn is the target
// and receives no gradient.
template <class T>
Var<T> loss_kl(const Var<T>& v_real, const Var<T>& v_syn, T temperature = T(1));

// ---------------------------------------------------------------------------
// Composite objectives

enum class Stage { teacher, student };
enum class Branch { supervised, unsupervised };

std::string stage_name(Stage s);
std::string branch_name(Branch b);

struct LossReport {
  double total = 0.0;
  std::map<std::string, double> components;  // unweighted term values
  std::map<std::string, double> weights;     // lambda applied to each component

  // Sum of weight * component; equals total up to rounding.
  double weighted_sum() const;
  // "name=value" pairs, tab separated, components in name order, then total.
  std::string log_fields() const;
};

// Which lambda multiplies which named component, per stage and branch.
std::map<std::string, double> component_weights(Stage stage, Branch branch, const LossWeights& w,
                                                 const RunConfig& opts = {});

// Total from already-evaluated components.
double weighted_total(Stage stage, Branch branch, const std::map<std::string, double>& components,
                      const LossWeights& w, const RunConfig& opts = {});

struct LossBatch {
  const ImageBatch* syn_hazy = nullptr;
  const ImageBatch* syn_clean = nullptr;
  const ImageBatch* real_hazy = nullptr;
};

struct LossResult {
  Var<float> total;
  LossReport report;
  Var<float> fake;  // generator output scored by the discriminator (supervised branch)
  Var<float> real;  // matching real samples for the discriminator update
};

// Supervised: l1*L_ue + l2*L_a. Unsupervised: l3*L_ide + l4*L_dc + l5*L_tv.
LossResult teacher_loss(const DehazeNet<float>& teacher, const Discriminator<float>& disc,
                        const LossBatch& batch, const LossWeights& w, Branch branch,
                        const RunConfig& opts = {});

// Supervised: l1*L_ugs + l2*L_a. Unsupervised: l3*L_ugu + l4*L_dc + l5*L_tv + l6*L_kl.
// The teacher must be fully frozen.
LossResult student_loss(const DehazeNet<float>& student, const DehazeNet<float>& teacher,
                        const Discriminator<float>& disc, const LossBatch& batch,
                        const LossWeights& w, Branch branch, const RunConfig& opts = {});

}  // namespace semiuf
