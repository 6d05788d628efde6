#include "semiuf/losses.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "semiuf/ops.hpp"

namespace semiuf {

namespace {

template <class T>
T sign(T v) {
  return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0));
}

void require_images(const Shape& a, const Shape& b, const char* op) {
  if (a != b || a.size() != 4)
    throw ShapeError(std::string(op) + ": image shapes differ " + shape_str(a) + " vs " +
                     shape_str(b));
}

void require_map(const Shape& img, const Shape& map, const char* op) {
  if (map.size() != 4 || map[0] != img[0] || map[1] != 1 || map[2] != img[2] || map[3] != img[3])
    throw ShapeError(std::string(op) + ": uncertainty map " + shape_str(map) +
                     " does not match images " + shape_str(img));
}

// Per-pixel weighted L1 shared by several terms: (1/N) sum_i w_i ||a_i - b_i||_1.
// Weight gradients are produced only when wgrad is set (loss_ue handles its own).
template <class T>
Var<T> weighted_pixel_l1(const Var<T>& target, const Var<T>& pred, std::vector<T> weight,
                         T norm) {
  const auto& a = target.value();
  const auto& b = pred.value();
  const int B = a.dim(0), C = a.dim(1), P = a.dim(2) * a.dim(3);
  T acc = 0;
  for (int n = 0; n < B; ++n)
    for (int i = 0; i < P; ++i) {
      T r = 0;
      for (int c = 0; c < C; ++c) {
        const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P + i;
        r += std::abs(a[o] - b[o]);
      }
      acc += weight[static_cast<std::size_t>(n) * P + i] * r;
    }
  return make_result<T>(Tensor<T>({1}, acc / norm), {target, pred},
                        [=, weight = std::move(weight)](Node<T>& node) {
                          const auto& a = node.parents[0]->value;
                          const auto& b = node.parents[1]->value;
                          Tensor<T>* ga = parent_grad(node, 0);
                          Tensor<T>* gb = parent_grad(node, 1);
                          const T g = node.grad[0] / norm;
                          for (int n = 0; n < B; ++n)
                            for (int c = 0; c < C; ++c)
                              for (int i = 0; i < P; ++i) {
                                const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P + i;
                                const T d = g * weight[static_cast<std::size_t>(n) * P + i] *
                                            sign(a[o] - b[o]);
                                if (ga) (*ga)[o] += d;
                                if (gb) (*gb)[o] -= d;
                              }
                        });
}

}  // namespace

template <class T>
Tensor<T> laplace_loglik(const Tensor<T>& gt, const Tensor<T>& pred, const Tensor<T>& log_theta) {
  require_images(gt.shape(), pred.shape(), "laplace_loglik");
  require_map(gt.shape(), log_theta.shape(), "laplace_loglik");
  const int B = gt.dim(0), C = gt.dim(1), P = gt.dim(2) * gt.dim(3);
  Tensor<T> out(log_theta.shape());
  for (int n = 0; n < B; ++n)
    for (int i = 0; i < P; ++i) {
      T r = 0;
      for (int c = 0; c < C; ++c) {
        const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P + i;
        r += std::abs(gt[o] - pred[o]);
      }
      const T l = log_theta[static_cast<std::size_t>(n) * P + i];
      out[static_cast<std::size_t>(n) * P + i] = -r * std::exp(-l) - T(2) * l - std::log(T(2));
    }
  return out;
}

template <class T>
Var<T> loss_ue(const Var<T>& gt, const Var<T>& pred, const Var<T>& log_theta) {
  require_images(gt.shape(), pred.shape(), "loss_ue");
  require_map(gt.shape(), log_theta.shape(), "loss_ue");
  const int B = gt.dim(0), C = gt.dim(1), P = gt.dim(2) * gt.dim(3);
  const T N = static_cast<T>(B) * P;
  std::vector<T> resid(static_cast<std::size_t>(B) * P);
  T acc = 0;
  const auto& a = gt.value();
  const auto& b = pred.value();
  const auto& l = log_theta.value();
  for (int n = 0; n < B; ++n)
    for (int i = 0; i < P; ++i) {
      T r = 0;
      for (int c = 0; c < C; ++c) {
        const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P + i;
        r += std::abs(a[o] - b[o]);
      }
      const std::size_t k = static_cast<std::size_t>(n) * P + i;
      resid[k] = r;
      acc += std::exp(-l[k]) * r + T(2) * l[k];
    }
  return make_result<T>(
      Tensor<T>({1}, acc / N), {gt, pred, log_theta},
      [=, resid = std::move(resid)](Node<T>& node) {
        const auto& a = node.parents[0]->value;
        const auto& b = node.parents[1]->value;
        const auto& l = node.parents[2]->value;
        Tensor<T>* ga = parent_grad(node, 0);
        Tensor<T>* gb = parent_grad(node, 1);
        Tensor<T>* gl = parent_grad(node, 2);
        const T g = node.grad[0] / N;
        for (int n = 0; n < B; ++n)
          for (int i = 0; i < P; ++i) {
            const std::size_t k = static_cast<std::size_t>(n) * P + i;
            const T inv = std::exp(-l[k]);
            if (gl) (*gl)[k] += g * (T(2) - inv * resid[k]);
            if (ga || gb)
              for (int c = 0; c < C; ++c) {
                const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P + i;
                const T d = g * inv * sign(a[o] - b[o]);
                if (ga) (*ga)[o] += d;
                if (gb) (*gb)[o] -= d;
              }
          }
      });
}

template <class T>
Var<T> uncertainty_guided_l1(const Var<T>& target, const Var<T>& pred, const Tensor<T>& log_theta) {
  require_images(target.shape(), pred.shape(), "uncertainty_guided_l1");
  require_map(target.shape(), log_theta.shape(), "uncertainty_guided_l1");
  const int B = target.dim(0), P = target.dim(2) * target.dim(3);
  std::vector<T> weight(log_theta.vec().begin(), log_theta.vec().end());
  for (int n = 0; n < B; ++n) {
    T* w = weight.data() + static_cast<std::size_t>(n) * P;
    const T mn = *std::min_element(w, w + P);
    for (int i = 0; i < P; ++i) w[i] -= mn;
  }
  return weighted_pixel_l1(target, pred, std::move(weight), static_cast<T>(B) * P);
}

template <class T>
Var<T> pixel_l1(const Var<T>& target, const Var<T>& pred) {
  require_images(target.shape(), pred.shape(), "pixel_l1");
  const int B = target.dim(0), P = target.dim(2) * target.dim(3);
  return weighted_pixel_l1(target, pred, std::vector<T>(static_cast<std::size_t>(B) * P, T(1)),
                           static_cast<T>(B) * P);
}

template <class T>
Var<T> loss_identity(const Var<T>& clean, const Var<T>& out) {
  require_images(clean.shape(), out.shape(), "loss_identity");
  const int B = clean.dim(0), C = clean.dim(1), P = clean.dim(2) * clean.dim(3);
  return weighted_pixel_l1(clean, out, std::vector<T>(static_cast<std::size_t>(B) * P, T(1)),
                           static_cast<T>(B) * C * P);
}

namespace {

// mean (x - target)^2
template <class T>
Var<T> mse_to(const Var<T>& x, T target) {
  const auto& v = x.value();
  T acc = 0;
  for (T e : v.vec()) acc += (e - target) * (e - target);
  const T n = static_cast<T>(v.size());
  return make_result<T>(Tensor<T>({1}, acc / n), {x}, [=](Node<T>& node) {
    if (auto* g = parent_grad(node, 0)) {
      const auto& v = node.parents[0]->value;
      for (std::size_t i = 0; i < v.size(); ++i) (*g)[i] += node.grad[0] * T(2) * (v[i] - target) / n;
    }
  });
}

}  // namespace

template <class T>
Var<T> lsgan_generator(const Var<T>& d_fake) {
  return mse_to(d_fake, T(1));
}

template <class T>
Var<T> lsgan_discriminator(const Var<T>& d_real, const Var<T>& d_fake) {
  return ops::add(ops::scale(mse_to(d_real, T(1)), T(0.5)), ops::scale(mse_to(d_fake, T(0)), T(0.5)));
}

template <class T>
Var<T> loss_adversarial(const Discriminator<T>& disc, const Var<T>& fake, AdvMode mode,
                        const std::optional<Var<T>>& real) {
  if (mode == AdvMode::generator) {
    if (real) throw std::invalid_argument("loss_adversarial: real samples only in discriminator mode");
    return lsgan_generator(disc.forward(fake));
  }
  if (!real) throw std::invalid_argument("loss_adversarial: discriminator mode needs real samples");
  return lsgan_discriminator(disc.forward(*real), disc.forward(fake));
}

namespace {

// Dark channel value and the flat index of the input element that attains it.
template <class T>
void dark_channel_impl(const Tensor<T>& img, int patch, Tensor<T>& out, std::vector<std::size_t>& arg) {
  if (img.rank() != 4) throw ShapeError("dark_channel expects [B,C,H,W]");
  if (patch <= 0 || patch % 2 == 0) throw std::invalid_argument("dark_channel: patch must be odd");
  const int B = img.dim(0), C = img.dim(1), H = img.dim(2), W = img.dim(3);
  const int P = H * W, r = patch / 2;
  out = Tensor<T>({B, H, W});
  arg.assign(static_cast<std::size_t>(B) * P, 0);
  std::vector<T> cmin(P);
  std::vector<std::size_t> cidx(P);
  for (int n = 0; n < B; ++n) {
    for (int i = 0; i < P; ++i) {
      std::size_t best = static_cast<std::size_t>(n) * C * P + i;
      for (int c = 1; c < C; ++c) {
        const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P + i;
        if (img[o] < img[best]) best = o;
      }
      cmin[i] = img[best];
      cidx[i] = best;
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int bi = -1;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = std::clamp(y + dy, 0, H - 1);
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = std::clamp(x + dx, 0, W - 1);
            const int j = yy * W + xx;
            if (bi < 0 || cmin[j] < cmin[bi]) bi = j;
          }
        }
        const std::size_t k = static_cast<std::size_t>(n) * P + y * W + x;
        out[k] = cmin[bi];
        arg[k] = cidx[bi];
      }
  }
}

}  // namespace

template <class T>
Tensor<T> dark_channel(const Tensor<T>& img, int patch) {
  Tensor<T> out;
  std::vector<std::size_t> arg;
  dark_channel_impl(img, patch, out, arg);
  return out;
}

template <class T>
Var<T> loss_dc(const Var<T>& img, int patch) {
  Tensor<T> dc;
  std::vector<std::size_t> arg;
  dark_channel_impl(img.value(), patch, dc, arg);
  T acc = 0;
  for (T v : dc.vec()) acc += v;
  const T n = static_cast<T>(dc.size());
  return make_result<T>(Tensor<T>({1}, acc / n), {img}, [=, arg = std::move(arg)](Node<T>& node) {
    if (auto* g = parent_grad(node, 0))
      for (std::size_t k : arg) (*g)[k] += node.grad[0] / n;
  });
}

template <class T>
Var<T> loss_tv(const Var<T>& img) {
  const auto& v = img.value();
  if (v.rank() != 4) throw ShapeError("loss_tv expects [B,C,H,W]");
  const int BC = v.dim(0) * v.dim(1), H = v.dim(2), W = v.dim(3);
  const T nh = static_cast<T>(BC) * H * (W - 1);
  const T nv = static_cast<T>(BC) * (H - 1) * W;
  T sh = 0, sv = 0;
  for (int p = 0; p < BC; ++p) {
    const T* pl = v.data() + static_cast<std::size_t>(p) * H * W;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (x + 1 < W) sh += std::abs(pl[y * W + x + 1] - pl[y * W + x]);
        if (y + 1 < H) sv += std::abs(pl[(y + 1) * W + x] - pl[y * W + x]);
      }
  }
  const T value = (nh > 0 ? sh / nh : T(0)) + (nv > 0 ? sv / nv : T(0));
  return make_result<T>(Tensor<T>({1}, value), {img}, [=](Node<T>& node) {
    auto* g = parent_grad(node, 0);
    if (!g) return;
    const auto& v = node.parents[0]->value;
    const T gh = nh > 0 ? node.grad[0] / nh : T(0);
    const T gv = nv > 0 ? node.grad[0] / nv : T(0);
    for (int p = 0; p < BC; ++p) {
      const std::size_t base = static_cast<std::size_t>(p) * H * W;
      const T* pl = v.data() + base;
      T* gp = g->data() + base;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (x + 1 < W) {
            const T s = sign(pl[y * W + x + 1] - pl[y * W + x]) * gh;
            gp[y * W + x + 1] += s;
            gp[y * W + x] -= s;
          }
          if (y + 1 < H) {
            const T s = sign(pl[(y + 1) * W + x] - pl[y * W + x]) * gv;
            gp[(y + 1) * W + x] += s;
            gp[y * W + x] -= s;
          }
        }
    }
  });
}

namespace {
template <class T>
std::vector<T> softmax_rows(const T* v, int rows, int cols, T temperature) {
  std::vector<T> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    const T* x = v + static_cast<std::size_t>(r) * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, x[c] / temperature);
    T z = 0;
    for (int c = 0; c < cols; ++c) z += std::exp(x[c] / temperature - mx);
    for (int c = 0; c < cols; ++c)
      out[static_cast<std::size_t>(r) * cols + c] = std::exp(x[c] / temperature - mx) / z;
  }
  return out;
}
}  // namespace

template <class T>
Var<T> loss_kl(const Var<T>& v_real, const Var<T>& v_syn, T temperature) {
  if (v_real.shape() != v_syn.shape() || v_real.value().rank() != 2)
    throw ShapeError("loss_kl: embeddings must both be [B,C], got " + shape_str(v_real.shape()) +
                     " and " + shape_str(v_syn.shape()));
  const int B = v_real.dim(0), C = v_real.dim(1);
  std::vector<T> p = softmax_rows(v_syn.value().data(), B, C, temperature);
  std::vector<T> q = softmax_rows(v_real.value().data(), B, C, temperature);
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
  // Only v_real is a parent: the synthetic embedding is the fixed target.
  return make_result<T>(Tensor<T>({1}, acc / B), {v_real},
                        [=, p = std::move(p), q = std::move(q)](Node<T>& node) {
                          if (auto* g = parent_grad(node, 0))
                            for (std::size_t i = 0; i < p.size(); ++i)
                              (*g)[i] += node.grad[0] * (q[i] - p[i]) / (temperature * B);
                        });
}

// ---------------------------------------------------------------------------
// Composites

std::string stage_name(Stage s) { return s == Stage::teacher ? "teacher" : "student"; }
std::string branch_name(Branch b) { return b == Branch::supervised ? "supervised" : "unsupervised"; }

double LossReport::weighted_sum() const {
  double s = 0.0;
  for (const auto& [k, v] : components) s += weights.at(k) * v;
  return s;
}

std::string LossReport::log_fields() const {
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& [k, v] : components) os << k << '=' << v << '\t';
  os << "total=" << total;
  return os.str();
}

std::map<std::string, double> component_weights(Stage stage, Branch branch, const LossWeights& w,
                                                 const RunConfig& opts) {
  std::map<std::string, double> m;
  const bool unc = opts.use_uncertainty;
  if (branch == Branch::supervised) {
    if (stage == Stage::teacher) m[unc ? "ue" : "l1"] = w.lambda1;
    else m[unc ? "ugs" : "l1"] = w.lambda1;
    m["adv"] = w.lambda2;
    if (stage == Stage::student && opts.base_l1 && unc) m["base_l1"] = w.lambda1;
  } else {
    if (stage == Stage::teacher) m["ide"] = w.lambda3;
    else m[unc ? "ugu" : "ide"] = w.lambda3;
    m["dc"] = w.lambda4;
    m["tv"] = w.lambda5;
    if (stage == Stage::student) m["kl"] = opts.use_kl ? w.lambda6 : 0.0;
  }
  return m;
}

double weighted_total(Stage stage, Branch branch, const std::map<std::string, double>& components,
                      const LossWeights& w, const RunConfig& opts) {
  double t = 0.0;
  for (const auto& [k, lambda] : component_weights(stage, branch, w, opts)) {
    auto it = components.find(k);
    if (it == components.end()) throw std::invalid_argument("missing loss component " + k);
    t += lambda * it->second;
  }
  return t;
}

namespace {

Var<float> image_var(const ImageBatch& b) { return Var<float>::leaf(b.tensor()); }

LossResult assemble(Stage stage, Branch branch, const LossWeights& w, const RunConfig& opts,
                    const std::map<std::string, Var<float>>& terms) {
  LossResult res;
  res.report.weights = component_weights(stage, branch, w, opts);
  Var<float> total;
  for (const auto& [name, lambda] : res.report.weights) {
    const Var<float>& term = terms.at(name);
    res.report.components[name] = term.item();
    Var<float> scaled = ops::scale(term, static_cast<float>(lambda));
    total = total.defined() ? ops::add(total, scaled) : scaled;
  }
  res.total = total;
  res.report.total = total.item();
  return res;
}

}  // namespace

LossResult teacher_loss(const DehazeNet<float>& teacher, const Discriminator<float>& disc,
                        const LossBatch& batch, const LossWeights& w, Branch branch,
                        const RunConfig& opts) {
  std::map<std::string, Var<float>> terms;
  Var<float> fake, real;
  if (branch == Branch::supervised) {
    if (!batch.syn_hazy || !batch.syn_clean)
      throw std::invalid_argument("teacher supervised branch needs hazy/clean synthetic pairs");
    auto out = teacher.forward(image_var(*batch.syn_hazy), opts.use_uncertainty);
    Var<float> gt = image_var(*batch.syn_clean);
    if (opts.use_uncertainty) terms["ue"] = loss_ue(gt, out.dehazed, out.log_theta);
    else terms["l1"] = pixel_l1(gt, out.dehazed);
    terms["adv"] = lsgan_generator(disc.forward(out.dehazed));
    fake = out.dehazed;
    real = gt;
  } else {
    if (!batch.real_hazy) throw std::invalid_argument("teacher unsupervised branch needs real images");
    auto out = teacher.forward(image_var(*batch.real_hazy), false);
    if (opts.identity_on_pseudo) {
      Var<float> pseudo = out.dehazed.detach();
      terms["ide"] = loss_identity(pseudo, teacher.forward(pseudo, false).dehazed);
    } else {
      if (!batch.syn_clean) throw std::invalid_argument("identity loss needs clean synthetic images");
      Var<float> clean = image_var(*batch.syn_clean);
      terms["ide"] = loss_identity(clean, teacher.forward(clean, false).dehazed);
    }
    terms["dc"] = loss_dc(out.dehazed);
    terms["tv"] = loss_tv(out.dehazed);
  }
  LossResult res = assemble(Stage::teacher, branch, w, opts, terms);
  res.fake = fake;
  res.real = real;
  return res;
}

LossResult student_loss(const DehazeNet<float>& student, const DehazeNet<float>& teacher,
                        const Discriminator<float>& disc, const LossBatch& batch,
                        const LossWeights& w, Branch branch, const RunConfig& opts) {
  for (const auto& [name, p] : teacher.params().items())
    if (p.requires_grad())
      throw std::logic_error("student_loss: teacher parameter " + name + " is not frozen");
  std::map<std::string, Var<float>> terms;
  Var<float> fake, real;
  if (branch == Branch::supervised) {
    if (!batch.syn_hazy || !batch.syn_clean)
      throw std::invalid_argument("student supervised branch needs hazy/clean synthetic pairs");
    Var<float> hazy = image_var(*batch.syn_hazy);
    Var<float> gt = image_var(*batch.syn_clean);
    auto out = student.forward(hazy, false);
    if (opts.use_uncertainty) {
      Tensor<float> log_theta;
      {
        NoGradGuard ng;
        log_theta = teacher.forward(hazy, true).log_theta.value();
      }
      terms["ugs"] = loss_ugs(gt, out.dehazed, log_theta);
      if (opts.base_l1) terms["base_l1"] = pixel_l1(gt, out.dehazed);
    } else {
      terms["l1"] = pixel_l1(gt, out.dehazed);
    }
    terms["adv"] = lsgan_generator(disc.forward(out.dehazed));
    fake = out.dehazed;
    real = gt;
  } else {
    if (!batch.real_hazy || !batch.syn_hazy)
      throw std::invalid_argument("student unsupervised branch needs real and synthetic hazy images");
    Var<float> real_hazy = image_var(*batch.real_hazy);
    Var<float> pseudo, v_syn;
    Tensor<float> log_theta_real;
    {
      NoGradGuard ng;
      auto t_real = teacher.forward(real_hazy, opts.use_uncertainty);
      pseudo = t_real.dehazed.detach();
      if (opts.use_uncertainty) log_theta_real = t_real.log_theta.value();
      v_syn = teacher.forward(image_var(*batch.syn_hazy), false).kl_embedding.detach();
    }
    auto out = student.forward(real_hazy, false);
    Var<float> re = opts.ugu_pseudo_label ? out.dehazed : student.forward(pseudo, false).dehazed;
    if (opts.use_uncertainty) terms["ugu"] = loss_ugu(pseudo, re, log_theta_real);
    else terms["ide"] = pixel_l1(pseudo, re);
    terms["dc"] = loss_dc(out.dehazed);
    terms["tv"] = loss_tv(out.dehazed);
    terms["kl"] = loss_kl(out.kl_embedding, v_syn, static_cast<float>(opts.kl_temperature));
  }
  LossResult res = assemble(Stage::student, branch, w, opts, terms);
  res.fake = fake;
  res.real = real;
  return res;
}

#define SEMIUF_INSTANTIATE(T)                                                                  \
  template Tensor<T> laplace_loglik(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Var<T> loss_ue(const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> uncertainty_guided_l1(const Var<T>&, const Var<T>&, const Tensor<T>&);       \
  template Var<T> pixel_l1(const Var<T>&, const Var<T>&);                                      \
  template Var<T> loss_identity(const Var<T>&, const Var<T>&);                                 \
  template Var<T> lsgan_generator(const Var<T>&);                                              \
  template Var<T> lsgan_discriminator(const Var<T>&, const Var<T>&);                           \
  template Var<T> loss_adversarial(const Discriminator<T>&, const Var<T>&, AdvMode,            \
                                   const std::optional<Var<T>>&);                              \
  template Tensor<T> dark_channel(const Tensor<T>&, int);                                      \
  template Var<T> loss_dc(const Var<T>&, int);                                                 \
  template Var<T> loss_tv(const Var<T>&);                                                      \
  template Var<T> loss_kl(const Var<T>&, const Var<T>&, T);

SEMIUF_INSTANTIATE(float)
SEMIUF_INSTANTIATE(double)
#undef SEMIUF_INSTANTIATE

}  // namespace semiuf
