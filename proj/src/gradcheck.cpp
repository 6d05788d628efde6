#include "semiuf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>

#include "semiuf/losses.hpp"
#include "semiuf/network.hpp"
#include "semiuf/ops.hpp"

namespace semiuf {

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size())
    throw std::invalid_argument("relative_error: length mismatch");
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
  return std::sqrt(diff) / denom;
}

namespace {

using V = Var<double>;
using Fn = std::function<V()>;

struct Input {
  std::string name;
  V var;
};

struct Case {
  std::string name;
  std::vector<Input> inputs;
  Fn fn;
  // Cases with ReLU/LeakyReLU inside cannot keep every pre-activation away
  // from the kink, so they probe with a smaller step.
  bool kinked = false;
};

constexpr double kKinkedStep = 1e-6;

Tensor<double> uniform(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<double> t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// Distinct values on an even grid in random order, so min/abs kinks sit far
// from every probe.
Tensor<double> separated(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<double> t(s);
  std::vector<std::size_t> perm(t.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  const double n = static_cast<double>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * (perm[i] + 0.5) / n;
  return t;
}

// pred = target + signed offset with magnitude in [0.05, 0.35].
Tensor<double> offset_from(const Tensor<double>& target, Rng& rng) {
  Tensor<double> t = target;
  for (auto& v : t.vec()) {
    const double m = rng.uniform(0.05, 0.35);
    v += rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

V leaf(Tensor<double> t) { return V::leaf(std::move(t), true); }

// Scalarises a tensor-valued function with a fixed random projection.
Fn projected(std::function<V()> f, Rng& rng) {
  Tensor<double> r;
  {
    NoGradGuard ng;
    r = uniform(f().shape(), rng, -1.0, 1.0);
  }
  V rv = V::leaf(std::move(r), false);
  return [f, rv] { return ops::sum(ops::mul(f(), rv)); };
}

std::vector<Input> store_inputs(ParamStore<double>& ps) {
  std::vector<Input> out;
  for (auto& [name, v] : ps.items()) out.push_back({name, v});
  return out;
}

// Moves norm gains/offsets away from their 1/0 initial values.
void jitter_params(ParamStore<double>& ps, Rng& rng) {
  for (auto& [name, v] : ps.items())
    for (auto& x : v.mutable_value().vec()) x += rng.uniform(-0.2, 0.2);
}

void add_inputs(std::vector<Input>& dst, std::vector<Input> src) {
  for (auto& i : src) dst.push_back(std::move(i));
}

std::vector<Case> build_cases(Rng& rng) {
  std::vector<Case> cases;

  {
    V gt = leaf(uniform({2, 3, 5, 6}, rng, 0, 1));
    V pred = leaf(offset_from(gt.value(), rng));
    V lt = leaf(uniform({2, 1, 5, 6}, rng, -2, 1));
    cases.push_back({"loss_ue", {{"gt", gt}, {"pred", pred}, {"log_theta", lt}},
                     [=] { return loss_ue(gt, pred, lt); }});
  }
  {
    V gt = leaf(uniform({2, 3, 5, 6}, rng, 0, 1));
    V pred = leaf(offset_from(gt.value(), rng));
    Tensor<double> lt = uniform({2, 1, 5, 6}, rng, -3, 1);
    cases.push_back({"loss_ugs", {{"gt", gt}, {"pred", pred}},
                     [=] { return loss_ugs(gt, pred, lt); }});
  }
  {
    V pseudo = leaf(uniform({2, 3, 4, 4}, rng, 0, 1));
    V redehazed = leaf(offset_from(pseudo.value(), rng));
    Tensor<double> lt = uniform({2, 1, 4, 4}, rng, -1, 2);
    cases.push_back({"loss_ugu", {{"pseudo_clean", pseudo}, {"re_dehazed", redehazed}},
                     [=] { return loss_ugu(pseudo, redehazed, lt); }});
  }
  {
    V gt = leaf(uniform({2, 3, 4, 5}, rng, 0, 1));
    V pred = leaf(offset_from(gt.value(), rng));
    cases.push_back({"pixel_l1", {{"gt", gt}, {"pred", pred}}, [=] { return pixel_l1(gt, pred); }});
  }
  {
    V clean = leaf(uniform({2, 3, 4, 5}, rng, 0, 1));
    V out = leaf(offset_from(clean.value(), rng));
    cases.push_back({"loss_identity", {{"clean", clean}, {"output", out}},
                     [=] { return loss_identity(clean, out); }});
  }
  {
    V img = leaf(separated({2, 3, 9, 9}, rng, 0, 1));
    cases.push_back({"loss_dc", {{"image", img}}, [=] { return loss_dc(img, 3); }});
  }
  {
    V img = leaf(separated({2, 3, 6, 7}, rng, 0, 1));
    cases.push_back({"loss_tv", {{"image", img}}, [=] { return loss_tv(img); }});
  }
  {
    V real = leaf(uniform({3, 8}, rng, -2, 2));
    V syn = V::leaf(uniform({3, 8}, rng, -2, 2), false);
    cases.push_back({"loss_kl", {{"v_real", real}}, [=] { return loss_kl(real, syn, 0.7); }});
  }
  {
    auto disc = std::make_shared<Discriminator<double>>(rng.next_u64());
    V fake = leaf(uniform({2, 3, 16, 16}, rng, 0, 1));
    std::vector<Input> in{{"fake", fake}};
    add_inputs(in, store_inputs(disc->params()));
    cases.push_back({"loss_adversarial.generator", in,
                     [=] { return loss_adversarial(*disc, fake, AdvMode::generator); }, true});
  }
  {
    auto disc = std::make_shared<Discriminator<double>>(rng.next_u64());
    V fake = leaf(uniform({2, 3, 16, 16}, rng, 0, 1));
    V real = leaf(uniform({2, 3, 16, 16}, rng, 0, 1));
    std::vector<Input> in{{"fake", fake}, {"real", real}};
    add_inputs(in, store_inputs(disc->params()));
    cases.push_back({"loss_adversarial.discriminator", in, [=] {
                       return loss_adversarial(*disc, fake, AdvMode::discriminator,
                                               std::optional<V>(real));
                     }, true});
  }
  {
    V x = leaf(uniform({2, 3, 7, 7}, rng, -1, 1));
    V w3 = leaf(uniform({4, 3, 3, 3}, rng, -0.5, 0.5));
    V b3 = leaf(uniform({4}, rng, -0.5, 0.5));
    V w1 = leaf(uniform({5, 3, 1, 1}, rng, -0.5, 0.5));
    V w4 = leaf(uniform({2, 3, 4, 4}, rng, -0.5, 0.5));
    V b4 = leaf(uniform({2}, rng, -0.5, 0.5));
    cases.push_back({"conv2d", {{"x", x}, {"w3", w3}, {"b3", b3}},
                     projected([=] { return ops::conv2d(x, w3, b3, 1, 1); }, rng)});
    cases.push_back({"conv2d.pointwise", {{"x", x}, {"w1", w1}},
                     projected([=] { return ops::conv2d(x, w1, V(), 1, 0); }, rng)});
    cases.push_back({"conv2d.strided", {{"x", x}, {"w4", w4}, {"b4", b4}},
                     projected([=] { return ops::conv2d(x, w4, b4, 2, 1); }, rng)});
  }
  {
    V x = leaf(uniform({2, 5, 3, 4}, rng, -1, 1));
    V g = leaf(uniform({5}, rng, 0.5, 1.5));
    V b = leaf(uniform({5}, rng, -0.5, 0.5));
    cases.push_back({"layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}},
                     projected([=] { return ops::layer_norm_channels(x, g, b); }, rng)});
  }
  {
    Tensor<double> t = separated({2, 3, 4, 4}, rng, -2, 2);
    for (auto& v : t.vec()) v += v >= 0 ? 0.01 : -0.01;
    V x = leaf(std::move(t));
    cases.push_back({"activations", {{"x", x}}, projected([=] {
                       return ops::add(ops::add(ops::gelu(x), ops::relu(x)),
                                       ops::add(ops::leaky_relu(x, 0.2), ops::clamp(x, -1.5, 1.5)));
                     }, rng)});
  }
  {
    V a = leaf(uniform({1, 8, 3, 3}, rng, -1, 1));
    V b = leaf(uniform({1, 4, 6, 6}, rng, -1, 1));
    cases.push_back({"reshape_ops", {{"a", a}, {"b", b}}, projected([=] {
                       V s = ops::pixel_shuffle(a, 2);  // [1,2,6,6]
                       V c = ops::concat_channels(s, ops::channel_slice(b, 1, 3));
                       V p = ops::global_avg_pool(ops::mul(c, c));
                       return ops::add(ops::sum(p), ops::sum(ops::scale(c, 0.5)));
                     }, rng)});
  }
  for (bool shift : {false, true}) {
    V qkv = leaf(uniform({1, 12, 8, 8}, rng, -1, 1));
    V bias = leaf(uniform({2, 49}, rng, -0.3, 0.3));
    cases.push_back({shift ? "window_attention.shifted" : "window_attention",
                     {{"qkv", qkv}, {"rel_bias", bias}},
                     projected([=] { return ops::window_attention(qkv, bias, 2, 4, shift); }, rng)});
  }
  {
    auto ps = std::make_shared<ParamStore<double>>();
    add_block_params(*ps, "blk", 4, 8, 2, 2, rng);
    jitter_params(*ps, rng);
    V x = leaf(uniform({1, 4, 4, 4}, rng, -1, 1));
    std::vector<Input> in{{"x", x}};
    add_inputs(in, store_inputs(*ps));
    // Only the attention sub-module's parameters are live in w_mhsa_pc.
    std::vector<Input> attn_in{{"x", x}};
    for (auto& i : in)
      if (i.name.rfind("blk.attn.", 0) == 0) attn_in.push_back(i);
    cases.push_back({"w_mhsa_pc", attn_in,
                     projected([=] { return w_mhsa_pc(*ps, "blk.attn", x, 2, 2, true); }, rng)});
    cases.push_back({"dehazeformer_block", in,
                     projected([=] { return dehazeformer_block(*ps, "blk", x, 2, 2, false); }, rng)});
  }
  {
    auto ps = std::make_shared<ParamStore<double>>();
    add_mdb_params(*ps, "mdb", 4, 2, 8, 2, 2, true, rng);
    jitter_params(*ps, rng);
    V x = leaf(uniform({1, 4, 4, 4}, rng, -1, 1));
    std::vector<Input> in{{"x", x}};
    add_inputs(in, store_inputs(*ps));
    cases.push_back({"mdb", in, projected([=] {
                       return mix_dehazeformer_block(*ps, "mdb", x, 2, 2, 2, true);
                     }, rng)});
  }
  {
    auto ps = std::make_shared<ParamStore<double>>();
    add_conv_params(*ps, "ueb.conv1", 4, 4, 3, rng);
    add_conv_params(*ps, "ueb.conv2", 1, 4, 3, rng);
    V f = leaf(uniform({1, 4, 5, 5}, rng, -1, 1));
    std::vector<Input> in{{"features", f}};
    add_inputs(in, store_inputs(*ps));
    cases.push_back({"ueb", in, projected([=] { return ueb_head(*ps, f); }, rng)});
  }
  {
    auto disc = std::make_shared<Discriminator<double>>(rng.next_u64());
    V img = leaf(uniform({1, 3, 16, 16}, rng, 0, 1));
    std::vector<Input> in{{"image", img}};
    add_inputs(in, store_inputs(disc->params()));
    cases.push_back({"discriminator", in, projected([=] { return disc->forward(img); }, rng), true});
  }
  {
    NetConfig cfg;
    cfg.embed_dims = {4, 8, 8, 8, 4};
    cfg.depths = {1, 1, 2, 1, 1};
    cfg.num_heads = {1, 2, 2, 2, 1};
    cfg.window_size = 2;
    auto net = std::make_shared<DehazeNet<double>>(cfg, rng.next_u64());
    jitter_params(net->params(), rng);
    V img = leaf(uniform({1, 3, 8, 8}, rng, 0, 1));
    std::vector<Input> in{{"image", img}};
    for (auto& i : store_inputs(net->params()))
      if (i.name.rfind("tail.", 0) != 0) in.push_back(i);
    // The clamped reconstruction is straight-through, so probe the
    // differentiable outputs: decoder features, uncertainty and KL tap.
    cases.push_back({"generator", in, projected([=] {
                       auto o = net->forward(img, true);
                       V f = ops::sum(ops::global_avg_pool(ops::mul(o.decoder_features,
                                                                    o.decoder_features)));
                       return ops::add(ops::add(f, ops::sum(ops::scale(o.log_theta, 0.3))),
                                       ops::sum(ops::mul(o.kl_embedding, o.kl_embedding)));
                     }, rng), true});
  }
  return cases;
}

GradcheckItem check_case(Case& c, const GradcheckOptions& opt, Rng& rng) {
  GradcheckItem item;
  item.name = c.name;
  for (auto& in : c.inputs) {
    in.var.set_requires_grad(true);
    in.var.zero_grad();
  }
  c.fn().backward();
  const bool fault = !opt.inject_fault.empty() && opt.inject_fault == c.name;

  for (auto& in : c.inputs) {
    Tensor<double>& value = in.var.mutable_value();
    const std::size_t n = value.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > static_cast<std::size_t>(opt.samples_per_tensor)) {
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(static_cast<std::size_t>(opt.samples_per_tensor));
    }
    std::vector<double> analytic, numeric;
    for (std::size_t i : idx) {
      double a = in.var.has_grad() ? in.var.grad()[i] : 0.0;
      analytic.push_back(fault ? -a : a);
      const double orig = value[i];
      const double h = c.kinked ? std::min(opt.step, kKinkedStep) : opt.step;
      double fp, fm;
      {
        NoGradGuard ng;
        value[i] = orig + h;
        fp = c.fn().item();
        value[i] = orig - h;
        fm = c.fn().item();
      }
      value[i] = orig;
      numeric.push_back((fp - fm) / (2 * h));
    }
    item.probes += static_cast<int>(idx.size());
    const double err = relative_error(analytic, numeric);
    if (err >= item.max_rel_error) {
      item.max_rel_error = err;
      item.worst_input = in.name;
    }
  }
  for (auto& in : c.inputs) in.var.zero_grad();
  item.passed = item.max_rel_error < opt.tolerance;
  return item;
}

}  // namespace

std::vector<std::string> gradcheck_item_names() {
  Rng rng(0);
  std::vector<std::string> names;
  for (const auto& c : build_cases(rng)) names.push_back(c.name);
  return names;
}

std::vector<GradcheckItem> run_gradcheck(const GradcheckOptions& opt) {
  Rng rng(opt.seed);
  auto cases = build_cases(rng);
  if (!opt.inject_fault.empty() &&
      std::none_of(cases.begin(), cases.end(), [&](const Case& c) { return c.name == opt.inject_fault; }))
    throw std::invalid_argument("unknown gradcheck item for fault injection: " + opt.inject_fault);
  std::vector<GradcheckItem> out;
  for (auto& c : cases) {
    if (!opt.filter.empty() && c.name.find(opt.filter) == std::string::npos) continue;
    out.push_back(check_case(c, opt, rng));
  }
  return out;
}

}  // namespace semiuf
