#include "semiuf/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace semiuf {

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.empty()) throw ShapeError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double c = (size - 1) / 2.0;
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-((i - c) * (i - c)) / (2 * sigma * sigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

// Separable valid-mode filtering of one plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                 const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ho = h - n + 1, wo = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimOptions& opt) {
  if (a.shape() != b.shape())
    throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int c, h, w;
  if (a.rank() == 4 && a.dim(0) == 1) {
    c = a.dim(1), h = a.dim(2), w = a.dim(3);
  } else if (a.rank() == 3) {
    c = a.dim(0), h = a.dim(1), w = a.dim(2);
  } else {
    throw ShapeError("ssim expects a single image [1,C,H,W] or [C,H,W], got " + shape_str(a.shape()));
  }
  if (h < opt.window || w < opt.window)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " smaller than window " + std::to_string(opt.window));
  const auto k = gaussian_kernel(opt.window, opt.sigma);
  const double c1 = (opt.k1 * 1.0) * (opt.k1 * 1.0);
  const double c2 = (opt.k2 * 1.0) * (opt.k2 * 1.0);
  const std::size_t p = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  std::size_t count = 0;
  for (int ch = 0; ch < c; ++ch) {
    std::vector<double> x(p), y(p), xx(p), yy(p), xy(p);
    for (std::size_t i = 0; i < p; ++i) {
      x[i] = a[ch * p + i];
      y[i] = b[ch * p + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k);
    const auto sxy = filter_valid(xy, h, w, k);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      const double num = (2 * mx[i] * my[i] + c1) * (2 * cov + c2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

Tensor<float> quantize8(const Tensor<float>& img) {
  Tensor<float> out = img;
  for (auto& v : out.vec()) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return out;
}

std::string EvalReport::to_tsv() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  if (!config_echo.empty()) {
    std::istringstream cfg(config_echo);
    std::string line;
    while (std::getline(cfg, line)) os << "# " << line << '\n';
  }
  os << "name\tpsnr\tssim\n";
  for (const auto& r : per_image) os << r.name << '\t' << r.psnr << '\t' << r.ssim << '\n';
  os << "AGGREGATE\t" << mean_psnr << '\t' << mean_ssim << '\n';
  return os.str();
}

EvalReport evaluate(const Dehazer& dehaze, const std::vector<EvalItem>& items,
                    const std::filesystem::path& out, bool quantize,
                    const std::string& config_echo) {
  EvalReport rep;
  rep.config_echo = config_echo;
  for (const auto& it : items) {
    Tensor<float> pred = dehaze(it.hazy).tensor();
    Tensor<float> gt = it.clean.tensor();
    if (quantize) {
      pred = quantize8(pred);
      gt = quantize8(gt);
    }
    rep.per_image.push_back({it.name, psnr(pred, gt), ssim(pred, gt)});
  }
  if (!rep.per_image.empty()) {
    for (const auto& r : rep.per_image) {
      rep.mean_psnr += r.psnr;
      rep.mean_ssim += r.ssim;
    }
    rep.mean_psnr /= static_cast<double>(rep.per_image.size());
    rep.mean_ssim /= static_cast<double>(rep.per_image.size());
  }
  if (!out.empty()) {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write report " + out.string());
    f << rep.to_tsv();
    if (!f) throw std::runtime_error("failed writing report " + out.string());
  }
  return rep;
}

EvalReport evaluate(const DehazeNet<float>& net, const std::vector<EvalItem>& items,
                    const std::filesystem::path& out, bool quantize) {
  return evaluate([&net](const ImageBatch& img) { return forward(net, img, false).dehazed; }, items,
                  out, quantize, net_config_to_text(net.config()));
}

}  // namespace semiuf
