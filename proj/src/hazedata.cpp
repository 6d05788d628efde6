#include "semiuf/hazedata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "semiuf/png_io.hpp"

namespace semiuf {

namespace {
constexpr std::uint64_t kRealStreamOffset = 1'000'000'000ULL;
}

ImageBatch make_clean_image(Rng& rng, int height, int width) {
  Tensor<float> img({1, 3, height, width});
  // Background: per-channel planar colour ramp.
  for (int c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.2, 0.8);
    const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        img.at(0, c, y, x) = static_cast<float>(base + gx * x / width + gy * y / height);
  }
  auto paint = [&](int y, int x, const std::array<double, 3>& col, double alpha) {
    if (y < 0 || y >= height || x < 0 || x >= width) return;
    for (int c = 0; c < 3; ++c) {
      float& v = img.at(0, c, y, x);
      v = static_cast<float>((1 - alpha) * v + alpha * col[c]);
    }
  };
  auto colour = [&] {
    return std::array<double, 3>{rng.uniform(), rng.uniform(), rng.uniform()};
  };
  const int shapes = rng.uniform_int(3, 6);
  for (int s = 0; s < shapes; ++s) {
    const auto col = colour();
    const double alpha = rng.uniform(0.8, 1.0);
    const double cy = rng.uniform(0, height), cx = rng.uniform(0, width);
    if (rng.uniform() < 0.5) {
      const double hh = rng.uniform(0.08, 0.3) * height, hw = rng.uniform(0.08, 0.3) * width;
      for (int y = static_cast<int>(cy - hh); y <= static_cast<int>(cy + hh); ++y)
        for (int x = static_cast<int>(cx - hw); x <= static_cast<int>(cx + hw); ++x)
          paint(y, x, col, alpha);
    } else {
      const double r = rng.uniform(0.06, 0.25) * std::min(height, width);
      for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r); ++y)
        for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r); ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) paint(y, x, col, alpha);
    }
  }
  const int strokes = rng.uniform_int(2, 4);
  for (int s = 0; s < strokes; ++s) {
    const auto col = colour();
    const double y0 = rng.uniform(0, height), x0 = rng.uniform(0, width);
    const double y1 = rng.uniform(0, height), x1 = rng.uniform(0, width);
    const int steps = 2 * static_cast<int>(std::hypot(y1 - y0, x1 - x0)) + 1;
    for (int k = 0; k <= steps; ++k) {
      const double t = static_cast<double>(k) / steps;
      paint(static_cast<int>(std::lround(y0 + t * (y1 - y0))),
            static_cast<int>(std::lround(x0 + t * (x1 - x0))), col, 1.0);
    }
  }
  for (auto& v : img.vec()) v = std::clamp(v, 0.0f, 1.0f);
  return ImageBatch(std::move(img));
}

Tensor<float> make_depth_field(Rng& rng, int height, int width) {
  std::vector<double> f(static_cast<std::size_t>(height) * width, 0.0);
  for (int k = 0; k < 3; ++k) {
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        f[static_cast<std::size_t>(y) * width + x] +=
            a * x / width + b * y / height;
  }
  for (int k = 0; k < 2; ++k) {
    const double fy = rng.uniform(0.5, 1.5), fx = rng.uniform(0.5, 1.5);
    const double phase = rng.uniform(0, 2 * M_PI), amp = rng.uniform(0.1, 0.3);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        f[static_cast<std::size_t>(y) * width + x] +=
            amp * std::sin(2 * M_PI * (fy * y / height + fx * x / width) + phase);
  }
  const auto [mn, mx] = std::minmax_element(f.begin(), f.end());
  const double lo = *mn, span = std::max(*mx - *mn, 1e-12);
  Tensor<float> depth({height, width});
  for (std::size_t i = 0; i < f.size(); ++i)
    depth[i] = static_cast<float>(std::clamp(3.0 * (f[i] - lo) / span, 0.0, 3.0));
  return depth;
}

ImageBatch synthesize_haze(const ImageBatch& clean, const HazeParams& params) {
  const int B = clean.batch(), H = clean.height(), W = clean.width();
  if (params.depth.rank() != 2 || params.depth.dim(0) != H || params.depth.dim(1) != W)
    throw ShapeError("depth field " + shape_str(params.depth.shape()) + " does not match image");
  if (!(params.beta >= 0)) throw std::invalid_argument("beta must be non-negative");
  std::array<double, 3> a = params.airlight_rgb.value_or(
      std::array<double, 3>{params.airlight, params.airlight, params.airlight});
  for (double v : a)
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument("airlight must lie in [0,1]");
  Tensor<float> out(clean.tensor().shape());
  const auto& j = clean.tensor();
  for (int n = 0; n < B; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double d = params.depth[static_cast<std::size_t>(y) * W + x];
        if (d < 0) throw std::invalid_argument("depth must be non-negative");
        const double t = std::exp(-params.beta * d);
        for (int c = 0; c < 3; ++c)
          out.at(n, c, y, x) = static_cast<float>(j.at(n, c, y, x) * t + a[c] * (1.0 - t));
      }
  return ImageBatch(std::move(out));
}

// ---------------------------------------------------------------------------
// Iterators

template <class Sample, class Batch>
SplitIterator<Sample, Batch>::SplitIterator(const std::vector<Sample>* items, int batch_size,
                                            std::uint64_t seed)
    : items_(items), batch_size_(batch_size), seed_(seed) {
  if (!items_ || items_->empty()) throw std::invalid_argument("iterator over an empty split");
  if (batch_size_ <= 0) throw std::invalid_argument("batch size must be positive");
  reshuffle();
}

template <class Sample, class Batch>
int SplitIterator<Sample, Batch>::batches_per_epoch() const {
  return static_cast<int>((items_->size() + batch_size_ - 1) / batch_size_);
}

template <class Sample, class Batch>
void SplitIterator<Sample, Batch>::reshuffle() {
  order_.resize(items_->size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng rng = Rng(seed_).split(static_cast<std::uint64_t>(epoch_));
  std::shuffle(order_.begin(), order_.end(), rng.engine());
  cursor_ = 0;
}

template <class Sample, class Batch>
Batch SplitIterator<Sample, Batch>::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  std::vector<ImageBatch> hazy;
  [[maybe_unused]] std::vector<ImageBatch> clean;
  for (std::size_t i = cursor_; i < end; ++i) {
    const Sample& s = (*items_)[order_[i]];
    hazy.push_back(s.hazy);
    if constexpr (std::is_same_v<Batch, PairedBatch>) clean.push_back(s.clean);
  }
  cursor_ = end;
  if constexpr (std::is_same_v<Batch, PairedBatch>)
    return PairedBatch{ImageBatch::stack(hazy), ImageBatch::stack(clean)};
  else
    return UnpairedBatch{ImageBatch::stack(hazy)};
}

template class SplitIterator<PairedSample, PairedBatch>;
template class SplitIterator<RealSample, UnpairedBatch>;

// ---------------------------------------------------------------------------
// Dataset

Dataset Dataset::build(const DatasetSpec& spec) {
  if (spec.n_paired < 0 || spec.n_unpaired_real < 0) throw std::invalid_argument("negative split size");
  if (spec.height <= 0 || spec.width <= 0) throw std::invalid_argument("image size must be positive");
  Dataset ds;
  const Rng root(spec.seed);
  for (int i = 0; i < spec.n_paired; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    PairedSample s;
    s.seed = rng.seed();
    s.clean = make_clean_image(rng, spec.height, spec.width);
    HazeParams hp;
    hp.depth = make_depth_field(rng, spec.height, spec.width);
    hp.airlight = rng.uniform(0.7, 1.0);
    hp.beta = rng.uniform(0.6, 1.8);
    s.airlight = hp.airlight;
    s.beta = hp.beta;
    s.hazy = synthesize_haze(s.clean, hp);
    ds.paired_.push_back(std::move(s));
  }
  const auto& shift = spec.real_domain_shift;
  for (int j = 0; j < spec.n_unpaired_real; ++j) {
    Rng rng = root.split(kRealStreamOffset + static_cast<std::uint64_t>(j));
    RealSample s;
    s.seed = rng.seed();
    ImageBatch clean = make_clean_image(rng, spec.height, spec.width);
    HazeParams hp;
    hp.depth = make_depth_field(rng, spec.height, spec.width);
    hp.airlight = rng.uniform(0.7, 1.0);
    std::array<double, 3> rgb{};
    for (auto& c : rgb)
      c = std::clamp(hp.airlight + rng.uniform(-shift.airlight_jitter, shift.airlight_jitter), 0.0, 1.0);
    hp.airlight_rgb = rgb;
    hp.beta = rng.uniform(shift.beta_lo, shift.beta_hi);
    s.airlight = hp.airlight;
    s.beta = hp.beta;
    Tensor<float> hazy = synthesize_haze(clean, hp).tensor();
    for (auto& v : hazy.vec())
      v = static_cast<float>(std::clamp(
          std::pow(static_cast<double>(v), shift.gamma) + rng.normal(0.0, shift.noise_sigma), 0.0,
          1.0));
    s.hazy = ImageBatch(std::move(hazy));
    ds.real_.push_back(std::move(s));
    ds.heldout_.push_back(std::move(clean));
  }
  return ds;
}

int Dataset::height() const {
  if (!paired_.empty()) return paired_.front().hazy.height();
  if (!real_.empty()) return real_.front().hazy.height();
  return 0;
}

int Dataset::width() const {
  if (!paired_.empty()) return paired_.front().hazy.width();
  if (!real_.empty()) return real_.front().hazy.width();
  return 0;
}

namespace {

std::string item_name(const char* split, std::size_t index) {
  std::ostringstream os;
  os << split << '_' << std::setw(5) << std::setfill('0') << index << ".png";
  return os.str();
}

}  // namespace

void Dataset::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  if (!real_.empty()) fs::create_directories(dir / "heldout");
  std::ofstream manifest(dir / "manifest.tsv", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  manifest << std::setprecision(17);
  std::size_t index = 0;
  for (std::size_t i = 0; i < paired_.size(); ++i, ++index) {
    const auto& s = paired_[i];
    const int h = s.hazy.height(), w = s.hazy.width();
    // Aligned pair: hazy on the left, clean on the right.
    Tensor<float> side({1, 3, h, 2 * w});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          side.at(0, c, y, x) = s.hazy.tensor().at(0, c, y, x);
          side.at(0, c, y, x + w) = s.clean.tensor().at(0, c, y, x);
        }
    const std::string file = item_name("paired", i);
    write_png(dir / file, side);
    manifest << index << '\t' << file << '\t' << s.airlight << '\t' << s.beta << '\t' << s.seed
             << "\tpaired\n";
  }
  for (std::size_t j = 0; j < real_.size(); ++j, ++index) {
    const auto& s = real_[j];
    const std::string file = item_name("real", j);
    write_png(dir / file, s.hazy.tensor());
    write_png(dir / "heldout" / file, heldout_[j].tensor());
    manifest << index << '\t' << file << '\t' << s.airlight << '\t' << s.beta << '\t' << s.seed
             << "\treal\n";
  }
  if (!manifest) throw std::runtime_error("failed writing manifest in " + dir.string());
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw std::runtime_error("no manifest.tsv in " + dir.string());
  Dataset ds;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::size_t index;
    std::string file, split;
    double a, beta;
    std::uint64_t seed;
    if (!(is >> index >> file >> a >> beta >> seed >> split))
      throw std::runtime_error("malformed manifest line: " + line);
    if (split == "paired") {
      Tensor<float> side = read_png(dir / file);
      const int h = side.dim(2), w = side.dim(3) / 2;
      if (side.dim(3) != 2 * w) throw std::runtime_error(file + ": paired image width must be even");
      Tensor<float> hazy({1, 3, h, w}), clean({1, 3, h, w});
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            hazy.at(0, c, y, x) = side.at(0, c, y, x);
            clean.at(0, c, y, x) = side.at(0, c, y, x + w);
          }
      ds.paired_.push_back(PairedSample{ImageBatch(std::move(hazy)), ImageBatch(std::move(clean)), a,
                                        beta, seed});
    } else if (split == "real") {
      ds.real_.push_back(RealSample{ImageBatch(read_png(dir / file)), a, beta, seed});
      const auto held = dir / "heldout" / file;
      if (std::filesystem::exists(held)) ds.heldout_.push_back(ImageBatch(read_png(held)));
    } else {
      throw std::runtime_error("unknown split '" + split + "' in manifest");
    }
  }
  if (!ds.heldout_.empty() && ds.heldout_.size() != ds.real_.size())
    throw std::runtime_error("heldout/ is incomplete in " + dir.string());
  return ds;
}

}  // namespace semiuf
