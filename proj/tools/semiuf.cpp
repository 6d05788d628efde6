// semiuf: command line front end for data generation, training, inference,
// evaluation, gradient checks and the ablation grid.
//
// Exit codes: 0 success, 1 verification or training failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "semiuf/core.hpp"
#include "semiuf/gradcheck.hpp"
#include "semiuf/hazedata.hpp"
#include "semiuf/metrics.hpp"
#include "semiuf/network.hpp"
#include "semiuf/png_io.hpp"
#include "semiuf/trainer.hpp"

namespace fs = std::filesystem;
using namespace semiuf;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

fs::path require_out(const Globals& g, const char* command) {
  if (g.out.empty()) throw UsageError(std::string(command) + ": --out DIR is required");
  fs::create_directories(g.out);
  return g.out;
}

// ---------------------------------------------------------------------------

struct HazegenArgs {
  int paired = 256;
  int unpaired = 64;
  int size = 64;
};

int cmd_hazegen(const Globals& g, const HazegenArgs& a) {
  const RunConfig cfg = resolve_config(g);
  const int multiple = cfg.net.size_multiple();
  if (a.size <= 0 || a.size % multiple != 0)
    throw UsageError("--size " + std::to_string(a.size) + " is not a positive multiple of " +
                     std::to_string(multiple) + " (window_size x 4)");
  if (a.paired < 0 || a.unpaired < 0) throw UsageError("--paired/--unpaired must be non-negative");
  const fs::path out = require_out(g, "hazegen");
  DatasetSpec spec;
  spec.n_paired = a.paired;
  spec.n_unpaired_real = a.unpaired;
  spec.height = spec.width = a.size;
  spec.seed = cfg.seed;
  Dataset::build(spec).save(out);
  std::cout << "hazegen: " << a.paired << " paired + " << a.unpaired << " real images, " << a.size
            << "x" << a.size << ", seed " << cfg.seed << " -> " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string data;
  std::string teacher_ckpt;
  long steps = 0;
  int epochs = 0;
  int batch_size = 0;
  double lr = 0;
  int checkpoint_every = 1;
  bool validate = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const Stage stage = a.stage == "teacher" ? Stage::teacher : Stage::student;
  if (stage == Stage::student && a.teacher_ckpt.empty())
    throw UsageError("train --stage student requires --teacher-ckpt FILE");
  RunConfig cfg = resolve_config(g);
  if (a.batch_size > 0) cfg.batch_size = a.batch_size;
  if (a.lr > 0) cfg.lr = a.lr;
  if (a.steps > 0) cfg.max_steps = a.steps;
  if (a.epochs > 0) (stage == Stage::teacher ? cfg.epochs_teacher : cfg.epochs_student) = a.epochs;
  const fs::path out = require_out(g, "train");
  const Dataset data = Dataset::load(a.data);

  TrainPlan plan = TrainPlan::from_config(cfg, stage);
  plan.out_dir = out;
  plan.checkpoint_every = a.checkpoint_every;
  plan.validate = a.validate;
  const Rng root(cfg.seed);
  Discriminator<float> disc(root.split(102).seed());
  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();
  if (stage == Stage::teacher) {
    DehazeNet<float> teacher(cfg.net, root.split(101).seed());
    res = train_teacher(plan, data, teacher, disc);
  } else {
    const Checkpoint tck = load_checkpoint(a.teacher_ckpt);
    if (!(tck.config == cfg.net) && !g.config.empty())
      throw CheckpointError("teacher checkpoint was built for a different network config");
    DehazeNet<float> student(tck.config, root.split(103).seed());
    res = train_student(plan, data, tck, student, disc);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "train: " << stage_name(stage) << " " << res.state.step << " steps in "
            << std::fixed << std::setprecision(1) << secs << " s, final "
            << res.log.back().substr(res.log.back().rfind("total=")) << "\n";
  if (res.state.skipped_tensors > 0)
    std::cerr << "warning: " << res.state.skipped_tensors
              << " parameter updates skipped for non-finite gradients\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string ckpt;
  std::vector<std::string> inputs;
  bool uncertainty = false;
};

int cmd_infer(const Globals& g, const InferArgs& a) {
  const fs::path out = require_out(g, "infer");
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (ck.role == Role::discriminator) throw CheckpointError("infer needs a generator checkpoint");
  DehazeNet<float> net(ck.config);
  net.load(ck);
  const int multiple = ck.config.size_multiple();
  for (const auto& in : a.inputs) {
    const Tensor<float> img = read_png(in);
    const int h = img.dim(2), w = img.dim(3);
    Tensor<float> x = img;
    if (h % multiple != 0 || w % multiple != 0) {
      x = reflect_pad(img, multiple);
      std::cerr << "warning: " << in << " is " << h << "x" << w << ", reflect-padded to "
                << x.dim(2) << "x" << x.dim(3) << " and cropped back\n";
    }
    const ForwardOutput o = forward(net, ImageBatch(x), a.uncertainty);
    const std::string stem = fs::path(in).stem().string();
    write_png(out / (stem + ".png"), crop(o.dehazed.tensor(), h, w));
    if (a.uncertainty) {
      Tensor<float> lt = crop(o.log_theta->tensor(), h, w);
      const auto [lo, hi] = std::minmax_element(lt.vec().begin(), lt.vec().end());
      const float mn = *lo, mx = *hi;
      Tensor<float> vis = lt;
      for (auto& v : vis.vec()) v = mx > mn ? (v - mn) / (mx - mn) : 0.0f;
      write_png(out / (stem + "_theta.png"), vis);
      std::ofstream side(out / (stem + "_theta.txt"), std::ios::trunc);
      side << std::setprecision(9) << "log_theta_min\t" << mn << "\nlog_theta_max\t" << mx << "\n";
      if (!side) throw std::runtime_error("cannot write sidecar for " + stem);
    }
  }
  std::cout << "infer: " << a.inputs.size() << " image(s) -> " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "real";
  bool quantize = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (ck.role == Role::discriminator) throw CheckpointError("eval needs a generator checkpoint");
  DehazeNet<float> net(ck.config);
  net.load(ck);
  const Dataset data = Dataset::load(a.data);
  std::vector<EvalItem> items;
  if (a.split == "paired") {
    for (std::size_t i = 0; i < data.paired().size(); ++i)
      items.push_back({"paired_" + std::to_string(i), data.paired()[i].hazy, data.paired()[i].clean});
  } else {
    for (std::size_t i = 0; i < data.heldout_size(); ++i)
      items.push_back({"real_" + std::to_string(i), data.real()[i].hazy, data.heldout_clean(i)});
  }
  if (items.empty()) throw UsageError("eval: split '" + a.split + "' has no images with ground truth");
  fs::path report;
  if (!g.out.empty()) report = require_out(g, "eval") / "eval.tsv";
  const EvalReport rep = evaluate(net, items, report, a.quantize);
  std::cout << std::fixed << std::setprecision(4) << "eval: " << items.size() << " images, PSNR "
            << rep.mean_psnr << " dB, SSIM " << rep.mean_ssim << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string inject_fault;
  std::string filter;
  double tolerance = 1e-3;
  bool list = false;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a) {
  if (a.list) {
    for (const auto& n : gradcheck_item_names()) std::cout << n << "\n";
    return kOk;
  }
  GradcheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.inject_fault = a.inject_fault;
  opt.filter = a.filter;
  if (g.seed) opt.seed = *g.seed;
  std::vector<GradcheckItem> items;
  try {
    items = run_gradcheck(opt);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::vector<std::string> failed;
  for (const auto& it : items) {
    std::printf("%-32s max_rel_err=%.3e  probes=%-5d worst=%-28s %s\n", it.name.c_str(),
                it.max_rel_error, it.probes, it.worst_input.c_str(), it.passed ? "ok" : "FAIL");
    if (!it.passed) failed.push_back(it.name);
  }
  std::printf("%zu items checked, %zu failed (tolerance %.1e)\n", items.size(), failed.size(),
              a.tolerance);
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    std::fprintf(stderr, "gradcheck failed: %s\n", names.c_str());
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string data;
  int seeds = 3;
  long teacher_steps = 600;
  long student_steps = 300;
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
  if (a.seeds <= 0) throw UsageError("--seeds must be positive");
  const RunConfig cfg = resolve_config(g);
  const fs::path out = require_out(g, "ablate");
  const Dataset data = Dataset::load(a.data);
  AblationOptions opt;
  opt.base = cfg;
  opt.teacher_steps = a.teacher_steps;
  opt.student_steps = a.student_steps;
  opt.seeds.clear();
  for (int i = 0; i < a.seeds; ++i) opt.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  opt.on_run = [](const std::string& v, std::uint64_t seed, double psnr, double ssim) {
    std::printf("ablate: %-4s seed %llu  PSNR %.4f  SSIM %.4f\n", v.c_str(),
                static_cast<unsigned long long>(seed), psnr, ssim);
    std::fflush(stdout);
  };
  const AblationReport rep = run_ablation(data, opt);
  std::ofstream(out / "ablation.tsv", std::ios::trunc) << rep.to_tsv();
  std::ofstream(out / "ablation_seeds.tsv", std::ios::trunc) << rep.per_seed_tsv();
  std::cout << rep.to_tsv();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised uncertainty-aware dehazing toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");
  Globals g;
  app.add_option("--config", g.config, "Run configuration file (key=value)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output directory");
  auto make_global = [&](CLI::App* sub) {
    // Accept the global flags after the command name too.
    sub->fallthrough();
  };

  HazegenArgs hz;
  auto* hazegen = app.add_subcommand("hazegen", "Generate the synthetic paired/real toy dataset");
  hazegen->add_option("--paired", hz.paired, "Number of synthetic hazy/clean pairs")
      ->capture_default_str();
  hazegen->add_option("--unpaired", hz.unpaired, "Number of domain-shifted real hazy images")
      ->capture_default_str();
  hazegen->add_option("--size", hz.size, "Image height and width")->capture_default_str();
  make_global(hazegen);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the teacher or the student");
  train->add_option("--stage", tr.stage, "teacher or student")
      ->required()
      ->check(CLI::IsMember({"teacher", "student"}));
  train->add_option("--data", tr.data, "Dataset directory written by hazegen")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--teacher-ckpt", tr.teacher_ckpt, "Teacher checkpoint (student stage)");
  train->add_option("--steps", tr.steps, "Stop after this many steps (overrides epochs)");
  train->add_option("--epochs", tr.epochs, "Epochs for this stage");
  train->add_option("--batch-size", tr.batch_size, "Batch size");
  train->add_option("--lr", tr.lr, "Initial learning rate");
  train->add_option("--checkpoint-every", tr.checkpoint_every,
                    "Epochs between checkpoints (0: final only)")
      ->capture_default_str();
  train->add_flag("--validate", tr.validate, "Keep a best-PSNR checkpoint on held-out real images");
  make_global(train);

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Dehaze PNG images with a checkpoint");
  infer->add_option("--ckpt", inf.ckpt, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_flag("--uncertainty", inf.uncertainty, "Also write ln(theta) maps and min/max sidecars");
  infer->add_option("inputs", inf.inputs, "Input PNG files")->required()->check(CLI::ExistingFile);
  make_global(infer);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on a dataset split");
  eval->add_option("--ckpt", ev.ckpt, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", ev.split, "real (held-out ground truth) or paired")
      ->capture_default_str()
      ->check(CLI::IsMember({"real", "paired"}));
  eval->add_flag("--quantize", ev.quantize, "Round to 8-bit levels before scoring");
  make_global(eval);

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss and layer");
  gradcheck->add_option("--inject-fault", gc.inject_fault,
                        "Negate the analytic gradient of one item (mutation test)");
  gradcheck->add_option("--filter", gc.filter, "Only run items whose name contains this text");
  gradcheck->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
  gradcheck->add_flag("--list", gc.list, "List item names and exit");
  make_global(gradcheck);

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Train and score the base/v1/v2/v3 ablation grid");
  ablate->add_option("--data", ab.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--seeds", ab.seeds, "Number of consecutive seeds")->capture_default_str();
  ablate->add_option("--teacher-steps", ab.teacher_steps, "Teacher steps per run")
      ->capture_default_str();
  ablate->add_option("--student-steps", ab.student_steps, "Student steps per run")
      ->capture_default_str();
  make_global(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*hazegen) return cmd_hazegen(g, hz);
    if (*train) return cmd_train(g, tr);
    if (*infer) return cmd_infer(g, inf);
    if (*eval) return cmd_eval(g, ev);
    if (*gradcheck) return cmd_gradcheck(g, gc);
    if (*ablate) return cmd_ablate(g, ab);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
