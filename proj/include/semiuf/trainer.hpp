#pragma once

// Two-stage teacher -> student training.
//
// Stage 1 trains the teacher (generator + uncertainty head) alternating five
// supervised steps with one unsupervised step. Stage 2 copies the teacher into
// the student, freezes the teacher and the student's uncertainty head, and
// alternates one supervised step with five unsupervised ones. Both stages use
// Adam(0.9, 0.99, 1e-8) with a learning rate held constant for the first half
// of the run and decayed linearly to zero over the second half.

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "semiuf/core.hpp"
#include "semiuf/hazedata.hpp"
#include "semiuf/losses.hpp"
#include "semiuf/network.hpp"

namespace semiuf {

struct Alternation {
  int supervised = 5;
  int unsupervised = 1;
};

double lr_at(long step, long total_steps, double lr0);

// Within each cycle of s+u steps the first s are supervised.
Branch select_branch(long step, Alternation alt);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <class T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
  long t = 0;
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Updates every trainable parameter that holds a gradient. Frozen
  // parameters are never touched. A tensor whose gradient has a non-finite
  // entry is skipped; the return value counts such tensors.
  int step(ParamStore<T>& params, double lr);

  const std::map<std::string, AdamMoments<T>>& moments() const { return moments_; }
  long skipped_total() const { return skipped_total_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, AdamMoments<T>> moments_;
  long skipped_total_ = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainPlan {
  Stage stage = Stage::teacher;
  int epochs = 100;
  double lr0 = 1e-4;
  int batch_size = 2;
  Alternation alternation{5, 1};
  LossWeights weights;
  std::uint64_t seed = 0;
  long max_steps = 0;          // caps the run when > 0
  RunConfig options;           // loss-reading switches (weights/net fields unused)
  std::filesystem::path out_dir;  // empty: keep everything in memory
  int checkpoint_every = 1;       // epochs between checkpoints; 0: final only
  bool validate = false;          // best-PSNR checkpoint on held-out real images
  double divergence_threshold = 1e3;
  int divergence_patience = 50;

  static TrainPlan teacher_defaults();
  static TrainPlan student_defaults();
  static TrainPlan from_config(const RunConfig& cfg, Stage stage);
};

struct TrainState {
  long step = 0;
  int epoch = 0;
  long branch_counter[2] = {0, 0};  // supervised, unsupervised
  std::map<std::string, double> ema;
  long skipped_tensors = 0;
};

struct StepRecord {
  long step = 0;
  int epoch = 0;
  Stage stage = Stage::teacher;
  Branch branch = Branch::supervised;
  double lr = 0;
  LossReport report;

  std::string log_line() const;
};

std::string training_log_header();

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  Checkpoint generator;
  Checkpoint discriminator;
  TrainState state;
  std::vector<std::string> log;  // header + one line per step
};

long total_steps(const TrainPlan& plan, const Dataset& data);

TrainResult train_teacher(const TrainPlan& plan, const Dataset& data, DehazeNet<float>& teacher,
                          Discriminator<float>& disc, const TrainHooks& hooks = {});

// `student` must share the teacher's NetConfig; it is overwritten with the
// teacher weights before training starts.
TrainResult train_student(const TrainPlan& plan, const Dataset& data, const Checkpoint& teacher_ckpt,
                          DehazeNet<float>& student, Discriminator<float>& disc,
                          const TrainHooks& hooks = {});

// Throws std::logic_error when any parameter in the store holds a gradient.
void assert_no_gradients(const ParamStore<float>& params, const std::string& owner);

// ---------------------------------------------------------------------------
// Ablation grid: base / v1 / v2 / v3 add the MDB fusion, the uncertainty
// losses and the KL distillation term one at a time.

struct AblationVariant {
  std::string name;
  bool use_mdb = false;
  bool use_uncertainty = false;
  bool use_kl = false;
};

std::vector<AblationVariant> ablation_variants();

struct AblationOptions {
  RunConfig base;  // shared hyperparameters; the variant switches override it
  long teacher_steps = 600;
  long student_steps = 300;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // Called after each (variant, seed) run.
  std::function<void(const std::string& variant, std::uint64_t seed, double psnr, double ssim)>
      on_run;
};

struct AblationRow {
  AblationVariant variant;
  std::vector<double> psnr;  // one per seed
  std::vector<double> ssim;
  double mean_psnr = 0, mean_ssim = 0;
  double std_psnr = 0, std_ssim = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // base, v1, v2, v3
  std::vector<std::uint64_t> seeds;
  long teacher_steps = 0;
  long student_steps = 0;

  // Four rows: variant, flags, mean PSNR/SSIM and their spread over seeds.
  std::string to_tsv() const;
  // One row per (variant, seed).
  std::string per_seed_tsv() const;
};

// Trains teacher then student for every variant and seed, and scores the
// student on the held-out real split.
AblationReport run_ablation(const Dataset& data, const AblationOptions& opt);

}  // namespace semiuf
