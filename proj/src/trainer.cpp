#include "semiuf/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "semiuf/metrics.hpp"
#include "semiuf/ops.hpp"

namespace semiuf {

double lr_at(long step, long total_steps, double lr0) {
  if (total_steps <= 0 || step < 0 || step > total_steps)
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  const double half = static_cast<double>(total_steps) / 2.0;
  if (static_cast<double>(step) <= half) return lr0;
  return lr0 * (1.0 - (static_cast<double>(step) - half) / half);
}

Branch select_branch(long step, Alternation alt) {
  if (alt.supervised < 0 || alt.unsupervised < 0 || alt.supervised + alt.unsupervised == 0)
    throw std::invalid_argument("alternation needs non-negative counts with a positive sum");
  const long cycle = alt.supervised + alt.unsupervised;
  return (step % cycle) < alt.supervised ? Branch::supervised : Branch::unsupervised;
}

template <class T>
int Adam<T>::step(ParamStore<T>& params, double lr) {
  int skipped = 0;
  for (auto& [name, p] : params.items()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    const auto& g = p.grad();
    bool finite = true;
    for (T v : g.vec()) finite = finite && std::isfinite(v);
    if (!finite) {
      ++skipped;
      continue;
    }
    auto& mom = moments_[name];
    if (mom.m.empty()) {
      mom.m = Tensor<T>(p.shape(), T(0));
      mom.v = Tensor<T>(p.shape(), T(0));
    }
    ++mom.t;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(mom.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(mom.t));
    auto& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = static_cast<T>(b1 * mom.m[i] + (1.0 - b1) * g[i]);
      mom.v[i] = static_cast<T>(b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i]);
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
  skipped_total_ += skipped;
  return skipped;
}

template class Adam<float>;
template class Adam<double>;

TrainPlan TrainPlan::teacher_defaults() {
  TrainPlan p;
  p.stage = Stage::teacher;
  p.epochs = 100;
  p.alternation = {5, 1};
  return p;
}

TrainPlan TrainPlan::student_defaults() {
  TrainPlan p;
  p.stage = Stage::student;
  p.epochs = 60;
  p.alternation = {1, 5};
  return p;
}

TrainPlan TrainPlan::from_config(const RunConfig& cfg, Stage stage) {
  TrainPlan p = stage == Stage::teacher ? teacher_defaults() : student_defaults();
  p.epochs = stage == Stage::teacher ? cfg.epochs_teacher : cfg.epochs_student;
  p.lr0 = cfg.lr;
  p.batch_size = cfg.batch_size;
  p.weights = cfg.weights;
  p.seed = cfg.seed;
  p.max_steps = cfg.max_steps;
  p.options = cfg;
  return p;
}

std::string training_log_header() {
  return "step\tepoch\tstage\tbranch\tlr\tcomponents...\ttotal";
}

std::string StepRecord::log_line() const {
  std::ostringstream os;
  os << step << '\t' << epoch << '\t' << stage_name(stage) << '\t' << branch_name(branch) << '\t'
     << std::setprecision(9) << lr << '\t' << report.log_fields();
  return os.str();
}

void assert_no_gradients(const ParamStore<float>& params, const std::string& owner) {
  for (const auto& [name, p] : params.items())
    if (p.has_grad())
      throw std::logic_error("gradient reached frozen " + owner + " parameter " + name);
}

long total_steps(const TrainPlan& plan, const Dataset& data) {
  if (plan.max_steps > 0) return plan.max_steps;
  const std::size_t n = plan.stage == Stage::teacher ? data.paired().size() : data.real().size();
  const long per_epoch = static_cast<long>((n + plan.batch_size - 1) / plan.batch_size);
  return per_epoch * plan.epochs;
}

namespace {

// Shared loop machinery: logging, divergence guard, checkpoints.
class Session {
 public:
  Session(const TrainPlan& plan, const Dataset& data, long per_epoch)
      : plan_(plan), data_(data), per_epoch_(std::max(1L, per_epoch)) {
    total_ = total_steps(plan, data);
    if (total_ <= 0) throw std::invalid_argument("training plan has no steps");
    result_.log.push_back(training_log_header());
    if (!plan.out_dir.empty()) {
      std::filesystem::create_directories(plan.out_dir);
      log_file_ = std::make_unique<std::ofstream>(
          plan.out_dir / (stage_name(plan.stage) + "_log.tsv"), std::ios::trunc);
      if (!*log_file_) throw std::runtime_error("cannot open training log in " + plan.out_dir.string());
      *log_file_ << result_.log.back() << '\n' << std::flush;
    }
  }

  long total() const { return total_; }
  int epoch_of(long step) const { return static_cast<int>(step / per_epoch_); }
  TrainResult& result() { return result_; }

  void record(long step, Branch branch, double lr, const LossReport& report, const TrainHooks& hooks) {
    auto& st = result_.state;
    st.step = step + 1;
    st.epoch = epoch_of(step);
    ++st.branch_counter[branch == Branch::supervised ? 0 : 1];
    for (const auto& [k, v] : report.components) {
      auto it = st.ema.find(k);
      st.ema[k] = it == st.ema.end() ? v : 0.9 * it->second + 0.1 * v;
    }
    StepRecord rec{step, st.epoch, plan_.stage, branch, lr, report};
    result_.log.push_back(rec.log_line());
    if (log_file_) *log_file_ << result_.log.back() << '\n' << std::flush;
    if (hooks.on_step) hooks.on_step(rec);

    if (!std::isfinite(report.total) || report.total > plan_.divergence_threshold) {
      if (++over_threshold_ >= plan_.divergence_patience)
        throw TrainingDiverged("total loss above " + std::to_string(plan_.divergence_threshold) +
                               " for " + std::to_string(over_threshold_) +
                               " consecutive steps (last " + std::to_string(report.total) +
                               " at step " + std::to_string(step) + ")");
    } else {
      over_threshold_ = 0;
    }
  }

  // Called after each step; writes checkpoints at epoch ends and at the final step.
  void maybe_checkpoint(long step, const DehazeNet<float>& net, Role role) {
    const bool epoch_end = (step + 1) % per_epoch_ == 0;
    const bool last = step + 1 == total_;
    if (!epoch_end && !last) return;
    const int completed = static_cast<int>((step + 1 + per_epoch_ - 1) / per_epoch_);
    const bool periodic = plan_.checkpoint_every > 0 && epoch_end && completed % plan_.checkpoint_every == 0;
    if (plan_.out_dir.empty() || !(periodic || last)) return;
    const std::string stage = stage_name(plan_.stage);
    Checkpoint ck = net.to_checkpoint(role, Rng(plan_.seed).state());
    save_checkpoint(ck, plan_.out_dir / (stage + "_e" + std::to_string(completed) + ".sufc"));
    if (plan_.validate && data_.heldout_size() > 0) {
      std::vector<EvalItem> items;
      const std::size_t n = std::min<std::size_t>(8, data_.heldout_size());
      for (std::size_t j = 0; j < n; ++j)
        items.push_back({"real_" + std::to_string(j), data_.real()[j].hazy, data_.heldout_clean(j)});
      const double score = evaluate(net, items).mean_psnr;
      if (score > best_psnr_) {
        best_psnr_ = score;
        save_checkpoint(ck, plan_.out_dir / (stage + "_best.sufc"));
      }
    }
  }

 private:
  const TrainPlan& plan_;
  const Dataset& data_;
  long per_epoch_;
  long total_ = 0;
  int over_threshold_ = 0;
  double best_psnr_ = -1.0;
  TrainResult result_;
  std::unique_ptr<std::ofstream> log_file_;
};

void discriminator_step(Discriminator<float>& disc, Adam<float>& opt, const LossResult& res, double lr) {
  disc.params().zero_grad();
  Var<float> d_loss = lsgan_discriminator(disc.forward(res.real), disc.forward(res.fake.detach()));
  d_loss.backward();
  opt.step(disc.params(), lr);
  disc.params().zero_grad();
}

}  // namespace

TrainResult train_teacher(const TrainPlan& plan, const Dataset& data, DehazeNet<float>& teacher,
                          Discriminator<float>& disc, const TrainHooks& hooks) {
  if (plan.stage != Stage::teacher) throw std::invalid_argument("train_teacher needs a teacher plan");
  if (data.paired().empty() || data.real().empty())
    throw std::invalid_argument("teacher training needs both paired and real images");
  const Rng root(plan.seed);
  PairedIterator paired = data.paired_iterator(plan.batch_size, root.split(1).seed());
  UnpairedIterator real = data.unpaired_iterator(plan.batch_size, root.split(2).seed());
  PairedIterator identity = data.paired_iterator(plan.batch_size, root.split(3).seed());
  Session session(plan, data, paired.batches_per_epoch());
  Adam<float> opt_g, opt_d;

  for (long step = 0; step < session.total(); ++step) {
    const Branch branch = select_branch(step, plan.alternation);
    const double lr = lr_at(step, session.total(), plan.lr0);
    teacher.params().zero_grad();
    disc.params().zero_grad();
    LossResult res;
    if (branch == Branch::supervised) {
      PairedBatch b = paired.next();
      res = teacher_loss(teacher, disc, {&b.hazy, &b.clean, nullptr}, plan.weights, branch, plan.options);
      res.total.backward();
      session.result().state.skipped_tensors += opt_g.step(teacher.params(), lr);
      discriminator_step(disc, opt_d, res, lr);
    } else {
      UnpairedBatch r = real.next();
      PairedBatch c = identity.next();
      res = teacher_loss(teacher, disc, {nullptr, &c.clean, &r.hazy}, plan.weights, branch, plan.options);
      res.total.backward();
      session.result().state.skipped_tensors += opt_g.step(teacher.params(), lr);
    }
    teacher.params().zero_grad();
    disc.params().zero_grad();
    session.record(step, branch, lr, res.report, hooks);
    session.maybe_checkpoint(step, teacher, Role::teacher);
  }

  TrainResult out = std::move(session.result());
  out.generator = teacher.to_checkpoint(Role::teacher, Rng(plan.seed).state());
  out.discriminator = disc.to_checkpoint(Rng(plan.seed).state());
  if (!plan.out_dir.empty()) save_checkpoint(out.discriminator, plan.out_dir / "teacher_disc.sufc");
  return out;
}

TrainResult train_student(const TrainPlan& plan, const Dataset& data, const Checkpoint& teacher_ckpt,
                          DehazeNet<float>& student, Discriminator<float>& disc,
                          const TrainHooks& hooks) {
  if (plan.stage != Stage::student) throw std::invalid_argument("train_student needs a student plan");
  if (teacher_ckpt.role != Role::teacher)
    throw CheckpointError("student training needs a teacher checkpoint, got " + role_name(teacher_ckpt.role));
  if (data.paired().empty() || data.real().empty())
    throw std::invalid_argument("student training needs both paired and real images");

  DehazeNet<float> teacher(teacher_ckpt.config);
  teacher.load(teacher_ckpt);
  teacher.freeze_all(true);
  student.load(teacher_ckpt);
  student.freeze_uncertainty_head(true);

  const Rng root(plan.seed);
  PairedIterator paired = data.paired_iterator(plan.batch_size, root.split(11).seed());
  UnpairedIterator real = data.unpaired_iterator(plan.batch_size, root.split(12).seed());
  PairedIterator syn = data.paired_iterator(plan.batch_size, root.split(13).seed());
  Session session(plan, data, real.batches_per_epoch());
  Adam<float> opt_g, opt_d;

  for (long step = 0; step < session.total(); ++step) {
    const Branch branch = select_branch(step, plan.alternation);
    const double lr = lr_at(step, session.total(), plan.lr0);
    student.params().zero_grad();
    disc.params().zero_grad();
    LossResult res;
    if (branch == Branch::supervised) {
      PairedBatch b = paired.next();
      res = student_loss(student, teacher, disc, {&b.hazy, &b.clean, nullptr}, plan.weights, branch,
                         plan.options);
    } else {
      UnpairedBatch r = real.next();
      PairedBatch s = syn.next();
      res = student_loss(student, teacher, disc, {&s.hazy, nullptr, &r.hazy}, plan.weights, branch,
                         plan.options);
    }
    res.total.backward();
    assert_no_gradients(teacher.params(), "teacher");
    session.result().state.skipped_tensors += opt_g.step(student.params(), lr);
    if (branch == Branch::supervised) discriminator_step(disc, opt_d, res, lr);
    student.params().zero_grad();
    disc.params().zero_grad();
    session.record(step, branch, lr, res.report, hooks);
    session.maybe_checkpoint(step, student, Role::student);
  }

  TrainResult out = std::move(session.result());
  out.generator = student.to_checkpoint(Role::student, Rng(plan.seed).state());
  out.discriminator = disc.to_checkpoint(Rng(plan.seed).state());
  return out;
}

std::vector<AblationVariant> ablation_variants() {
  return {{"base", false, false, false},
          {"v1", true, false, false},
          {"v2", true, true, false},
          {"v3", true, true, true}};
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

}  // namespace

AblationReport run_ablation(const Dataset& data, const AblationOptions& opt) {
  if (opt.seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  if (data.heldout_size() == 0) throw std::invalid_argument("ablation needs held-out real images");
  std::vector<EvalItem> items;
  for (std::size_t j = 0; j < data.heldout_size(); ++j)
    items.push_back({"real_" + std::to_string(j), data.real()[j].hazy, data.heldout_clean(j)});

  AblationReport rep;
  rep.seeds = opt.seeds;
  rep.teacher_steps = opt.teacher_steps;
  rep.student_steps = opt.student_steps;
  for (const auto& v : ablation_variants()) {
    AblationRow row;
    row.variant = v;
    for (std::uint64_t seed : opt.seeds) {
      RunConfig cfg = opt.base;
      cfg.net.use_mdb_fusion = v.use_mdb;
      cfg.use_uncertainty = v.use_uncertainty;
      cfg.use_kl = v.use_kl;
      cfg.seed = seed;
      const Rng root(seed);

      DehazeNet<float> teacher(cfg.net, root.split(101).seed());
      Discriminator<float> disc_t(root.split(102).seed());
      TrainPlan tp = TrainPlan::from_config(cfg, Stage::teacher);
      tp.max_steps = opt.teacher_steps;
      TrainResult tr = train_teacher(tp, data, teacher, disc_t);

      DehazeNet<float> student(cfg.net, root.split(103).seed());
      Discriminator<float> disc_s(root.split(104).seed());
      TrainPlan sp = TrainPlan::from_config(cfg, Stage::student);
      sp.max_steps = opt.student_steps;
      train_student(sp, data, tr.generator, student, disc_s);

      const EvalReport ev = evaluate(student, items);
      row.psnr.push_back(ev.mean_psnr);
      row.ssim.push_back(ev.mean_ssim);
      if (opt.on_run) opt.on_run(v.name, seed, ev.mean_psnr, ev.mean_ssim);
    }
    mean_std(row.psnr, row.mean_psnr, row.std_psnr);
    mean_std(row.ssim, row.mean_ssim, row.std_ssim);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string AblationReport::to_tsv() const {
  std::ostringstream os;
  os << "# teacher_steps=" << teacher_steps << " student_steps=" << student_steps << " seeds=";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
  os << '\n' << std::fixed << std::setprecision(6);
  os << "variant\tmdb\tuncertainty\tkl\tpsnr\tssim\tpsnr_std\tssim_std\n";
  for (const auto& r : rows)
    os << r.variant.name << '\t' << r.variant.use_mdb << '\t' << r.variant.use_uncertainty << '\t'
       << r.variant.use_kl << '\t' << r.mean_psnr << '\t' << r.mean_ssim << '\t' << r.std_psnr
       << '\t' << r.std_ssim << '\n';
  return os.str();
}

std::string AblationReport::per_seed_tsv() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << "variant\tseed\tpsnr\tssim\n";
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.psnr.size(); ++i)
      os << r.variant.name << '\t' << seeds[i] << '\t' << r.psnr[i] << '\t' << r.ssim[i] << '\n';
  return os.str();
}

}  // namespace semiuf
