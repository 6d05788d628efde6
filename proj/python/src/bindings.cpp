#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <optional>

#include "semiuf/gradcheck.hpp"
#include "semiuf/losses.hpp"
#include "semiuf/metrics.hpp"
#include "semiuf/trainer.hpp"

namespace py = pybind11;
using namespace semiuf;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <class T, class A>
Tensor<T> to_tensor(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

// Accepts [3,H,W] or [B,3,H,W].
Tensor<float> image_tensor(const FloatArray& a) {
  Tensor<float> t = to_tensor<float>(a);
  if (t.rank() == 3) t = Tensor<float>({1, t.dim(0), t.dim(1), t.dim(2)}, t.vec());
  return t;
}

Role parse_role(const std::string& s) {
  if (s == "teacher") return Role::teacher;
  if (s == "student") return Role::student;
  throw std::invalid_argument("role must be 'teacher' or 'student', got '" + s + "'");
}

struct Model {
  std::shared_ptr<DehazeNet<float>> net;
  Role role = Role::teacher;
};

Model make_model(std::uint64_t seed, bool global_skip, bool use_mdb_fusion) {
  NetConfig cfg;
  cfg.global_skip = global_skip;
  cfg.use_mdb_fusion = use_mdb_fusion;
  return {std::make_shared<DehazeNet<float>>(cfg, seed), Role::teacher};
}

Model from_checkpoint(const Checkpoint& ck) {
  if (ck.role == Role::discriminator) throw CheckpointError("expected a generator checkpoint");
  Model m{std::make_shared<DehazeNet<float>>(ck.config), ck.role};
  m.net->load(ck);
  return m;
}

py::list log_to_list(const std::vector<std::string>& log) {
  py::list out;
  for (const auto& l : log) out.append(l);
  return out;
}

py::tuple train_teacher_py(const std::filesystem::path& data_dir, long steps, std::uint64_t seed, double lr,
                           int batch_size, const std::optional<std::filesystem::path>& out_dir) {
  const Dataset data = Dataset::load(data_dir);
  RunConfig cfg;
  cfg.seed = seed;
  cfg.lr = lr;
  cfg.batch_size = batch_size;
  cfg.max_steps = steps;
  TrainPlan plan = TrainPlan::from_config(cfg, Stage::teacher);
  plan.out_dir = out_dir.value_or(std::filesystem::path());
  const Rng root(seed);
  Model m{std::make_shared<DehazeNet<float>>(cfg.net, root.split(101).seed()), Role::teacher};
  Discriminator<float> disc(root.split(102).seed());
  TrainResult res;
  {
    py::gil_scoped_release release;
    res = train_teacher(plan, data, *m.net, disc);
  }
  return py::make_tuple(m, log_to_list(res.log));
}

py::tuple train_student_py(const std::filesystem::path& data_dir, const std::filesystem::path& teacher_ckpt,
                           long steps, std::uint64_t seed, double lr, int batch_size,
                           const std::optional<std::filesystem::path>& out_dir) {
  const Dataset data = Dataset::load(data_dir);
  const Checkpoint tck = load_checkpoint(teacher_ckpt);
  RunConfig cfg;
  cfg.seed = seed;
  cfg.lr = lr;
  cfg.batch_size = batch_size;
  cfg.max_steps = steps;
  cfg.net = tck.config;
  TrainPlan plan = TrainPlan::from_config(cfg, Stage::student);
  plan.out_dir = out_dir.value_or(std::filesystem::path());
  const Rng root(seed);
  Model m{std::make_shared<DehazeNet<float>>(tck.config, root.split(103).seed()), Role::student};
  Discriminator<float> disc(root.split(102).seed());
  TrainResult res;
  {
    py::gil_scoped_release release;
    res = train_student(plan, data, tck, *m.net, disc);
  }
  return py::make_tuple(m, log_to_list(res.log));
}

py::tuple evaluate_py(const Model& m, const std::filesystem::path& data_dir, const std::string& split,
                      bool quantize) {
  const Dataset data = Dataset::load(data_dir);
  std::vector<EvalItem> items;
  if (split == "paired") {
    for (std::size_t i = 0; i < data.paired().size(); ++i)
      items.push_back({"paired_" + std::to_string(i), data.paired()[i].hazy, data.paired()[i].clean});
  } else if (split == "real") {
    for (std::size_t i = 0; i < data.heldout_size(); ++i)
      items.push_back({"real_" + std::to_string(i), data.real()[i].hazy, data.heldout_clean(i)});
  } else {
    throw std::invalid_argument("split must be 'real' or 'paired'");
  }
  const EvalReport rep = evaluate(*m.net, items, {}, quantize);
  return py::make_tuple(rep.mean_psnr, rep.mean_ssim);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semi-supervised uncertainty-aware dehazing";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  py::class_<Model>(m, "Model")
      .def(py::init(&make_model), py::arg("seed") = 0, py::arg("global_skip") = false,
           py::arg("use_mdb_fusion") = true)
      .def_static("load", [](const std::filesystem::path& p) { return from_checkpoint(load_checkpoint(p)); },
                  py::arg("path"))
      .def(
          "save",
          [](const Model& self, const std::filesystem::path& p, const std::string& role) {
            save_checkpoint(self.net->to_checkpoint(role.empty() ? self.role : parse_role(role)), p);
          },
          py::arg("path"), py::arg("role") = "")
      .def(
          "forward",
          [](const Model& self, const FloatArray& img, bool uncertainty) {
            const ImageBatch in(image_tensor(img));
            ForwardOutput out;
            {
              py::gil_scoped_release release;
              out = forward(*self.net, in, uncertainty);
            }
            py::object lt = py::none();
            if (out.log_theta) lt = to_array(out.log_theta->tensor());
            return py::make_tuple(to_array(out.dehazed.tensor()), lt);
          },
          py::arg("image"), py::arg("uncertainty") = false,
          "Returns (dehazed [B,3,H,W], ln theta [B,1,H,W] or None).")
      .def_property_readonly("parameter_count", [](const Model& self) { return self.net->params().parameter_count(); })
      .def_property_readonly("size_multiple", [](const Model& self) { return self.net->config().size_multiple(); })
      .def_property_readonly("role", [](const Model& self) { return role_name(self.role); })
      .def_property_readonly("config", [](const Model& self) { return net_config_to_text(self.net->config()); });

  m.def("lr_at", &lr_at, py::arg("step"), py::arg("total_steps"), py::arg("lr0"));
  m.def(
      "select_branch",
      [](long step, int supervised, int unsupervised) {
        return branch_name(select_branch(step, {supervised, unsupervised}));
      },
      py::arg("step"), py::arg("supervised") = 5, py::arg("unsupervised") = 1);

  m.def(
      "psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(image_tensor(a), image_tensor(b)); },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "ssim", [](const FloatArray& a, const FloatArray& b) { return ssim(image_tensor(a), image_tensor(b)); },
      py::arg("pred"), py::arg("gt"));

  m.def(
      "loss_ue",
      [](const DoubleArray& gt, const DoubleArray& pred, const DoubleArray& log_theta) {
        return loss_ue(Var<double>::leaf(to_tensor<double>(gt)), Var<double>::leaf(to_tensor<double>(pred)),
                       Var<double>::leaf(to_tensor<double>(log_theta)))
            .item();
      },
      py::arg("gt"), py::arg("pred"), py::arg("log_theta"));
  m.def(
      "loss_ugs",
      [](const DoubleArray& gt, const DoubleArray& pred, const DoubleArray& log_theta) {
        return loss_ugs(Var<double>::leaf(to_tensor<double>(gt)), Var<double>::leaf(to_tensor<double>(pred)),
                        to_tensor<double>(log_theta))
            .item();
      },
      py::arg("gt"), py::arg("pred"), py::arg("log_theta"));
  m.def(
      "loss_kl",
      [](const DoubleArray& v_real, const DoubleArray& v_syn, double temperature) {
        return loss_kl(Var<double>::leaf(to_tensor<double>(v_real)), Var<double>::leaf(to_tensor<double>(v_syn)),
                       temperature)
            .item();
      },
      py::arg("v_real"), py::arg("v_syn"), py::arg("temperature") = 1.0);

  m.def("gradcheck_items", &gradcheck_item_names);
  m.def(
      "gradcheck",
      [](const std::string& filter, const std::string& inject_fault, double tolerance) {
        GradcheckOptions opt;
        opt.filter = filter;
        opt.inject_fault = inject_fault;
        opt.tolerance = tolerance;
        std::vector<GradcheckItem> items;
        {
          py::gil_scoped_release release;
          items = run_gradcheck(opt);
        }
        py::dict out;
        for (const auto& it : items) out[py::str(it.name)] = py::make_tuple(it.passed, it.max_rel_error);
        return out;
      },
      py::arg("filter") = "", py::arg("inject_fault") = "", py::arg("tolerance") = 1e-3,
      "Maps item name to (passed, max relative error).");

  m.def(
      "generate_dataset",
      [](const std::filesystem::path& out, int paired, int real, int size, std::uint64_t seed) {
        DatasetSpec spec;
        spec.n_paired = paired;
        spec.n_unpaired_real = real;
        spec.height = spec.width = size;
        spec.seed = seed;
        Dataset::build(spec).save(out);
      },
      py::arg("out_dir"), py::arg("paired"), py::arg("real"), py::arg("size") = 64, py::arg("seed") = 0);

  m.def("train_teacher", &train_teacher_py, py::arg("data_dir"), py::arg("steps"), py::arg("seed") = 0,
        py::arg("lr") = 1e-4, py::arg("batch_size") = 2, py::arg("out_dir") = py::none(),
        "Returns (model, log lines).");
  m.def("train_student", &train_student_py, py::arg("data_dir"), py::arg("teacher_ckpt"), py::arg("steps"),
        py::arg("seed") = 0, py::arg("lr") = 1e-4, py::arg("batch_size") = 2,
        py::arg("out_dir") = py::none(), "Returns (model, log lines).");
  m.def("evaluate", &evaluate_py, py::arg("model"), py::arg("data_dir"), py::arg("split") = "real",
        py::arg("quantize") = false, "Returns (mean PSNR, mean SSIM).");
}
