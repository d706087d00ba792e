#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "scedit/checkpoint.hpp"
#include "scedit/cli.hpp"
#include "scedit/conditions.hpp"
#include "scedit/diffusion.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"

namespace py = pybind11;
using namespace scedit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DType parse_dtype(const std::string& name) {
  if (name == "float32" || name == "f32") return DType::kF32;
  if (name == "float64" || name == "f64") return DType::kF64;
  throw ConfigError("dtype must be float32 or float64, got '" + name + "'");
}

Tensor to_tensor(const Array& a, DType dtype) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_vector(std::move(shape), std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                             dtype);
}

py::array to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  return visit_dtype(t.dtype(), [&]<class T>() -> py::array {
    py::array_t<T> out(shape);
    auto src = t.data<T>();
    std::copy(src.begin(), src.end(), out.mutable_data());
    return out;
  });
}

ConditionSet to_conditions(const std::map<std::string, Array>& maps, DType dtype) {
  ConditionSet c;
  for (const auto& [type, a] : maps) {
    c.types.push_back(type);
    c.maps.push_back(to_tensor(a, dtype));
  }
  return c;
}

py::list layout_list(const std::vector<SkipInfo>& layout) {
  py::list out;
  for (const auto& s : layout) out.append(py::make_tuple(s.channels, s.height, s.width));
  return out;
}

}  // namespace

PYBIND11_MODULE(_scedit, m) {
  m.doc() = "Skip-connection tuners for diffusion U-Nets";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<CheckpointError>(m, "CheckpointError", base);
  py::register_exception<IoError>(m, "IoError", base);

  py::class_<UNetConfig>(m, "UNetConfig")
      .def(py::init<>())
      .def_readwrite("in_channels", &UNetConfig::in_channels)
      .def_readwrite("levels", &UNetConfig::levels)
      .def_readwrite("base_channels", &UNetConfig::base_channels)
      .def_readwrite("channel_mult", &UNetConfig::channel_mult)
      .def_readwrite("blocks_per_level", &UNetConfig::blocks_per_level)
      .def_readwrite("attn_levels", &UNetConfig::attn_levels)
      .def_readwrite("mid_attention", &UNetConfig::mid_attention)
      .def_readwrite("num_labels", &UNetConfig::num_labels)
      .def_readwrite("time_embed_dim", &UNetConfig::time_embed_dim)
      .def_readwrite("norm_groups", &UNetConfig::norm_groups)
      .def_readwrite("seed", &UNetConfig::seed);

  py::class_<UNet>(m, "UNet")
      .def(py::init([](const UNetConfig& cfg, const std::string& dtype) { return UNet(cfg, parse_dtype(dtype)); }),
           py::arg("config"), py::arg("dtype") = "float32")
      .def_property_readonly("num_skips", &UNet::num_skips)
      .def_property_readonly("num_parameters", [](const UNet& u) { return total_elements(u.parameters()); })
      .def("skip_layout", [](const UNet& u, int h, int w) { return layout_list(u.skip_layout(h, w)); })
      .def(
          "predict_noise",
          [](const UNet& u, const Array& x, const std::vector<int>& steps, const std::vector<int>& labels) {
            InferenceGuard guard;
            return to_numpy(u.predict_noise(to_tensor(x, u.dtype()), steps, labels));
          },
          py::arg("x"), py::arg("steps"), py::arg("labels") = std::vector<int>{});

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_readonly("num_steps", &NoiseSchedule::num_steps)
      .def_readonly("beta", &NoiseSchedule::beta)
      .def_readonly("alpha", &NoiseSchedule::alpha)
      .def_readonly("alpha_bar", &NoiseSchedule::alpha_bar)
      .def("alpha_bar_at", &NoiseSchedule::alpha_bar_at);

  m.def(
      "make_schedule",
      [](int T, double b0, double b1, const std::string& kind) {
        if (kind != "linear" && kind != "scaled_linear") throw ConfigError("unknown schedule '" + kind + "'");
        return make_schedule(T, b0, b1, kind == "linear" ? BetaSchedule::kLinear : BetaSchedule::kScaledLinear);
      },
      py::arg("num_steps"), py::arg("beta_start"), py::arg("beta_end"), py::arg("kind") = "linear");

  m.def(
      "q_sample",
      [](const NoiseSchedule& s, const Array& x0, const std::vector<int>& t, const Array& eps) {
        return to_numpy(q_sample(s, to_tensor(x0, DType::kF64), t, to_tensor(eps, DType::kF64)));
      },
      py::arg("schedule"), py::arg("x0"), py::arg("t"), py::arg("eps"));

  py::enum_<AdapterKind>(m, "AdapterKind")
      .value("linear", AdapterKind::kLinear)
      .value("conv", AdapterKind::kConv)
      .value("single_conv", AdapterKind::kSingleConv);

  py::class_<TunerConfig>(m, "TunerConfig")
      .def(py::init<>())
      .def_readwrite("kind", &TunerConfig::kind)
      .def_readwrite("hidden_ratio", &TunerConfig::hidden_ratio)
      .def_readwrite("active_indexes", &TunerConfig::active_indexes)
      .def_readwrite("conv_kernel", &TunerConfig::conv_kernel)
      .def_readwrite("scale", &TunerConfig::scale)
      .def_readwrite("hint_channels", &TunerConfig::hint_channels);

  m.def("sd15_layout", &sd15_layout);
  m.def(
      "count_params",
      [](const std::vector<int>& channels, const TunerConfig& cfg) { return count_params(channels, cfg); },
      py::arg("decoder_channels"), py::arg("config") = TunerConfig{});

  py::class_<TunerStack>(m, "TunerStack")
      .def_static(
          "sc",
          [](const UNet& u, int size, const TunerConfig& cfg, std::uint64_t seed) {
            return TunerStack::sc(u.skip_layout(size, size), cfg, seed, u.dtype());
          },
          py::arg("unet"), py::arg("size"), py::arg("config") = TunerConfig{}, py::arg("seed") = 0)
      .def_static(
          "csc",
          [](const UNet& u, int size, const std::vector<std::string>& conditions, const TunerConfig& cfg,
             std::uint64_t seed) {
            return TunerStack::csc(u.skip_layout(size, size), cfg, conditions, u.config().time_embed_dim, seed,
                                   u.dtype());
          },
          py::arg("unet"), py::arg("size"), py::arg("conditions"), py::arg("config") = TunerConfig{},
          py::arg("seed") = 0)
      .def_static("compose", &TunerStack::compose)
      .def_property_readonly("controllable", &TunerStack::controllable)
      .def_property_readonly("alphas", &TunerStack::alphas)
      .def_property_readonly("active_indexes", &TunerStack::active_indexes)
      .def_property_readonly("num_parameters", [](const TunerStack& s) { return total_elements(s.parameters()); })
      .def("set_active_indexes", &TunerStack::set_active_indexes)
      .def("blend", [](TunerStack& s, const std::vector<double>& raw) { blend_conditions(s, raw); });

  m.def(
      "predict_noise",
      [](const UNet& u, const TunerStack* stack, const Array& x, const std::vector<int>& steps,
         const std::vector<int>& labels, const std::map<std::string, Array>& conditions) {
        InferenceGuard guard;
        const ConditionSet conds = to_conditions(conditions, u.dtype());
        return to_numpy(ScEditModel(u, stack).predict_noise(to_tensor(x, u.dtype()), steps, labels, &conds));
      },
      py::arg("unet"), py::arg("stack"), py::arg("x"), py::arg("steps"), py::arg("labels") = std::vector<int>{},
      py::arg("conditions") = std::map<std::string, Array>{});

  m.def(
      "ddim_sample",
      [](const UNet& u, const TunerStack* stack, const NoiseSchedule& s, int count, int size, int steps,
         std::uint64_t seed, const std::vector<int>& labels, double guide_scale,
         const std::map<std::string, Array>& conditions) {
        const ConditionSet conds = to_conditions(conditions, u.dtype());
        DdimOptions opts;
        opts.steps = steps;
        opts.seed = seed;
        opts.guide_scale = guide_scale;
        const ScEditModel model(u, stack);
        Tensor images;
        {
          py::gil_scoped_release release;
          images = ddim_sample(model.noise_model(conds.size() > 0 ? &conds : nullptr), s,
                               {count, u.config().in_channels, size, size}, opts, labels, u.dtype());
        }
        return to_numpy(images);
      },
      py::arg("unet"), py::arg("stack"), py::arg("schedule"), py::arg("count"), py::arg("size"),
      py::arg("steps") = 50, py::arg("seed") = 0, py::arg("labels") = std::vector<int>{},
      py::arg("guide_scale") = 1.0, py::arg("conditions") = std::map<std::string, Array>{});

  m.def(
      "gen_toy_dataset",
      [](int n, int size, std::uint64_t seed, const std::vector<std::string>& types) {
        const auto data = gen_toy_dataset(n, size, seed, types);
        py::list out;
        for (const auto& s : data.samples) {
          py::dict conds;
          for (std::size_t i = 0; i < s.conditions.size(); ++i) conds[py::str(s.conditions.types[i])] = to_numpy(s.conditions.maps[i]);
          out.append(py::make_tuple(to_numpy(s.image), s.label, conds));
        }
        return out;
      },
      py::arg("n"), py::arg("size"), py::arg("seed") = 0,
      py::arg("conditions") = std::vector<std::string>{"edge", "color", "mask"});
  m.def(
      "extract_edge", [](const Array& img, double thr) { return to_numpy(extract_edge(to_tensor(img, DType::kF32), thr)); },
      py::arg("image"), py::arg("threshold") = 0.2);
  m.def(
      "extract_color", [](const Array& img, int factor) { return to_numpy(extract_color(to_tensor(img, DType::kF32), factor)); },
      py::arg("image"), py::arg("factor"));
  m.def(
      "random_mask", [](int size, std::uint64_t seed) { return to_numpy(random_mask(size, seed)); }, py::arg("size"),
      py::arg("seed"));

  m.def(
      "save_checkpoint",
      [](const std::filesystem::path& path, const UNet& u, const TunerStack* stack, bool tuner_only) {
        save_checkpoint(path, u, stack, tuner_only ? CheckpointScope::kTunerOnly : CheckpointScope::kAll);
      },
      py::arg("path"), py::arg("unet"), py::arg("stack") = nullptr, py::arg("tuner_only") = false);
  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path, UNet* u, TunerStack* stack) { load_checkpoint(path, u, stack); },
      py::arg("path"), py::arg("unet") = nullptr, py::arg("stack") = nullptr);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = dispatch(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
