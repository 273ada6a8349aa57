#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include "rvit/costmodel.hpp"
#include "rvit/harness.hpp"
#include "rvit/masking.hpp"
#include "rvit/metrics.hpp"
#include "rvit/synthdata.hpp"

namespace py = pybind11;

namespace {

// dicts cross the boundary as JSON text; simpler than mirroring every struct
nlohmann::json from_py(const py::object& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return nlohmann::json::parse(text);
}

py::object to_py(const nlohmann::json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

rvit::ModelConfig model_arg(const py::object& model) {
  if (py::isinstance<py::str>(model)) return rvit::model_preset(model.cast<std::string>());
  return rvit::ModelConfig::from_json(from_py(model));
}

py::array_t<double> pixels_array(const rvit::ImageSample& s) {
  py::array_t<double> out({s.height(), s.width(), s.channels()});
  std::copy(s.pixels.data().begin(), s.pixels.data().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_rvit, m) {
  m.doc() = "Redundancy-aware vision transformer toolkit";

  py::register_exception<rvit::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<rvit::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<rvit::ParseError>(m, "ParseError", PyExc_ValueError);

  m.def("sample_seed", [](const std::string& key) { return rvit::SampleSeed::from_key(key).seed; },
        py::arg("key"));

  m.def("retained_count", &rvit::retained_count, py::arg("ratio"), py::arg("n"));

  m.def(
      "ms1_plan",
      [](const std::string& key, std::size_t n, double ratio) {
        return to_py(rvit::to_json(rvit::ms1_uniform(rvit::SampleSeed::from_key(key), ratio, n)));
      },
      py::arg("key"), py::arg("n"), py::arg("ratio"));

  m.def(
      "similarity_plan",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> sim, const std::string& strategy,
         double value) {
        if (sim.ndim() != 2 || sim.shape(0) != sim.shape(1)) throw rvit::ShapeError("similarity must be square");
        const auto n = static_cast<std::size_t>(sim.shape(0));
        rvit::Tensor values({n, n});
        std::copy(sim.data(), sim.data() + n * n, values.ptr());
        const rvit::SimilarityMatrix s = rvit::similarity_from_values(std::move(values));
        const rvit::Strategy st = rvit::parse_strategy(strategy);
        if (st == rvit::Strategy::ms2) return to_py(rvit::to_json(rvit::ms2_diversity(s, value)));
        if (st == rvit::Strategy::ms3) return to_py(rvit::to_json(rvit::ms3_select(s, value)));
        throw rvit::ConfigError("similarity_plan takes ms2 or ms3");
      },
      py::arg("similarity"), py::arg("strategy"), py::arg("value"),
      "MS2 with value as the ratio, or MS3 with value as tau.");

  m.def(
      "estimate_cost",
      [](const py::object& model, double ratio) { return to_py(rvit::estimate_cost(model_arg(model), ratio).to_json()); },
      py::arg("model"), py::arg("ratio"), "model is a preset name or a model dict");

  m.def(
      "compare_to_full",
      [](const py::object& model, double ratio) {
        return to_py(rvit::compare_to_full(model_arg(model), ratio).to_json());
      },
      py::arg("model"), py::arg("ratio"));

  m.def(
      "generate_scene",
      [](const py::object& spec) {
        const rvit::ImageSample s = rvit::generate(rvit::SceneSpec::from_json(from_py(spec)));
        py::array_t<std::uint8_t> seg({s.height(), s.width()});
        std::copy(s.seg_labels.begin(), s.seg_labels.end(), seg.mutable_data());
        return py::make_tuple(pixels_array(s), py::cast(s.class_labels), seg);
      },
      py::arg("spec") = py::none(), "Returns (pixels HxWxC, class presence, segmentation map).");

  m.def(
      "lag1_autocorrelation",
      [](const py::object& spec, std::size_t channel) {
        return rvit::lag1_autocorrelation(rvit::generate(rvit::SceneSpec::from_json(from_py(spec))), channel);
      },
      py::arg("spec") = py::none(), py::arg("channel") = 0);

  m.def(
      "spearman",
      [](const std::vector<double>& a, const std::vector<double>& b) { return rvit::spearman(a, b); },
      py::arg("a"), py::arg("b"));

  m.def(
      "run_experiment",
      [](const py::object& config) {
        const rvit::ExperimentConfig cfg = rvit::ExperimentConfig::from_json(from_py(config));
        rvit::TrainOutcome out = [&] {
          py::gil_scoped_release release;
          const rvit::Datasets data = rvit::make_datasets(cfg.data);
          return rvit::train(cfg, data.train, data.eval);
        }();
        py::dict result;
        result["row"] = to_py(out.row.to_json());
        result["losses"] = py::cast(out.losses);
        return result;
      },
      py::arg("config") = py::none(), "Generate data, train, and evaluate one configuration.");

  m.def(
      "sweep_csv",
      [](const py::object& grid, std::size_t jobs) {
        const rvit::SweepGrid g = rvit::SweepGrid::from_json(from_py(grid));
        rvit::SweepOptions opts;
        opts.jobs = jobs;
        py::gil_scoped_release release;
        return rvit::to_csv(rvit::sweep(g, opts));
      },
      py::arg("grid"), py::arg("jobs") = 1);
}
