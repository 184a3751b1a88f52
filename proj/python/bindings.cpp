#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "niwt/error.hpp"
#include "niwt/explain.hpp"
#include "niwt/importance.hpp"
#include "niwt/metrics.hpp"
#include "niwt/pipeline.hpp"
#include "niwt/runtime.hpp"
#include "niwt/transfer.hpp"

namespace py = pybind11;
using namespace niwt;

namespace {

using NdArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const NdArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Array(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

NdArray to_numpy(const Array& a) {
  NdArray out(std::vector<py::ssize_t>(a.shape.begin(), a.shape.end()));
  std::copy(a.data.begin(), a.data.end(), out.mutable_data());
  return out;
}

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

py::dict gzsl(const synth::GzslResult& r) {
  py::dict d;
  d["acc_unseen"] = r.acc_unseen;
  d["acc_seen"] = r.acc_seen;
  d["h"] = r.h;
  return d;
}

py::list sweep(const std::vector<pipeline::SweepRow>& rows) {
  py::list out;
  for (const auto& r : rows) {
    py::dict d = gzsl(r.result);
    d["key"] = r.key;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_niwt, m) {
  m.doc() = "Neuron-importance-based zero-shot weight transfer";
  m.attr("__version__") = pipeline::kVersion;

  py::register_exception<Error>(m, "NiwtError");

  m.def("configure_runtime", &configure_runtime, py::arg("threads") = 0);
  m.def("harmonic_mean", &harmonic_mean, py::arg("acc_unseen"), py::arg("acc_seen"));
  m.def(
      "class_normalized_accuracy",
      [](std::vector<std::size_t> pred, std::vector<std::size_t> labels) {
        return class_normalized_accuracy(pred, labels);
      },
      py::arg("predictions"), py::arg("labels"));
  m.def(
      "spearman", [](std::vector<double> x, std::vector<double> y) { return importance::spearman(x, y); },
      py::arg("x"), py::arg("y"));

  py::class_<pipeline::RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("load", [](const std::filesystem::path& p) { return pipeline::load_config(p); })
      .def("set", &pipeline::RunConfig::set, py::arg("key"), py::arg("value"))
      .def("validate", &pipeline::RunConfig::validate)
      .def("hash", &pipeline::RunConfig::hash)
      .def("to_dict", [](const pipeline::RunConfig& c) { return to_py(c.to_json()); })
      .def_readwrite("seed", &pipeline::RunConfig::seed)
      .def_readwrite("out", &pipeline::RunConfig::out)
      .def_readwrite("layer", &pipeline::RunConfig::layer);

  m.def("gen_data", &pipeline::gen_data);
  m.def("train_seen", [](const pipeline::RunConfig& c) {
    return pipeline::train_seen(c).final_val_accuracy;
  });
  m.def("extract_importance", [](const pipeline::RunConfig& c, const std::string& layer) {
    return to_numpy(pipeline::extract_importance(c, layer).values);
  });
  m.def("fit_map", [](const pipeline::RunConfig& c, const std::string& layer) {
    const auto s = pipeline::fit_map(c, layer);
    py::dict d;
    d["heldout_rho"] = s.heldout_rho;
    d["p_value"] = s.permutation.p_value;
    d["inverse_heldout_rho"] = s.inverse_heldout_rho;
    return d;
  });
  m.def("transfer", [](const pipeline::RunConfig& c) { return pipeline::run_transfer(c).rows.size(); });
  m.def("eval_gzsl", [](const pipeline::RunConfig& c) {
    py::dict d;
    for (const auto& r : pipeline::eval_gzsl(c)) d[py::str(r.method)] = gzsl(r.result);
    return d;
  });
  m.def("explain", [](const pipeline::RunConfig& c) {
    const auto s = pipeline::explain(c);
    py::dict d;
    d["instances"] = s.instances;
    d["bbox_energy"] = s.bbox_energy;
    d["bbox_energy_shuffled"] = s.bbox_energy_shuffled;
    d["fidelity"] = s.fidelity;
    d["chance_fidelity"] = s.chance_fidelity;
    return d;
  });
  m.def("run_all", [](const pipeline::RunConfig& c) {
    py::dict d;
    for (const auto& r : pipeline::run_all(c)) d[py::str(r.method)] = gzsl(r.result);
    return d;
  });
  m.def("sweep_lambda", [](const pipeline::RunConfig& c) { return sweep(pipeline::sweep_lambda(c)); });
  m.def("sweep_layer", [](const pipeline::RunConfig& c) { return sweep(pipeline::sweep_layer(c)); });
  m.def("sweep_probes", [](const pipeline::RunConfig& c) { return sweep(pipeline::sweep_probes(c)); });
  m.def("sweep_noise", [](const pipeline::RunConfig& c) {
    py::list out;
    for (const auto& p : pipeline::sweep_noise(c)) {
      py::dict d;
      d["eps"] = p.eps;
      d["accuracy"] = p.accuracy;
      d["original_accuracy"] = p.original_accuracy;
      d["row_cosine"] = p.row_cosine;
      out.append(d);
    }
    return out;
  });

  py::class_<model::Network>(m, "Network")
      .def_static("load", [](const std::filesystem::path& p) { return model::load_checkpoint(p); })
      .def_property_readonly("num_classes", &model::Network::num_classes)
      .def_property_readonly("feature_dim", &model::Network::feature_dim)
      .def("forward", [](const model::Network& n, const NdArray& x) {
        return to_numpy(model::forward(n, to_array(x)));
      })
      .def("head_weight", [](const model::Network& n) { return to_numpy(n.head_weight()); })
      .def(
          "importance",
          [](const model::Network& n, const std::string& layer, const NdArray& x, std::size_t cls) {
            return to_numpy(importance::neuron_importance(n, layer, to_array(x), cls));
          },
          py::arg("layer"), py::arg("images"), py::arg("class_index"))
      .def(
          "gradcam",
          [](const model::Network& n, const std::string& layer, const NdArray& x,
             std::vector<std::size_t> classes) {
            py::list out;
            for (const auto& h : explain::gradcam(n, layer, to_array(x), classes)) {
              out.append(to_numpy(Array(Shape{h.height, h.width}, h.values)));
            }
            return out;
          },
          py::arg("layer"), py::arg("images"), py::arg("classes"));

  m.def(
      "perturb_importance",
      [](std::vector<double> a, double eps, double scale, std::uint64_t seed) {
        return transfer::perturb_importance(a, eps, scale, seed);
      },
      py::arg("importance"), py::arg("eps"), py::arg("scale"), py::arg("seed"));
}
