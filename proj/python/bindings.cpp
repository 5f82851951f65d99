#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "botmoe/harness.hpp"

namespace py = pybind11;
using namespace botmoe;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict gate_dict(const GateOutput& g) {
  py::dict d;
  d["weights"] = to_array(g.weights);
  d["clean_logits"] = to_array(g.clean_logits);
  py::array_t<std::size_t> top({static_cast<py::ssize_t>(g.batch()), static_cast<py::ssize_t>(g.k)});
  std::copy(g.top_k.begin(), g.top_k.end(), top.mutable_data());
  d["top_k"] = top;
  if (g.noisy) {
    d["noisy_logits"] = to_array(g.noisy_logits);
    d["noise_scales"] = to_array(g.noise_scales);
  }
  return d;
}

GateOutput run_gate(const Array& x, const Array& w_gate, const Array& w_noise, std::size_t k, bool noisy,
                    std::uint64_t seed) {
  GateNetwork net;
  net.w_gate = to_tensor(w_gate);
  net.w_noise = to_tensor(w_noise);
  net.k = k;
  Rng rng(seed);
  NoGradGuard guard;
  return net.forward(to_tensor(x), noisy, &rng);
}

RunConfig config_from(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in, "<string>");
}

py::list aggregates(const StudyReport& r) {
  py::list out;
  for (const auto& a : r.aggregate()) {
    py::dict d;
    d["variant"] = a.variant;
    d["setting"] = a.setting;
    d["n"] = a.n;
    d["accuracy"] = a.accuracy_mean;
    d["accuracy_std"] = a.accuracy_std;
    d["f1"] = a.f1_mean;
    d["f1_std"] = a.f1_std;
    out.append(d);
  }
  return out;
}

py::dict report_dict(const StudyReport& r) {
  py::dict d;
  d["study"] = r.study;
  d["aggregates"] = aggregates(r);
  py::list stats, failures;
  for (const auto& s : r.statistics) stats.append(py::make_tuple(s.name, s.setting, s.seed, s.value));
  for (const auto& f : r.failures) failures.append(py::make_tuple(f.variant, f.setting, f.seed, f.error));
  d["statistics"] = stats;
  d["failures"] = failures;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Community-aware mixture-of-experts bot detection";

  m.def("gate", [](const Array& x, const Array& w_gate, const Array& w_noise, std::size_t k, bool noisy,
                   std::uint64_t seed) { return gate_dict(run_gate(x, w_gate, w_noise, k, noisy, seed)); },
        py::arg("x"), py::arg("w_gate"), py::arg("w_noise"), py::arg("k"), py::arg("noisy") = false,
        py::arg("seed") = 0);
  m.def("smooth_load", [](const Array& x, const Array& w_gate, const Array& w_noise, std::size_t k,
                          std::uint64_t seed) {
          const auto g = run_gate(x, w_gate, w_noise, k, true, seed);
          NoGradGuard guard;
          return to_array(smooth_load(g));
        },
        py::arg("x"), py::arg("w_gate"), py::arg("w_noise"), py::arg("k"), py::arg("seed") = 0);
  m.def("cv_squared", [](const Array& v) {
          NoGradGuard guard;
          return cv_squared(to_tensor(v)).item();
        });
  m.def("balance_loss", [](const Array& importance, const Array& load, double w_importance, double w_load) {
          NoGradGuard guard;
          return balance_loss({to_tensor(importance), to_tensor(load)}, w_importance, w_load).item();
        },
        py::arg("importance"), py::arg("load"), py::arg("w_importance") = 1.0, py::arg("w_load") = 1.0);
  m.def("assignment_purity", &assignment_purity, py::arg("assigned"), py::arg("truth"));
  m.def("spearman", &spearman);

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("n_users", &Dataset::size)
      .def_property_readonly("embed_dim", &Dataset::embed_dim)
      .def_property_readonly("n_edges", [](const Dataset& d) { return d.graph.edge_count(); })
      .def_property_readonly("labels",
                             [](const Dataset& d) {
                               std::vector<int> out;
                               for (const auto& u : d.users) out.push_back(u.label.value_or(-1));
                               return out;
                             })
      .def_property_readonly("communities",
                             [](const Dataset& d) {
                               std::vector<int> out;
                               for (const auto& u : d.users) out.push_back(u.community.value_or(-1));
                               return out;
                             })
      .def_property_readonly("splits",
                             [](const Dataset& d) {
                               std::vector<std::string> out;
                               for (const auto& u : d.users) out.emplace_back(to_string(u.split));
                               return out;
                             })
      .def("save", &save_dataset, py::arg("users"), py::arg("edges"), py::arg("splits"));

  m.def("generate_world", [](const std::string& config_text, std::uint64_t seed) {
          return build_dataset(config_from(config_text), seed);
        },
        py::arg("config") = "", py::arg("seed") = 0,
        "Normalized synthetic world for `seed`, configured by flat `key = value` text.");
  m.def("load_dataset", [](const std::filesystem::path& users, const std::filesystem::path& edges,
                           const std::filesystem::path& splits) { return load_dataset(users, edges, splits); });
  m.def("manipulate", [](const Dataset& d, const std::string& modality, double fraction, std::uint64_t seed) {
          if (modality == "graph") return add_adversarial_edges(d, fraction, seed);
          return manipulate_features(d, std::string_view(modality), fraction, seed);
        },
        py::arg("dataset"), py::arg("modality"), py::arg("fraction"), py::arg("seed") = 0);

  py::class_<BotMoE>(m, "Model")
      .def_property_readonly("embed_dim", &BotMoE::embed_dim)
      .def("logits", [](const BotMoE& model, const Dataset& d) {
            NoGradGuard guard;
            return to_array(model.forward(input_features(d), ForwardContext{}).logits);
          })
      .def("predict", [](const BotMoE& model, const Dataset& d) {
            NoGradGuard guard;
            return predict(model.forward(input_features(d), ForwardContext{}).logits);
          })
      .def("evaluate", [](const BotMoE& model, const Dataset& d, const std::string& split) {
            const auto s = parse_split(split);
            if (!s) throw py::value_error("unknown split " + split);
            const auto mt = evaluate(model, d, *s);
            return py::dict(py::arg("accuracy") = mt.accuracy(), py::arg("f1") = mt.f1(),
                            py::arg("precision") = mt.precision(), py::arg("recall") = mt.recall());
          })
      .def("save", [](const BotMoE& model, const std::filesystem::path& p) { save_checkpoint(p, model); });

  m.def("load_checkpoint", &load_checkpoint);
  m.def("train", [](const Dataset& d, const std::string& config_text, std::uint64_t seed) {
          const auto cfg = config_from(config_text);
          cfg.validate();
          py::gil_scoped_release release;
          return std::move(train(d, make_train_config(cfg, cfg.model, seed)).state.model);
        },
        py::arg("dataset"), py::arg("config") = "", py::arg("seed") = 0);

  m.def("check_config", [](const std::string& text) {
    const auto cfg = config_from(text);
    cfg.validate();
    return cfg.dump();
  });
  m.def("run", [](const std::string& command, const std::string& config_text, const std::filesystem::path& out,
                  std::optional<std::filesystem::path> checkpoint) {
          const auto cfg = config_from(config_text);
          StudyReport r;
          {
            py::gil_scoped_release release;
            if (command == "train") r = cmd_train(cfg, out);
            else if (command == "manipulate") r = cmd_manipulate(cfg, out);
            else if (command == "ablate") r = cmd_ablate(cfg, out);
            else if (command == "sweep") r = cmd_sweep(cfg, out);
            else if (command == "efficiency") r = cmd_efficiency(cfg, out);
            else if (command == "communities") r = cmd_communities(cfg, out, checkpoint);
            else throw std::invalid_argument("unknown command " + command);
          }
          return report_dict(r);
        },
        py::arg("command"), py::arg("config"), py::arg("out"), py::arg("checkpoint") = std::nullopt);

  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", PyExc_RuntimeError);
}
