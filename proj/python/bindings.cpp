#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <tuple>
#include <vector>

#include "dsn/data.hpp"
#include "dsn/error.hpp"
#include "dsn/grl.hpp"
#include "dsn/model.hpp"
#include "dsn/nn.hpp"
#include "dsn/pipeline.hpp"
#include "dsn/rng.hpp"

namespace py = pybind11;
using namespace dsn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

pipeline::ExperimentConfig make_config(const py::dict& overrides) {
  pipeline::ExperimentConfig cfg;
  for (const auto& [k, v] : overrides) {
    cfg.set(py::str(k).cast<std::string>(), py::str(v).cast<std::string>());
  }
  cfg.validate();
  return cfg;
}

py::dict eval_dict(const pipeline::CorpusEval& e) {
  py::dict d;
  d["name"] = e.name;
  d["frames"] = e.frames;
  d["errors"] = e.errors;
  d["frame_error_rate"] = e.frame_error_rate;
  d["confusion"] = e.confusion;
  return d;
}

py::list trace_list(const std::vector<pipeline::EpochTrace>& trace) {
  py::list out;
  for (const auto& t : trace) {
    py::dict d;
    d["epoch"] = t.epoch;
    d["loss_senone"] = t.loss_senone;
    d["loss_domain"] = t.loss_domain;
    d["loss_diff"] = t.loss_diff;
    d["loss_recon"] = t.loss_recon;
    d["loss_total"] = t.loss_total;
    d["domain_accuracy"] = t.domain_accuracy;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Domain separation networks for unsupervised domain adaptation";
#ifdef VERSION_INFO
#define DSN_STR(x) #x
#define DSN_XSTR(x) DSN_STR(x)
  m.attr("__version__") = DSN_XSTR(VERSION_INFO);
#endif

  auto base = py::register_exception<Error>(m, "DsnError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  auto data_err = py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", data_err.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());

  py::class_<nn::Mlp>(m, "Mlp")
      .def_property_readonly("in_dim", &nn::Mlp::in_dim)
      .def_property_readonly("out_dim", &nn::Mlp::out_dim)
      .def_property_readonly("num_layers", &nn::Mlp::num_layers)
      .def_property_readonly("num_params", &nn::Mlp::num_params)
      .def("weights", [](const nn::Mlp& n, std::size_t k) { return to_array(n.layers().at(k).weights); })
      .def("bias", [](const nn::Mlp& n, std::size_t k) { return n.layers().at(k).bias; })
      .def("activation",
           [](const nn::Mlp& n, std::size_t k) { return std::string(nn::to_string(n.layers().at(k).activation)); })
      .def("__eq__", [](const nn::Mlp& a, const nn::Mlp& b) { return a == b; });

  m.def(
      "init_mlp",
      [](const std::vector<std::tuple<std::size_t, std::size_t, std::string>>& spec,
         std::uint64_t seed) {
        std::vector<nn::LayerSpec> layers;
        for (const auto& [in, out, act] : spec) layers.push_back({in, out, nn::parse_activation(act)});
        Rng rng(seed);
        return nn::init_mlp(layers, rng);
      },
      py::arg("spec"), py::arg("seed"));
  m.def("forward", [](const nn::Mlp& n, const Array& x) { return to_array(nn::predict(n, to_matrix(x))); });
  m.def("save_mlp", &nn::save_mlp);
  m.def("load_mlp", &nn::load_mlp);

  m.def(
      "grl_forward", [](const Array& x) { return to_array(grl::forward(to_matrix(x))); });
  m.def(
      "grl_backward",
      [](const Array& g, double alpha) {
        grl::GrlConfig cfg{alpha};
        cfg.validate();
        return to_array(grl::backward(to_matrix(g), cfg));
      },
      py::arg("grad"), py::arg("alpha") = 1.0);

  m.def("cross_entropy_loss", [](const Array& p, const std::vector<int>& y) {
    auto r = nn::cross_entropy_loss(to_matrix(p), y);
    return py::make_tuple(r.loss, to_array(r.logit_grad));
  });
  m.def("mse_loss", [](const Array& pred, const Array& target) {
    auto r = nn::mse_loss(to_matrix(pred), to_matrix(target));
    return py::make_tuple(r.loss, to_array(r.grad));
  });
  m.def("difference_loss", [](const Array& shared, const Array& priv) {
    auto r = model::difference_term(to_matrix(shared), to_matrix(priv));
    return py::make_tuple(r.value, to_array(r.shared_grad), to_array(r.private_grad));
  });

  py::class_<data::Corpus>(m, "Corpus")
      .def_property_readonly("size", &data::Corpus::size)
      .def_property_readonly("dim", [](const data::Corpus& c) { return c.dim; })
      .def_property_readonly("spliced", [](const data::Corpus& c) { return c.spliced; })
      .def_property_readonly("labeled", &data::Corpus::labeled)
      .def("features", [](const data::Corpus& c) { return to_array(c.features()); })
      .def("labels", &data::Corpus::labels)
      .def("__len__", &data::Corpus::size)
      .def("__eq__", [](const data::Corpus& a, const data::Corpus& b) { return a == b; });

  m.def(
      "synth_corpus",
      [](const py::dict& overrides) {
        const auto cfg = make_config(overrides);
        auto s = cfg.synth;
        s.seed = cfg.data_seed();
        auto c = data::synth_corpus(s);
        py::dict out;
        out["source_train"] = c.source_train;
        out["target_adapt"] = c.target_adapt;
        out["target_test"] = c.target_test;
        out["source_test"] = c.source_test;
        return out;
      },
      py::arg("config") = py::dict());
  m.def("splice", &data::splice, py::arg("corpus"), py::arg("left"), py::arg("right"));
  m.def(
      "cmvn",
      [](const std::vector<data::Corpus>& stats_from, const std::vector<data::Corpus>& apply_to) {
        std::vector<const data::Corpus*> from, to;
        for (const auto& c : stats_from) from.push_back(&c);
        for (const auto& c : apply_to) to.push_back(&c);
        auto r = data::cmvn(from, to);
        return py::make_tuple(r.stats.mean, r.stats.variance, r.normalized);
      });
  m.def("save_corpus", &data::save_corpus);
  m.def("load_corpus", &data::load_corpus);

  py::class_<model::DsnModel>(m, "DsnModel")
      .def_property_readonly("n_h", [](const model::DsnModel& d) { return d.n_h; })
      .def_property_readonly("alpha", [](const model::DsnModel& d) { return d.coef.alpha; })
      .def_property_readonly("beta", [](const model::DsnModel& d) { return d.coef.beta; })
      .def_property_readonly("gamma", [](const model::DsnModel& d) { return d.coef.gamma; })
      .def_property_readonly("has_private", &model::DsnModel::has_private)
      .def_property_readonly("shared", [](const model::DsnModel& d) { return d.m_c; })
      .def_property_readonly("classifier", [](const model::DsnModel& d) { return d.m_y; })
      .def("senone_posteriors",
           [](const model::DsnModel& d, const Array& x) {
             return to_array(model::senone_posteriors(d, to_matrix(x)));
           })
      .def("__eq__", [](const model::DsnModel& a, const model::DsnModel& b) { return a == b; });
  m.def("save_model", &model::save_model);
  m.def("load_model", &model::load_model);

  py::class_<pipeline::PreparedData>(m, "PreparedData")
      .def_readonly("source_train", &pipeline::PreparedData::source_train)
      .def_readonly("target_adapt", &pipeline::PreparedData::target_adapt)
      .def_readonly("source_test", &pipeline::PreparedData::source_test)
      .def_readonly("target_test", &pipeline::PreparedData::target_test);

  m.def(
      "prepare_data",
      [](const py::dict& overrides, bool with_target_test) {
        return pipeline::prepare_data(make_config(overrides), with_target_test);
      },
      py::arg("config") = py::dict(), py::arg("with_target_test") = true);
  m.def(
      "pretrain",
      [](const py::dict& overrides, const data::Corpus& source_train) {
        auto r = pipeline::pretrain_source(make_config(overrides), source_train);
        return py::make_tuple(r.source_dnn, trace_list(r.trace));
      },
      py::arg("config"), py::arg("source_train"));
  const auto adapt = [](bool dsn) {
    return [dsn](const py::dict& overrides, const nn::Mlp& source_dnn,
                 const data::Corpus& source_train, const data::Corpus& target_adapt) {
      const auto cfg = make_config(overrides);
      auto r = dsn ? pipeline::adapt_dsn(cfg, source_dnn, source_train, target_adapt)
                   : pipeline::adapt_grl(cfg, source_dnn, source_train, target_adapt);
      return py::make_tuple(r.model, trace_list(r.trace));
    };
  };
  m.def("adapt_grl", adapt(false), py::arg("config"), py::arg("source_dnn"),
        py::arg("source_train"), py::arg("target_adapt"));
  m.def("adapt_dsn", adapt(true), py::arg("config"), py::arg("source_dnn"),
        py::arg("source_train"), py::arg("target_adapt"));
  m.def(
      "evaluate",
      [](const nn::Mlp& classifier, const data::Corpus& corpus, std::size_t batch) {
        return eval_dict(pipeline::evaluate(classifier, corpus, "corpus", batch));
      },
      py::arg("classifier"), py::arg("corpus"), py::arg("batch_size") = 1024);
  m.def(
      "evaluate_model",
      [](const model::DsnModel& d, const data::Corpus& corpus, std::size_t batch) {
        return eval_dict(pipeline::evaluate(d.m_c, d.m_y, corpus, "corpus", batch));
      },
      py::arg("model"), py::arg("corpus"), py::arg("batch_size") = 1024);
}
