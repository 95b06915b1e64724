#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "cgce/classifier.hpp"
#include "cgce/cli.hpp"
#include "cgce/errors.hpp"
#include "cgce/refinement.hpp"
#include "cgce/store.hpp"
#include "cgce/synthetic.hpp"
#include "cgce/templates.hpp"
#include "cgce/training.hpp"

namespace py = pybind11;
using namespace cgce;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
    if (a.ndim() == 1) {
        const auto n = static_cast<std::size_t>(a.shape(0));
        return Matrix(1, n, std::vector<double>(a.data(), a.data() + n));
    }
    if (a.ndim() != 2) throw ShapeError("expected a 1-d or 2-d array, got " + std::to_string(a.ndim()) + "-d");
    const auto r = static_cast<std::size_t>(a.shape(0));
    const auto c = static_cast<std::size_t>(a.shape(1));
    return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Matrix& m) {
    Array out({m.rows(), m.cols()});
    if (m.size()) std::memcpy(out.mutable_data(), m.values().data(), m.size() * sizeof(double));
    return out;
}

Array to_array(const std::vector<double>& v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    if (!v.empty()) std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(double));
    return out;
}

EmbeddingMatrix embedding(const Array& a) { return EmbeddingMatrix(to_matrix(a)); }

py::dict weights_dict(const ParamTensors& w) {
    py::dict out;
    const auto list = w.list();
    for (std::size_t i = 0; i < ParamTensors::kCount; ++i) {
        out[py::str(std::string(ParamTensors::kNames[i]))] = to_array(*list[i]);
    }
    return out;
}

void set_weights(ParamTensors& w, const py::dict& values) {
    const auto list = w.list();
    for (std::size_t i = 0; i < ParamTensors::kCount; ++i) {
        const std::string name(ParamTensors::kNames[i]);
        if (!values.contains(name)) continue;
        Matrix m = to_matrix(values[py::str(name)].cast<Array>());
        if (m.rows() != list[i]->rows() || m.cols() != list[i]->cols()) {
            throw ShapeError(name + ": expected " + list[i]->shape_string() + ", got " + m.shape_string());
        }
        *list[i] = std::move(m);
    }
}

py::dict trace_dict(const ForwardTrace& t) {
    py::list heads;
    for (const auto& a : t.attention) heads.append(to_array(a));
    py::dict out;
    out["attention"] = heads;
    out["attention_mean"] = to_array(t.attention_mean);
    out["importance"] = to_array(t.importance);
    out["importance_argmax"] = t.importance_argmax;
    out["alpha"] = to_array(t.alpha);
    out["aggregate"] = to_array(t.aggregate);
    out["logit"] = t.logit;
    out["probability"] = t.probability;
    return out;
}

std::vector<LabeledExample> examples_from(const py::iterable& items) {
    std::vector<LabeledExample> out;
    for (const auto& item : items) out.push_back(item.cast<LabeledExample>());
    return out;
}

std::vector<ConceptGuard> guards_from(const py::iterable& items) {
    std::vector<ConceptGuard> out;
    for (const auto& item : items) {
        const auto pair = item.cast<py::tuple>();
        if (pair.size() != 2) throw ConfigError("each guard is a (params, concept_embedding) pair");
        out.push_back({pair[0].cast<ClassifierParams>(), embedding(pair[1].cast<Array>())});
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Cross-attention concept classifiers and embedding refinement";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());
    py::register_exception<UnsupportedVersionError>(m, "UnsupportedVersionError", base.ptr());
    py::register_exception<RefinementStall>(m, "RefinementStall", base.ptr());

    py::class_<Architecture>(m, "Architecture")
        .def(py::init([](std::size_t d, std::size_t h, std::size_t heads) { return Architecture{d, h, heads}; }),
             py::arg("d"), py::arg("h"), py::arg("heads") = 4)
        .def_readwrite("d", &Architecture::d)
        .def_readwrite("h", &Architecture::h)
        .def_readwrite("heads", &Architecture::heads)
        .def("__eq__", [](const Architecture& a, const Architecture& b) { return a == b; })
        .def("__repr__", [](const Architecture& a) {
            return "Architecture(d=" + std::to_string(a.d) + ", h=" + std::to_string(a.h) +
                   ", heads=" + std::to_string(a.heads) + ")";
        });

    py::class_<ClassifierParams>(m, "ClassifierParams")
        .def_readonly("arch", &ClassifierParams::arch)
        .def_readwrite("concept_name", &ClassifierParams::concept_name)
        .def_readwrite("default_tau", &ClassifierParams::default_tau)
        .def_property(
            "weights", [](const ClassifierParams& p) { return weights_dict(p.weights); },
            [](ClassifierParams& p, const py::dict& w) { set_weights(p.weights, w); })
        .def("param_count", [](const ClassifierParams& p) { return p.weights.scalar_count(); })
        .def("__eq__", [](const ClassifierParams& a, const ClassifierParams& b) { return a == b; });

    py::class_<LabeledExample>(m, "LabeledExample")
        .def(py::init([](std::string id, const Array& emb, int label, std::string text,
                         std::optional<std::string> pair_id, std::string concept_name) {
                 return LabeledExample{std::move(id), std::move(text), embedding(emb), label, std::move(pair_id),
                                       std::move(concept_name)};
             }),
             py::arg("id"), py::arg("embedding"), py::arg("label"), py::arg("text") = "",
             py::arg("pair_id") = py::none(), py::arg("concept_name") = "")
        .def_readonly("id", &LabeledExample::id)
        .def_readonly("text", &LabeledExample::text)
        .def_readonly("label", &LabeledExample::label)
        .def_readonly("pair_id", &LabeledExample::pair_id)
        .def_readonly("concept_name", &LabeledExample::concept_name)
        .def_property_readonly("embedding", [](const LabeledExample& e) { return to_array(e.embedding.values()); });

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("beta1", &TrainConfig::beta1)
        .def_readwrite("beta2", &TrainConfig::beta2)
        .def_readwrite("epsilon", &TrainConfig::epsilon);

    py::class_<Metrics>(m, "Metrics")
        .def_readonly("accuracy", &Metrics::accuracy)
        .def_readonly("true_positive_rate", &Metrics::true_positive_rate)
        .def_readonly("false_positive_rate", &Metrics::false_positive_rate)
        .def_readonly("loss", &Metrics::loss)
        .def_readonly("tp", &Metrics::tp)
        .def_readonly("fp", &Metrics::fp)
        .def_readonly("tn", &Metrics::tn)
        .def_readonly("fn", &Metrics::fn);

    py::class_<RefinementConfig>(m, "RefinementConfig")
        .def(py::init([](double eta, double tau, std::size_t max_iters, bool weighting) {
                 return RefinementConfig{eta, tau, max_iters, weighting};
             }),
             py::arg("eta") = 1.0, py::arg("tau") = 0.5, py::arg("max_iters") = 50,
             py::arg("use_importance_weighting") = true)
        .def_readwrite("eta", &RefinementConfig::eta)
        .def_readwrite("tau", &RefinementConfig::tau)
        .def_readwrite("max_iters", &RefinementConfig::max_iters)
        .def_readwrite("use_importance_weighting", &RefinementConfig::use_importance_weighting);

    py::class_<RefinementResult>(m, "RefinementResult")
        .def_property_readonly("refined", [](const RefinementResult& r) { return to_array(r.refined.values()); })
        .def_readonly("iterations_run", &RefinementResult::iterations_run)
        .def_readonly("flagged", &RefinementResult::flagged)
        .def_readonly("converged", &RefinementResult::converged)
        .def_readonly("final_probabilities", &RefinementResult::final_probabilities)
        .def_property_readonly("trace", [](const RefinementResult& r) {
            py::list out;
            for (const auto& rec : r.trace) {
                py::list concepts;
                for (const auto& c : rec.concepts) {
                    py::dict cd;
                    cd["concept_id"] = c.concept_id;
                    cd["probability"] = c.probability;
                    cd["grad_norm"] = c.grad_norm;
                    cd["detected"] = c.detected;
                    concepts.append(cd);
                }
                py::dict d;
                d["k"] = rec.k;
                d["embedding"] = to_array(rec.embedding);
                d["concepts"] = concepts;
                d["detected_count"] = rec.detected_count;
                d["embedding_norm"] = rec.embedding_norm;
                d["delta_norm"] = rec.delta_norm;
                out.append(d);
            }
            return out;
        });

    m.def("count_params", &count_params, py::arg("d"), py::arg("h"));
    m.def("init_params", &init_params, py::arg("arch"), py::arg("seed"), py::arg("concept_name") = "");
    m.def(
        "forward",
        [](const ClassifierParams& p, const Array& prompt, const Array& concept_emb) {
            return trace_dict(forward(p, embedding(prompt), embedding(concept_emb)));
        },
        py::arg("params"), py::arg("prompt"), py::arg("concept_embedding"));
    m.def(
        "input_gradient",
        [](const ClassifierParams& p, const Array& prompt, const Array& concept_emb) {
            return to_array(input_gradient(p, embedding(prompt), embedding(concept_emb)));
        },
        py::arg("params"), py::arg("prompt"), py::arg("concept_embedding"));
    m.def(
        "param_gradients",
        [](const ClassifierParams& p, const Array& prompt, const Array& concept_emb, int label) {
            const ParamGradients g = param_gradients(p, embedding(prompt), embedding(concept_emb), label);
            return py::make_tuple(weights_dict(g.tensors), g.loss);
        },
        py::arg("params"), py::arg("prompt"), py::arg("concept_embedding"), py::arg("label"));
    m.def(
        "detect",
        [](const ClassifierParams& p, const Array& prompt, const Array& concept_emb, double tau) {
            const Detection d = detect(p, embedding(prompt), embedding(concept_emb), tau);
            return py::make_tuple(d.flagged, d.probability, to_array(d.importance));
        },
        py::arg("params"), py::arg("prompt"), py::arg("concept_embedding"), py::arg("tau") = 0.5);

    m.def(
        "train",
        [](const py::iterable& data, const Array& concept_emb, const Architecture& arch, const TrainConfig& config,
           std::string concept_name) {
            const auto examples = examples_from(data);
            py::gil_scoped_release release;
            TrainResult r = train(examples, embedding(concept_emb), arch, config, std::move(concept_name));
            py::gil_scoped_acquire acquire;
            return py::make_tuple(std::move(r.params), r.epoch_loss);
        },
        py::arg("dataset"), py::arg("concept_embedding"), py::arg("arch"), py::arg("config") = TrainConfig{},
        py::arg("concept_name") = "");
    m.def(
        "evaluate",
        [](const ClassifierParams& p, const py::iterable& data, const Array& concept_emb, double tau) {
            return evaluate(p, examples_from(data), embedding(concept_emb), tau);
        },
        py::arg("params"), py::arg("dataset"), py::arg("concept_embedding"), py::arg("tau") = 0.5);

    m.def(
        "refine_single",
        [](const ClassifierParams& p, const Array& prompt, const Array& concept_emb, const RefinementConfig& c) {
            return refine_single(p, embedding(prompt), embedding(concept_emb), c);
        },
        py::arg("params"), py::arg("prompt"), py::arg("concept_embedding"), py::arg("config") = RefinementConfig{});
    m.def(
        "refine_multi",
        [](const py::iterable& guards, const Array& prompt, const RefinementConfig& c) {
            return refine_multi(guards_from(guards), embedding(prompt), c);
        },
        py::arg("guards"), py::arg("prompt"), py::arg("config") = RefinementConfig{},
        "guards: iterable of (params, concept_embedding) pairs");
    m.def(
        "safeguard",
        [](const py::iterable& guards, const Array& prompt, const RefinementConfig& c) {
            return safeguard(guards_from(guards), embedding(prompt), c);
        },
        py::arg("guards"), py::arg("prompt"), py::arg("config") = RefinementConfig{});
    m.def(
        "default_step_size",
        [](const std::string& concept_name, const std::string& model) { return default_step_size(concept_name, model); },
        py::arg("concept_name"), py::arg("model") = "SD-v1.4");

    m.def(
        "write_tensor", [](const Array& a, const std::filesystem::path& p) { write_tensor(to_matrix(a), p); },
        py::arg("array"), py::arg("path"));
    m.def(
        "read_tensor",
        [](const std::filesystem::path& p) {
            const Tensor t = read_tensor(p);
            std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
            py::array_t<double> out(shape);
            if (!t.values.empty()) std::memcpy(out.mutable_data(), t.values.data(), t.values.size() * sizeof(double));
            return out;
        },
        py::arg("path"));
    m.def("write_checkpoint", &write_checkpoint, py::arg("params"), py::arg("path"));
    m.def("read_checkpoint", &read_checkpoint, py::arg("path"));
    m.def(
        "read_manifest",
        [](const std::filesystem::path& p, std::optional<std::filesystem::path> fallback) {
            return read_manifest(p, fallback);
        },
        py::arg("path"), py::arg("fallback_dir") = py::none());

    m.def(
        "synthetic_pairs",
        [](std::size_t pairs, std::uint64_t seed, std::size_t d, std::string name) {
            synthetic::Options options;
            options.d = d;
            const synthetic::Concept c = synthetic::make_concept(options, seed, name);
            return py::make_tuple(to_array(c.embedding.values()), synthetic::make_pairs(c, pairs, options, seed));
        },
        py::arg("pairs"), py::arg("seed"), py::arg("d") = 32, py::arg("name") = "synthetic",
        "Returns (concept_embedding, examples) for a seeded separable benchmark.");

    m.def(
        "prompt_template",
        [](const std::string& name) -> std::optional<std::string> {
            const auto t = prompt_template(name);
            if (!t) return std::nullopt;
            return std::string(*t);
        },
        py::arg("concept_name"));

    m.def(
        "run_cli",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "cgce");
            std::ostringstream out, err;
            const int code = cli::run(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command-line tool in-process; returns (exit_code, stdout, stderr).");
}
