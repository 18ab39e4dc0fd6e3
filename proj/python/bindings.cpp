#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "capsamc/capsnet.hpp"
#include "capsamc/dataio.hpp"
#include "capsamc/error.hpp"
#include "capsamc/eval.hpp"
#include "capsamc/trainer.hpp"

namespace py = pybind11;
using namespace capsamc;

namespace {

using CArray = py::array_t<std::complex<float>, py::array::c_style | py::array::forcecast>;

std::vector<Scheme> parse_schemes(const std::vector<std::string>& names) {
  std::vector<Scheme> out;
  for (const auto& n : names) out.push_back(parse_scheme(n));
  return out;
}

std::vector<std::string> scheme_names(const std::vector<Scheme>& schemes) {
  std::vector<std::string> out;
  for (auto s : schemes) out.emplace_back(scheme_name(s));
  return out;
}

ComplexSignal signal_from(CArray samples) {
  if (samples.ndim() != 1) throw ShapeError("samples must be a 1-D complex array");
  ComplexSignal s;
  s.samples.assign(samples.data(), samples.data() + samples.size());
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Capsule-network modulation classifier";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ValueError>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());

  m.def("scheme_names", [] { return scheme_names({all_schemes().begin(), all_schemes().end()}); });
  m.def("constellation", [](const std::string& name) { return constellation(parse_scheme(name)); });

  py::class_<SignalMeta>(m, "SignalMeta")
      .def_property_readonly("scheme", [](const SignalMeta& s) { return std::string(scheme_name(s.scheme)); })
      .def_property_readonly("label", [](const SignalMeta& s) { return label_of(s.scheme); })
      .def_readonly("sps", &SignalMeta::sps)
      .def_readonly("rolloff", &SignalMeta::rolloff)
      .def_readonly("cfo", &SignalMeta::cfo)
      .def_readonly("snr_db", &SignalMeta::inband_snr_db)
      .def_readonly("profile", &SignalMeta::profile_tag);

  py::class_<ComplexSignal>(m, "Frame")
      .def_property_readonly("samples",
                             [](const ComplexSignal& s) { return CArray(s.samples.size(), s.samples.data()); })
      .def_readonly("meta", &ComplexSignal::meta)
      .def("__len__", [](const ComplexSignal& s) { return s.samples.size(); });

  py::class_<DatasetProfile>(m, "Profile")
      .def(py::init([](const std::string& name) { return builtin_profile(name); }), py::arg("name") = "toy")
      .def_readwrite("name", &DatasetProfile::name)
      .def_readwrite("count", &DatasetProfile::count)
      .def_readwrite("length", &DatasetProfile::length)
      .def_property(
          "sps", [](const DatasetProfile& p) { return std::pair(p.sps.lo, p.sps.hi); },
          [](DatasetProfile& p, std::pair<std::int64_t, std::int64_t> r) { p.sps = {r.first, r.second}; })
      .def_property(
          "snr_db", [](const DatasetProfile& p) { return std::pair(p.snr_db.lo, p.snr_db.hi); },
          [](DatasetProfile& p, std::pair<double, double> r) { p.snr_db = {r.first, r.second}; })
      .def_property(
          "cfo", [](const DatasetProfile& p) { return std::pair(p.cfo.lo, p.cfo.hi); },
          [](DatasetProfile& p, std::pair<double, double> r) { p.cfo = {r.first, r.second}; })
      .def_property(
          "rolloff", [](const DatasetProfile& p) { return std::pair(p.rolloff.lo, p.rolloff.hi); },
          [](DatasetProfile& p, std::pair<double, double> r) { p.rolloff = {r.first, r.second}; })
      .def_property(
          "schemes", [](const DatasetProfile& p) { return scheme_names(p.schemes); },
          [](DatasetProfile& p, const std::vector<std::string>& n) { p.schemes = parse_schemes(n); });

  m.def("generate", &generate, py::arg("profile"), py::arg("count"), py::arg("seed"),
        py::call_guard<py::gil_scoped_release>());
  m.def(
      "add_noise",
      [](ComplexSignal frame, double target_db, std::uint64_t seed) {
        Rng rng(seed);
        add_noise_to_snr(frame, target_db, rng);
        normalize_unit_power(frame.samples);
        return frame;
      },
      py::arg("frame"), py::arg("target_snr_db"), py::arg("seed"));

  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_static("toy", &toy_network_config, py::arg("length") = 4096)
      .def_readwrite("input_length", &NetworkConfig::input_length)
      .def_readwrite("capsule_width", &NetworkConfig::capsule_width)
      .def_readwrite("seed", &NetworkConfig::seed)
      .def_property(
          "classes", [](const NetworkConfig& c) { return scheme_names(c.classes); },
          [](NetworkConfig& c, const std::vector<std::string>& n) { c.classes = parse_schemes(n); })
      .def("shape_trace", [](const NetworkConfig& c) { return shape_trace(c).describe(c); })
      .def("serialize", &NetworkConfig::serialize)
      .def_static("parse", &NetworkConfig::parse);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("decay_factor", &TrainConfig::decay_factor)
      .def_readwrite("decay_period", &TrainConfig::decay_period)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("threads", &TrainConfig::threads)
      .def_readwrite("normalize_input", &TrainConfig::normalize_input);

  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("initial_batch_loss", &TrainReport::initial_batch_loss)
      .def_readonly("best_epoch", &TrainReport::best_epoch)
      .def_readonly("best_validation_accuracy", &TrainReport::best_validation_accuracy)
      .def_readonly("stop_reason", &TrainReport::stop_reason)
      .def_property_readonly("validation_accuracy",
                             [](const TrainReport& r) {
                               std::vector<double> v;
                               for (const auto& e : r.epochs) v.push_back(e.validation_accuracy);
                               return v;
                             })
      .def_property_readonly("train_loss",
                             [](const TrainReport& r) {
                               std::vector<double> v;
                               for (const auto& e : r.epochs) v.push_back(e.train_loss);
                               return v;
                             })
      .def("__str__", &TrainReport::to_text);

  py::class_<Model<float>>(m, "Model")
      .def(py::init([](const NetworkConfig& c) { return build<float>(c); }), py::arg("config"))
      .def_readonly("config", &Model<float>::config)
      .def_static("load", [](const std::filesystem::path& p) { return load_model<float>(p); })
      .def("save", [](const Model<float>& model, const std::filesystem::path& p) { save_model(model, p); })
      .def_property_readonly("parameter_count",
                             [](const Model<float>& model) {
                               std::size_t n = 0;
                               for (const auto& [k, v] : model.params) n += v.size();
                               return n;
                             })
      .def(
          "predict",
          [](const Model<float>& model, CArray samples, bool normalize) {
            const auto p = predict(model, signal_from(samples), normalize);
            return py::make_tuple(std::string(scheme_name(p.scheme)), p.probabilities);
          },
          py::arg("samples"), py::arg("normalize") = true)
      .def(
          "infer",
          [](const Model<float>& model, py::array_t<float, py::array::c_style | py::array::forcecast> batch) {
            if (batch.ndim() != 3) throw ShapeError("batch must be B x 2 x L");
            Tensor<float> x(Shape{static_cast<std::size_t>(batch.shape(0)), static_cast<std::size_t>(batch.shape(1)),
                                  static_cast<std::size_t>(batch.shape(2))});
            std::copy(batch.data(), batch.data() + batch.size(), x.ptr());
            Tensor<float> probs;
            {
              py::gil_scoped_release release;
              probs = infer(model, x);
            }
            py::array_t<float> out({probs.dim(0), probs.dim(1)});
            std::copy(probs.ptr(), probs.ptr() + probs.size(), out.mutable_data());
            return out;
          },
          py::arg("batch"));

  m.def(
      "train",
      [](const Model<float>& model, const std::vector<ComplexSignal>& frames, const std::vector<std::size_t>& train_idx,
         const std::vector<std::size_t>& val_idx, const TrainConfig& config) {
        py::gil_scoped_release release;
        auto out = train(model, frames, train_idx, val_idx, config);
        return std::pair(std::move(out.model), std::move(out.report));
      },
      py::arg("model"), py::arg("frames"), py::arg("train_indices"), py::arg("validation_indices"),
      py::arg("config"));

  m.def(
      "evaluate",
      [](const Model<float>& model, const std::vector<ComplexSignal>& frames, const std::vector<std::size_t>& idx) {
        Classification c;
        {
          py::gil_scoped_release release;
          c = classify(model, frames, idx);
        }
        const auto cm = ConfusionMatrix::from(c);
        py::array_t<std::size_t> counts({kNumSchemes, kNumSchemes});
        for (std::size_t r = 0; r < kNumSchemes; ++r)
          for (std::size_t k = 0; k < kNumSchemes; ++k) counts.mutable_at(r, k) = cm.counts[r][k];
        py::dict d;
        d["accuracy"] = cm.accuracy();
        d["loss"] = c.mean_loss;
        d["confusion"] = counts;
        return d;
      },
      py::arg("model"), py::arg("frames"), py::arg("indices"));

  m.def(
      "write_dataset",
      [](const std::vector<ComplexSignal>& frames, const std::filesystem::path& dir, const std::string& description,
         std::uint64_t seed) { return write_dataset(frames, dir, description, seed).frame_count(); },
      py::arg("frames"), py::arg("dir"), py::arg("description") = "", py::arg("seed") = 0);
  m.def(
      "read_dataset", [](const std::filesystem::path& dir) { return read_dataset(dir); }, py::arg("dir"));
  m.def(
      "split",
      [](const std::vector<ComplexSignal>& frames, double train, double validation, double test, std::uint64_t seed) {
        DatasetManifest manifest;
        for (std::size_t i = 0; i < frames.size(); ++i) {
          FrameRecord r;
          r.index = i;
          r.meta = frames[i].meta;
          r.label = label_of(frames[i].meta.scheme);
          manifest.records.push_back(r);
        }
        const auto parts = split(manifest, SplitSpec{train, validation, test, seed});
        return py::make_tuple(parts.train, parts.validation, parts.test);
      },
      py::arg("frames"), py::arg("train") = 0.70, py::arg("validation") = 0.05, py::arg("test") = 0.25,
      py::arg("seed") = 0);

  m.def(
      "softmax",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> logits) {
        Shape shape(logits.shape(), logits.shape() + logits.ndim());
        Tensor<double> t(shape);
        std::copy(logits.data(), logits.data() + logits.size(), t.ptr());
        const auto p = softmax(t);
        py::array_t<double> out(std::vector<py::ssize_t>(logits.shape(), logits.shape() + logits.ndim()));
        std::copy(p.ptr(), p.ptr() + p.size(), out.mutable_data());
        return out;
      },
      py::arg("logits"));
}
