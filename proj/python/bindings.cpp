// Python bindings for the encoder, defense, metric and dataset layers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "featinv/datasets.hpp"
#include "featinv/defense.hpp"
#include "featinv/error.hpp"
#include "featinv/feature_capture.hpp"
#include "featinv/metrics.hpp"
#include "featinv/safetensors.hpp"
#include "featinv/version.hpp"

namespace py = pybind11;
using namespace featinv;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

/// [C, H, W] arrays map to spatial tensors; 1-D and 2-D arrays to rows.
Tensor to_tensor(const FloatArray& a) {
  const auto* p = a.data();
  switch (a.ndim()) {
    case 1:
      return Tensor(Eigen::Map<const Matrix>(p, 1, a.shape(0)));
    case 2:
      return Tensor(Eigen::Map<const Matrix>(p, a.shape(0), a.shape(1)));
    case 3:
      return Tensor::spatial(Eigen::Map<const Matrix>(p, a.shape(0), a.shape(1) * a.shape(2)),
                             static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
    default:
      throw ShapeError("expected a 1-, 2- or 3-D array, got " + std::to_string(a.ndim()) + " dimensions");
  }
}

FloatArray to_array(const Tensor& t) {
  const Matrix& v = t.value();
  std::vector<py::ssize_t> shape;
  if (t.is_spatial()) {
    shape = {v.rows(), t.height(), t.width()};
  } else {
    shape = {v.rows(), v.cols()};
  }
  FloatArray out(shape);
  std::copy(v.data(), v.data() + v.size(), out.mutable_data());
  return out;
}

class PyEncoder {
 public:
  explicit PyEncoder(EncoderSpec spec) : handle_(std::make_shared<EncoderHandle>(std::move(spec))) {}

  std::vector<std::string> layers() const { return handle_->encoder().layer_names(); }
  std::vector<Index> layer_shape(const std::string& l) const { return handle_->encoder().layer_shape(l); }
  int resolution() const { return handle_->encoder().input_resolution(); }

  std::map<std::string, FloatArray> capture(const FloatArray& image, const std::vector<std::string>& layers) const {
    NoGradGuard ng;
    std::map<std::string, FloatArray> out;
    for (const auto& [l, t] : handle_->capture(to_tensor(image), layers)) out.emplace(l, to_array(t));
    return out;
  }

  FloatArray load_image(const std::filesystem::path& path) const {
    return to_array(to_input_tensor(read_image(path), handle_->spec().preprocess));
  }

  void load_weights(const std::filesystem::path& path) {
    // EncoderHandle keeps its encoder const; rebuild with the new source.
    EncoderSpec spec = handle_->spec();
    spec.weights_source = path.string();
    handle_ = std::make_shared<EncoderHandle>(std::move(spec));
  }

  std::shared_ptr<EncoderHandle> handle() const { return handle_; }

 private:
  std::shared_ptr<EncoderHandle> handle_;
};

EncoderSpec custom_spec(const std::string& id, ArchitectureConfig arch, const std::vector<std::string>& taps,
                        int resolution, std::uint64_t seed) {
  EncoderSpec s;
  s.encoder_id = id;
  s.architecture = std::move(arch);
  for (const auto& t : taps) s.tap_points.push_back({t, {}});
  s.seed = seed;
  s.preprocess.resize_shorter = resolution;
  s.preprocess.crop = resolution;
  return s;
}

py::dict report_dict(const MetricReport& r) { return py::module_::import("json").attr("loads")(r.to_json().dump()); }

}  // namespace

PYBIND11_MODULE(_featinv, m) {
  m.doc() = "Feature-inversion attack toolkit";
  m.attr("__version__") = version();

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::class_<PyEncoder>(m, "Encoder")
      .def(py::init([](const std::string& name, const std::string& weights, std::uint64_t seed) {
             EncoderSpec s = standard_spec(name);
             s.weights_source = weights;
             s.seed = seed;
             return PyEncoder(std::move(s));
           }),
           py::arg("name"), py::arg("weights") = "random-seeded", py::arg("seed") = 0)
      .def_static(
          "clip_resnet",
          [](std::array<int, 4> layers, int width, int output_dim, int heads, int resolution, std::uint64_t seed) {
            ResNetConfig c{layers, width, output_dim, heads, resolution};
            return PyEncoder(custom_spec("clip-resnet-custom", c, {"layer1", "layer2", "layer3", "layer4", "base"},
                                         resolution, seed));
          },
          py::arg("layers"), py::arg("width"), py::arg("output_dim"), py::arg("heads"), py::arg("resolution"),
          py::arg("seed") = 0)
      .def_property_readonly("layers", &PyEncoder::layers)
      .def_property_readonly("resolution", &PyEncoder::resolution)
      .def("layer_shape", &PyEncoder::layer_shape)
      .def("capture", &PyEncoder::capture, py::arg("image"), py::arg("layers"),
           "Features for a preprocessed [3, R, R] image.")
      .def("load_image", &PyEncoder::load_image, "Reads and preprocesses an image file.")
      .def("load_weights", &PyEncoder::load_weights, py::arg("path"));

  m.def("standard_encoders", &standard_spec_names);

  m.def(
      "counter_normal",
      [](std::uint64_t key, std::size_t n, float stddev) {
        FloatArray out(static_cast<py::ssize_t>(n));
        CounterNormal(key).fill(out.mutable_data(), n, stddev);
        return out;
      },
      py::arg("key"), py::arg("n"), py::arg("stddev") = 1.0f);
  m.def(
      "inject_noise",
      [](const FloatArray& f, double sigma, std::uint64_t key) {
        const NoisyFeature nf = inject_noise(to_tensor(f), sigma, CounterNormal(key));
        FloatArray eps({nf.eps.rows(), nf.eps.cols()});
        std::copy(nf.eps.data(), nf.eps.data() + nf.eps.size(), eps.mutable_data());
        return py::make_tuple(to_array(nf.noisy), eps);
      },
      py::arg("feature"), py::arg("sigma"), py::arg("key"), "Returns (noisy, eps); eps is [C, H*W] for maps.");
  m.def(
      "strip_noise",
      [](const FloatArray& noisy, const FloatArray& eps) {
        const Tensor e = to_tensor(eps);
        Tensor n = to_tensor(noisy);
        return to_array(strip_noise(n, e.value()));
      },
      py::arg("noisy"), py::arg("eps"));

  m.def(
      "bleu",
      [](const std::string& cand, const std::vector<std::string>& refs, int n) {
        std::vector<Words> r;
        for (const auto& s : refs) r.push_back(metric_tokens(s));
        return bleu_n(metric_tokens(cand), r, n);
      },
      py::arg("candidate"), py::arg("references"), py::arg("n") = 4);
  m.def(
      "rouge_l",
      [](const std::string& cand, const std::vector<std::string>& refs) {
        std::vector<Words> r;
        for (const auto& s : refs) r.push_back(metric_tokens(s));
        return rouge_l(metric_tokens(cand), r);
      },
      py::arg("candidate"), py::arg("references"));
  m.def("metric_tokens", &metric_tokens);
  m.def(
      "evaluate_captions",
      [](const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs, double threshold,
         bool cosine) {
        MetricConfig cfg;
        cfg.cosine_threshold = threshold;
        HashingEmbedder emb;
        return report_dict(evaluate_captions(cands, refs, cfg, cosine ? &emb : nullptr));
      },
      py::arg("candidates"), py::arg("references"), py::arg("threshold") = 0.7, py::arg("cosine") = true,
      "Corpus metrics as a dict; cosine uses the hashing embedder.");

  m.def(
      "make_toy_corpus",
      [](std::uint64_t seed, std::size_t size, const std::filesystem::path& out_dir) {
        const DatasetManifest man = make_toy_corpus(seed, size, out_dir);
        write_manifest(man, out_dir / "manifest.tsv");
        py::list items;
        for (const auto& r : man.records) {
          py::dict d;
          d["image_id"] = r.image_id;
          d["path"] = man.resolve(r);
          d["label"] = r.label ? py::cast(*r.label) : py::none();
          d["captions"] = r.captions;
          items.append(d);
        }
        return items;
      },
      py::arg("seed"), py::arg("size"), py::arg("out_dir"), "Writes the corpus and manifest.tsv; returns the records.");
}
