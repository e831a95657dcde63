#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "lwnet/adapter.hpp"
#include "lwnet/cli.hpp"
#include "lwnet/parallel.hpp"

namespace py = pybind11;
using namespace lwnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// (H, W, C) or (H, W) in [0,1] -> planar Image.
Image to_image(const FloatArray& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument("expected an (H, W) or (H, W, C) array");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  Image img(c, h, w);
  const float* p = a.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) img.at(k, y, x) = p[(static_cast<std::size_t>(y) * w + x) * c + k];
  return img;
}

py::array_t<float> from_image(const Image& img) {
  std::vector<py::ssize_t> shape{img.height, img.width};
  if (img.channels > 1) shape.push_back(img.channels);
  py::array_t<float> a(shape);
  float* p = a.mutable_data();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int k = 0; k < img.channels; ++k)
        p[(static_cast<std::size_t>(y) * img.width + x) * img.channels + k] = img.at(k, y, x);
  return a;
}

Mask to_mask(const ByteArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected an (H, W) mask");
  Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + m.size(), m.px.begin());
  return m;
}

py::array_t<std::uint8_t> from_mask(const Mask& m) {
  py::array_t<std::uint8_t> a({m.height, m.width});
  std::copy(m.px.begin(), m.px.end(), a.mutable_data());
  return a;
}

ModelConfig model_config(int depth, int base_width, bool wnet, int classes, const std::string& upsampling) {
  ModelConfig c;
  c.unet.depth = depth;
  c.unet.base_width = base_width;
  c.unet.num_classes = classes;
  if (upsampling == "bilinear") c.unet.upsampling = Upsampling::bilinear;
  else if (upsampling != "transposed") throw std::invalid_argument("upsampling must be transposed or bilinear");
  c.wnet = wnet;
  c.unet.validate();
  return c;
}

ScoreAccumulator accumulate(const FloatArray& probs, const ByteArray& labels, std::optional<ByteArray> fov) {
  if (probs.size() != labels.size()) throw std::invalid_argument("probs and labels differ in size");
  std::vector<std::uint8_t> ones;
  std::span<const std::uint8_t> f;
  if (fov) {
    if (fov->size() != probs.size()) throw std::invalid_argument("fov differs in size");
    f = {fov->data(), static_cast<std::size_t>(fov->size())};
  } else {
    ones.assign(probs.size(), 1);
    f = ones;
  }
  ScoreAccumulator acc;
  acc.accumulate({probs.data(), static_cast<std::size_t>(probs.size())},
                 {labels.data(), static_cast<std::size_t>(labels.size())}, f);
  return acc;
}

class PyModel {
 public:
  explicit PyModel(Checkpoint c) : ckpt_(std::move(c)), model_(load_model(ckpt_)) {}

  py::array_t<float> predict(const FloatArray& image, bool tta) {
    Image p;
    {
      const Image img = to_image(image);
      py::gil_scoped_release release;
      p = vessel_probability(predict_native(model_, img, ckpt_.train_height, ckpt_.train_width, tta));
    }
    return from_image(p);
  }

  const Checkpoint& checkpoint() const { return ckpt_; }
  std::size_t count_params() const { return model_.count_params(); }

 private:
  Checkpoint ckpt_;
  Model model_;
};

}  // namespace

PYBIND11_MODULE(_lwnet, m) {
  m.doc() = "Lightweight U-Net / W-Net retinal vessel segmentation";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);

  m.def(
      "count_params",
      [](int depth, int base_width, bool wnet, int classes, const std::string& upsampling) {
        return Model::build(model_config(depth, base_width, wnet, classes, upsampling), 0).count_params();
      },
      py::arg("depth") = 3, py::arg("base_width") = 8, py::arg("wnet") = false, py::arg("classes") = 1,
      py::arg("upsampling") = "transposed");
  m.def(
      "parameter_breakdown",
      [](int depth, int base_width, bool wnet, int classes, const std::string& upsampling) {
        std::vector<std::pair<std::string, std::size_t>> out;
        for (const auto& l :
             Model::build(model_config(depth, base_width, wnet, classes, upsampling), 0).parameter_breakdown())
          out.emplace_back(l.layer, l.count);
        return out;
      },
      py::arg("depth") = 3, py::arg("base_width") = 8, py::arg("wnet") = false, py::arg("classes") = 1,
      py::arg("upsampling") = "transposed");

  m.def(
      "roc_auc",
      [](const FloatArray& probs, const ByteArray& labels, std::optional<ByteArray> fov) {
        return roc_auc(accumulate(probs, labels, fov));
      },
      py::arg("probs"), py::arg("labels"), py::arg("fov") = py::none(),
      "Pooled ROC AUC over FOV pixels, on the 65536-bin grid.");
  m.def(
      "optimal_threshold",
      [](const FloatArray& probs, const ByteArray& labels, std::optional<ByteArray> fov) {
        return optimal_threshold(accumulate(probs, labels, fov));
      },
      py::arg("probs"), py::arg("labels"), py::arg("fov") = py::none());
  m.def(
      "dice_mcc",
      [](const FloatArray& probs, const ByteArray& labels, double t, std::optional<ByteArray> fov) {
        const DiceMcc d = dice_mcc(confusion_at(accumulate(probs, labels, fov), t));
        return std::make_pair(d.dice, d.mcc);
      },
      py::arg("probs"), py::arg("labels"), py::arg("threshold"), py::arg("fov") = py::none());

  m.def(
      "synth_sample",
      [](int index, int height, int width, double contrast, double illumination, double noise,
         std::uint64_t seed) {
        SynthParams p;
        p.height = height;
        p.width = width;
        p.contrast = contrast;
        p.illumination = illumination;
        p.noise = noise;
        p.seed = seed;
        p.validate();
        const Sample s = synth_sample(p, index);
        return py::make_tuple(from_image(s.image), from_mask(s.label), from_mask(s.fov));
      },
      py::arg("index") = 0, py::arg("height") = 256, py::arg("width") = 256, py::arg("contrast") = 1.0,
      py::arg("illumination") = 0.0, py::arg("noise") = 0.02, py::arg("seed") = 1,
      "Returns (image (H, W, 3), label (H, W), fov (H, W)).");

  py::class_<PyModel>(m, "Model")
      .def_static(
          "load", [](const std::filesystem::path& p) { return PyModel(load_checkpoint(p)); }, py::arg("path"))
      .def("predict", &PyModel::predict, py::arg("image"), py::arg("tta") = true,
           "Vessel probability map at the image's native resolution.")
      .def("count_params", &PyModel::count_params)
      .def_property_readonly("threshold", [](const PyModel& s) { return s.checkpoint().threshold; })
      .def_property_readonly("best_val_auc", [](const PyModel& s) { return s.checkpoint().best_val_auc; })
      .def_property_readonly("train_resolution",
                             [](const PyModel& s) {
                               return std::make_pair(s.checkpoint().train_height, s.checkpoint().train_width);
                             })
      .def_property_readonly("wnet", [](const PyModel& s) { return s.checkpoint().arch.wnet; })
      .def_property_readonly("checkpoint_id", [](const PyModel& s) { return checkpoint_id(s.checkpoint()); })
      .def_property_readonly("provenance", [](const PyModel& s) {
        const Provenance& p = s.checkpoint().provenance;
        py::dict d;
        d["kind"] = p.kind;
        d["dataset_id"] = p.dataset_id;
        d["seed"] = p.seed;
        d["iterations"] = p.iterations;
        d["cycles"] = p.cycles;
        d["best_cycle"] = p.best_cycle;
        d["threshold_source"] = p.threshold_source;
        d["parent_id"] = p.parent_id;
        d["target_dataset_id"] = p.target_dataset_id;
        return d;
      });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs an lwnet subcommand; returns (exit_code, stdout, stderr).");
}
