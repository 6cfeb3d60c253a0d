#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "perldiff/pipeline.hpp"

namespace py = pybind11;
using namespace perldiff;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Dims dims(a.shape(), a.shape() + a.ndim());
  Tensor t(dims);
  std::copy(a.data(), a.data() + t.size(), t.data());
  return t;
}

SceneAnnotation scene_of(const std::string& text) { return scene_from_json(nlohmann::json::parse(text)); }

const CameraModel& camera_of(const SceneAnnotation& scene, int index) {
  if (index < 0 || index >= static_cast<int>(scene.cameras.size())) throw py::index_error("camera index out of range");
  return scene.cameras[static_cast<std::size_t>(index)];
}

py::dict report_dict(const ControllabilityReport& r) {
  py::dict d;
  d["category_accuracy"] = r.category_accuracy;
  d["mean_mask_iou"] = r.mean_mask_iou;
  d["road_iou"] = r.road_iou;
  d["translation_response_rate"] = r.translation_response_rate;
  return d;
}

class Model {
 public:
  explicit Model(const std::string& path) : ckpt_(load_checkpoint(path)), model_(model_from_checkpoint(ckpt_)) {}

  std::vector<py::array_t<double>> generate(const std::string& scene_json, std::uint64_t seed, int steps,
                                            double scale, double eta) {
    SampleOptions o;
    o.steps = steps;
    o.guidance_scale = scale;
    o.eta = eta;
    std::vector<Tensor> images;
    {
      py::gil_scoped_release release;
      images = generate_scene_images(model_, scene_of(scene_json), checkpoint_schedule(ckpt_), o, seed);
    }
    std::vector<py::array_t<double>> out;
    for (const auto& im : images) out.push_back(to_numpy(im));
    return out;
  }

  void save(const std::string& path) const {
    save_checkpoint(path, make_checkpoint(model_, ckpt_.palette, checkpoint_schedule(ckpt_)));
  }

  int height() const { return model_.config().height; }
  int width() const { return model_.config().width; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : model_.params().entries()) n += e.value.size();
    return n;
  }

 private:
  Checkpoint ckpt_;
  DenoiserModel model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "perspective-layout diffusion";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);

  m.def("generate_scene_json", [](std::uint64_t seed, const std::string& scene_id, int width, int height) {
    SceneGenConfig cfg;
    cfg.width = width;
    cfg.height = height;
    return scene_to_json(generate_scene(seed, cfg, scene_id)).dump();
  }, py::arg("seed"), py::arg("scene_id"), py::arg("width") = 48, py::arg("height") = 32);

  m.def("box_mask", [](const std::string& scene_json, int camera, int box) {
    const SceneAnnotation s = scene_of(scene_json);
    if (box < 0 || box >= static_cast<int>(s.boxes.size())) throw py::index_error("box index out of range");
    return to_numpy(rasterize_box_mask(s.boxes[static_cast<std::size_t>(box)], camera_of(s, camera)));
  });
  m.def("road_mask", [](const std::string& scene_json, int camera) {
    const SceneAnnotation s = scene_of(scene_json);
    return to_numpy(rasterize_road_mask(s.road_polygons, camera_of(s, camera)));
  });
  m.def("render", [](const std::string& scene_json, int camera) {
    const SceneAnnotation s = scene_of(scene_json);
    return to_numpy(render_ground_truth(s, camera_of(s, camera), Palette::default_palette()));
  });
  m.def("score", [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& images,
                    const std::string& scene_json) {
    std::vector<Tensor> ims;
    for (const auto& a : images) ims.push_back(from_numpy(a));
    const SceneScore s = evaluate_controllability(ims, scene_of(scene_json), Palette::default_palette());
    return report_dict(aggregate(std::span<const SceneScore>(&s, 1)));
  });
  m.def("evaluate_oracle", [](const std::vector<std::string>& scenes_json) {
    std::vector<SceneAnnotation> scenes;
    for (const auto& s : scenes_json) scenes.push_back(scene_of(s));
    const Palette p = Palette::default_palette();
    return report_dict(evaluate_scenes(scenes, oracle_imager(p), p).report);
  });
  m.def("config_json", [](const std::string& text) { return run_config_to_json(parse_run_config(text)).dump(); },
        py::arg("text") = "{}");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("generate", &Model::generate, py::arg("scene_json"), py::arg("seed") = 0, py::arg("steps") = 50,
           py::arg("scale") = 5.0, py::arg("eta") = 0.0)
      .def("save", &Model::save)
      .def_property_readonly("height", &Model::height)
      .def_property_readonly("width", &Model::width)
      .def_property_readonly("parameter_count", &Model::parameter_count);
}
