#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "defectforge/error.hpp"
#include "defectforge/pipeline.hpp"
#include "defectforge/toybench.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace defectforge;
using nlohmann::json;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

ImageBuffer to_image(const U8Array& a) {
  if (a.ndim() == 2) {
    return ImageBuffer(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), 1,
                       std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() == 3 && a.shape(2) == 3) {
    return ImageBuffer(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), 3,
                       std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
  }
  throw Error(ErrorCode::InvalidArgument, "expected an (H, W) or (H, W, 3) uint8 array");
}

U8Array to_array(const ImageBuffer& img) {
  std::vector<py::ssize_t> shape{img.height(), img.width()};
  if (img.channels() == 3) shape.push_back(3);
  U8Array out(shape);
  std::copy(img.data().begin(), img.data().end(), out.mutable_data());
  return out;
}

DefectMask to_mask(const U8Array& a) {
  if (a.ndim() != 2) throw Error(ErrorCode::InvalidArgument, "mask must be a 2-D array");
  return DefectMask(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)),
                    std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

PipelineConfig config_from(const std::string& text) {
  return text.empty() ? PipelineConfig{} : PipelineConfig::from_json(json::parse(text));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "defectforge native core";

  static py::exception<Error> error_type(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const py::tuple args = py::make_tuple(std::string(to_string(e.code())), e.message(), e.subject());
      PyErr_SetObject(error_type.ptr(), args.ptr());
    } catch (const json::exception& e) {
      const py::tuple args = py::make_tuple("InvalidArgument", e.what(), "");
      PyErr_SetObject(error_type.ptr(), args.ptr());
    }
  });

  m.def("load_image", [](const std::string& path) { return to_array(load_image(path)); });
  m.def("save_image", [](const U8Array& img, const std::string& path) { save_image(to_image(img), path); });
  m.def("render_product", [](int kind, std::uint64_t seed, int size) {
    Rng r(seed);
    return to_array(render_product(product_from_index(kind), r, size));
  }, py::arg("kind"), py::arg("seed"), py::arg("size") = 64);

  m.def("perlin_fade", &perlin_fade);
  m.def("fractal_perlin", [](int width, int height, int cell_size, int octaves, double persistence, std::uint64_t seed) {
    PerlinParams p;
    p.cell_size = cell_size;
    p.octaves = octaves;
    p.persistence = persistence;
    const ScalarField f = fractal_perlin(width, height, p, Rng(seed));
    py::array_t<double> out({height, width});
    std::copy(f.values.begin(), f.values.end(), out.mutable_data());
    return out;
  });
  m.def("poisson_blend", [](const U8Array& target, const U8Array& source, const U8Array& mask, double tol) {
    return to_array(poisson_blend(to_image(target), to_image(source), to_mask(mask), tol).image);
  }, py::arg("target"), py::arg("source"), py::arg("mask"), py::arg("tol") = 1e-3);

  m.def("mock_transform", [](const U8Array& img, const std::string& mode, const std::string& request_id,
                             std::uint64_t seed) {
    MockConfig cfg;
    cfg.mode = mock_mode_from_string(mode);
    cfg.seed = seed;
    GenerationRequest req;
    req.request_id = request_id;
    req.image = to_image(img);
    return to_array(mock_transform(cfg, req));
  }, py::arg("image"), py::arg("mode"), py::arg("request_id"), py::arg("seed") = 0);

  m.def("filter_evaluate", [](const U8Array& normal, const U8Array& candidate, const std::string& config) {
    const MatchFilter f(config_from(config).filter);
    return json(f.evaluate(to_image(normal), to_image(candidate))).dump();
  }, py::arg("normal"), py::arg("candidate"), py::arg("config") = "");

  m.def("compute_auroc", [](const std::vector<double>& normal, const std::vector<double>& anomalous) {
    std::vector<ScoreRecord> recs;
    for (double s : normal) recs.push_back({"", Label::Normal, s, {}});
    for (double s : anomalous) recs.push_back({"", Label::Anomalous, s, {}});
    return compute_auroc(recs);
  });

  m.def("config_json", [](const std::string& config) { return config_from(config).to_json().dump(); },
        py::arg("config") = "");

  m.def("build_toy_benchmark", [](const std::string& out, const std::string& config) {
    py::gil_scoped_release release;
    build_toy_benchmark(out, config_from(config));
  }, py::arg("out"), py::arg("config") = "");

  m.def("generate_rule_dataset", [](const std::string& normals, const std::string& out, int n, const std::string& config) {
    py::gil_scoped_release release;
    return json(generate_rule_dataset(Manifest::load(normals), config_from(config), out, n)).dump();
  }, py::arg("normals"), py::arg("out"), py::arg("n") = -1, py::arg("config") = "");

  m.def("generate_gen_dataset", [](const std::string& normals, const std::string& out, int n_accept,
                                   const std::string& endpoint, const std::string& config) {
    py::gil_scoped_release release;
    const PipelineConfig cfg = config_from(config);
    std::unique_ptr<Generator> gen;
    if (endpoint.empty()) gen = std::make_unique<InProcessMock>(cfg.genclient.mock);
    else gen = std::make_unique<GenClient>(resolve_endpoint(endpoint), cfg.genclient.retry);
    return json(generate_gen_dataset(Manifest::load(normals), cfg, *gen, out, n_accept).manifest).dump();
  }, py::arg("normals"), py::arg("out"), py::arg("n_accept") = -1, py::arg("endpoint") = "", py::arg("config") = "");

  m.def("run_strategy", [](const std::string& strategy, const std::string& rule, const std::string& gen,
                           const std::string& eval, const std::string& out, const std::string& config) {
    py::gil_scoped_release release;
    const StrategyPlan plan = make_plan(strategy_from_string(strategy), config_from(config), rule, gen, eval);
    return run_strategy(plan, out.empty() ? std::nullopt : std::optional<fs::path>(out)).to_json().dump();
  }, py::arg("strategy"), py::arg("rule"), py::arg("gen"), py::arg("eval"), py::arg("out") = "",
     py::arg("config") = "");

  m.def("run_toy_experiment", [](const std::string& out, const std::string& config) {
    py::gil_scoped_release release;
    const ExperimentOutcome o = run_toy_experiment(config_from(config), out);
    json results = json::array();
    for (const auto& r : o.results) results.push_back(r.to_json());
    return json{{"acceptance_rate", o.gen.acceptance_rate()}, {"results", results}}.dump();
  }, py::arg("out"), py::arg("config") = "");
}
