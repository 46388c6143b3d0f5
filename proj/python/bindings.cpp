// Python surface over the core pipeline: forward tensor ops, MNN matching,
// exact retrieval, model extraction and the gradient suite.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cqvpr/dataset.hpp"
#include "cqvpr/gradsuite.hpp"
#include "cqvpr/index.hpp"
#include "cqvpr/matching.hpp"
#include "cqvpr/model.hpp"
#include "cqvpr/ops.hpp"

namespace py = pybind11;
using cqvpr::Shape;
using cqvpr::Tensor;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i)
    shape[i] = static_cast<std::size_t>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.value().begin(), t.value().end(), out.mutable_data());
  return out;
}

py::array_t<float> array_from_grid(const cqvpr::LocalGrid& g) {
  py::array_t<float> out({static_cast<py::ssize_t>(g.grid_size),
                          static_cast<py::ssize_t>(g.grid_size),
                          static_cast<py::ssize_t>(g.dim)});
  std::copy(g.data.begin(), g.data.end(), out.mutable_data());
  return out;
}

cqvpr::LocalGrid grid_from_array(
    const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(0) != a.shape(1)) {
    throw py::value_error("expected a (U, U, dim) float array");
  }
  cqvpr::LocalGrid g;
  g.grid_size = static_cast<std::size_t>(a.shape(0));
  g.dim = static_cast<std::size_t>(a.shape(2));
  g.data.assign(a.data(), a.data() + a.size());
  return g;
}

cqvpr::Image image_from_array(
    const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) {
    throw py::value_error("expected an (H, W, 3) float image in [0, 1]");
  }
  cqvpr::Image img = cqvpr::make_image(static_cast<std::size_t>(a.shape(0)),
                                       static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "CQVPR core: contextual-query visual place recognition";
  m.attr("__version__") = "0.1.0";

  // ---- forward tensor ops on numpy arrays -------------------------------
  m.def("softmax", [](const py::array_t<double, py::array::c_style |
                                                    py::array::forcecast>& x,
                      std::size_t axis) {
    return array_from_tensor(cqvpr::ops::softmax(tensor_from_array(x), axis));
  }, py::arg("x"), py::arg("axis") = 0);

  m.def("l2_normalize", [](const py::array_t<double, py::array::c_style |
                                                         py::array::forcecast>& x,
                           std::size_t axis) {
    return array_from_tensor(
        cqvpr::ops::l2_normalize(tensor_from_array(x), axis));
  }, py::arg("x"), py::arg("axis") = 0);

  m.def("layer_norm", [](const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& x,
                         const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& gain,
                         const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& bias) {
    return array_from_tensor(cqvpr::ops::layer_norm(tensor_from_array(x),
                                                    tensor_from_array(gain),
                                                    tensor_from_array(bias)));
  });

  m.def("matmul", [](const py::array_t<double, py::array::c_style |
                                                   py::array::forcecast>& a,
                     const py::array_t<double, py::array::c_style |
                                                   py::array::forcecast>& b) {
    return array_from_tensor(
        cqvpr::ops::matmul(tensor_from_array(a), tensor_from_array(b)));
  });

  m.def("gem_pool", [](const py::array_t<double, py::array::c_style |
                                                     py::array::forcecast>& x,
                       double p) {
    return array_from_tensor(
        cqvpr::ops::gem_pool(tensor_from_array(x), Tensor::scalar(p)));
  }, py::arg("x"), py::arg("p") = 3.0);

  m.def("transposed_conv2d_output_size",
        &cqvpr::ops::transposed_conv2d_output_size, py::arg("input_size"),
        py::arg("kernel_size") = 3, py::arg("stride") = 2,
        py::arg("padding") = 1);

  // ---- matching ---------------------------------------------------------
  py::class_<cqvpr::MatchPair>(m, "MatchPair")
      .def_readonly("index_a", &cqvpr::MatchPair::index_a)
      .def_readonly("index_b", &cqvpr::MatchPair::index_b)
      .def_readonly("similarity", &cqvpr::MatchPair::similarity)
      .def("__repr__", [](const cqvpr::MatchPair& p) {
        return "MatchPair(" + std::to_string(p.index_a) + ", " +
               std::to_string(p.index_b) + ")";
      });

  py::class_<cqvpr::MatchSet>(m, "MatchSet")
      .def_readonly("pairs", &cqvpr::MatchSet::pairs)
      .def_property_readonly("count", &cqvpr::MatchSet::count)
      .def("__len__", &cqvpr::MatchSet::count);

  m.def("mnn_match",
        [](const py::array_t<float, py::array::c_style |
                                        py::array::forcecast>& s,
           std::optional<float> min_sim) {
          if (s.ndim() != 2) throw py::value_error("expected a 2D matrix");
          std::vector<float> flat(s.data(), s.data() + s.size());
          return cqvpr::mnn_match(flat, static_cast<std::size_t>(s.shape(0)),
                                  static_cast<std::size_t>(s.shape(1)), min_sim);
        },
        py::arg("similarities"), py::arg("min_sim") = std::nullopt);

  m.def("match_grids",
        [](const py::array_t<float, py::array::c_style |
                                        py::array::forcecast>& a,
           const py::array_t<float, py::array::c_style |
                                        py::array::forcecast>& b,
           std::optional<float> min_sim) {
          return cqvpr::match_grids(grid_from_array(a), grid_from_array(b),
                                    min_sim);
        },
        py::arg("a"), py::arg("b"), py::arg("min_sim") = std::nullopt);

  // ---- retrieval --------------------------------------------------------
  py::class_<cqvpr::RankedEntry>(m, "RankedEntry")
      .def_readonly("image_id", &cqvpr::RankedEntry::image_id)
      .def_readonly("score", &cqvpr::RankedEntry::score);

  py::class_<cqvpr::RankedList>(m, "RankedList")
      .def_readonly("query_id", &cqvpr::RankedList::query_id)
      .def_readonly("stage", &cqvpr::RankedList::stage)
      .def_readonly("entries", &cqvpr::RankedList::entries);

  py::class_<cqvpr::DescriptorIndex>(m, "DescriptorIndex")
      .def(py::init([](const py::array_t<float, py::array::c_style |
                                                    py::array::forcecast>& rows,
                       const std::vector<std::string>& ids) {
        if (rows.ndim() != 2 ||
            static_cast<std::size_t>(rows.shape(0)) != ids.size()) {
          throw py::value_error("expected (count, dim) rows matching ids");
        }
        cqvpr::GlobalStore store;
        store.dim = static_cast<std::size_t>(rows.shape(1));
        store.ids = ids;
        store.data.assign(rows.data(), rows.data() + rows.size());
        return cqvpr::DescriptorIndex::build(store);
      }), py::arg("descriptors"), py::arg("ids"))
      .def_static("load", &cqvpr::DescriptorIndex::build_from_file)
      .def_property_readonly("count", &cqvpr::DescriptorIndex::count)
      .def_property_readonly("dim", &cqvpr::DescriptorIndex::dim)
      .def("search",
           [](const cqvpr::DescriptorIndex& idx,
              const py::array_t<float, py::array::c_style |
                                           py::array::forcecast>& q,
              std::size_t k, const std::string& query_id) {
             std::vector<float> qv(q.data(), q.data() + q.size());
             return idx.search(qv, k, query_id);
           },
           py::arg("query"), py::arg("k") = 100, py::arg("query_id") = "");

  // ---- model ------------------------------------------------------------
  py::class_<cqvpr::Model>(m, "Model")
      .def(py::init([](const std::string& preset, std::uint64_t seed) {
        cqvpr::PipelineConfig cfg = cqvpr::PipelineConfig::from_preset(preset);
        cfg.seed = seed;
        return cqvpr::Model(cfg);
      }), py::arg("preset") = "desk", py::arg("seed") = 42)
      .def_static("load", [](const std::string& path) {
        return cqvpr::Model::load_checkpoint(path);
      })
      .def("save", [](const cqvpr::Model& model, const std::string& path) {
        model.save_checkpoint(path);
      })
      .def_property_readonly("config_json", [](const cqvpr::Model& model) {
        return cqvpr::config_to_json(model.config());
      })
      .def("extract",
           [](const cqvpr::Model& model,
              const py::array_t<float, py::array::c_style |
                                           py::array::forcecast>& image,
              bool with_local) {
             const cqvpr::Extraction e =
                 model.extract(image_from_array(image), with_local);
             py::dict out;
             py::array_t<double> g(
                 {static_cast<py::ssize_t>(e.global_descriptor.size())});
             std::copy(e.global_descriptor.begin(), e.global_descriptor.end(),
                       g.mutable_data());
             out["global"] = g;
             if (with_local) out["local"] = array_from_grid(e.local_grid);
             return out;
           },
           py::arg("image"), py::arg("with_local") = false)
      .def("heatmap",
           [](const cqvpr::Model& model,
              const py::array_t<float, py::array::c_style |
                                           py::array::forcecast>& image) {
             cqvpr::NoGradGuard guard;
             const cqvpr::ImageFeatures f =
                 model.forward(image_from_array(image), false);
             return array_from_tensor(f.heatmap);
           });

  // ---- dataset / verification -------------------------------------------
  m.def("generate_synthetic_dataset",
        [](const std::string& out_dir, std::uint64_t seed, std::size_t places,
           std::size_t views, std::size_t image_size) {
          cqvpr::SyntheticConfig cfg;
          cfg.seed = seed;
          cfg.num_places = places;
          cfg.views_per_place = views;
          cfg.image_size = image_size;
          const cqvpr::Dataset ds =
              cqvpr::generate_synthetic_dataset(cfg, out_dir);
          return py::make_tuple(ds.query_indices.size(),
                                ds.reference_indices.size());
        },
        py::arg("out_dir"), py::arg("seed") = 42, py::arg("places") = 50,
        py::arg("views") = 8, py::arg("image_size") = 56);

  m.def("run_gradient_suite", [](std::size_t seeds, double eps) {
    py::dict out;
    for (const auto& r : cqvpr::run_gradient_suite(seeds, eps)) {
      out[py::str(r.name)] = r.max_rel_error;
    }
    return out;
  }, py::arg("seeds") = 5, py::arg("eps") = 1e-3);
}
