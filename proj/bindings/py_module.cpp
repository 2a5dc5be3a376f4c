#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <vector>

#include "twinquant/errors.hpp"
#include "twinquant/manifest.hpp"
#include "twinquant/metrics.hpp"
#include "twinquant/quant.hpp"
#include "twinquant/search.hpp"
#include "twinquant/tensor.hpp"

namespace py = pybind11;
using namespace twinquant;

namespace {

using Matrix = std::vector<std::vector<double>>;

Tensor mat_to_tensor(const Matrix& m) {
  if (m.empty() || m.front().empty()) throw DimensionError("matrix must be non-empty");
  const std::size_t rows = m.size(), cols = m.front().size();
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (m[i].size() != cols) throw DimensionError("ragged matrix");
    for (std::size_t j = 0; j < cols; ++j) t.at(i, j) = m[i][j];
  }
  return t;
}

Matrix tensor_to_mat(const Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  }
  return m;
}

Tensor vec_to_tensor(const std::vector<double>& v) {
  if (v.empty()) throw DimensionError("vector must be non-empty");
  return Tensor({v.size()}, std::vector<double>(v));
}

}  // namespace

PYBIND11_MODULE(_twinquant, m) {
  m.doc() = "Integer quantization kernels and calibration metrics";
  m.attr("__version__") = kToolVersion;

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<InvariantError>(m, "InvariantError", PyExc_RuntimeError);

  py::class_<UniformQuantParams>(m, "UniformQuantParams")
      .def(py::init<int, double>(), py::arg("bits"), py::arg("delta"))
      .def_property_readonly("bits", &UniformQuantParams::bits)
      .def_property_readonly("delta", &UniformQuantParams::delta)
      .def_property_readonly("max_code", &UniformQuantParams::max_code)
      .def("__repr__", [](const UniformQuantParams& p) {
        return "UniformQuantParams(bits=" + std::to_string(p.bits()) +
               ", delta=" + format_f64(p.delta()) + ")";
      });

  py::class_<TwinQuantParams>(m, "TwinQuantParams")
      .def_static("post_softmax", &TwinQuantParams::post_softmax, py::arg("bits"),
                  py::arg("shift"))
      .def_static("post_gelu", &TwinQuantParams::post_gelu, py::arg("bits"),
                  py::arg("delta_r2"), py::arg("shift"))
      .def_property_readonly("bits", &TwinQuantParams::bits)
      .def_property_readonly("shift", &TwinQuantParams::shift)
      .def_property_readonly("delta_r1", &TwinQuantParams::delta_r1)
      .def_property_readonly("delta_r2", &TwinQuantParams::delta_r2)
      .def_property_readonly("mode",
                             [](const TwinQuantParams& p) { return twin_mode_name(p.mode()); })
      .def("__repr__", [](const TwinQuantParams& p) {
        return std::string("TwinQuantParams(mode=") + twin_mode_name(p.mode()) +
               ", bits=" + std::to_string(p.bits()) + ", shift=" + std::to_string(p.shift()) +
               ", delta_r1=" + format_f64(p.delta_r1()) + ")";
      });

  m.def(
      "quantize_uniform",
      [](const std::vector<double>& x, const UniformQuantParams& p) {
        return quantize_uniform(vec_to_tensor(x), p).data;
      },
      py::arg("x"), py::arg("params"));

  m.def(
      "dequantize_uniform",
      [](const std::vector<std::int32_t>& codes, const UniformQuantParams& p) {
        const IntTensor t{{codes.size()}, codes};
        return dequantize_uniform(t, p).values();
      },
      py::arg("codes"), py::arg("params"));

  m.def(
      "quantize_twin",
      [](const std::vector<double>& x, const TwinQuantParams& p) {
        return quantize_twin(vec_to_tensor(x), p).codes;
      },
      py::arg("x"), py::arg("params"));

  m.def(
      "dequantize_twin",
      [](const std::vector<std::uint8_t>& codes, const TwinQuantParams& p) {
        const TwinCodeTensor t{{codes.size()}, codes};
        return dequantize_twin(t, p).values();
      },
      py::arg("codes"), py::arg("params"));

  m.def(
      "matmul",
      [](const Matrix& a, const Matrix& b) {
        return tensor_to_mat(matmul(mat_to_tensor(a), mat_to_tensor(b)));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "uniform_matmul",
      [](const Matrix& a, const UniformQuantParams& pa, const Matrix& b,
         const UniformQuantParams& pb) {
        const IntTensor ca = quantize_uniform(mat_to_tensor(a), pa);
        const IntTensor cb = quantize_uniform(mat_to_tensor(b), pb);
        return tensor_to_mat(uniform_matmul(ca, pa, cb, pb));
      },
      py::arg("a"), py::arg("a_params"), py::arg("b"), py::arg("b_params"));

  m.def(
      "twin_matmul",
      [](const Matrix& a, const TwinQuantParams& pa, const Matrix& b,
         const UniformQuantParams& pb) {
        const TwinCodeTensor ca = quantize_twin(mat_to_tensor(a), pa);
        const IntTensor cb = quantize_uniform(mat_to_tensor(b), pb);
        return tensor_to_mat(twin_matmul(ca, pa, cb, pb));
      },
      py::arg("a"), py::arg("a_params"), py::arg("b"), py::arg("b_params"));

  const auto metric_fn = [](MetricKind kind) {
    return [kind](const std::vector<double>& o, const std::vector<double>& ohat) {
      return metric_distance(kind, vec_to_tensor(o), vec_to_tensor(ohat), nullptr);
    };
  };
  m.def("mse_distance", metric_fn(MetricKind::Mse), py::arg("o"), py::arg("o_hat"));
  m.def("cosine_distance", metric_fn(MetricKind::Cosine), py::arg("o"), py::arg("o_hat"));
  m.def("pearson_distance", metric_fn(MetricKind::Pearson), py::arg("o"), py::arg("o_hat"));
  m.def(
      "hessian_distance",
      [](const std::vector<double>& o, const std::vector<double>& ohat,
         const std::vector<double>& grad) {
        const Tensor g = vec_to_tensor(grad);
        return metric_distance(MetricKind::Hessian, vec_to_tensor(o), vec_to_tensor(ohat), &g);
      },
      py::arg("o"), py::arg("o_hat"), py::arg("grad"));

  m.def(
      "gen_grid",
      [](double max_abs, int bits, double alpha, double beta, std::size_t candidates) {
        SearchConfig cfg;
        cfg.bits = bits;
        cfg.alpha = alpha;
        cfg.beta = beta;
        cfg.candidates = candidates;
        return gen_grid(max_abs, cfg).deltas;
      },
      py::arg("max_abs"), py::arg("bits") = 8, py::arg("alpha") = 0.0, py::arg("beta") = 1.2,
      py::arg("candidates") = 100);
}
