#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "jqt/cli.hpp"
#include "jqt/error.hpp"
#include "jqt/parallel.hpp"
#include "jqt/qgemm.hpp"
#include "jqt/quantize.hpp"
#include "jqt/trainer.hpp"

namespace py = pybind11;
using namespace jqt;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

DenseTensor to_dense(const F32& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0));
  const auto c = static_cast<std::size_t>(a.shape(1));
  return DenseTensor(r, c, std::vector<float>(a.data(), a.data() + r * c));
}

py::array_t<float> to_numpy(const DenseTensor& t) {
  py::array_t<float> out({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict counters_dict(const AccessCounters& k) {
  py::dict d;
  d["int8_load_store"] = k.int8_load_store;
  d["fp16_load_store"] = k.fp16_load_store;
  d["int_mac"] = k.int_mac;
  d["dequant_ops"] = k.dequant_ops;
  d["quant_ops"] = k.quant_ops;
  return d;
}

TileConfig tile_for(std::size_t block) { return TileConfig::for_block(block); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "INT8 block-quantized tensors, GEMM and toy training";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ArithmeticError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);

  py::class_<BlockQuantTensor>(m, "BlockQuantTensor")
      .def_property_readonly("shape", [](const BlockQuantTensor& t) { return py::make_tuple(t.rows(), t.cols()); })
      .def_property_readonly("block_shape", [](const BlockQuantTensor& t) {
        return py::make_tuple(t.block_shape().rows, t.block_shape().cols);
      })
      .def_property_readonly("values", [](const BlockQuantTensor& t) {
        py::array_t<std::int8_t> out({t.rows(), t.cols()});
        std::copy(t.values().begin(), t.values().end(), out.mutable_data());
        return out;
      })
      .def_property_readonly("scales", [](const BlockQuantTensor& t) {
        py::array_t<float> out({t.scale_rows(), t.scale_cols()});
        std::copy(t.scales().begin(), t.scales().end(), out.mutable_data());
        return out;
      })
      .def_property_readonly("storage_bytes", &BlockQuantTensor::storage_bytes)
      .def("dequantize", [](const BlockQuantTensor& t) { return to_numpy(dequantize(t)); })
      .def("save", [](const BlockQuantTensor& t, const std::string& path) { save_jqt(path, t); })
      .def("__eq__", [](const BlockQuantTensor& a, const BlockQuantTensor& b) { return a == b; });

  m.def("quantize", [](const F32& x, const std::string& scheme, std::size_t block) {
        return quantize_with_scheme(to_dense(x), QuantScheme::parse(scheme, block));
      }, py::arg("x"), py::arg("scheme") = "per-block", py::arg("block") = 32);
  m.def("load", &load_jqt, py::arg("path"));
  m.def("quantization_error", [](const F32& x, const std::string& scheme, std::size_t block) {
        const QuantError e = quantization_error(to_dense(x), QuantScheme::parse(scheme, block));
        return py::make_tuple(e.mse, e.mean_abs);
      }, py::arg("x"), py::arg("scheme"), py::arg("block") = 32);

  m.def("matmul", [](const BlockQuantTensor& x, const BlockQuantTensor& w, const std::string& mode) {
        AccessCounters k;
        const auto y = block_mm_forward(x, w, tile_for(x.block()), parse_exec_mode(mode), &k);
        return py::make_tuple(y, counters_dict(k));
      }, py::arg("x"), py::arg("w"), py::arg("mode") = "int8",
      "Y = X W^T with output requantization; returns (Y, counters).");
  m.def("matmul_accum", [](const BlockQuantTensor& x, const BlockQuantTensor& w) {
        return to_numpy(mm_forward_accum(x, w, tile_for(x.block())));
      }, py::arg("x"), py::arg("w"));

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);

  m.def("train", [](const std::string& task_json, const std::string& model_json, const std::string& train_json) {
        const auto j = [](const std::string& s) { return s.empty() ? nlohmann::json() : nlohmann::json::parse(s); };
        const ToyTask task = task_json.empty() ? ToyTask::copy(16, 8) : task_from_json(j(task_json));
        const TrainConfig cfg = train_config_from_json(j(model_json), j(train_json));
        std::vector<TrainRecord> recs;
        {
          py::gil_scoped_release release;
          recs = run_training(cfg, task);
        }
        py::list out;
        for (const auto& r : recs) {
          py::dict d;
          d["step"] = r.step;
          d["train_loss"] = r.train_loss;
          d["val_loss"] = r.val_loss;
          d["grad_norm"] = r.grad_norm;
          d["scheme"] = r.scheme;
          d["diverged"] = r.diverged;
          out.append(d);
        }
        return out;
      }, py::arg("task_json") = "", py::arg("model_json") = "", py::arg("train_json") = "");

  m.def("selftest", [] {
        py::list out;
        for (const auto& r : cli::run_selftest({})) out.append(py::make_tuple(r.name, r.passed, r.detail));
        return out;
      });
}
