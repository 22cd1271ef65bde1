// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include <sstream>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "roundattn/cli.hpp"
#include "roundattn/error.hpp"
#include "roundattn/memory_model.hpp"
#include "roundattn/round_stats.hpp"
#include "roundattn/selection.hpp"

namespace py = pybind11;
using namespace roundattn;

PYBIND11_MODULE(_core, m) {
    m.doc() = "Round-granularity KV cache selection and offload simulator";

    // Translators are tried newest first, so the derived type is registered last.
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);

    m.def("memory_ratio", &memory_ratio, py::arg("layers"), py::arg("watershed"), py::arg("kept"),
          py::arg("total_rounds"));
    m.def("save_percent", &save_percent, py::arg("layers"), py::arg("watershed"), py::arg("kept"),
          py::arg("total_rounds"));
    m.def(
        "footprint_report",
        [](std::uint64_t batch, std::uint64_t seq_len, std::uint64_t hidden, std::size_t layers, std::size_t watershed,
           std::size_t kept, std::size_t total_rounds) {
            const FootprintReport r = footprint_report({batch, seq_len, hidden, layers, watershed, kept, total_rounds});
            return py::dict(py::arg("original_bytes") = r.original_bytes, py::arg("round_bytes") = r.round_bytes,
                            py::arg("ratio") = r.ratio);
        },
        py::arg("batch"), py::arg("seq_len"), py::arg("hidden"), py::arg("layers"), py::arg("watershed"),
        py::arg("kept"), py::arg("total_rounds"));
    m.def("reference_rows", [] {
        py::list rows;
        for (const ReferenceModelRow& r : reference_rows())
            rows.append(py::dict(py::arg("family") = std::string(r.family), py::arg("size") = std::string(r.size),
                                 py::arg("layers") = r.layers, py::arg("watershed") = r.watershed,
                                 py::arg("save_percent") = r.reported_save_percent));
        return rows;
    });

    m.def("kl_divergence", [](const std::vector<double>& p, const std::vector<double>& q) {
        return kl_divergence(p, q);
    });
    m.def("normalize", [](const std::vector<double>& raw) { return normalize(raw).masses; });
    m.def(
        "select",
        [](const std::vector<double>& masses, const std::string& strategy, double v, double fraction, double kappa,
           std::size_t min_rounds) {
            SelectionPolicy p;
            p.kind = parse_strategy(strategy);
            p.v = v;
            p.fraction = fraction;
            p.kappa = kappa;
            p.min_rounds = min_rounds;
            p.validate();
            return select_rounds(normalize(masses), p).kept;
        },
        py::arg("masses"), py::arg("strategy") = "top", py::arg("v") = 0.1, py::arg("fraction") = 0.1,
        py::arg("kappa") = 1.0, py::arg("min_rounds") = 1);
    m.def(
        "run_command",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            const int code = run_command(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a CLI subcommand; returns (exit_code, stdout, stderr).");
}
