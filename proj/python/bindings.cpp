#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "captlab/checkpoint.hpp"
#include "captlab/cli.hpp"
#include "captlab/data.hpp"

namespace py = pybind11;
using namespace captlab;

PYBIND11_MODULE(_captlab, m) {
  m.doc() = "Bindings for the captlab prompt-tuning library";

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run one capt subcommand in-process; returns (exit_code, stdout, stderr).");

  m.def(
      "resolved_config",
      [](const std::string& text, const std::map<std::string, std::string>& overrides) {
        std::vector<std::pair<std::string, std::string>> ov(overrides.begin(), overrides.end());
        return cli::parse_config(text, ov).resolved();
      },
      py::arg("text") = "", py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "synthetic",
      [](const std::string& kind, std::size_t n, std::uint64_t seed) {
        const Dataset d = gen_synthetic(parse_synthetic(kind), n, seed);
        py::list rows;
        for (const Example& e : d.examples) rows.append(py::make_tuple(e.ids, e.label));
        return rows;
      },
      py::arg("kind"), py::arg("n"), py::arg("seed"), "List of (token ids, label) pairs.");

  m.def("decode", [](const std::vector<std::int32_t>& ids) { return Tokenizer::standard().detokenize(ids); });

  m.def("git_blob_hash", [](const py::bytes& b) { return git_blob_hash(std::string(b)); });

  // Translators run newest first, so the subclass is registered last.
  const auto base = py::register_exception<Error>(m, "CaptlabError");
  py::register_exception<cli::UsageError>(m, "UsageError", base.ptr());
}
