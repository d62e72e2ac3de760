#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include "priveri/error.hpp"
#include "priveri/harness/harness.hpp"
#include "priveri/model/forward.hpp"
#include "priveri/model/params.hpp"
#include "priveri/model/serialize.hpp"
#include "priveri/privacy/privacy.hpp"
#include "priveri/protocol1/protocol1.hpp"

namespace py = pybind11;
using namespace priveri;
using model::ModelParams;
using model::TokenId;
using numerics::Prng;
using numerics::Tensor;
using protocol1::AugmentedRequest;
using protocol1::SentinelCache;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Tensor from_array(const Array& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

using Model = std::shared_ptr<ModelParams>;

harness::ExperimentSpec spec_from_kwargs(const py::kwargs& kw) {
  harness::ExperimentSpec s;
  for (const auto& [key, value] : kw) {
    const auto k = key.cast<std::string>();
    if (k == "protocol") s.protocol = value.cast<int>();
    else if (k == "strategy") s.strategy = privacy::parse_strategy(value.cast<std::string>());
    else if (k == "mode") s.mode = privacy::parse_mode(value.cast<std::string>());
    else if (k == "drop") s.drop = value.cast<std::size_t>();
    else if (k == "substitute") s.substitute = value.cast<std::string>();
    else if (k == "n") s.n = value.cast<std::size_t>();
    else if (k == "k") s.k = value.cast<std::size_t>();
    else if (k == "cache_size") s.cache_size = value.cast<std::size_t>();
    else if (k == "noise_set") s.noise_set = value.cast<std::size_t>();
    else if (k == "noise_mode") {
      const auto m = value.cast<std::string>();
      if (m == "shared") s.noise_mode = protocol2::NoiseMode::shared;
      else if (m == "per-position") s.noise_mode = protocol2::NoiseMode::per_position;
      else throw ArgumentError("unknown noise mode '" + m + "'");
    } else if (k == "steps") s.steps = value.cast<std::size_t>();
    else if (k == "trials") s.trials = value.cast<std::size_t>();
    else if (k == "seed") s.master_seed = value.cast<std::uint64_t>();
    else if (k == "tol") s.tol = value.cast<double>();
    else if (k == "workers") s.workers = value.cast<std::size_t>();
    else throw ArgumentError("unknown experiment field '" + k + "'");
  }
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sentinel-token verification of private transformer inference";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<IntegrityError>(m, "IntegrityError", m.attr("Error"));
  py::register_exception<FormatError>(m, "FormatError", m.attr("Error"));
  py::register_exception<CapabilityError>(m, "CapabilityError", m.attr("Error"));
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);

  py::class_<ModelParams, Model>(m, "Model")
      .def_property_readonly("hash", &ModelParams::hash_hex)
      .def_property_readonly("vocab_size", [](const ModelParams& p) { return p.config.vocab_size; })
      .def_property_readonly("embed_dim", [](const ModelParams& p) { return p.config.embed_dim; })
      .def("save", [](const ModelParams& p, const std::filesystem::path& path) { model::save_model(path, p); })
      .def(
          "forward",
          [](const ModelParams& p, const std::vector<TokenId>& tokens) {
            const auto n = tokens.size();
            return to_array(model::forward(p, tokens, model::causal_mask(n), model::sequential_positions(n)).logits);
          },
          py::arg("tokens"), "Causal forward pass; returns L x V logits.");

  m.def("init_model", [](std::uint64_t seed) { return std::make_shared<ModelParams>(model::init_params({}, seed)); },
        py::arg("seed") = 1);
  m.def("load_model", [](const std::filesystem::path& path) {
    return std::make_shared<ModelParams>(model::load_model(path));
  });
  m.def("substitute", [](const ModelParams& base, const std::string& spec) {
    return std::make_shared<ModelParams>(harness::make_substitute(base, spec));
  }, py::arg("base"), py::arg("spec"), "Perturbed model: low-rank:<r>, quantize:<bits>, finetune:<lr>, seed:<s>.");

  py::class_<SentinelCache>(m, "Cache")
      .def_property_readonly("k", &SentinelCache::k)
      .def("__len__", &SentinelCache::size)
      .def("sequences", [](const SentinelCache& c) {
        std::vector<std::vector<TokenId>> out;
        for (const auto& e : c.entries()) out.push_back(e.sequence);
        return out;
      })
      .def("logits", [](const SentinelCache& c, const std::vector<TokenId>& s) { return to_array(c.at(s)); })
      .def("save", [](const SentinelCache& c, const std::filesystem::path& path) { protocol1::save_cache(path, c); })
      .def("audit", [](const SentinelCache& c, const ModelParams& p) { protocol1::audit_cache(c, p); });

  m.def("generate_cache", [](const ModelParams& p, std::size_t size, std::size_t k, std::uint64_t seed) {
    Prng rng(seed);
    return protocol1::generate_cache(p, size, k, rng);
  }, py::arg("model"), py::arg("size"), py::arg("k") = 3, py::arg("seed") = 1);
  m.def("load_cache", [](const std::filesystem::path& path) { return protocol1::load_cache(path); });

  py::class_<AugmentedRequest>(m, "Request")
      .def_readonly("tokens", &AugmentedRequest::tokens)
      .def_readonly("position_ids", &AugmentedRequest::position_ids)
      .def_readonly("sentinel_positions", &AugmentedRequest::sentinel_positions)
      .def_readonly("sentinel_sequence", &AugmentedRequest::sentinel_sequence)
      .def_readonly("prompt_length", &AugmentedRequest::prompt_length)
      .def_property_readonly("mask", [](const AugmentedRequest& r) { return to_array(r.mask); })
      .def("original_positions", &AugmentedRequest::original_positions)
      .def("__len__", &AugmentedRequest::length);

  m.def("build_request", [](const std::vector<TokenId>& prompt, const SentinelCache& cache, std::uint64_t seed) {
    Prng rng(seed);
    const auto& s = cache.draw(rng);
    return protocol1::build_request(prompt, s, rng);
  }, py::arg("prompt"), py::arg("cache"), py::arg("seed") = 1);
  m.def("assemble_request", [](const std::vector<TokenId>& prompt, const std::vector<TokenId>& sentinels,
                               const std::vector<std::size_t>& positions) {
    return protocol1::assemble_request(prompt, sentinels, positions);
  });
  m.def("run_request", [](const ModelParams& p, const AugmentedRequest& r) {
    return to_array(model::forward(p, r.tokens, r.mask, r.position_ids).logits);
  }, py::arg("model"), py::arg("request"), "Honest provider: logits for the augmented request.");
  m.def("verify", [](const Array& logits, const AugmentedRequest& r, const SentinelCache& c, double tol) {
    const auto v = protocol1::verify(from_array(logits), r, c, tol);
    return py::make_tuple(v.verified, v.per_sentinel_l1);
  }, py::arg("logits"), py::arg("request"), py::arg("cache"), py::arg("tol") = protocol1::kDefaultTolerance);
  m.def("fingerprint", [](const ModelParams& p, const std::vector<TokenId>& s) {
    return to_array(protocol1::fingerprint(p, s));
  });
  m.def("fingerprint_distance", [](const Array& a, const Array& b) {
    return protocol1::fingerprint_distance(from_array(a), from_array(b));
  });

  m.def("binomial", &harness::binomial);
  m.def("comm_overhead_bytes", &harness::comm_overhead_bytes, py::arg("length"), py::arg("bytes_per_element") = 4);
  m.def("analytic_probability", [](const std::string& kind, std::size_t n, std::size_t k, std::size_t cache_size,
                                   std::size_t noise_set, std::size_t drop, std::vector<double> accuracies) {
    harness::AttackParams p{n, k, cache_size, noise_set, drop, std::move(accuracies)};
    return harness::analytic_attack_probability(harness::parse_analytic_kind(kind), p);
  }, py::arg("kind"), py::arg("n") = 14, py::arg("k") = 3, py::arg("cache_size") = 100, py::arg("noise_set") = 16,
        py::arg("drop") = 1, py::arg("accuracies") = std::vector<double>{});
  m.def("trial_seed", &harness::trial_seed);
  m.def("_run_attack_json", [](const py::kwargs& kw) {
    const auto spec = spec_from_kwargs(kw);
    harness::ExperimentReport report;
    {
      py::gil_scoped_release release;
      report = harness::run_attack_experiment(spec);
    }
    return harness::to_json(report).dump();
  });
}
