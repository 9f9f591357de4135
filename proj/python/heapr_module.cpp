#include <iostream>

#include <pybind11/iostream.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "heapr/bench.hpp"
#include "heapr/checkpoint.hpp"
#include "heapr/cli.hpp"
#include "heapr/oracle.hpp"
#include "heapr/report_io.hpp"
#include "heapr/run_config.hpp"

namespace py = pybind11;
using namespace heapr;

namespace {

py::array_t<double> to_numpy(const Matrix& m) {
    py::array_t<double> out({m.rows(), m.cols()});
    std::copy(m.data().begin(), m.data().end(), out.mutable_data());
    return out;
}

Matrix from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw DimensionError("expected a 2-d array");
    Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data().begin());
    return m;
}

py::list table_rows(const ImportanceTable& t) {
    py::list rows;
    for (const auto& [k, e] : t.entries)
        rows.append(py::make_tuple(k.layer, k.expert, k.channel, e.score, e.token_count));
    return rows;
}

ImportanceTable table_from_rows(const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, double, std::size_t>>& rows,
                                const std::string& method) {
    ImportanceTable t;
    t.method = method;
    t.layerwise_only = method == "camera";
    for (const auto& [l, e, c, s, n] : rows) t.entries[{l, e, c}] = {s, n};
    return t;
}

py::dict manifest_dict(const PruneManifest& m) {
    py::dict d;
    d["ratio"] = m.ratio;
    d["mode"] = to_string(m.mode);
    d["method"] = m.method;
    d["quota"] = m.quota;
    d["total_atomic_experts"] = m.total_atomic_experts;
    py::list pruned, skipped;
    for (const auto& s : m.pruned) pruned.append(py::make_tuple(s.key.layer, s.key.expert, s.key.channel, s.score));
    for (const auto& s : m.skipped) skipped.append(py::make_tuple(s.key.layer, s.key.expert, s.key.channel, s.score));
    d["pruned"] = pruned;
    d["skipped"] = skipped;
    return d;
}

}  // namespace

PYBIND11_MODULE(heapr, m) {
    m.doc() = "Atomic-expert pruning of toy mixture-of-experts language models";
    m.attr("__version__") = std::string(kToolVersion);

    py::register_exception<Error>(m, "HeaprError", PyExc_RuntimeError);
    py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);

    py::class_<MoEConfig>(m, "MoEConfig")
        .def(py::init<>())
        .def_readwrite("d_model", &MoEConfig::d_model)
        .def_readwrite("d_inter", &MoEConfig::d_inter)
        .def_readwrite("num_experts", &MoEConfig::num_experts)
        .def_readwrite("kappa", &MoEConfig::kappa)
        .def_readwrite("num_layers", &MoEConfig::num_layers)
        .def_readwrite("vocab", &MoEConfig::vocab)
        .def_readwrite("seq_len", &MoEConfig::seq_len)
        .def_readwrite("seed", &MoEConfig::seed)
        .def_property(
            "gate_mode", [](const MoEConfig& c) { return to_string(c.gate_mode); },
            [](MoEConfig& c, const std::string& s) { c.gate_mode = gate_mode_from_string(s); });

    py::class_<CorpusSpec>(m, "CorpusSpec")
        .def(py::init<>())
        .def_readwrite("vocab", &CorpusSpec::vocab)
        .def_readwrite("seed", &CorpusSpec::seed)
        .def_readwrite("num_sequences", &CorpusSpec::num_sequences)
        .def_readwrite("seq_len", &CorpusSpec::seq_len)
        .def_readwrite("train_fraction", &CorpusSpec::train_fraction)
        .def_readwrite("calib_fraction", &CorpusSpec::calib_fraction)
        .def_readwrite("test_fraction", &CorpusSpec::test_fraction)
        .def_readwrite("first_order_scale", &CorpusSpec::first_order_scale)
        .def_readwrite("second_order_scale", &CorpusSpec::second_order_scale);

    py::class_<Corpus>(m, "Corpus")
        .def_readonly("train", &Corpus::train)
        .def_readonly("calib", &Corpus::calib)
        .def_readonly("test", &Corpus::test)
        .def_readonly("dropped_duplicates", &Corpus::dropped_duplicates);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("momentum", &TrainConfig::momentum)
        .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
        .def_readwrite("min_lr_fraction", &TrainConfig::min_lr_fraction)
        .def_readwrite("grad_norm_threshold", &TrainConfig::grad_norm_threshold)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("train_embedding", &TrainConfig::train_embedding);

    py::class_<MoEModel>(m, "MoEModel")
        .def_readonly("config", &MoEModel::config)
        .def("atomic_expert_count", &MoEModel::atomic_expert_count)
        .def("parameter_count", &MoEModel::parameter_count)
        .def("expert_channels", [](const MoEModel& mo, std::size_t l, std::size_t e) {
            return mo.layers.at(l).experts.at(e).channels();
        })
        .def("expert_weights",
             [](const MoEModel& mo, std::size_t l, std::size_t e) {
                 const auto& w = mo.layers.at(l).experts.at(e);
                 py::dict d;
                 d["w_up"] = to_numpy(w.w_up);
                 d["w_gate"] = to_numpy(w.w_gate);
                 d["w_down"] = to_numpy(w.w_down);
                 return d;
             })
        .def("set_expert_weights",
             [](MoEModel& mo, std::size_t l, std::size_t e, py::array_t<double> up, py::array_t<double> gate,
                py::array_t<double> down) {
                 auto& w = mo.layers.at(l).experts.at(e);
                 ExpertWeights nw{from_numpy(up), from_numpy(gate), from_numpy(down)};
                 if (nw.w_up.cols() != mo.config.d_model || nw.w_gate.rows() != nw.w_up.rows() ||
                     nw.w_gate.cols() != mo.config.d_model || nw.w_down.rows() != mo.config.d_model ||
                     nw.w_down.cols() != nw.w_up.rows())
                     throw DimensionError("expert weight shapes do not fit the model");
                 w = std::move(nw);
             })
        .def("token_embedding", [](const MoEModel& mo) { return to_numpy(mo.token_embedding); })
        .def("output_head", [](const MoEModel& mo) { return to_numpy(mo.output_head); })
        .def("save", [](const MoEModel& mo, const std::filesystem::path& p) { save_model(mo, p); })
        .def_static("load", &load_model);

    m.def("init_model", &init_model, py::arg("config"));
    m.def("generate_corpus", &generate_corpus, py::arg("spec"));
    m.def("unigram_entropy", &unigram_entropy, py::arg("sequences"), py::arg("vocab"));
    m.def(
        "train",
        [](const MoEModel& model, const Batch& seqs, const TrainConfig& cfg) {
            TrainResult r = train(model, seqs, cfg);
            return py::make_tuple(std::move(r.model), r.loss_history, r.final_grad_norm);
        },
        py::arg("model"), py::arg("sequences"), py::arg("config"),
        "Returns (trained model, per-step losses, final gradient norm).");

    m.def(
        "loss", [](const MoEModel& model, const Batch& batch) { return lm_forward(model, batch).loss; },
        py::arg("model"), py::arg("batch"));
    m.def("perplexity", &perplexity, py::arg("model"), py::arg("sequences"));
    m.def("make_batches", &make_batches, py::arg("sequences"), py::arg("batch_size"));

    m.def(
        "importance_table",
        [](const MoEModel& model, const std::vector<Batch>& calib, const std::string& method, std::uint64_t seed) {
            ScoringOptions opts;
            opts.seed = seed;
            return table_rows(score_method(method_from_string(method), model, calib, opts));
        },
        py::arg("model"), py::arg("calib"), py::arg("method") = "heapr", py::arg("seed") = 0,
        "Rows (layer, expert, channel, score, token_count) in key order.");

    m.def(
        "rank",
        [](const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, double, std::size_t>>& rows,
           double ratio, const std::string& mode, std::size_t channel_floor, const std::string& method) {
            return manifest_dict(rank(table_from_rows(rows, method), ratio, rank_mode_from_string(mode), channel_floor));
        },
        py::arg("rows"), py::arg("ratio"), py::arg("mode") = "global", py::arg("channel_floor") = 1,
        py::arg("method") = "heapr");

    m.def(
        "heapr_pipeline",
        [](const MoEModel& model, const std::vector<Batch>& calib, double ratio, const std::string& mode,
           std::size_t channel_floor) {
            PipelineOptions opts;
            opts.ratio = ratio;
            opts.mode = rank_mode_from_string(mode);
            opts.channel_floor = channel_floor;
            PipelineResult r = heapr_pipeline(model, calib, opts);
            py::dict passes;
            passes["batches"] = r.passes.batches;
            passes["forward"] = r.passes.forward;
            passes["backward"] = r.passes.backward;
            return py::make_tuple(std::move(r.pruned), table_rows(r.table), manifest_dict(r.manifest), passes);
        },
        py::arg("model"), py::arg("calib"), py::arg("ratio"), py::arg("mode") = "global", py::arg("channel_floor") = 1,
        "Returns (pruned model, importance rows, manifest dict, pass counts).");

    m.def(
        "flops_report",
        [](const MoEModel& original, const MoEModel& pruned, const Batch& data) {
            const FlopsReport f = flops_report(original, pruned, data);
            py::dict d;
            d["tokens"] = f.tokens;
            d["moe_per_token_original"] = f.moe_per_token_original;
            d["moe_per_token_pruned"] = f.moe_per_token_pruned;
            d["total_per_token_original"] = f.total_per_token_original;
            d["total_per_token_pruned"] = f.total_per_token_pruned;
            d["moe_saving_fraction"] = f.moe_saving_fraction;
            d["saving_fraction"] = f.saving_fraction;
            d["atomic_fraction_removed"] = f.atomic_fraction_removed;
            d["parameter_fraction_removed"] = f.parameter_fraction_removed;
            d["convention"] = f.convention;
            return d;
        },
        py::arg("original"), py::arg("pruned"), py::arg("data"));
    m.def("expert_flops", &expert_flops, py::arg("d_model"), py::arg("channels"));

    m.def(
        "true_loss_delta",
        [](const MoEModel& model, const std::vector<Batch>& calib, std::size_t layer, std::size_t expert,
           std::size_t channel, bool freeze_routing) {
            DeltaOptions opts;
            opts.freeze_routing = freeze_routing;
            return true_loss_delta(model, calib, {layer, expert, channel}, opts);
        },
        py::arg("model"), py::arg("calib"), py::arg("layer"), py::arg("expert"), py::arg("channel"),
        py::arg("freeze_routing") = true);
    m.def("fisher_hessian_softmax_check", &fisher_hessian_softmax_check, py::arg("dim"), py::arg("num_samples"),
          py::arg("seed") = 0);
    m.def(
        "spearman",
        [](const std::vector<double>& a, const std::vector<double>& b) { return spearman(a, b); }, py::arg("a"),
        py::arg("b"));

    m.def(
        "cli_main",
        [](const std::vector<std::string>& args) {
            py::scoped_ostream_redirect out(std::cout, py::module_::import("sys").attr("stdout"));
            py::scoped_estream_redirect err(std::cerr, py::module_::import("sys").attr("stderr"));
            return cli_main(args, std::cout, std::cerr);
        },
        py::arg("args"), "Runs the command-line tool in-process; returns its exit code.");
}
