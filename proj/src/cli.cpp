#include "heapr/cli.hpp"

#include <boost/version.hpp>
#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "heapr/bench.hpp"
#include "heapr/checkpoint.hpp"
#include "heapr/oracle.hpp"
#include "heapr/report_io.hpp"
#include "heapr/run_config.hpp"

namespace heapr {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Context {
    RunConfig cfg;
    fs::path dir;
    std::ostream& out;
    std::vector<std::pair<std::string, std::string>> artifacts;  // relative path, content hash
};

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void emit(Context& ctx, const fs::path& rel, const std::string& text) {
    fs::create_directories((ctx.dir / rel).parent_path());
    write_text(ctx.dir / rel, text);
    ctx.artifacts.emplace_back(rel.generic_string(), fnv1a_hex(text));
}

fs::path seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

// Hash of everything that determines a trained model.
std::string train_hash(const RunConfig& cfg) {
    std::istringstream in(canonical_config(cfg));
    std::string line, keep;
    while (std::getline(in, line))
        if (line.rfind("model.", 0) == 0 || line.rfind("corpus.", 0) == 0 || line.rfind("train.", 0) == 0)
            keep += line + "\n";
    return fnv1a_hex(keep + "seed = " + std::to_string(cfg.model.seed) + "\n");
}

MoEModel ensure_model(Context& ctx, const Corpus& corpus, std::uint64_t seed, bool force) {
    const RunConfig sc = with_seed(ctx.cfg, seed);
    const std::string hash = train_hash(sc);
    const fs::path model_rel = seed_dir(seed) / "model.json";
    const fs::path summary_rel = seed_dir(seed) / "train_summary.json";
    if (!force && fs::exists(ctx.dir / model_rel) && fs::exists(ctx.dir / summary_rel) &&
        read_json(ctx.dir / summary_rel).value("train_hash", "") == hash) {
        return load_model(ctx.dir / model_rel);
    }

    TrainResult tr = train(init_model(sc.model), corpus.train, sc.train);
    std::string log = "step,lr,loss\n";
    for (std::size_t s = 0; s < tr.loss_history.size(); ++s)
        log += std::to_string(s) + ',' + format_double(learning_rate_at(sc.train, s)) + ',' +
               format_double(tr.loss_history[s]) + '\n';
    emit(ctx, seed_dir(seed) / "train_log.csv", log);
    emit(ctx, model_rel, dump(model_to_json(tr.model)));
    json summary = {{"train_hash", hash},
                    {"seed", seed},
                    {"steps_run", tr.steps_run},
                    {"final_loss", tr.final_loss},
                    {"final_grad_norm", tr.final_grad_norm},
                    {"converged", tr.converged},
                    {"test_perplexity", perplexity(tr.model, corpus.test)}};
    emit(ctx, summary_rel, dump(summary));
    ctx.out << "seed " << seed << ": trained " << tr.steps_run << " steps, final loss "
            << format_double(tr.final_loss) << ", test perplexity " << format_double(summary["test_perplexity"].get<double>())
            << "\n";
    return std::move(tr.model);
}

std::vector<Batch> calib_batches(const RunConfig& cfg, const Corpus& corpus, std::size_t sequences) {
    if (sequences > corpus.calib.size())
        throw ArgumentError("calibration needs " + std::to_string(sequences) + " sequences, calib split has " +
                            std::to_string(corpus.calib.size()));
    const Batch head(corpus.calib.begin(), corpus.calib.begin() + static_cast<std::ptrdiff_t>(sequences));
    return make_batches(head, cfg.calib_batch_size);
}

const Batch& eval_split(const RunConfig& cfg, const Corpus& corpus) {
    return cfg.eval_split == "calib" ? corpus.calib : corpus.test;
}

// Stage 1 / stage 2 batches; the halves when stage 2 must see different data.
std::pair<std::vector<Batch>, std::vector<Batch>> stage_batches(const RunConfig& cfg,
                                                                std::vector<Batch> calib) {
    if (!cfg.disjoint_stage2) return {calib, calib};
    if (calib.size() < 2) throw ArgumentError("disjoint_stage2 needs at least two calibration batches");
    const auto mid = calib.begin() + static_cast<std::ptrdiff_t>(calib.size() / 2);
    return {std::vector<Batch>(calib.begin(), mid), std::vector<Batch>(mid, calib.end())};
}

ImportanceTable score(const RunConfig& cfg, Method method, const MoEModel& model, const std::vector<Batch>& calib,
                      std::uint64_t seed) {
    const auto [s1, s2] = stage_batches(cfg, calib);
    ScoringOptions opts;
    opts.seed = seed;
    opts.camera.alpha = cfg.camera_alpha;
    if (cfg.disjoint_stage2) opts.stage2_calib = &s2;
    opts.traffic_weighted = cfg.traffic_weighting;
    return score_method(method, model, s1, opts);
}

json flops_json(const FlopsReport& f) {
    return {{"format", "heapr-flops-report"},
            {"convention", f.convention},
            {"tokens", f.tokens},
            {"moe_per_token_original", f.moe_per_token_original},
            {"moe_per_token_pruned", f.moe_per_token_pruned},
            {"total_per_token_original", f.total_per_token_original},
            {"total_per_token_pruned", f.total_per_token_pruned},
            {"moe_saving_fraction", f.moe_saving_fraction},
            {"saving_fraction", f.saving_fraction},
            {"atomic_fraction_removed", f.atomic_fraction_removed},
            {"parameter_fraction_removed", f.parameter_fraction_removed}};
}

void cmd_gen_corpus(Context& ctx, const Corpus& corpus) {
    emit(ctx, "corpus.json", dump(corpus_to_json(corpus)));
    ctx.out << "corpus: train " << corpus.train.size() << ", calib " << corpus.calib.size() << ", test "
            << corpus.test.size() << " sequences (" << corpus.dropped_duplicates << " duplicates dropped), "
            << "unigram entropy " << format_double(unigram_entropy(corpus.train, corpus.spec.vocab)) << " nats\n";
}

void cmd_train(Context& ctx, const Corpus& corpus) {
    for (std::uint64_t seed : ctx.cfg.seeds) ensure_model(ctx, corpus, seed, true);
}

void cmd_calibrate(Context& ctx, const Corpus& corpus) {
    for (std::uint64_t seed : ctx.cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        const auto [s1, s2] = stage_batches(ctx.cfg, calib_batches(ctx.cfg, corpus, ctx.cfg.calib_sequences));
        PassCounter passes;
        const CovarianceSet covs = estimate_covariances(model, s1, &passes);
        emit(ctx, seed_dir(seed) / "covariances.json", dump(covariances_to_json(covs)));
        ctx.out << "seed " << seed << ": " << covs.size() << " gradient covariances from " << s1.size()
                << " batches (" << passes.forward << " forward, " << passes.backward << " backward)\n";
    }
}

void cmd_score(Context& ctx, const Corpus& corpus) {
    for (std::uint64_t seed : ctx.cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        const auto calib = calib_batches(ctx.cfg, corpus, ctx.cfg.calib_sequences);
        const ImportanceTable table = score(ctx.cfg, ctx.cfg.method, model, calib, seed);
        std::ostringstream csv;
        write_importance_csv(table, csv);
        emit(ctx, seed_dir(seed) / "importance.csv", csv.str());
        ctx.out << "seed " << seed << ": scored " << table.entries.size() << " atomic experts (" << table.method
                << ")\n";
    }
}

void cmd_prune(Context& ctx, const Corpus& corpus) {
    const auto& cfg = ctx.cfg;
    for (std::uint64_t seed : cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        const auto calib = calib_batches(cfg, corpus, cfg.calib_sequences);
        const ImportanceTable table = score(cfg, cfg.method, model, calib, seed);
        const PruneManifest manifest = manifest_for(cfg.method, table, cfg.ratio, cfg.mode, cfg.channel_floor);
        const MoEModel pruned = apply_prune(model, manifest);
        const FlopsReport flops = flops_report(model, pruned, eval_split(cfg, corpus));
        emit(ctx, seed_dir(seed) / "manifest.json", dump(manifest_to_json(manifest, config_hash(cfg))));
        emit(ctx, seed_dir(seed) / "pruned_model.json", dump(model_to_json(pruned)));
        emit(ctx, seed_dir(seed) / "flops.json", dump(flops_json(flops)));
        ctx.out << "seed " << seed << ": pruned " << manifest.pruned.size() << " of " << manifest.total_atomic_experts
                << " atomic experts (" << manifest.skipped.size() << " skipped by the channel floor), FLOPs saving "
                << format_double(flops.saving_fraction) << "\n";
    }
}

void cmd_eval(Context& ctx, const Corpus& corpus) {
    const auto& cfg = ctx.cfg;
    for (std::uint64_t seed : cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        const auto calib = calib_batches(cfg, corpus, cfg.calib_sequences);
        const ImportanceTable table = score(cfg, cfg.method, model, calib, seed);
        const MoEModel pruned =
            apply_prune(model, manifest_for(cfg.method, table, cfg.ratio, cfg.mode, cfg.channel_floor));
        json j = {{"seed", seed},
                  {"method", to_string(cfg.method)},
                  {"mode", to_string(cfg.mode)},
                  {"ratio", cfg.ratio},
                  {"original", {{"calib", perplexity(model, corpus.calib)}, {"test", perplexity(model, corpus.test)}}},
                  {"pruned", {{"calib", perplexity(pruned, corpus.calib)}, {"test", perplexity(pruned, corpus.test)}}},
                  {"flops", flops_json(flops_report(model, pruned, corpus.test))}};
        emit(ctx, seed_dir(seed) / "eval.json", dump(j));
        ctx.out << "seed " << seed << ": test perplexity " << format_double(j["original"]["test"].get<double>())
                << " -> " << format_double(j["pruned"]["test"].get<double>()) << " at r = " << format_double(cfg.ratio)
                << "\n";
    }
}

void cmd_oracle(Context& ctx, const Corpus& corpus) {
    const auto& cfg = ctx.cfg;
    for (std::uint64_t seed : cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        const auto calib = calib_batches(cfg, corpus, cfg.calib_sequences);
        const ImportanceTable table = score(cfg, Method::heapr, model, calib, seed);

        ObsOptions opts;
        opts.max_keys = cfg.oracle_max_keys;
        opts.seed = seed;
        opts.delta.freeze_routing = cfg.oracle_freeze_routing;
        const ObsReport rep = obs_prediction_report(model, calib, table, opts);

        std::string csv = "layer,expert,channel,predicted,measured\n";
        std::vector<double> shuffled, measured;
        const ImportanceTable shuf = shuffled_table(table, seed);
        for (const auto& r : rep.rows) {
            csv += std::to_string(r.key.layer) + ',' + std::to_string(r.key.expert) + ',' +
                   std::to_string(r.key.channel) + ',' + format_double(r.predicted) + ',' + format_double(r.measured) +
                   '\n';
            shuffled.push_back(shuf.entries.at(r.key).score);
            measured.push_back(r.measured);
        }
        emit(ctx, seed_dir(seed) / "obs_report.csv", csv);

        const Batch probe(calib.front().begin(), calib.front().begin() + std::min<std::ptrdiff_t>(4, calib.front().size()));
        const SharedGradientReport sg = shared_gradient_check(model, probe, {1e-4, 1e-5}, 6, 3, seed);
        json j = {{"seed", seed},
                  {"keys", rep.rows.size()},
                  {"spearman", rep.spearman},
                  {"shuffled_spearman", spearman(shuffled, measured)},
                  {"bottom_decile",
                   {{"count", rep.decile_count},
                    {"mean_abs_error", rep.decile_mean_abs_error},
                    {"max_abs_error", rep.decile_max_abs_error},
                    {"sum_measured", rep.decile_sum_measured},
                    {"joint_measured", rep.decile_joint_measured}}},
                  {"shared_gradient_max_deviation", sg.max_deviation()},
                  {"fisher_exact_error", fisher_hessian_softmax_check(8, 0, seed)},
                  {"fisher_mc_error", fisher_hessian_softmax_check(8, 100000, seed)},
                  {"freeze_routing", cfg.oracle_freeze_routing}};
        emit(ctx, seed_dir(seed) / "oracle.json", dump(j));
        ctx.out << "seed " << seed << ": spearman " << format_double(rep.spearman) << " over " << rep.rows.size()
                << " atomic experts (shuffled control " << format_double(j["shuffled_spearman"].get<double>()) << ")\n";
    }
}

void cmd_sweep(Context& ctx, const Corpus& corpus) {
    const auto& cfg = ctx.cfg;
    std::vector<SweepRow> rows;
    std::string calib_csv = "calib_sequences,ratio,method,mode,seed,perplexity\n";
    for (std::uint64_t seed : cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        SweepConfig sc;
        sc.method = cfg.method;
        sc.mode = cfg.mode;
        sc.ratios = cfg.ratios;
        sc.seed = seed;
        sc.channel_floor = cfg.channel_floor;
        const auto calib = calib_batches(cfg, corpus, cfg.calib_sequences);
        const auto part = run_sweep_with_table(model, score(cfg, cfg.method, model, calib, seed),
                                               eval_split(cfg, corpus), sc);
        rows.insert(rows.end(), part.begin(), part.end());

        for (std::size_t n : cfg.calib_sizes) {
            const auto table = score(cfg, cfg.method, model, calib_batches(cfg, corpus, n), seed);
            const MoEModel pruned =
                apply_prune(model, manifest_for(cfg.method, table, cfg.ratio, cfg.mode, cfg.channel_floor));
            calib_csv += std::to_string(n) + ',' + format_double(cfg.ratio) + ',' + to_string(cfg.method) + ',' +
                         to_string(cfg.mode) + ',' + std::to_string(seed) + ',' +
                         format_double(perplexity(pruned, eval_split(cfg, corpus))) + '\n';
        }
    }
    std::ostringstream csv;
    write_sweep_csv(rows, csv);
    emit(ctx, "sweep.csv", csv.str());
    if (!cfg.calib_sizes.empty()) emit(ctx, "calib_sweep.csv", calib_csv);
    ctx.out << "sweep: " << rows.size() << " rows\n";
}

void cmd_compare(Context& ctx, const Corpus& corpus) {
    const auto& cfg = ctx.cfg;
    const std::vector<std::pair<Method, RankMode>> arms = {
        {Method::heapr, RankMode::global},     {Method::heapr, RankMode::layerwise},
        {Method::camera, RankMode::layerwise}, {Method::random, RankMode::global},
        {Method::magnitude, RankMode::global}, {Method::expert_drop, RankMode::global}};
    std::vector<SweepRow> rows;
    for (std::uint64_t seed : cfg.seeds) {
        const MoEModel model = ensure_model(ctx, corpus, seed, false);
        const auto calib = calib_batches(cfg, corpus, cfg.calib_sequences);
        std::map<Method, ImportanceTable> tables;
        for (const auto& [method, mode] : arms) {
            if (!tables.count(method)) tables.emplace(method, score(cfg, method, model, calib, seed));
            SweepConfig sc;
            sc.method = method;
            sc.mode = mode;
            sc.ratios = cfg.ratios;
            sc.seed = seed;
            sc.channel_floor = cfg.channel_floor;
            const auto part = run_sweep_with_table(model, tables.at(method), eval_split(cfg, corpus), sc);
            rows.insert(rows.end(), part.begin(), part.end());
        }
    }
    std::ostringstream csv;
    write_sweep_csv(rows, csv);
    emit(ctx, "compare.csv", csv.str());
    ctx.out << "compare: " << rows.size() << " rows\n";
}

void write_run_manifest(Context& ctx, const std::string& command, double seconds) {
    json artifacts = json::array();
    for (const auto& [path, hash] : ctx.artifacts) artifacts.push_back({{"path", path}, {"fnv1a", hash}});
    json versions = {{"heapr", std::string(kToolVersion)},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"cli11", CLI11_VERSION},
                     {"boost", std::to_string(BOOST_VERSION / 100000) + "." + std::to_string(BOOST_VERSION / 100 % 1000)},
                     {"compiler", __VERSION__}};
    json j = {{"format", "heapr-run-manifest"},
              {"version", 1},
              {"tool_version", std::string(kToolVersion)},
              {"command", command},
              {"config_hash", config_hash(ctx.cfg)},
              {"seed", ctx.cfg.seeds.front()},
              {"seeds", ctx.cfg.seeds},
              {"deterministic", ctx.cfg.deterministic},
              {"versions", versions},
              {"artifacts", artifacts}};
    // Wall-clock data would break byte-identical reruns.
    if (!ctx.cfg.deterministic) j["wall_seconds"] = seconds;
    write_text(ctx.dir / "run_manifest.json", dump(j));
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Atomic-expert pruning of toy mixture-of-experts language models", "heapr"};
    std::string config_path, out_dir;
    std::vector<std::string> sets;
    app.add_option("-c,--config", config_path, "INI run config (defaults apply when omitted)");
    app.add_option("-s,--set", sets, "Override one config key, section.key=value (repeatable)")->allow_extra_args(false);
    app.add_option("-o,--out", out_dir, "Output directory (run.output_dir)");
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1, 1);

    using Command = void (*)(Context&, const Corpus&);
    const std::vector<std::tuple<std::string, std::string, Command>> commands = {
        {"gen-corpus", "Generate the synthetic corpus splits", cmd_gen_corpus},
        {"train", "Train one model per seed", cmd_train},
        {"calibrate", "Estimate per-expert gradient covariances (stage 1)", cmd_calibrate},
        {"score", "Score atomic experts with the configured method", cmd_score},
        {"prune", "Prune at run.ratio and write the manifest, pruned model and FLOPs report", cmd_prune},
        {"eval", "Perplexity of the original and pruned models", cmd_eval},
        {"oracle", "Predicted vs measured loss increase for every atomic expert", cmd_oracle},
        {"sweep", "Perplexity and FLOPs saving over run.ratios", cmd_sweep},
        {"compare", "Sweep every method over run.ratios", cmd_compare}};
    for (const auto& [name, help, fn] : commands) app.add_subcommand(name, help)->fallthrough();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    RunConfig cfg;
    try {
        cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        for (const auto& s : sets) apply_override(cfg, s);
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        cfg.validate();
    } catch (const ConfigError& e) {
        err << "heapr: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ArgumentError& e) {
        err << "heapr: " << e.what() << "\n";
        return kExitUsage;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const auto start = std::chrono::steady_clock::now();
        Context ctx{cfg, resolve_output_dir(cfg), out, {}};
        fs::create_directories(ctx.dir);
        // the snapshot leaves out where it was written so reruns elsewhere match byte for byte
        RunConfig snapshot = cfg;
        snapshot.output_dir = ".";
        emit(ctx, "config.ini", render_run_config(snapshot));
        const Corpus corpus = generate_corpus(cfg.corpus);
        for (const auto& [name, help, fn] : commands)
            if (name == command) fn(ctx, corpus);
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_run_manifest(ctx, command, seconds);
        out << "wrote " << ctx.artifacts.size() << " artifacts to " << ctx.dir.string() << "\n";
    } catch (const std::exception& e) {
        err << "heapr " << command << ": " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int cli_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_main(args, std::cout, std::cerr);
}

}  // namespace heapr
