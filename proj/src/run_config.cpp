#include "heapr/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "heapr/report_io.hpp"

namespace heapr {
namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("config key '" + key + "': cannot parse '" + raw + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + raw + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
    std::vector<T> out;
    if (trim(raw).empty()) return out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, item));
    return out;
}

template <class T>
std::string render_list(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<T>)
            out += format_double(xs[i]);
        else
            out += std::to_string(xs[i]);
    }
    return out;
}

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

#define HEAPR_SIZE(expr)                                                                  \
    Field {                                                                               \
        [](const RunConfig& c) { return std::to_string(c.expr); },                        \
            [](RunConfig& c, const std::string& k, const std::string& v) {                \
                c.expr = parse_number<std::remove_reference_t<decltype(c.expr)>>(k, v);   \
            }                                                                             \
    }
#define HEAPR_REAL(expr)                                                                         \
    Field {                                                                                      \
        [](const RunConfig& c) { return format_double(c.expr); },                                \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_number<double>(k, v); } \
    }
#define HEAPR_BOOL(expr)                                                                         \
    Field {                                                                                      \
        [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); },               \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_bool(k, v); } \
    }

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = {
        {"meta.schema",
         {[](const RunConfig&) { return std::to_string(kConfigSchema); },
          [](RunConfig&, const std::string& k, const std::string& v) {
              if (parse_number<int>(k, v) != kConfigSchema)
                  throw ConfigError("unsupported config schema '" + trim(v) + "' (expected " +
                                    std::to_string(kConfigSchema) + ")");
          }}},

        {"model.d_model", HEAPR_SIZE(model.d_model)},
        {"model.d_inter", HEAPR_SIZE(model.d_inter)},
        {"model.num_experts", HEAPR_SIZE(model.num_experts)},
        {"model.kappa", HEAPR_SIZE(model.kappa)},
        {"model.num_layers", HEAPR_SIZE(model.num_layers)},
        {"model.vocab", HEAPR_SIZE(model.vocab)},
        {"model.seq_len", HEAPR_SIZE(model.seq_len)},
        {"model.gate_mode",
         {[](const RunConfig& c) { return to_string(c.model.gate_mode); },
          [](RunConfig& c, const std::string&, const std::string& v) {
              c.model.gate_mode = gate_mode_from_string(trim(v));
          }}},

        {"corpus.vocab", HEAPR_SIZE(corpus.vocab)},
        {"corpus.seed", HEAPR_SIZE(corpus.seed)},
        {"corpus.num_sequences", HEAPR_SIZE(corpus.num_sequences)},
        {"corpus.seq_len", HEAPR_SIZE(corpus.seq_len)},
        {"corpus.train_fraction", HEAPR_REAL(corpus.train_fraction)},
        {"corpus.calib_fraction", HEAPR_REAL(corpus.calib_fraction)},
        {"corpus.test_fraction", HEAPR_REAL(corpus.test_fraction)},
        {"corpus.first_order_scale", HEAPR_REAL(corpus.first_order_scale)},
        {"corpus.second_order_scale", HEAPR_REAL(corpus.second_order_scale)},

        {"train.steps", HEAPR_SIZE(train.steps)},
        {"train.batch_size", HEAPR_SIZE(train.batch_size)},
        {"train.lr", HEAPR_REAL(train.lr)},
        {"train.momentum", HEAPR_REAL(train.momentum)},
        {"train.schedule",
         {[](const RunConfig& c) {
              return std::string(c.train.schedule == LrSchedule::cosine ? "cosine" : "constant");
          },
          [](RunConfig& c, const std::string& k, const std::string& v) {
              const std::string s = trim(v);
              if (s == "cosine")
                  c.train.schedule = LrSchedule::cosine;
              else if (s == "constant")
                  c.train.schedule = LrSchedule::constant;
              else
                  throw ConfigError("config key '" + k + "': unknown schedule '" + s + "'");
          }}},
        {"train.warmup_steps", HEAPR_SIZE(train.warmup_steps)},
        {"train.min_lr_fraction", HEAPR_REAL(train.min_lr_fraction)},
        {"train.grad_norm_threshold", HEAPR_REAL(train.grad_norm_threshold)},
        {"train.train_embedding", HEAPR_BOOL(train.train_embedding)},

        {"run.method",
         {[](const RunConfig& c) { return to_string(c.method); },
          [](RunConfig& c, const std::string&, const std::string& v) { c.method = method_from_string(trim(v)); }}},
        {"run.mode",
         {[](const RunConfig& c) { return to_string(c.mode); },
          [](RunConfig& c, const std::string&, const std::string& v) { c.mode = rank_mode_from_string(trim(v)); }}},
        {"run.ratio", HEAPR_REAL(ratio)},
        {"run.ratios",
         {[](const RunConfig& c) { return render_list(c.ratios); },
          [](RunConfig& c, const std::string& k, const std::string& v) { c.ratios = parse_list<double>(k, v); }}},
        {"run.seeds",
         {[](const RunConfig& c) { return render_list(c.seeds); },
          [](RunConfig& c, const std::string& k, const std::string& v) {
              c.seeds = parse_list<std::uint64_t>(k, v);
          }}},
        {"run.deterministic", HEAPR_BOOL(deterministic)},
        {"run.output_dir",
         {[](const RunConfig& c) { return c.output_dir; },
          [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = trim(v); }}},
        {"run.calib_sequences", HEAPR_SIZE(calib_sequences)},
        {"run.calib_batch_size", HEAPR_SIZE(calib_batch_size)},
        {"run.calib_sizes",
         {[](const RunConfig& c) { return render_list(c.calib_sizes); },
          [](RunConfig& c, const std::string& k, const std::string& v) {
              c.calib_sizes = parse_list<std::size_t>(k, v);
          }}},
        {"run.channel_floor", HEAPR_SIZE(channel_floor)},
        {"run.disjoint_stage2", HEAPR_BOOL(disjoint_stage2)},
        {"run.traffic_weighting", HEAPR_BOOL(traffic_weighting)},
        {"run.eval_split",
         {[](const RunConfig& c) { return c.eval_split; },
          [](RunConfig& c, const std::string& k, const std::string& v) {
              c.eval_split = trim(v);
              if (c.eval_split != "test" && c.eval_split != "calib")
                  throw ConfigError("config key '" + k + "': expected test or calib");
          }}},
        {"run.camera_alpha", HEAPR_REAL(camera_alpha)},
        {"run.oracle_max_keys", HEAPR_SIZE(oracle_max_keys)},
        {"run.oracle_freeze_routing", HEAPR_BOOL(oracle_freeze_routing)},
    };
    return table;
}

#undef HEAPR_SIZE
#undef HEAPR_REAL
#undef HEAPR_BOOL

void set_field(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
        it->second.set(cfg, key, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const ArgumentError& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

}  // namespace

void RunConfig::validate() const {
    try {
        model.validate();
        corpus.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    if (corpus.vocab != model.vocab) throw ConfigError("corpus.vocab must equal model.vocab");
    if (corpus.seq_len != model.seq_len) throw ConfigError("corpus.seq_len must equal model.seq_len");
    if (method == Method::camera && mode == RankMode::global)
        throw ConfigError("method camera only supports layerwise ranking");
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("run.ratio must lie in [0, 1)");
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] >= 0.0 && ratios[i] < 1.0)) throw ConfigError("run.ratios must lie in [0, 1)");
        if (i > 0 && !(ratios[i] > ratios[i - 1])) throw ConfigError("run.ratios must be ascending");
    }
    if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
    if (calib_sequences == 0 || calib_batch_size == 0)
        throw ConfigError("run.calib_sequences and run.calib_batch_size must be positive");
    for (std::size_t n : calib_sizes)
        if (n == 0) throw ConfigError("run.calib_sizes entries must be positive");
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (camera_alpha < 0.0) throw ConfigError("run.camera_alpha must be >= 0");
    if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
}

RunConfig parse_run_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    if (!tree.get_child_optional("meta.schema")) throw ConfigError("config is missing [meta] schema");

    RunConfig cfg;
    for (const auto& [section, body] : tree) {
        if (section != "meta" && section != "model" && section != "corpus" && section != "train" && section != "run")
            throw ConfigError("unknown config section '" + section + "'");
        if (body.empty() && !body.data().empty())
            throw ConfigError("config key '" + section + "' is outside any section");
        for (const auto& [key, value] : body) set_field(cfg, section + "." + key, value.data());
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not section.key=value");
    set_field(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string canonical_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& [key, field] : fields()) {
        // The output location does not change any artifact.
        if (key == "run.output_dir") continue;
        out += key + " = " + field.get(cfg) + "\n";
    }
    return out;
}

std::string config_hash(const RunConfig& cfg) { return fnv1a_hex(canonical_config(cfg)); }

std::string render_run_config(const RunConfig& cfg) {
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
    for (const auto& [key, field] : fields()) {
        const auto dot = key.find('.');
        sections[key.substr(0, dot)].emplace_back(key.substr(dot + 1), field.get(cfg));
    }
    std::string out;
    for (const char* name : {"meta", "model", "corpus", "train", "run"}) {
        out += std::string(out.empty() ? "" : "\n") + "[" + name + "]\n";
        for (const auto& [k, v] : sections[name]) out += k + " = " + v + "\n";
    }
    return out;
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
    std::filesystem::path dir(cfg.output_dir);
    if (const char* root = std::getenv("HEAPR_OUTPUT_ROOT"); root && *root && dir.is_relative())
        return std::filesystem::path(root) / dir;
    return dir;
}

RunConfig with_seed(const RunConfig& cfg, std::uint64_t seed) {
    RunConfig out = cfg;
    out.model.seed = seed;
    out.train.seed = seed;
    out.seeds = {seed};
    return out;
}

}  // namespace heapr
