#include "heapr/checkpoint.hpp"

#include <fstream>

namespace heapr {

namespace {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from_json(const json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
}

}  // namespace

json config_to_json(const MoEConfig& cfg) {
    return {{"d_model", cfg.d_model},         {"d_inter", cfg.d_inter},
            {"num_experts", cfg.num_experts}, {"kappa", cfg.kappa},
            {"num_layers", cfg.num_layers},   {"vocab", cfg.vocab},
            {"seq_len", cfg.seq_len},         {"seed", cfg.seed},
            {"gate_mode", to_string(cfg.gate_mode)}};
}

MoEConfig config_from_json(const json& j) {
    MoEConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_inter = j.at("d_inter").get<std::size_t>();
    c.num_experts = j.at("num_experts").get<std::size_t>();
    c.kappa = j.at("kappa").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.gate_mode = gate_mode_from_string(j.at("gate_mode").get<std::string>());
    c.validate();
    return c;
}

json model_to_json(const MoEModel& model) {
    json layers = json::array();
    for (const auto& layer : model.layers) {
        json experts = json::array();
        for (const auto& e : layer.experts) {
            experts.push_back({{"w_up", matrix_to_json(e.w_up)},
                               {"w_gate", matrix_to_json(e.w_gate)},
                               {"w_down", matrix_to_json(e.w_down)}});
        }
        layers.push_back({{"w_router", matrix_to_json(layer.router.w_router)}, {"experts", experts}});
    }
    return {{"format", "heapr-moe-checkpoint"},
            {"version", kCheckpointVersion},
            {"config", config_to_json(model.config)},
            {"token_embedding", matrix_to_json(model.token_embedding)},
            {"layers", layers},
            {"output_head", matrix_to_json(model.output_head)}};
}

MoEModel model_from_json(const json& j) {
    if (j.value("format", "") != "heapr-moe-checkpoint") {
        throw DataError("not a model checkpoint");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + j.at("version").dump());
    }
    MoEModel m;
    m.config = config_from_json(j.at("config"));
    m.token_embedding = matrix_from_json(j.at("token_embedding"));
    for (const auto& jl : j.at("layers")) {
        MoELayer layer;
        layer.router.w_router = matrix_from_json(jl.at("w_router"));
        for (const auto& je : jl.at("experts")) {
            layer.experts.push_back({matrix_from_json(je.at("w_up")), matrix_from_json(je.at("w_gate")),
                                     matrix_from_json(je.at("w_down"))});
        }
        m.layers.push_back(std::move(layer));
    }
    m.output_head = matrix_from_json(j.at("output_head"));
    if (m.layers.size() != m.config.num_layers) throw DataError("checkpoint layer count mismatch");
    return m;
}

void save_model(const MoEModel& model, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << model_to_json(model).dump() << '\n';
}

MoEModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return model_from_json(j);
}

}  // namespace heapr
