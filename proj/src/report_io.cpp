#include "heapr/report_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace heapr {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

template <class T>
T parse_number(const std::string& s, const char* what) {
    T v{};
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc{} || ptr != end) throw DataError(std::string("bad ") + what + " '" + s + "'");
    return v;
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

void write_importance_csv(const ImportanceTable& table, std::ostream& out) {
    out << "layer,expert,channel,score,token_count,method\n";
    for (const auto& [k, e] : table.entries) {
        out << k.layer << ',' << k.expert << ',' << k.channel << ',' << format_double(e.score) << ','
            << e.token_count << ',' << table.method << '\n';
    }
}

ImportanceTable read_importance_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("importance CSV is empty");
    const auto header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "layer" || header[3] != "score") {
        throw DataError("unexpected importance CSV header '" + line + "'");
    }
    ImportanceTable t;
    bool method_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() < 5) throw DataError("short importance CSV row '" + line + "'");
        AtomicExpertKey k{parse_number<std::size_t>(cells[0], "layer"),
                          parse_number<std::size_t>(cells[1], "expert"),
                          parse_number<std::size_t>(cells[2], "channel")};
        t.entries[k] = {parse_number<double>(cells[3], "score"),
                        parse_number<std::size_t>(cells[4], "token_count")};
        if (cells.size() > 5 && !method_seen) {
            t.method = cells[5];
            method_seen = true;
        }
    }
    t.layerwise_only = t.method == "camera";
    return t;
}

nlohmann::json manifest_to_json(const PruneManifest& m, std::string_view config_hash) {
    auto keys = [](const std::vector<ScoredKey>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& sk : v) {
            arr.push_back({{"layer", sk.key.layer},
                           {"expert", sk.key.expert},
                           {"channel", sk.key.channel},
                           {"score", sk.score}});
        }
        return arr;
    };
    nlohmann::json remaining = nlohmann::json::array();
    for (const auto& [id, n] : m.remaining_channels) {
        remaining.push_back({{"layer", id.first}, {"expert", id.second}, {"channels", n}});
    }
    return {{"format", "heapr-prune-manifest"},
            {"tool_version", std::string(kToolVersion)},
            {"config_hash", std::string(config_hash)},
            {"ratio", m.ratio},
            {"mode", to_string(m.mode)},
            {"method", m.method},
            {"channel_floor", m.channel_floor},
            {"total_atomic_experts", m.total_atomic_experts},
            {"quota", m.quota},
            {"pruned", keys(m.pruned)},
            {"skipped", keys(m.skipped)},
            {"remaining_channels", remaining}};
}

PruneManifest manifest_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "heapr-prune-manifest") throw DataError("not a prune manifest");
    PruneManifest m;
    m.ratio = j.at("ratio").get<double>();
    m.mode = rank_mode_from_string(j.at("mode").get<std::string>());
    m.method = j.at("method").get<std::string>();
    m.channel_floor = j.at("channel_floor").get<std::size_t>();
    m.total_atomic_experts = j.at("total_atomic_experts").get<std::size_t>();
    m.quota = j.at("quota").get<std::size_t>();
    auto keys = [](const nlohmann::json& arr) {
        std::vector<ScoredKey> v;
        for (const auto& e : arr) {
            v.push_back({{e.at("layer").get<std::size_t>(), e.at("expert").get<std::size_t>(),
                          e.at("channel").get<std::size_t>()},
                         e.at("score").get<double>()});
        }
        return v;
    };
    m.pruned = keys(j.at("pruned"));
    m.skipped = keys(j.at("skipped"));
    for (const auto& e : j.at("remaining_channels")) {
        m.remaining_channels[{e.at("layer").get<std::size_t>(), e.at("expert").get<std::size_t>()}] =
            e.at("channels").get<std::size_t>();
    }
    return m;
}

nlohmann::json covariances_to_json(const CovarianceSet& covs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : covs) {
        arr.push_back({{"layer", c.layer},
                       {"expert", c.expert},
                       {"token_count", c.token_count},
                       {"dim", c.g.rows()},
                       {"data", c.g.data()}});
    }
    return {{"format", "heapr-covariances"}, {"version", 1}, {"covariances", arr}};
}

CovarianceSet covariances_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "heapr-covariances") throw DataError("not a covariance file");
    CovarianceSet covs;
    for (const auto& e : j.at("covariances")) {
        const auto dim = e.at("dim").get<std::size_t>();
        covs.push_back({e.at("layer").get<std::size_t>(), e.at("expert").get<std::size_t>(),
                        Matrix(dim, dim, e.at("data").get<std::vector<double>>()),
                        e.at("token_count").get<std::size_t>()});
    }
    return covs;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

}  // namespace heapr
