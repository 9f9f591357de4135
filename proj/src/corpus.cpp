#include "heapr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "heapr/rng.hpp"

namespace heapr {

void CorpusSpec::validate() const {
    if (vocab < 2) throw ArgumentError("corpus vocab must be >= 2");
    if (seq_len < 2) throw ArgumentError("corpus seq_len must be >= 2");
    if (num_sequences < 1) throw ArgumentError("corpus needs at least one sequence");
    for (double f : {train_fraction, calib_fraction, test_fraction}) {
        if (f < 0.0 || f > 1.0) throw ArgumentError("split fractions must lie in [0, 1]");
    }
    if (std::abs(train_fraction + calib_fraction + test_fraction - 1.0) > 1e-9) {
        throw ArgumentError("split fractions must sum to 1");
    }
}

Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    const std::size_t v = spec.vocab;
    SeededRng rng(spec.seed);

    Matrix first(v, v);
    for (double& x : first.data()) x = spec.first_order_scale * rng.normal();
    // cumulative transition table, indexed [a * v + b][c]
    Matrix cdf(v * v, v);
    for (std::size_t a = 0; a < v; ++a) {
        for (std::size_t b = 0; b < v; ++b) {
            auto row = cdf.row(a * v + b);
            for (std::size_t c = 0; c < v; ++c) row[c] = first(b, c) + spec.second_order_scale * rng.normal();
            Vector p = softmax(row);
            double acc = 0.0;
            for (std::size_t c = 0; c < v; ++c) {
                acc += p[c];
                row[c] = acc;
            }
            row[v - 1] = 1.0;
        }
    }

    Batch all;
    all.reserve(spec.num_sequences);
    for (std::size_t s = 0; s < spec.num_sequences; ++s) {
        Sequence seq(spec.seq_len);
        seq[0] = static_cast<TokenId>(rng.below(v));
        seq[1] = static_cast<TokenId>(rng.below(v));
        for (std::size_t p = 2; p < spec.seq_len; ++p) {
            auto row = cdf.row(seq[p - 2] * v + seq[p - 1]);
            const double u = rng.uniform();
            const auto it = std::lower_bound(row.begin(), row.end(), u);
            seq[p] = static_cast<TokenId>(std::min<std::size_t>(it - row.begin(), v - 1));
        }
        all.push_back(std::move(seq));
    }

    const auto n = static_cast<double>(spec.num_sequences);
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * n));
    const auto n_calib = std::min(static_cast<std::size_t>(std::llround(spec.calib_fraction * n)),
                                  spec.num_sequences - n_train);

    Corpus c;
    c.spec = spec;
    c.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    c.calib.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                   all.begin() + static_cast<std::ptrdiff_t>(n_train + n_calib));
    const std::set<Sequence> calib_set(c.calib.begin(), c.calib.end());
    for (auto it = all.begin() + static_cast<std::ptrdiff_t>(n_train + n_calib); it != all.end(); ++it) {
        if (calib_set.contains(*it)) {
            ++c.dropped_duplicates;
            continue;
        }
        c.test.push_back(*it);
    }
    return c;
}

double unigram_entropy(const Batch& seqs, std::size_t vocab) {
    std::vector<double> counts(vocab, 0.0);
    double total = 0.0;
    for (const auto& s : seqs) {
        for (TokenId t : s) {
            if (t >= vocab) throw DataError("token id outside vocabulary");
            counts[t] += 1.0;
            total += 1.0;
        }
    }
    if (total == 0.0) return 0.0;
    double h = 0.0;
    for (double c : counts)
        if (c > 0.0) h -= (c / total) * std::log(c / total);
    return h;
}

nlohmann::json corpus_to_json(const Corpus& corpus) {
    const auto& s = corpus.spec;
    return {{"format", "heapr-corpus"},
            {"version", 1},
            {"spec",
             {{"vocab", s.vocab},
              {"seed", s.seed},
              {"num_sequences", s.num_sequences},
              {"seq_len", s.seq_len},
              {"train_fraction", s.train_fraction},
              {"calib_fraction", s.calib_fraction},
              {"test_fraction", s.test_fraction},
              {"first_order_scale", s.first_order_scale},
              {"second_order_scale", s.second_order_scale}}},
            {"dropped_duplicates", corpus.dropped_duplicates},
            {"train", corpus.train},
            {"calib", corpus.calib},
            {"test", corpus.test}};
}

Corpus corpus_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "heapr-corpus") throw DataError("not a corpus file");
    Corpus c;
    const auto& s = j.at("spec");
    c.spec.vocab = s.at("vocab").get<std::size_t>();
    c.spec.seed = s.at("seed").get<std::uint64_t>();
    c.spec.num_sequences = s.at("num_sequences").get<std::size_t>();
    c.spec.seq_len = s.at("seq_len").get<std::size_t>();
    c.spec.train_fraction = s.at("train_fraction").get<double>();
    c.spec.calib_fraction = s.at("calib_fraction").get<double>();
    c.spec.test_fraction = s.at("test_fraction").get<double>();
    c.spec.first_order_scale = s.at("first_order_scale").get<double>();
    c.spec.second_order_scale = s.at("second_order_scale").get<double>();
    c.dropped_duplicates = j.value("dropped_duplicates", std::size_t{0});
    c.train = j.at("train").get<Batch>();
    c.calib = j.at("calib").get<Batch>();
    c.test = j.at("test").get<Batch>();
    return c;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << corpus_to_json(corpus).dump() << '\n';
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return corpus_from_json(j);
}

}  // namespace heapr
