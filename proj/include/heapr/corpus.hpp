#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "heapr/moe_model.hpp"

namespace heapr {

struct CorpusSpec {
    std::size_t vocab = 64;
    std::uint64_t seed = 0;
    std::size_t num_sequences = 8192;
    std::size_t seq_len = 64;
    double train_fraction = 0.75;
    double calib_fraction = 0.125;
    double test_fraction = 0.125;
    // Transition logits are first_order_scale * u[b][c] + second_order_scale * w[a][b][c]
    // with standard normal u, w; larger scales concentrate the transition mass.
    double first_order_scale = 2.5;
    double second_order_scale = 1.0;

    void validate() const;
};

struct Corpus {
    CorpusSpec spec;
    Batch train;
    Batch calib;
    Batch test;
    std::size_t dropped_duplicates = 0;  // test sequences removed because they also occur in calib
};

// Order-2 Markov chain sampled from a seeded, skewed transition table.
Corpus generate_corpus(const CorpusSpec& spec);

// Plug-in unigram entropy (nats) of the tokens in `seqs`.
double unigram_entropy(const Batch& seqs, std::size_t vocab);

nlohmann::json corpus_to_json(const Corpus& corpus);
Corpus corpus_from_json(const nlohmann::json& j);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace heapr
