#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "udr/corpus.hpp"
#include "udr/feedback.hpp"
#include "udr/inference.hpp"
#include "udr/random.hpp"

namespace udr::synthetic {

/// A task family where every example carries a latent key. The key is
/// written as one of several synonym tokens ("zk<key><letter>") at the start
/// of the input, followed by uniformly drawn noise words, so lexical overlap
/// says little about the key. Labels are a function of the key. Paired with
/// OracleScorer's default pattern, a demonstration is useful exactly when it
/// shares the query's key.
struct Config {
    int keys = 24;
    int synonyms = 4;
    int noise_vocab = 60;
    int noise_len = 6;
    int train_per_task = 240;
    int test_per_task = 60;
    bool include_generation = false;
    std::uint64_t seed = 7;
};

struct Fixture {
    DatasetRegistry registry;
    std::map<std::pair<std::string, std::string>, int> keys;

    int key(const std::string& task, const std::string& id) const { return keys.at({task, id}); }
    bool same_key(const std::string& task, const std::string& a, const std::string& b) const {
        return key(task, a) == key(task, b);
    }
};

inline std::vector<TaskSpec> task_specs(const Config& config) {
    std::vector<TaskSpec> specs;
    TaskSpec sentiment;
    sentiment.task_id = "sentiment";
    sentiment.name = "synthetic sentiment";
    sentiment.kind = TaskKind::classification;
    sentiment.instruction = "Classify the sentiment of the review";
    sentiment.verbalizers = {"great", "terrible"};
    sentiment.templ = {"Review: {input}\nIt was {target}.", "Review: {input}\nIt was", "\n\n"};
    sentiment.max_target_len = 1;
    sentiment.context_budget = 256;
    specs.push_back(sentiment);

    TaskSpec topic;
    topic.task_id = "topic";
    topic.name = "synthetic topic";
    topic.kind = TaskKind::classification;
    topic.instruction = "Identify the topic of the text";
    topic.verbalizers = {"sports", "science", "politics", "music"};
    topic.templ = {"Text: {input}\nTopic: {target}", "Text: {input}\nTopic:", "\n\n"};
    topic.max_target_len = 1;
    topic.context_budget = 256;
    specs.push_back(topic);

    if (config.include_generation) {
        TaskSpec gen;
        gen.task_id = "recall";
        gen.name = "synthetic keyed recall";
        gen.kind = TaskKind::generation;
        gen.instruction = "Produce the code word for the input";
        gen.templ = {"Input: {input}\nOutput: {target}", "Input: {input}\nOutput:", "\n\n"};
        gen.max_target_len = 4;
        gen.context_budget = 96;
        specs.push_back(gen);
    }
    return specs;
}

inline std::string target_for(const TaskSpec& spec, int key) {
    if (spec.kind == TaskKind::generation) return "code" + std::to_string(key);
    return spec.verbalizers[static_cast<std::size_t>(key) % spec.verbalizers.size()];
}

inline Fixture generate(const Config& config = {}) {
    Fixture fx;
    std::uint64_t salt = 0;
    for (const auto& spec : task_specs(config)) {
        fx.registry.add_task(spec);
        Rng rng = derive_rng(config.seed, ++salt);
        auto make_split = [&](Split split, int count, const std::string& prefix) {
            std::vector<int> keys(static_cast<std::size_t>(count));
            for (int i = 0; i < count; ++i) keys[static_cast<std::size_t>(i)] = i % config.keys;
            shuffle(keys, rng);
            for (int i = 0; i < count; ++i) {
                int key = keys[static_cast<std::size_t>(i)];
                std::string input = "zk" + std::to_string(key) +
                                    static_cast<char>('a' + uniform_index(rng, static_cast<std::size_t>(config.synonyms)));
                for (int w = 0; w < config.noise_len; ++w)
                    input += " w" + std::to_string(uniform_index(rng, static_cast<std::size_t>(config.noise_vocab)));
                Example e{spec.task_id, prefix + std::to_string(i), input, target_for(spec, key), std::nullopt};
                fx.keys[{spec.task_id, e.example_id}] = key;
                fx.registry.add_example(std::move(e), split);
            }
        };
        make_split(Split::train, config.train_per_task, "tr");
        make_split(Split::test, config.test_per_task, "te");
    }
    return fx;
}

/// Mean over queries of |Z ∩ B| / min(|Z|, |B|), where B holds the train
/// examples sharing the query's key (the oracle's best candidates).
inline double candidate_recall(const Fixture& fx, const CandidateStore& store) {
    double total = 0;
    std::size_t n = 0;
    for (const auto& [key, set] : store) {
        const auto& [task, query] = key;
        std::size_t best = 0;
        for (const auto& e : fx.registry.examples(task, Split::train))
            if (e.example_id != query && fx.same_key(task, query, e.example_id)) ++best;
        if (best == 0 || set.entries.empty()) continue;
        std::size_t hit = 0;
        for (const auto& c : set.entries) hit += fx.same_key(task, query, c.candidate_id) ? 1 : 0;
        total += static_cast<double>(hit) / static_cast<double>(std::min(best, set.entries.size()));
        ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
}

/// Fraction of test queries whose top-1 retrieved demonstration shares the
/// query's key.
inline double top1_agreement(const Fixture& fx, const DemoRetriever& retriever) {
    std::size_t agree = 0, n = 0;
    for (const auto& [task, spec] : fx.registry.tasks())
        for (const auto& q : fx.registry.examples(task, Split::test)) {
            auto hits = retriever.retrieve(q, 1);
            ++n;
            if (!hits.empty() && fx.same_key(task, q.example_id, hits.front().id)) ++agree;
        }
    return n ? static_cast<double>(agree) / static_cast<double>(n) : 0.0;
}

/// Pooled test accuracy over every task of the fixture.
inline double icl_accuracy(const Fixture& fx, const DemoRetriever& retriever, const Scorer& scorer,
                           const IclOptions& options = {}) {
    std::size_t correct = 0, n = 0;
    for (const auto& [task, spec] : fx.registry.tasks()) {
        auto run = run_icl(fx.registry, retriever, scorer, task, Split::test, options);
        correct += run.result.correct;
        n += run.result.n;
    }
    return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

}  // namespace udr::synthetic
