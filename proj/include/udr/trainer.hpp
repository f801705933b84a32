#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "udr/bi_encoder.hpp"
#include "udr/bm25.hpp"
#include "udr/corpus.hpp"
#include "udr/feedback.hpp"
#include "udr/losses.hpp"
#include "udr/optimizer.hpp"
#include "udr/random.hpp"

namespace udr {

struct TrainConfig {
    double lambda = 0.8;
    double alpha = 0.5;
    double learning_rate = 1e-4;
    int warmup_steps = 500;
    int batch_size = 16;
    int l_sampled = 8;
    int k_candidates = 50;
    int iterations = 3;
    int epochs_initial = 30;
    int epochs_per_iteration = 10;
    std::uint64_t seed = 0;
    int dim = 32;
    double weight_decay = 0.0;
    double bm25_k1 = 1.2;
    double bm25_b = 0.75;
    // 0 derives ceil(total train examples / batch_size).
    int steps_per_epoch = 0;
    // 0 keeps every train example; otherwise a fixed seeded subset per task.
    int max_train_per_task = 0;
    int threads = 1;

    void validate() const {
        if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("lambda must lie in [0, 1]");
        if (alpha < 0) throw ConfigError("alpha must be >= 0");
        if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (l_sampled < 1 || k_candidates < 1) throw ConfigError("l_sampled and k_candidates must be >= 1");
        if (l_sampled > k_candidates) throw ConfigError("l_sampled must not exceed k_candidates");
        if (iterations < 0 || epochs_initial < 0 || epochs_per_iteration < 0)
            throw ConfigError("iterations and epoch counts must be >= 0");
        if (dim < 1) throw ConfigError("dim must be >= 1");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }

    nlohmann::ordered_json to_json() const {
        return {{"lambda", lambda},
                {"alpha", alpha},
                {"learning_rate", learning_rate},
                {"warmup_steps", warmup_steps},
                {"batch_size", batch_size},
                {"l_sampled", l_sampled},
                {"k_candidates", k_candidates},
                {"iterations", iterations},
                {"epochs_initial", epochs_initial},
                {"epochs_per_iteration", epochs_per_iteration},
                {"seed", seed},
                {"dim", dim},
                {"weight_decay", weight_decay},
                {"bm25_k1", bm25_k1},
                {"bm25_b", bm25_b},
                {"steps_per_epoch", steps_per_epoch},
                {"max_train_per_task", max_train_per_task},
                {"threads", threads}};
    }

    /// Fields absent from `j` keep their defaults; unknown fields are rejected.
    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        auto known = c.to_json();
        for (const auto& [key, _] : j.items())
            if (!known.contains(key)) throw ConfigError("unknown training config field '" + key + "'");
        try {
            c.lambda = j.value("lambda", c.lambda);
            c.alpha = j.value("alpha", c.alpha);
            c.learning_rate = j.value("learning_rate", c.learning_rate);
            c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
            c.batch_size = j.value("batch_size", c.batch_size);
            c.l_sampled = j.value("l_sampled", c.l_sampled);
            c.k_candidates = j.value("k_candidates", c.k_candidates);
            c.iterations = j.value("iterations", c.iterations);
            c.epochs_initial = j.value("epochs_initial", c.epochs_initial);
            c.epochs_per_iteration = j.value("epochs_per_iteration", c.epochs_per_iteration);
            c.seed = j.value("seed", c.seed);
            c.dim = j.value("dim", c.dim);
            c.weight_decay = j.value("weight_decay", c.weight_decay);
            c.bm25_k1 = j.value("bm25_k1", c.bm25_k1);
            c.bm25_b = j.value("bm25_b", c.bm25_b);
            c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
            c.max_train_per_task = j.value("max_train_per_task", c.max_train_per_task);
            c.threads = j.value("threads", c.threads);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad training config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

/// One query of a training batch with its sampled candidates and their ranks
/// among the sample.
struct SampledQuery {
    const Example* query = nullptr;
    std::vector<const Example*> candidates;
    std::vector<int> ranks;
};

struct BatchLoss {
    double total = 0;
    double rank = 0;
    double inbatch = 0;
    BiEncoderParams<double> grads;
};

/// lambda * mean_q L_rank(q) + (1 - lambda) * L_ib over a single-task batch,
/// with exact gradients for all four parameter matrices. The in-batch columns
/// are every sampled candidate of every query, in batch order; a query's
/// positive is its own rank-1 candidate.
template <typename T>
BatchLoss batch_objective(const BiEncoder<T>& model, const TaskSpec& spec, std::span<const SampledQuery> batch,
                          double lambda) {
    if (batch.empty()) throw ContractError("batch_objective: empty batch");
    const std::size_t rows = batch.size();
    std::vector<EncodingTape> queries;
    std::vector<EncodingTape> columns;
    std::vector<std::size_t> offsets, positives;
    for (const auto& q : batch) {
        if (q.candidates.empty() || q.candidates.size() != q.ranks.size())
            throw ContractError("batch_objective: each query needs ranked candidates");
        queries.push_back(model.encode_query(q.query->input, spec));
        offsets.push_back(columns.size());
        auto best = static_cast<std::size_t>(std::min_element(q.ranks.begin(), q.ranks.end()) - q.ranks.begin());
        positives.push_back(columns.size() + best);
        for (const auto* c : q.candidates) columns.push_back(model.encode_demo(*c, spec));
    }
    const std::size_t cols = columns.size();
    std::vector<double> sims(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) sims[r * cols + c] = dot(queries[r].output, columns[c].output);

    BatchLoss out;
    auto ib = loss_inbatch(sims, cols, positives);
    std::vector<double> grad_sims(rows * cols, 0.0);
    for (std::size_t i = 0; i < grad_sims.size(); ++i) grad_sims[i] = (1 - lambda) * ib.grad[i];
    for (std::size_t r = 0; r < rows; ++r) {
        const auto n = batch[r].candidates.size();
        auto own = std::span<const double>(sims).subspan(r * cols + offsets[r], n);
        auto lr = loss_rank(own, batch[r].ranks);
        out.rank += lr.value / static_cast<double>(rows);
        for (std::size_t k = 0; k < n; ++k) grad_sims[r * cols + offsets[r] + k] += lambda * lr.grad[k] / static_cast<double>(rows);
    }
    out.inbatch = ib.value;
    out.total = loss_total(out.rank, out.inbatch, lambda);

    const std::size_t d = model.params.dim;
    out.grads.dim = d;
    out.grads.query = zero_like(model.params.query);
    out.grads.demo = zero_like(model.params.demo);
    std::vector<std::vector<double>> grad_columns(cols, std::vector<double>(d, 0.0));
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<double> grad_query(d, 0.0);
        for (std::size_t c = 0; c < cols; ++c) {
            double g = grad_sims[r * cols + c];
            if (g == 0) continue;
            for (std::size_t k = 0; k < d; ++k) {
                grad_query[k] += g * columns[c].output[k];
                grad_columns[c][k] += g * queries[r].output[k];
            }
        }
        backward(model.params.query, queries[r], grad_query, out.grads.query);
    }
    for (std::size_t c = 0; c < cols; ++c) backward(model.params.demo, columns[c], grad_columns[c], out.grads.demo);
    return out;
}

struct StepRecord {
    std::int64_t step = 0;
    int iteration = 0;
    std::string task_id;
    double loss_total = 0;
    double loss_rank = 0;
    double loss_ib = 0;
};

struct IterationRecord {
    int iteration = 0;
    std::size_t queries = 0;
    double mean_candidates = 0;
    double new_candidate_fraction = 0;
    double mean_top_score = 0;
    std::size_t scorer_requests = 0;
    std::optional<double> recall;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<IterationRecord> iterations;
    double wall_clock_seconds = 0;

    nlohmann::ordered_json to_json() const {
        auto steps_json = nlohmann::ordered_json::array();
        for (const auto& s : steps)
            steps_json.push_back({{"step", s.step},
                                  {"iteration", s.iteration},
                                  {"task", s.task_id},
                                  {"loss_total", s.loss_total},
                                  {"loss_rank", s.loss_rank},
                                  {"loss_ib", s.loss_ib}});
        auto iters = nlohmann::ordered_json::array();
        for (const auto& it : iterations) {
            nlohmann::ordered_json j{{"iteration", it.iteration},
                                     {"queries", it.queries},
                                     {"mean_candidates", it.mean_candidates},
                                     {"new_candidate_fraction", it.new_candidate_fraction},
                                     {"mean_top_score", it.mean_top_score},
                                     {"scorer_requests", it.scorer_requests}};
            if (it.recall) j["candidate_recall"] = *it.recall;
            iters.push_back(std::move(j));
        }
        return {{"steps", steps_json}, {"iterations", iters}, {"wall_clock_seconds", wall_clock_seconds}};
    }
};

/// Samples l candidates per query (uniform, without replacement), ranks them
/// among themselves by their stored LM scores, and applies one AdamW update.
/// `step` is the global step index; it selects the warmup rate and the
/// per-step random stream.
template <typename T>
StepRecord train_step(BiEncoder<T>& model, const std::vector<Example>& batch, const CandidateStore& store,
                      const DatasetRegistry& registry, const TrainConfig& config, OptimizerState& optimizer,
                      std::int64_t step) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    const auto& task_id = batch.front().task_id;
    const auto& spec = registry.task(task_id);
    Rng rng = derive_rng(config.seed, 0x5354455000000000ULL + static_cast<std::uint64_t>(step));
    std::vector<SampledQuery> sampled;
    sampled.reserve(batch.size());
    for (const auto& ex : batch) {
        if (ex.task_id != task_id) throw ContractError("train_step: batch mixes tasks");
        auto it = store.find({ex.task_id, ex.example_id});
        if (it == store.end() || it->second.entries.empty())
            throw StateError("no scored candidates for query '" + ex.example_id + "' in task '" + ex.task_id + "'");
        const auto& entries = it->second.entries;
        SampledQuery q;
        q.query = &registry.at(ex.task_id, ex.example_id);
        std::vector<double> scores;
        for (auto i : sample_without_replacement(rng, entries.size(), static_cast<std::size_t>(config.l_sampled))) {
            q.candidates.push_back(&registry.at(ex.task_id, entries[i].candidate_id));
            scores.push_back(entries[i].log_score);
        }
        q.ranks = rank_candidates(scores);
        sampled.push_back(std::move(q));
    }
    auto loss = batch_objective(model, spec, sampled, config.lambda);
    double lr = warmup_learning_rate(config.learning_rate, step, config.warmup_steps);
    adamw_step(model.params, loss.grads, optimizer, lr, AdamWConfig{.weight_decay = config.weight_decay});
    return {step, 0, task_id, loss.total, loss.rank, loss.inbatch};
}

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(threads)) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Indices of the k largest scores, descending, ties by ascending index.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& scores, std::size_t k,
                                              std::optional<std::size_t> exclude = std::nullopt) {
    std::vector<std::size_t> order;
    order.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (i != exclude) order.push_back(i);
    auto cmp = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    k = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), cmp);
    order.resize(k);
    return order;
}

}  // namespace detail

/// Z* = top-K of the task's train split by sim(x, z), excluding x itself,
/// for every train example x of the task.
template <typename T>
std::map<std::string, std::vector<std::string>> mine_candidates(const BiEncoder<T>& model,
                                                                const DatasetRegistry& registry,
                                                                const std::string& task_id, std::size_t k,
                                                                int threads = 1) {
    const auto& spec = registry.task(task_id);
    const auto& split = registry.examples(task_id, Split::train);
    if (split.empty()) throw StateError("task '" + task_id + "' has no train examples to mine");
    std::vector<std::vector<double>> demos(split.size());
    detail::parallel_for(split.size(), threads, [&](std::size_t i) { demos[i] = model.encode_demo(split[i], spec).output; });
    std::vector<std::vector<std::string>> mined(split.size());
    detail::parallel_for(split.size(), threads, [&](std::size_t i) {
        auto q = model.encode_query(split[i].input, spec).output;
        std::vector<double> scores(split.size());
        for (std::size_t j = 0; j < split.size(); ++j) scores[j] = dot(q, demos[j]);
        for (auto j : detail::top_k_indices(scores, k, i)) mined[i].push_back(split[j].example_id);
    });
    std::map<std::string, std::vector<std::string>> out;
    for (std::size_t i = 0; i < split.size(); ++i) out.emplace(split[i].example_id, std::move(mined[i]));
    return out;
}

/// Optional hooks into a training run.
struct TrainOptions {
    /// Artifacts (config.json, candidates.iterN.jsonl, checkpoint.iterN.udr,
    /// report.json) are written here when non-empty.
    std::string run_dir;
    /// Measures candidate quality against external ground truth, recorded
    /// per iteration in the report.
    std::function<double(const CandidateStore&)> recall_probe;
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    BiEncoder<float> model;
    TrainReport report;
    std::vector<CandidateStore> candidate_history;
};

namespace detail {

inline CandidateStore score_all(const std::map<std::string, std::map<std::string, std::vector<std::string>>>& ids,
                                const DatasetRegistry& registry, const ScorerProvider& scorer, ScoreCache& cache,
                                int iteration, int threads, std::size_t& requests) {
    struct Job {
        const std::string* task;
        const std::string* query;
        const std::vector<std::string>* candidates;
    };
    std::vector<Job> jobs;
    for (const auto& [task, per_query] : ids)
        for (const auto& [query, cands] : per_query) jobs.push_back({&task, &query, &cands});
    std::vector<CandidateSet> sets(jobs.size());
    std::vector<std::size_t> calls(jobs.size(), 0);
    parallel_for(jobs.size(), threads, [&](std::size_t i) {
        const auto& q = registry.at(*jobs[i].task, *jobs[i].query);
        sets[i] = score_candidate_set(scorer(*jobs[i].task), q, *jobs[i].candidates, registry, cache, iteration, &calls[i]);
    });
    CandidateStore store;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        requests += calls[i];
        store.emplace(std::make_pair(*jobs[i].task, *jobs[i].query), std::move(sets[i]));
    }
    return store;
}

inline IterationRecord summarize(const CandidateStore& store, const CandidateStore* previous, int iteration,
                                 std::size_t requests) {
    IterationRecord rec;
    rec.iteration = iteration;
    rec.queries = store.size();
    rec.scorer_requests = requests;
    std::size_t total = 0, fresh = 0;
    for (const auto& [key, set] : store) {
        total += set.entries.size();
        double top = 0;
        for (const auto& e : set.entries)
            if (e.rank == 1) top = e.score;
        rec.mean_top_score += top;
        if (previous) {
            std::set<std::string> old;
            if (auto it = previous->find(key); it != previous->end())
                for (const auto& e : it->second.entries) old.insert(e.candidate_id);
            for (const auto& e : set.entries) fresh += old.count(e.candidate_id) ? 0 : 1;
        } else {
            fresh += set.entries.size();
        }
    }
    if (rec.queries) {
        rec.mean_candidates = static_cast<double>(total) / static_cast<double>(rec.queries);
        rec.mean_top_score /= static_cast<double>(rec.queries);
    }
    rec.new_candidate_fraction = total ? static_cast<double>(fresh) / static_cast<double>(total) : 0.0;
    return rec;
}

}  // namespace detail

/// Multi-task list-wise ranking training with iterative candidate mining:
///   initialize the encoder; seed candidates lexically and score them;
///   train for `epochs_initial`; then `iterations` times: mine top-K with the
///   current encoder, score the new lists, train for `epochs_per_iteration`.
/// Phase n writes candidates.iter<n>.jsonl and checkpoint.iter<n>.udr.
inline TrainResult train(DatasetRegistry registry, const ScorerProvider& scorer, const TrainConfig& config,
                         const TrainOptions& options = {}) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };
    if (config.max_train_per_task > 0) registry.cap_train_split(static_cast<std::size_t>(config.max_train_per_task), config.seed);
    const auto tasks = registry.trainable_tasks();
    if (tasks.empty()) throw ConfigError("no task has training data");

    namespace fs = std::filesystem;
    const bool persist = !options.run_dir.empty();
    if (persist) {
        fs::create_directories(options.run_dir);
        std::ofstream(fs::path(options.run_dir) / "config.json") << config.to_json().dump(2) << '\n';
    }

    TrainResult result;
    result.model.vocab = Vocabulary::build(registry);
    result.model.params = init_params<float>(result.model.vocab.size(), static_cast<std::size_t>(config.dim), config.seed);
    auto& model = result.model;
    auto optimizer = make_optimizer_state(model.params);
    ScoreCache cache;
    const auto k = static_cast<std::size_t>(config.k_candidates);

    // Lexical seeding: inputs for classification-style tasks, targets for generation.
    std::map<std::string, std::map<std::string, std::vector<std::string>>> initial;
    LexicalCandidateIndex lexical(registry, {config.bm25_k1, config.bm25_b});
    lexical.index_all();
    for (const auto& task : tasks)
        for (const auto& ex : registry.examples(task, Split::train)) initial[task][ex.example_id] = lexical.init_candidates(ex, k);

    std::size_t requests = 0;
    CandidateStore store = detail::score_all(initial, registry, scorer, cache, 0, config.threads, requests);

    auto sampler = build_sampler(registry, config.alpha);
    std::size_t total_train = 0;
    for (const auto& t : tasks) total_train += registry.examples(t, Split::train).size();
    const auto steps_per_epoch = config.steps_per_epoch > 0
                                     ? static_cast<std::int64_t>(config.steps_per_epoch)
                                     : static_cast<std::int64_t>((total_train + static_cast<std::size_t>(config.batch_size) - 1) /
                                                                 static_cast<std::size_t>(config.batch_size));
    std::int64_t global_step = 0;

    auto finish_candidates = [&](int iteration, const CandidateStore* previous) {
        auto rec = detail::summarize(store, previous, iteration, requests);
        if (options.recall_probe) rec.recall = options.recall_probe(store);
        result.report.iterations.push_back(rec);
        result.candidate_history.push_back(store);
        if (persist) {
            std::ofstream out(fs::path(options.run_dir) / ("candidates.iter" + std::to_string(iteration) + ".jsonl"));
            write_candidate_store(out, store);
        }
        log("iteration " + std::to_string(iteration) + ": " + std::to_string(store.size()) + " candidate sets" +
            (rec.recall ? ", recall " + std::to_string(*rec.recall) : std::string()));
    };

    auto run_phase = [&](int iteration, int epochs) {
        const std::int64_t steps = steps_per_epoch * epochs;
        for (std::int64_t s = 0; s < steps; ++s, ++global_step) {
            Rng rng = derive_rng(config.seed, 0x4241544300000000ULL + static_cast<std::uint64_t>(global_step));
            auto batch = sample_batch(sampler, registry, static_cast<std::size_t>(config.batch_size), rng);
            auto rec = train_step(model, batch, store, registry, config, optimizer, global_step);
            rec.iteration = iteration;
            result.report.steps.push_back(std::move(rec));
        }
        if (persist) save_checkpoint(model, (fs::path(options.run_dir) / ("checkpoint.iter" + std::to_string(iteration) + ".udr")).string());
        if (!result.report.steps.empty())
            log("phase " + std::to_string(iteration) + " done at step " + std::to_string(global_step) + ", loss " +
                std::to_string(result.report.steps.back().loss_total));
    };

    finish_candidates(0, nullptr);
    run_phase(0, config.epochs_initial);
    for (int it = 1; it <= config.iterations; ++it) {
        std::map<std::string, std::map<std::string, std::vector<std::string>>> mined;
        for (const auto& task : tasks) mined[task] = mine_candidates(model, registry, task, k, config.threads);
        requests = 0;
        CandidateStore previous = std::move(store);
        store = detail::score_all(mined, registry, scorer, cache, it, config.threads, requests);
        finish_candidates(it, &previous);
        run_phase(it, config.epochs_per_iteration);
    }

    result.report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (persist) std::ofstream(fs::path(options.run_dir) / "report.json") << result.report.to_json().dump(2) << '\n';
    return result;
}

}  // namespace udr
