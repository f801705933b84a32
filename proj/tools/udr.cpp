// udr: command-line front end for training and serving demonstration retrievers.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "udr/remote_scorer.hpp"
#include "udr/synthetic.hpp"
#include "udr/udr.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kInputError = 2, kMissingArtifact = 3, kInternalError = 4 };

struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int log_level() {
    static const int level = [] {
        const char* env = std::getenv("UDR_LOG");
        std::string v = env ? env : "info";
        if (v == "error") return 0;
        if (v == "warn") return 1;
        if (v == "debug") return 3;
        return 2;
    }();
    return level;
}

void log(int level, const std::string& msg) {
    static const char* names[] = {"error", "warn", "info", "debug"};
    if (level <= log_level()) std::cerr << "[udr " << names[level] << "] " << msg << '\n';
}

std::string require_artifact(const std::string& path, const std::string& what) {
    if (path.empty() || !fs::exists(path)) throw MissingArtifact(what + " not found: '" + path + "'");
    return path;
}

// Options shared by every command that reads a dataset.
struct DataArgs {
    std::string prepared;
    std::string registry;
    std::vector<std::string> data;

    void add(CLI::App* cmd) {
        cmd->add_option("--prepared", prepared, "Directory written by 'udr prepare'");
        cmd->add_option("--registry", registry, "Task registry JSON");
        cmd->add_option("--data", data, "Example JSONL, optionally prefixed with a split: [train=|dev=|test=]path");
    }

    udr::DatasetRegistry load(ordered_json* inputs = nullptr) const {
        std::string reg = registry;
        std::vector<std::pair<udr::Split, std::string>> files;
        if (!prepared.empty()) {
            require_artifact(prepared, "prepared directory");
            if (reg.empty()) reg = (fs::path(prepared) / "registry.json").string();
            for (auto split : {udr::Split::train, udr::Split::dev, udr::Split::test}) {
                auto p = fs::path(prepared) / (std::string(udr::to_string(split)) + ".jsonl");
                if (fs::exists(p)) files.emplace_back(split, p.string());
            }
        }
        for (const auto& d : data) {
            auto eq = d.find('=');
            if (eq != std::string::npos && eq < 6) files.emplace_back(udr::parse_split(d.substr(0, eq)), d.substr(eq + 1));
            else files.emplace_back(udr::Split::train, d);
        }
        if (reg.empty()) throw udr::ConfigError("a registry is required (--registry or --prepared)");
        auto registry_out = udr::load_registry(reg);
        if (inputs) (*inputs)["registry"] = reg;
        for (const auto& [split, path] : files) {
            if (!fs::exists(path)) throw udr::ConfigError("data file not found: '" + path + "'");
            try {
                auto n = udr::load_jsonl(path, registry_out, split);
                log(3, "loaded " + std::to_string(n) + " " + std::string(udr::to_string(split)) + " examples from " + path);
            } catch (const udr::Error& e) {
                throw udr::ParseError(path + ": " + e.what());
            }
            if (inputs) (*inputs)["data"].push_back({{"split", udr::to_string(split)}, {"path", path}});
        }
        return registry_out;
    }
};

struct ScorerArgs {
    std::string kind = "oracle";
    std::string remote_url;
    std::string oracle_pattern = udr::OracleScorer::Config{}.key_pattern;
    int ngram_order = 2;
    double ngram_smoothing = 0.1;

    void add(CLI::App* cmd) {
        cmd->add_option("--scorer", kind, "Likelihood scorer")->check(CLI::IsMember({"oracle", "ngram", "remote"}));
        cmd->add_option("--remote-url", remote_url, "Base URL of the likelihood service (with --scorer remote)");
        cmd->add_option("--oracle-pattern", oracle_pattern, "Key-token regex for the oracle scorer");
        cmd->add_option("--ngram-order", ngram_order, "n-gram order");
        cmd->add_option("--ngram-smoothing", ngram_smoothing, "Additive smoothing for the n-gram scorer");
    }
};

// Owns whichever scorer the flags select.
class ScorerHolder {
  public:
    ScorerHolder(const ScorerArgs& args, const udr::DatasetRegistry& registry) {
        if (args.kind == "oracle") {
            udr::OracleScorer::Config cfg;
            cfg.key_pattern = args.oracle_pattern;
            shared_ = std::make_unique<udr::OracleScorer>(cfg);
        } else if (args.kind == "remote") {
            if (args.remote_url.empty()) throw udr::ConfigError("--scorer remote requires --remote-url");
            shared_ = std::make_unique<udr::RemoteScorer>(args.remote_url);
        } else {
            bank_ = std::make_unique<udr::NGramScorerBank>(registry, args.ngram_order, args.ngram_smoothing);
        }
    }

    udr::ScorerProvider provider() const {
        if (bank_) return bank_->provider();
        return udr::shared_scorer(*shared_);
    }

    const udr::Scorer& at(const std::string& task) const { return bank_ ? bank_->at(task) : *shared_; }

  private:
    std::unique_ptr<udr::Scorer> shared_;
    std::unique_ptr<udr::NGramScorerBank> bank_;
};

std::string utc_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Written before any long computation; enough to replay the run.
void write_manifest(const std::string& dir, const std::string& command, const std::vector<std::string>& argv,
                    const ordered_json& config, const ordered_json& inputs, const ordered_json& outputs,
                    std::uint64_t seed) {
    fs::create_directories(dir);
    ordered_json m{{"command", command}, {"argv", argv},     {"config", config},          {"inputs", inputs},
                   {"outputs", outputs}, {"seed", seed},     {"version", kVersion},       {"started_at", utc_now()}};
    std::ofstream(fs::path(dir) / "manifest.json") << m.dump(2) << '\n';
}

struct RetrieverArgs {
    std::string kind = "dense";
    std::string checkpoint;
    std::string index_dir;

    void add(CLI::App* cmd) {
        cmd->add_option("--retriever", kind, "Demonstration retriever")->check(CLI::IsMember({"random", "bm25", "dense"}));
        cmd->add_option("--checkpoint", checkpoint, "Bi-encoder checkpoint (.udr) for the dense retriever");
        cmd->add_option("--index-dir", index_dir, "Directory of <task>.udx indexes; rebuilt from the checkpoint when omitted");
    }

    std::unique_ptr<udr::DemoRetriever> make(const udr::DatasetRegistry& registry, std::uint64_t seed) const {
        if (kind == "random") return std::make_unique<udr::RandomRetriever>(registry, seed);
        if (kind == "bm25") return std::make_unique<udr::Bm25Retriever>(registry);
        auto model = udr::load_checkpoint(require_artifact(checkpoint, "checkpoint"));
        if (index_dir.empty()) return std::make_unique<udr::DenseRetriever>(udr::DenseRetriever::build(registry, std::move(model)));
        std::map<std::string, udr::DenseIndex> indexes;
        for (const auto& task : registry.trainable_tasks())
            indexes.emplace(task, udr::load_index(require_artifact((fs::path(index_dir) / (task + ".udx")).string(), "dense index")));
        return std::make_unique<udr::DenseRetriever>(registry, std::move(model), std::move(indexes));
    }
};

std::vector<std::string> selected_tasks(const udr::DatasetRegistry& registry, const std::string& only) {
    if (!only.empty()) {
        registry.task(only);
        return {only};
    }
    std::vector<std::string> out;
    for (const auto& [id, _] : registry.tasks()) out.push_back(id);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Demonstration retrieval toolkit: train an instruction-conditioned bi-encoder from LM feedback and "
                 "retrieve in-context demonstrations"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string out;

    // prepare
    auto* prepare = app.add_subcommand("prepare", "Validate a registry and datasets; write canonical copies");
    DataArgs prepare_data;
    prepare_data.add(prepare);
    int cap = 0;
    prepare->add_option("--out", out, "Output directory")->required();
    prepare->add_option("--max-train-per-task", cap, "Keep a fixed seeded subset of at most N train examples per task");
    prepare->add_option("--seed", seed, "Seed for subsetting");

    // synth
    auto* synth = app.add_subcommand("synth", "Write the synthetic latent-key fixture");
    udr::synthetic::Config synth_cfg;
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--seed", synth_cfg.seed, "Fixture seed");
    synth->add_option("--keys", synth_cfg.keys, "Number of latent keys per task");
    synth->add_option("--train-per-task", synth_cfg.train_per_task);
    synth->add_option("--test-per-task", synth_cfg.test_per_task);
    synth->add_flag("--generation", synth_cfg.include_generation, "Also emit a generation task");

    // train
    auto* train = app.add_subcommand("train", "Run list-wise ranking training with iterative candidate mining");
    DataArgs train_data;
    train_data.add(train);
    ScorerArgs train_scorer;
    train_scorer.add(train);
    std::string config_path;
    std::optional<int> iterations;
    std::optional<std::uint64_t> train_seed;
    std::optional<int> threads;
    train->add_option("--config", config_path, "Training config JSON; flags override its fields");
    train->add_option("--seed", train_seed, "Random seed");
    train->add_option("--iterations", iterations, "Mining iterations after the initial phase");
    train->add_option("--threads", threads, "Worker threads for scoring and mining");
    train->add_option("--out", out, "Run directory")->required();

    // index
    auto* index = app.add_subcommand("index", "Encode train splits into dense indexes");
    DataArgs index_data;
    index_data.add(index);
    std::string checkpoint, only_task;
    index->add_option("--checkpoint", checkpoint, "Bi-encoder checkpoint")->required();
    index->add_option("--task", only_task, "Only this task");
    index->add_option("--out", out, "Output directory for <task>.udx files")->required();

    // retrieve / evaluate / baseline share most options
    struct ServeArgs {
        DataArgs data;
        RetrieverArgs retriever;
        ScorerArgs scorer;
        std::string split = "test";
        std::string order = "ascending";
        std::string task;
        std::size_t k = 64;
        std::optional<std::size_t> max_demos;
    };
    ServeArgs retrieve_args, evaluate_args, baseline_args;
    auto add_serve = [&](CLI::App* cmd, ServeArgs& a, bool with_scorer) {
        a.data.add(cmd);
        a.retriever.add(cmd);
        if (with_scorer) a.scorer.add(cmd);
        cmd->add_option("--split", a.split, "Split holding the test inputs")->check(CLI::IsMember({"train", "dev", "test"}));
        cmd->add_option("--order", a.order, "Demonstration order")->check(CLI::IsMember({"ascending", "descending", "random"}));
        cmd->add_option("--task", a.task, "Only this task");
        cmd->add_option("--k", a.k, "Candidates retrieved before budget selection");
        cmd->add_option("--max-demos", a.max_demos, "Demonstration cap (default 8 for classification, budget for generation)");
        cmd->add_option("--seed", seed, "Seed for random retrieval and random ordering");
        cmd->add_option("--out", out, "Output path");
    };
    auto* retrieve = app.add_subcommand("retrieve", "Retrieve demonstrations and emit assembled prompts as JSONL");
    add_serve(retrieve, retrieve_args, false);
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate in-context predictions with a retriever and scorer");
    add_serve(evaluate, evaluate_args, true);
    auto* baseline = app.add_subcommand("baseline", "Retrieve and evaluate with a baseline or dense retriever");
    add_serve(baseline, baseline_args, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kOk : kInputError;
    }

    try {
        if (*prepare) {
            ordered_json inputs;
            write_manifest(out, "prepare", args, {{"max_train_per_task", cap}}, {}, {{"dir", out}}, seed);
            auto registry = prepare_data.load(&inputs);
            if (cap > 0) registry.cap_train_split(static_cast<std::size_t>(cap), seed);
            std::ofstream(fs::path(out) / "registry.json") << registry.tasks_json().dump(2) << '\n';
            ordered_json report{{"inputs", inputs}, {"tasks", ordered_json::array()}};
            for (auto split : {udr::Split::train, udr::Split::dev, udr::Split::test}) {
                std::vector<udr::Example> all;
                for (const auto& [id, _] : registry.tasks()) {
                    const auto& ex = registry.examples(id, split);
                    all.insert(all.end(), ex.begin(), ex.end());
                }
                if (all.empty()) continue;
                std::ofstream f(fs::path(out) / (std::string(udr::to_string(split)) + ".jsonl"));
                udr::write_jsonl(f, all);
            }
            for (const auto& [id, spec] : registry.tasks())
                report["tasks"].push_back({{"task_id", id},
                                           {"train", registry.examples(id, udr::Split::train).size()},
                                           {"dev", registry.examples(id, udr::Split::dev).size()},
                                           {"test", registry.examples(id, udr::Split::test).size()}});
            report["valid"] = true;
            std::ofstream(fs::path(out) / "prepare_report.json") << report.dump(2) << '\n';
            log(2, "prepared " + std::to_string(registry.tasks().size()) + " tasks into " + out);
        } else if (*synth) {
            auto fx = udr::synthetic::generate(synth_cfg);
            fs::create_directories(out);
            std::ofstream(fs::path(out) / "registry.json") << fx.registry.tasks_json().dump(2) << '\n';
            for (auto split : {udr::Split::train, udr::Split::test}) {
                std::ofstream f(fs::path(out) / (std::string(udr::to_string(split)) + ".jsonl"));
                for (const auto& [id, _] : fx.registry.tasks()) udr::write_jsonl(f, fx.registry.examples(id, split));
            }
            log(2, "wrote synthetic fixture to " + out);
        } else if (*train) {
            udr::TrainConfig config;
            if (!config_path.empty()) {
                std::ifstream in(require_artifact(config_path, "config file"));
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(in);
                } catch (const nlohmann::json::parse_error& e) {
                    throw udr::ParseError(std::string("config is not valid JSON: ") + e.what());
                }
                config = udr::TrainConfig::from_json(j);
            }
            if (train_seed) config.seed = *train_seed;
            if (iterations) config.iterations = *iterations;
            if (threads) config.threads = *threads;
            config.validate();
            ordered_json inputs;
            auto registry = train_data.load(&inputs);
            inputs["scorer"] = train_scorer.kind;
            write_manifest(out, "train", args, config.to_json(), inputs, {{"run_dir", out}}, config.seed);
            ScorerHolder scorer(train_scorer, registry);
            udr::TrainOptions options;
            options.run_dir = out;
            options.log = [](const std::string& m) { log(2, m); };
            auto result = udr::train(registry, scorer.provider(), config, options);
            log(2, "training finished in " + std::to_string(result.report.wall_clock_seconds) + " s");
        } else if (*index) {
            auto registry = index_data.load();
            auto model = udr::load_checkpoint(require_artifact(checkpoint, "checkpoint"));
            fs::create_directories(out);
            for (const auto& task : selected_tasks(registry, only_task)) {
                if (registry.examples(task, udr::Split::train).empty()) continue;
                auto idx = udr::build_dense_index(model, registry, task);
                udr::save_index(idx, (fs::path(out) / (task + ".udx")).string());
                log(2, "indexed " + std::to_string(idx.size()) + " examples of task " + task);
            }
        } else if (*retrieve || *evaluate || *baseline) {
            const bool emit_prompts = *retrieve || *baseline;
            const bool emit_metrics = *evaluate || *baseline;
            auto& a = *retrieve ? retrieve_args : *evaluate ? evaluate_args : baseline_args;
            auto registry = a.data.load();
            auto retriever = a.retriever.make(registry, seed);
            std::unique_ptr<ScorerHolder> scorer;
            if (emit_metrics) scorer = std::make_unique<ScorerHolder>(a.scorer, registry);
            udr::IclOptions options;
            options.order = {udr::parse_order(a.order), seed};
            options.pool = a.k;
            options.max_demos = a.max_demos;
            const auto split = udr::parse_split(a.split);

            std::string prompts_path = out, metrics_path;
            if (*baseline) {
                if (out.empty()) throw udr::ConfigError("baseline requires --out <directory>");
                fs::create_directories(out);
                prompts_path = (fs::path(out) / "retrieval.jsonl").string();
                metrics_path = (fs::path(out) / "metrics.json").string();
            } else if (*evaluate) {
                metrics_path = out;
            }
            std::ofstream prompts_file;
            if (emit_prompts && !prompts_path.empty()) prompts_file.open(prompts_path);
            std::ostream& prompts = prompts_file.is_open() ? prompts_file : std::cout;

            ordered_json metrics{{"retriever", retriever->name()}, {"split", a.split}, {"order", a.order}, {"tasks", ordered_json::object()}};
            for (const auto& task : selected_tasks(registry, a.task)) {
                const auto& spec = registry.task(task);
                const auto& queries = registry.examples(task, split);
                if (queries.empty()) continue;
                if (emit_metrics) {
                    auto run = udr::run_icl(registry, *retriever, scorer->at(task), task, split, options);
                    if (emit_prompts)
                        for (std::size_t i = 0; i < queries.size(); ++i)
                            prompts << udr::plan_to_json(run.plans[i], queries[i].example_id).dump() << '\n';
                    metrics["tasks"][task] = {{"metric", udr::to_string(run.result.metric)},
                                              {"value", run.result.value},
                                              {"correct", run.result.correct},
                                              {"n", run.result.n}};
                } else {
                    // Prompts only: no scorer needed.
                    for (const auto& q : queries) {
                        auto hits = retriever->retrieve(q, options.pool);
                        std::vector<udr::Example> ranked;
                        for (const auto& h : hits) ranked.push_back(registry.at(task, h.id));
                        auto sel = udr::select_demonstrations(ranked, spec, q.input, options.max_demos);
                        std::vector<udr::Example> chosen;
                        std::vector<double> scores;
                        for (auto i : sel.chosen) {
                            chosen.push_back(ranked[i]);
                            scores.push_back(hits[i].score);
                        }
                        udr::OrderSpec order = options.order;
                        order.seed = udr::derive_rng(seed, udr::Fnv1a().update(q.example_id).digest())();
                        auto plan = udr::assemble_prompt(udr::order_demonstrations(std::move(chosen), scores, order), q.input,
                                                         spec, order.strategy);
                        prompts << udr::plan_to_json(plan, q.example_id).dump() << '\n';
                    }
                }
            }
            if (emit_metrics) {
                if (metrics_path.empty()) std::cout << metrics.dump(2) << '\n';
                else std::ofstream(metrics_path) << metrics.dump(2) << '\n';
            }
        }
    } catch (const MissingArtifact& e) {
        log(0, e.what());
        return kMissingArtifact;
    } catch (const udr::StateError& e) {
        log(0, e.what());
        return kMissingArtifact;
    } catch (const udr::ParseError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const udr::RegistryError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const udr::TemplateError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const udr::ConfigError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const udr::DataError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const udr::BudgetError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const udr::FormatError& e) {
        log(0, e.what());
        return kInputError;
    } catch (const std::exception& e) {
        log(0, std::string("internal error: ") + e.what());
        return kInternalError;
    }
    return kOk;
}
