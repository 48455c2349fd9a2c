#include "klm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "klm/checkpoint.hpp"
#include "klm/corpus.hpp"
#include "klm/kg.hpp"
#include "klm/model.hpp"
#include "klm/partition.hpp"
#include "klm/trainer.hpp"

namespace klm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string config_hash(const json& effective) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(effective.dump())));
    return buf;
}

void log_event(const std::string& event, const json& effective,
               std::chrono::steady_clock::time_point start, json extra = json::object()) {
    auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                  .count();
    json line = {{"event", event}, {"config_hash", config_hash(effective)}, {"wall_ms", ms}};
    line.update(extra);
    std::cerr << line.dump() << '\n';
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config root must be a JSON object: " + path);
    return j;
}

// flag (if given on the command line) > config file > built-in default
template <class T>
T pick(const CLI::Option* opt, const T& flag_val, const json& file, const char* key,
       const T& dflt) {
    if (opt && opt->count() > 0) return flag_val;
    if (file.contains(key)) return file.at(key).get<T>();
    return dflt;
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& dflt) {
    TrainConfig c = dflt;
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.seed = j.value("seed", c.seed);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.bottleneck = j.value("bottleneck", c.bottleneck);
    if (j.contains("metric")) c.metric = parse_metric(j.at("metric").get<std::string>());
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"patience", c.patience},
            {"batch_size", c.batch_size},
            {"peak_lr", c.peak_lr},
            {"warmup_fraction", c.warmup_fraction},
            {"max_seq_len", c.max_seq_len},
            {"seed", c.seed},
            {"grad_clip", c.grad_clip},
            {"validation_fraction", c.validation_fraction},
            {"bottleneck", c.bottleneck},
            {"metric", to_string(c.metric)}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    c.layers = j.value("layers", c.layers);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.ffn = j.value("ffn", c.ffn);
    c.vocab = j.value("vocab", c.vocab);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.dropout = j.value("dropout", c.dropout);
    return c;
}

json encoder_config_to_json(const EncoderConfig& c) {
    return {{"layers", c.layers},   {"hidden", c.hidden},
            {"heads", c.heads},     {"ffn", c.ffn},
            {"vocab", c.vocab},     {"max_positions", c.max_positions},
            {"dropout", c.dropout}};
}

json read_manifest(const std::string& ckpt_path) {
    std::ifstream in(ckpt_path + ".json");
    if (!in) throw std::runtime_error("missing manifest: " + ckpt_path + ".json");
    json j;
    in >> j;
    return j;
}

struct LoadedBase {
    EncoderModel model;
    uint64_t seed = 0;
};

LoadedBase load_base(const std::string& out_dir) {
    std::string path = out_dir + "/checkpoints/base.klmc";
    json man = read_manifest(path);
    EncoderConfig cfg = encoder_config_from_json(man.at("encoder"));
    uint64_t seed = man.value("seed", 0ull);
    LoadedBase b{build_encoder(cfg, seed), seed};
    load_checkpoint_into(path, b.model.named_params());
    b.model.set_requires_grad(false);
    return b;
}

struct LoadedAdapter {
    AdapterModule module;
    std::string path;
};

std::vector<LoadedAdapter> load_adapters(const std::string& out_dir, const EncoderConfig& cfg) {
    std::vector<std::string> files;
    fs::path dir = fs::path(out_dir) / "checkpoints";
    if (fs::exists(dir))
        for (const auto& e : fs::directory_iterator(dir)) {
            std::string name = e.path().filename().string();
            if (name.rfind("adapter_", 0) == 0 && name.size() > 5 &&
                name.substr(name.size() - 5) == ".klmc")
                files.push_back(e.path().string());
        }
    std::sort(files.begin(), files.end());
    std::vector<LoadedAdapter> out;
    for (const auto& f : files) {
        json man = read_manifest(f);
        auto bneck = man.at("bottleneck").get<std::size_t>();
        auto pidx = man.at("partition").get<uint32_t>();
        LoadedAdapter a{build_adapter(cfg, bneck, pidx, 0), f};
        load_checkpoint_into(f, a.module.named_params());
        a.module.set_requires_grad(false);
        out.push_back(std::move(a));
    }
    return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
    std::vector<uint64_t> seeds;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ','))
        if (!cur.empty()) seeds.push_back(std::stoull(cur));
    if (seeds.empty()) throw std::invalid_argument("empty seed list");
    return seeds;
}

// --- subcommand option bundles ---

struct CommonOpts {
    std::string config_path;
    std::string triples;
    std::string mode = "fused";
    std::string out_dir = "out";
    CLI::Option *triples_opt = nullptr, *mode_opt = nullptr, *out_dir_opt = nullptr;

    void attach(CLI::App* sub, bool needs_triples) {
        sub->add_option("--config", config_path, "JSON config file; flags override its values");
        triples_opt = sub->add_option("--triples", triples, "triple TSV path");
        mode_opt = sub->add_option("--mode", mode, "relation mode: fused or typed");
        out_dir_opt = sub->add_option("--out-dir", out_dir, "output directory root");
        (void)needs_triples;
    }

    // Resolves against the config file; returns (effective json, file json).
    std::pair<json, json> resolve(bool needs_triples) {
        json file = load_config_file(config_path);
        triples = pick(triples_opt, triples, file, "triples", std::string());
        mode = pick(mode_opt, mode, file, "mode", std::string("fused"));
        out_dir = pick(out_dir_opt, out_dir, file, "out_dir", std::string("out"));
        if (needs_triples && triples.empty())
            throw std::invalid_argument("a triples file is required (--triples or config)");
        parse_kg_mode(mode);
        json eff = {{"triples", triples}, {"mode", mode}, {"out_dir", out_dir}};
        return {eff, file};
    }
};

int cmd_stats(CommonOpts& c) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(true);
    KnowledgeGraph kg = load_triples(c.triples, parse_kg_mode(c.mode));
    auto keys = top_relations(kg, kg.triples.size());
    std::printf("entities\t%zu\n", kg.entities.size());
    std::printf("relations\t%zu\n", kg.relations.size());
    std::printf("relation-keys\t%zu\n", keys.size());
    std::printf("triples\t%zu\n", kg.triples.size());
    log_event("stats", eff, t0, {{"triples", kg.triples.size()}});
    return 0;
}

int cmd_top_relations(CommonOpts& c, std::size_t n, const CLI::Option* n_opt) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(true);
    n = pick(n_opt, n, file, "top_n", std::size_t{20});
    eff["top_n"] = n;
    KnowledgeGraph kg = load_triples(c.triples, parse_kg_mode(c.mode));
    for (const auto& [key, count] : top_relations(kg, n))
        std::printf("%s\t%zu\n", key.c_str(), count);
    log_event("top-relations", eff, t0);
    return 0;
}

int cmd_filter(CommonOpts& c, std::size_t n, const CLI::Option* n_opt, const std::string& out,
               const CLI::Option* out_opt) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(true);
    std::size_t top_n = pick(n_opt, n, file, "top_n", std::size_t{20});
    std::string out_path = pick(out_opt, out, file, "filter_out", std::string());
    if (out_path.empty()) throw std::invalid_argument("filter: --out is required");
    eff["top_n"] = top_n;
    eff["out"] = out_path;
    KnowledgeGraph kg = load_triples(c.triples, parse_kg_mode(c.mode));
    std::set<std::string> keep;
    for (const auto& [key, count] : top_relations(kg, top_n)) keep.insert(key);
    KnowledgeGraph filtered = filter_by_relations(kg, keep);
    save_triples(filtered, out_path);
    log_event("filter", eff, t0,
              {{"kept_triples", filtered.triples.size()}, {"kept_keys", keep.size()}});
    return 0;
}

struct PartitionOpts {
    uint32_t k = 20;
    double eps = 0.03;
    uint64_t seed = 0;
    std::string cut_policy = "drop";
    std::string out;
    CLI::Option *k_opt = nullptr, *eps_opt = nullptr, *seed_opt = nullptr, *policy_opt = nullptr,
                *out_opt = nullptr;

    void attach(CLI::App* sub) {
        k_opt = sub->add_option("--k", k, "number of partitions");
        eps_opt = sub->add_option("--eps", eps, "balance slack epsilon");
        seed_opt = sub->add_option("--seed", seed, "partitioner seed");
        policy_opt = sub->add_option("--cut-policy", cut_policy,
                                     "crossing-triple handling: drop or subject");
        out_opt = sub->add_option("--out", out, "assignment TSV path");
    }

    PartitionConfig resolve(const json& file, json& eff) {
        json sub = file.value("partition", json::object());
        PartitionConfig cfg;
        cfg.k = pick(k_opt, k, sub, "k", cfg.k);
        cfg.epsilon = pick(eps_opt, eps, sub, "epsilon", cfg.epsilon);
        cfg.seed = pick(seed_opt, seed, sub, "seed", cfg.seed);
        cut_policy = pick(policy_opt, cut_policy, sub, "cut_policy", std::string("drop"));
        if (cfg.k == 0) throw std::invalid_argument("partition: k must be >= 1");
        if (cfg.epsilon < 0.0) throw std::invalid_argument("partition: epsilon must be >= 0");
        parse_cut_policy(cut_policy);
        eff["partition"] = {{"k", cfg.k},
                            {"epsilon", cfg.epsilon},
                            {"seed", cfg.seed},
                            {"cut_policy", cut_policy}};
        return cfg;
    }
};

int cmd_partition(CommonOpts& c, PartitionOpts& p) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(true);
    PartitionConfig cfg = p.resolve(file, eff);
    std::string out_path = p.out_opt->count() > 0 ? p.out
                                                  : c.out_dir + "/parts/assignment.tsv";
    eff["out"] = out_path;

    KnowledgeGraph kg = load_triples(c.triples, parse_kg_mode(c.mode));
    EntityGraph g = build_entity_graph(kg);
    PartitionAssignment a = partition(g, cfg);
    int64_t cut = edge_cut(g, a);
    TripleAssignment ta = assign_triples(kg, a, parse_cut_policy(p.cut_policy));
    fs::create_directories(fs::path(out_path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(out_path).parent_path());
    save_assignment(kg, a, cfg, cut, ta.dropped, out_path);
    log_event("partition", eff, t0, {{"cut", cut}, {"dropped", ta.dropped}});
    return 0;
}

int cmd_build_corpus(CommonOpts& c, PartitionOpts& p, std::size_t max_len,
                     const CLI::Option* max_len_opt, const std::string& assignment,
                     const CLI::Option* assignment_opt) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(true);
    std::size_t ml = pick(max_len_opt, max_len, file, "max_len", std::size_t{32});
    json psub = file.value("partition", json::object());
    std::string policy =
        pick(p.policy_opt, p.cut_policy, psub, "cut_policy", std::string("drop"));
    std::string apath = pick(assignment_opt, assignment, file, "assignment",
                             c.out_dir + "/parts/assignment.tsv");
    eff["max_len"] = ml;
    eff["cut_policy"] = policy;
    eff["assignment"] = apath;

    KnowledgeGraph kg = load_triples(c.triples, parse_kg_mode(c.mode));
    PartitionAssignment a = load_assignment(kg, apath);
    TripleAssignment ta = assign_triples(kg, a, parse_cut_policy(policy));
    Vocabulary vocab = build_vocabulary(kg);

    fs::create_directories(fs::path(c.out_dir) / "corpora");
    save_vocabulary(vocab, c.out_dir + "/corpora/vocab.txt");
    std::size_t written = 0;
    for (const auto& sub : ta.subgraphs) {
        if (sub.triples.empty()) continue;
        PartitionDataset ds = build_partition_dataset(sub, kg, vocab, ml);
        char name[64];
        std::snprintf(name, sizeof(name), "/corpora/part_%04u.bin", sub.partition_index);
        save_dataset(ds, c.out_dir + name);
        ++written;
    }
    log_event("build-corpus", eff, t0, {{"datasets", written}, {"vocab", vocab.size()}});
    return 0;
}

struct EncoderOpts {
    std::size_t layers = 2, hidden = 64, heads = 4, ffn = 256, max_positions = 64;
    double dropout = 0.1;
    uint64_t seed = 0;
    CLI::Option *layers_opt = nullptr, *hidden_opt = nullptr, *heads_opt = nullptr,
                *ffn_opt = nullptr, *maxpos_opt = nullptr, *dropout_opt = nullptr,
                *seed_opt = nullptr;

    void attach(CLI::App* sub) {
        layers_opt = sub->add_option("--layers", layers, "encoder layers");
        hidden_opt = sub->add_option("--hidden", hidden, "hidden width");
        heads_opt = sub->add_option("--heads", heads, "attention heads");
        ffn_opt = sub->add_option("--ffn", ffn, "feed-forward width");
        maxpos_opt = sub->add_option("--max-positions", max_positions, "position table size");
        dropout_opt = sub->add_option("--dropout", dropout, "dropout probability");
        seed_opt = sub->add_option("--encoder-seed", seed, "base weight init seed");
    }

    std::pair<EncoderConfig, uint64_t> resolve(const json& file, json& eff,
                                               std::size_t vocab_size) {
        json sub = file.value("encoder", json::object());
        EncoderConfig cfg;
        cfg.layers = pick(layers_opt, layers, sub, "layers", cfg.layers);
        cfg.hidden = pick(hidden_opt, hidden, sub, "hidden", cfg.hidden);
        cfg.heads = pick(heads_opt, heads, sub, "heads", cfg.heads);
        cfg.ffn = pick(ffn_opt, ffn, sub, "ffn", cfg.ffn);
        cfg.max_positions = pick(maxpos_opt, max_positions, sub, "max_positions",
                                 cfg.max_positions);
        cfg.dropout = pick(dropout_opt, dropout, sub, "dropout", cfg.dropout);
        cfg.vocab = vocab_size;
        uint64_t s = pick(seed_opt, seed, sub, "seed", uint64_t{0});
        eff["encoder"] = encoder_config_to_json(cfg);
        eff["encoder"]["seed"] = s;
        return {cfg, s};
    }
};

struct TrainOpts {
    const char* json_key;
    std::string config_json;  // unused placeholder so CLI11 has an address
    TrainConfig flags;
    CLI::Option *epochs_opt = nullptr, *patience_opt = nullptr, *batch_opt = nullptr,
                *lr_opt = nullptr, *seed_opt = nullptr, *bneck_opt = nullptr,
                *maxlen_opt = nullptr, *metric_opt = nullptr;
    std::string metric_name = "accuracy";

    explicit TrainOpts(const char* key) : json_key(key) {}

    void attach(CLI::App* sub) {
        epochs_opt = sub->add_option("--epochs", flags.epochs, "max training epochs");
        patience_opt = sub->add_option("--patience", flags.patience, "early-stop patience");
        batch_opt = sub->add_option("--batch-size", flags.batch_size, "minibatch size");
        lr_opt = sub->add_option("--lr", flags.peak_lr, "peak learning rate");
        seed_opt = sub->add_option("--seed", flags.seed, "training seed");
        bneck_opt = sub->add_option("--bottleneck", flags.bottleneck, "adapter bottleneck width");
        maxlen_opt = sub->add_option("--max-seq-len", flags.max_seq_len, "task sequence length");
        metric_opt = sub->add_option("--metric", metric_name, "accuracy or micro-f1");
    }

    TrainConfig resolve(const json& file, json& eff) {
        TrainConfig c = train_config_from_json(file.value(json_key, json::object()),
                                               TrainConfig{});
        if (epochs_opt->count()) c.epochs = flags.epochs;
        if (patience_opt->count()) c.patience = flags.patience;
        if (batch_opt->count()) c.batch_size = flags.batch_size;
        if (lr_opt->count()) c.peak_lr = flags.peak_lr;
        if (seed_opt->count()) c.seed = flags.seed;
        if (bneck_opt->count()) c.bottleneck = flags.bottleneck;
        if (maxlen_opt->count()) c.max_seq_len = flags.max_seq_len;
        if (metric_opt->count()) c.metric = parse_metric(metric_name);
        c.validate();
        eff[json_key] = train_config_to_json(c);
        return c;
    }
};

int cmd_train_adapters(CommonOpts& c, EncoderOpts& e, TrainOpts& t, std::size_t jobs,
                       const CLI::Option* jobs_opt) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(true);
    std::size_t n_jobs = pick(jobs_opt, jobs, file, "jobs", std::size_t{1});
    if (n_jobs == 0) throw std::invalid_argument("train-adapters: jobs must be >= 1");
    eff["jobs"] = n_jobs;

    KnowledgeGraph kg = load_triples(c.triples, parse_kg_mode(c.mode));
    Vocabulary vocab = load_vocabulary(c.out_dir + "/corpora/vocab.txt");
    auto [enc_cfg, enc_seed] = e.resolve(file, eff, vocab.size());
    TrainConfig tcfg = t.resolve(file, eff);

    EncoderModel base = build_encoder(enc_cfg, enc_seed);
    base.set_requires_grad(false);
    fs::create_directories(fs::path(c.out_dir) / "checkpoints");
    json base_man = {{"kind", "base"},
                     {"encoder", encoder_config_to_json(enc_cfg)},
                     {"seed", enc_seed},
                     {"config_hash", config_hash(eff)}};
    save_checkpoint(c.out_dir + "/checkpoints/base.klmc", base.named_params(),
                    base_man.dump(2));

    std::vector<std::string> dataset_files;
    for (const auto& entry : fs::directory_iterator(fs::path(c.out_dir) / "corpora")) {
        std::string name = entry.path().filename().string();
        if (name.rfind("part_", 0) == 0) dataset_files.push_back(entry.path().string());
    }
    std::sort(dataset_files.begin(), dataset_files.end());
    if (dataset_files.empty())
        throw std::runtime_error("no partition datasets under " + c.out_dir + "/corpora");

    std::mutex io_mutex;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= dataset_files.size() || failed.load()) return;
            try {
                PartitionDataset ds = load_dataset(dataset_files[i]);
                TrainConfig cfg = tcfg;
                cfg.seed = tcfg.seed + ds.partition_index;
                AdapterTrainResult res = train_adapter(base, ds, kg, vocab, cfg);
                NamedParams params = res.adapter.named_params();
                for (auto& np : res.head.named_params("entity_head"))
                    params.push_back(std::move(np));
                json man = {{"kind", "adapter"},
                            {"partition", ds.partition_index},
                            {"bottleneck", cfg.bottleneck},
                            {"classes", res.head.classes()},
                            {"best_epoch", res.best_epoch},
                            {"best_val_loss", res.best_val_loss},
                            {"train_accuracy", res.train_accuracy},
                            {"seed", cfg.seed},
                            {"config_hash", config_hash(eff)}};
                char name[64];
                std::snprintf(name, sizeof(name), "/checkpoints/adapter_%04u.klmc",
                              ds.partition_index);
                save_checkpoint(c.out_dir + name, params, man.dump(2));
                std::lock_guard lock(io_mutex);
                json line = {{"event", "adapter-trained"},
                             {"partition", ds.partition_index},
                             {"best_epoch", res.best_epoch},
                             {"best_val_loss", res.best_val_loss},
                             {"train_accuracy", res.train_accuracy}};
                std::cerr << line.dump() << '\n';
            } catch (const std::exception& ex) {
                std::lock_guard lock(io_mutex);
                if (!failed.exchange(true)) first_error = ex.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < std::min(n_jobs, dataset_files.size()); ++i)
        pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failed.load()) throw std::runtime_error("train-adapters: " + first_error);

    log_event("train-adapters", eff, t0, {{"adapters", dataset_files.size()}});
    return 0;
}

struct TaskOpts {
    std::string train_tsv, val_tsv, test_tsv;
    bool multi_label = false;
    bool baseline = false;

    void attach(CLI::App* sub, bool with_test) {
        sub->add_option("--train", train_tsv, "training task TSV");
        sub->add_option("--val", val_tsv, "validation task TSV");
        if (with_test) sub->add_option("--test", test_tsv, "evaluation task TSV");
        sub->add_flag("--multi-label", multi_label, "comma-separated multi-label rows");
        sub->add_flag("--baseline", baseline, "train the head on the bare frozen base");
    }
};

int cmd_train_fusion(CommonOpts& c, TrainOpts& t, TaskOpts& task) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(false);
    TrainConfig tcfg = t.resolve(file, eff);
    if (task.train_tsv.empty())
        throw std::invalid_argument("train-fusion: --train is required");
    eff["train"] = task.train_tsv;
    eff["val"] = task.val_tsv;
    eff["multi_label"] = task.multi_label;
    eff["baseline"] = task.baseline;

    LoadedBase base = load_base(c.out_dir);
    Vocabulary vocab = load_vocabulary(c.out_dir + "/corpora/vocab.txt");
    std::vector<LoadedAdapter> adapters;
    std::vector<const AdapterModule*> adapter_ptrs;
    if (!task.baseline) {
        adapters = load_adapters(c.out_dir, base.model.cfg);
        if (adapters.empty())
            throw std::runtime_error("train-fusion: no adapter checkpoints in " + c.out_dir);
        for (const auto& a : adapters) adapter_ptrs.push_back(&a.module);
    }

    TaskDataset train =
        load_task_tsv(task.train_tsv, vocab, tcfg.max_seq_len, task.multi_label);
    TaskDataset val = task.val_tsv.empty()
                          ? train
                          : load_task_tsv(task.val_tsv, vocab, tcfg.max_seq_len,
                                          task.multi_label, &train.class_names);
    TaskTrainResult res = train_task_model(base.model, adapter_ptrs, train, val, tcfg);

    NamedParams params = res.head.named_params("head");
    for (auto& np : res.fusion.named_params()) params.push_back(std::move(np));
    json man = {{"kind", task.baseline ? "baseline" : "fusion"},
                {"classes", res.head.classes()},
                {"class_names", train.class_names},
                {"multi_label", task.multi_label},
                {"best_epoch", res.best_epoch},
                {"best_val_loss", res.best_val_loss},
                {"config_hash", config_hash(eff)}};
    fs::create_directories(fs::path(c.out_dir) / "checkpoints");
    std::string out_path =
        c.out_dir + (task.baseline ? "/checkpoints/baseline.klmc" : "/checkpoints/fusion.klmc");
    save_checkpoint(out_path, params, man.dump(2));
    log_event("train-fusion", eff, t0,
              {{"best_epoch", res.best_epoch}, {"best_val_loss", res.best_val_loss}});
    return 0;
}

int cmd_evaluate(CommonOpts& c, TaskOpts& task, const std::string& model_path_in,
                 const CLI::Option* model_opt, const std::string& metric_name,
                 const CLI::Option* metric_opt, std::size_t max_seq_len,
                 const CLI::Option* maxlen_opt) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(false);
    if (task.test_tsv.empty()) throw std::invalid_argument("evaluate: --test is required");
    std::string model_path = model_opt->count() > 0
                                 ? model_path_in
                                 : c.out_dir + "/checkpoints/fusion.klmc";
    std::string mname = pick(metric_opt, metric_name, file, "metric", std::string("accuracy"));
    std::size_t ml = pick(maxlen_opt, max_seq_len, file, "max_seq_len", std::size_t{32});
    Metric metric = parse_metric(mname);
    eff["model"] = model_path;
    eff["metric"] = mname;
    eff["test"] = task.test_tsv;

    LoadedBase base = load_base(c.out_dir);
    Vocabulary vocab = load_vocabulary(c.out_dir + "/corpora/vocab.txt");
    json man = read_manifest(model_path);
    bool fused = man.at("kind").get<std::string>() == "fusion";
    bool multi = man.value("multi_label", false);
    auto class_names = man.at("class_names").get<std::vector<std::string>>();

    std::vector<LoadedAdapter> adapters;
    std::vector<const AdapterModule*> adapter_ptrs;
    FusionLayer fusion;
    if (fused) {
        adapters = load_adapters(c.out_dir, base.model.cfg);
        for (const auto& a : adapters) adapter_ptrs.push_back(&a.module);
        fusion = build_fusion(base.model.cfg, 0);
    }
    LinearHead head = build_head(base.model.cfg.hidden, class_names.size(), 0);
    NamedParams params = head.named_params("head");
    if (fused)
        for (auto& np : fusion.named_params()) params.push_back(std::move(np));
    load_checkpoint_into(model_path, params);

    TaskDataset test = load_task_tsv(task.test_tsv, vocab, ml, multi, &class_names);
    double score = evaluate(base.model, adapter_ptrs, fused ? &fusion : nullptr, head, test,
                            metric);
    std::printf("%s\t%.6f\n", to_string(metric), score);
    log_event("evaluate", eff, t0, {{"score", score}});
    return 0;
}

int cmd_report(CommonOpts& c, TrainOpts& t, TaskOpts& task, const std::string& seeds_str,
               const std::string& name) {
    auto t0 = std::chrono::steady_clock::now();
    auto [eff, file] = c.resolve(false);
    TrainConfig tcfg = t.resolve(file, eff);
    if (task.train_tsv.empty() || task.test_tsv.empty())
        throw std::invalid_argument("report: --train and --test are required");
    std::vector<uint64_t> seeds;
    if (!seeds_str.empty())
        seeds = parse_seed_list(seeds_str);
    else if (file.contains("seeds"))
        seeds = file.at("seeds").get<std::vector<uint64_t>>();
    else
        seeds = {tcfg.seed};
    eff["seeds"] = seeds;
    eff["baseline"] = task.baseline;

    LoadedBase base = load_base(c.out_dir);
    Vocabulary vocab = load_vocabulary(c.out_dir + "/corpora/vocab.txt");
    std::vector<LoadedAdapter> adapters;
    std::vector<const AdapterModule*> adapter_ptrs;
    if (!task.baseline) {
        adapters = load_adapters(c.out_dir, base.model.cfg);
        for (const auto& a : adapters) adapter_ptrs.push_back(&a.module);
    }
    TaskDataset train =
        load_task_tsv(task.train_tsv, vocab, tcfg.max_seq_len, task.multi_label);
    TaskDataset val = task.val_tsv.empty()
                          ? train
                          : load_task_tsv(task.val_tsv, vocab, tcfg.max_seq_len,
                                          task.multi_label, &train.class_names);
    TaskDataset test = load_task_tsv(task.test_tsv, vocab, tcfg.max_seq_len, task.multi_label,
                                     &train.class_names);

    RunReport report = repeated_runs(
        seeds,
        [&](uint64_t seed) {
            TrainConfig cfg = tcfg;
            cfg.seed = seed;
            TaskTrainResult res =
                train_task_model(base.model, adapter_ptrs, train, val, cfg);
            double score = evaluate(base.model, adapter_ptrs,
                                    res.fusion.layers.empty() ? nullptr : &res.fusion,
                                    res.head, test, cfg.metric);
            return std::make_pair(score, res.best_epoch);
        },
        tcfg.metric);

    fs::create_directories(fs::path(c.out_dir) / "reports");
    std::string out_path = c.out_dir + "/reports/" + name + ".tsv";
    save_run_report(report, out_path);
    std::printf("mean\t%.6f\tstd\t%.6f\n", report.mean, report.stddev);
    log_event("report", eff, t0, {{"mean", report.mean}, {"std", report.stddev}});
    return 0;
}

int cmd_gradcheck() {
    auto t0 = std::chrono::steady_clock::now();
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 32;
    cfg.heads = 4;
    cfg.ffn = 64;
    cfg.vocab = 24;
    cfg.max_positions = 12;
    cfg.dropout = 0.0;
    EncoderModel model = build_encoder(cfg, 11);
    model.set_requires_grad(true);
    AdapterModule adapter = build_adapter(cfg, 8, 0, 12);
    LinearHead head = build_head(cfg.hidden, 7, 13);

    std::mt19937_64 rng(99);
    std::vector<int32_t> ids(8);
    std::vector<uint8_t> mask(8, 1);
    for (auto& id : ids) id = static_cast<int32_t>(rng() % cfg.vocab);
    mask[6] = mask[7] = 0;
    std::vector<int32_t> labels = {3};

    std::vector<nn::TensorPtr> params;
    for (auto& [n, p] : model.named_params()) params.push_back(p);
    for (auto& [n, p] : adapter.named_params()) params.push_back(p);
    for (auto& [n, p] : head.named_params()) params.push_back(p);
    // the zero plateau of relu(0) makes FD meaningless there; nudge off it
    for (auto& layer : adapter.layers)
        for (auto& v : layer.bias_b->value) v = 0.01;

    double err_model = nn::grad_check(
        [&](nn::Tape& tape) {
            EncodeOptions opt;
            opt.adapter = &adapter;
            auto h = encode(tape, model, ids, mask, opt);
            auto logits = head_logits(tape, h, head);
            return nn::cross_entropy_loss(tape, logits, labels);
        },
        params);

    AdapterModule a2 = build_adapter(cfg, 8, 1, 14);
    for (auto& layer : a2.layers) {
        for (auto& v : layer.bias_b->value) v = 0.01;
        std::normal_distribution<double> d(0.0, 0.02);
        for (auto& v : layer.up->value) v = d(rng);
    }
    FusionLayer fusion = build_fusion(cfg, 15);
    std::vector<nn::TensorPtr> fparams;
    for (auto& [n, p] : fusion.named_params()) fparams.push_back(p);
    double err_fusion = nn::grad_check(
        [&](nn::Tape& tape) {
            EncodeOptions opt;
            opt.fusion_adapters = {&adapter, &a2};
            opt.fusion = &fusion;
            auto h = encode(tape, model, ids, mask, opt);
            auto logits = head_logits(tape, h, head);
            return nn::cross_entropy_loss(tape, logits, labels);
        },
        fparams);

    double worst = std::max(err_model, err_fusion);
    std::printf("model-max-relative-error\t%.3e\n", err_model);
    std::printf("fusion-max-relative-error\t%.3e\n", err_fusion);
    log_event("gradcheck", json::object(), t0,
              {{"model_err", err_model}, {"fusion_err", err_fusion}});
    return worst > 1e-4 ? 1 : 0;
}

}  // namespace

int run_command(int argc, const char* const* argv) {
    CLI::App app{"knowledge-graph adapter pipeline"};
    app.require_subcommand(1);
    int rc = 0;

    auto stats_c = std::make_shared<CommonOpts>();
    auto* stats = app.add_subcommand("stats", "KG size summary");
    stats_c->attach(stats, true);
    stats->callback([stats_c, &rc] { rc = cmd_stats(*stats_c); });

    auto top_c = std::make_shared<CommonOpts>();
    auto top_n = std::make_shared<std::size_t>(20);
    auto* top = app.add_subcommand("top-relations", "most frequent relation keys");
    top_c->attach(top, true);
    auto* top_n_opt = top->add_option("--n", *top_n, "how many keys");
    top->callback([top_c, top_n, top_n_opt, &rc] {
        rc = cmd_top_relations(*top_c, *top_n, top_n_opt);
    });

    auto filt_c = std::make_shared<CommonOpts>();
    auto filt_n = std::make_shared<std::size_t>(20);
    auto filt_out = std::make_shared<std::string>();
    auto* filt = app.add_subcommand("filter", "keep only the top-N relation keys");
    filt_c->attach(filt, true);
    auto* filt_n_opt = filt->add_option("--top-n", *filt_n, "how many keys to keep");
    auto* filt_out_opt = filt->add_option("--out", *filt_out, "filtered triple TSV path");
    filt->callback([filt_c, filt_n, filt_n_opt, filt_out, filt_out_opt, &rc] {
        rc = cmd_filter(*filt_c, *filt_n, filt_n_opt, *filt_out, filt_out_opt);
    });

    auto part_c = std::make_shared<CommonOpts>();
    auto part_p = std::make_shared<PartitionOpts>();
    auto* part = app.add_subcommand("partition", "balanced k-way entity partition");
    part_c->attach(part, true);
    part_p->attach(part);
    part->callback([part_c, part_p, &rc] { rc = cmd_partition(*part_c, *part_p); });

    auto corp_c = std::make_shared<CommonOpts>();
    auto corp_p = std::make_shared<PartitionOpts>();
    auto corp_ml = std::make_shared<std::size_t>(32);
    auto corp_assign = std::make_shared<std::string>();
    auto* corp = app.add_subcommand("build-corpus", "per-partition entity-prediction datasets");
    corp_c->attach(corp, true);
    auto* corp_policy_opt = corp->add_option("--cut-policy", corp_p->cut_policy,
                                             "crossing-triple handling: drop or subject");
    corp_p->policy_opt = corp_policy_opt;
    auto* corp_ml_opt = corp->add_option("--max-len", *corp_ml, "sequence length");
    auto* corp_assign_opt =
        corp->add_option("--assignment", *corp_assign, "assignment TSV path");
    corp->callback([corp_c, corp_p, corp_ml, corp_ml_opt, corp_assign, corp_assign_opt, &rc] {
        rc = cmd_build_corpus(*corp_c, *corp_p, *corp_ml, corp_ml_opt, *corp_assign,
                              corp_assign_opt);
    });

    auto ta_c = std::make_shared<CommonOpts>();
    auto ta_e = std::make_shared<EncoderOpts>();
    auto ta_t = std::make_shared<TrainOpts>("adapter_train");
    auto ta_jobs = std::make_shared<std::size_t>(1);
    auto* ta = app.add_subcommand("train-adapters", "one adapter per partition dataset");
    ta_c->attach(ta, true);
    ta_e->attach(ta);
    ta_t->attach(ta);
    auto* ta_jobs_opt = ta->add_option("--jobs", *ta_jobs, "parallel workers");
    ta->callback([ta_c, ta_e, ta_t, ta_jobs, ta_jobs_opt, &rc] {
        rc = cmd_train_adapters(*ta_c, *ta_e, *ta_t, *ta_jobs, ta_jobs_opt);
    });

    auto tf_c = std::make_shared<CommonOpts>();
    auto tf_t = std::make_shared<TrainOpts>("fusion_train");
    auto tf_task = std::make_shared<TaskOpts>();
    auto* tf = app.add_subcommand("train-fusion",
                                  "fusion + classifier head on a downstream task");
    tf_c->attach(tf, false);
    tf_t->attach(tf);
    tf_task->attach(tf, false);
    tf->callback([tf_c, tf_t, tf_task, &rc] { rc = cmd_train_fusion(*tf_c, *tf_t, *tf_task); });

    auto ev_c = std::make_shared<CommonOpts>();
    auto ev_task = std::make_shared<TaskOpts>();
    auto ev_model = std::make_shared<std::string>();
    auto ev_metric = std::make_shared<std::string>("accuracy");
    auto ev_maxlen = std::make_shared<std::size_t>(32);
    auto* ev = app.add_subcommand("evaluate", "score a trained model on a task TSV");
    ev_c->attach(ev, false);
    ev_task->attach(ev, true);
    auto* ev_model_opt = ev->add_option("--model", *ev_model, "fusion/baseline checkpoint");
    auto* ev_metric_opt = ev->add_option("--metric", *ev_metric, "accuracy or micro-f1");
    auto* ev_maxlen_opt = ev->add_option("--max-seq-len", *ev_maxlen, "task sequence length");
    ev->callback([ev_c, ev_task, ev_model, ev_model_opt, ev_metric, ev_metric_opt, ev_maxlen,
                  ev_maxlen_opt, &rc] {
        rc = cmd_evaluate(*ev_c, *ev_task, *ev_model, ev_model_opt, *ev_metric, ev_metric_opt,
                          *ev_maxlen, ev_maxlen_opt);
    });

    auto gc = app.add_subcommand("gradcheck", "finite-difference audit of the autodiff graph");
    gc->callback([&rc] { rc = cmd_gradcheck(); });

    auto rp_c = std::make_shared<CommonOpts>();
    auto rp_t = std::make_shared<TrainOpts>("fusion_train");
    auto rp_task = std::make_shared<TaskOpts>();
    auto rp_seeds = std::make_shared<std::string>();
    auto rp_name = std::make_shared<std::string>("run");
    auto* rp = app.add_subcommand("report", "multi-seed train + evaluate with aggregation");
    rp_c->attach(rp, false);
    rp_t->attach(rp);
    rp_task->attach(rp, true);
    rp->add_option("--seeds", *rp_seeds, "comma-separated seed list");
    rp->add_option("--name", *rp_name, "report file stem");
    rp->callback([rp_c, rp_t, rp_task, rp_seeds, rp_name, &rc] {
        rc = cmd_report(*rp_c, *rp_t, *rp_task, *rp_seeds, *rp_name);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return rc;
}

}  // namespace klm
