#include "klm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace klm {

using nn::Tape;
using nn::TensorPtr;

const char* to_string(Metric m) { return m == Metric::Accuracy ? "accuracy" : "micro-f1"; }

Metric parse_metric(const std::string& s) {
    if (s == "accuracy") return Metric::Accuracy;
    if (s == "micro-f1" || s == "micro_f1") return Metric::MicroF1;
    throw std::invalid_argument("unknown metric: " + s);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("train config: patience must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
        throw std::invalid_argument("train config: warmup fraction must be in (0, 1)");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0)
        throw std::invalid_argument("train config: validation fraction must be in [0, 1)");
}

double stlr_lr(std::size_t step, std::size_t total_steps, double peak, double warmup_fraction) {
    if (total_steps < 2) throw std::invalid_argument("stlr_lr: total_steps must be >= 2");
    if (step < 1 || step > total_steps) throw std::invalid_argument("stlr_lr: step out of range");
    std::size_t warm =
        static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step <= warm)
        return peak * static_cast<double>(step) / static_cast<double>(warm);
    return peak * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warm);
}

AdamState::AdamState(const std::vector<TensorPtr>& params) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
        m.emplace_back(p->size(), 0.0);
        v.emplace_back(p->size(), 0.0);
    }
}

void adam_update(const std::vector<TensorPtr>& params, AdamState& state, double lr) {
    if (params.size() != state.m.size())
        throw std::invalid_argument("adam_update: state/params mismatch");
    for (const auto& p : params) {
        p->ensure_grad();
        for (double g : p->grad)
            if (!std::isfinite(g)) throw std::runtime_error("adam_update: non-finite gradient");
    }
    ++state.step;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi];
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            double g = p.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p.value[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

double clip_global_norm(const std::vector<TensorPtr>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        p->ensure_grad();
        for (double g : p->grad) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (const auto& p : params)
            for (double& g : p->grad) g *= s;
    }
    return norm;
}

void RunReport::finalize() {
    mean = 0.0;
    stddev = 0.0;
    if (scores.empty()) return;
    mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    if (scores.size() > 1) {
        double sq = 0.0;
        for (double s : scores) sq += (s - mean) * (s - mean);
        stddev = std::sqrt(sq / static_cast<double>(scores.size() - 1));
    }
}

void save_run_report(const RunReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write run report: " + path);
    char line[128];
    for (std::size_t i = 0; i < report.scores.size(); ++i) {
        std::snprintf(line, sizeof(line), "%llu\t%s\t%.6f\t%zu\n",
                      static_cast<unsigned long long>(report.seeds[i]), to_string(report.metric),
                      report.scores[i], report.best_epochs[i]);
        out << line;
    }
    std::snprintf(line, sizeof(line), "mean\t%.6f\tstd\t%.6f\n", report.mean, report.stddev);
    out << line;
    if (!out) throw std::runtime_error("I/O error writing " + path);
}

namespace {

std::vector<double> snapshot_values(const std::vector<TensorPtr>& params) {
    std::vector<double> all;
    for (const auto& p : params) all.insert(all.end(), p->value.begin(), p->value.end());
    return all;
}

void restore_values(const std::vector<TensorPtr>& params, const std::vector<double>& all) {
    std::size_t off = 0;
    for (const auto& p : params) {
        std::copy_n(all.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->value.begin());
        off += p->size();
    }
}

struct LoopResult {
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    double initial_loss = 0.0;
};

// Generic epoch loop: seeded per-epoch shuffling, STLR + Adam with
// clipping, early stopping on the validation loss, best-checkpoint
// restore.
LoopResult optimize(
    const std::vector<TensorPtr>& params, std::size_t n_examples, const TrainConfig& cfg,
    const std::function<TensorPtr(Tape&, const std::vector<std::size_t>&, std::mt19937_64&)>&
        batch_loss,
    const std::function<double()>& val_loss) {
    cfg.validate();
    if (n_examples == 0) throw std::invalid_argument("optimize: empty training set");

    AdamState adam(params);
    std::size_t batches = (n_examples + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total_steps = cfg.epochs * batches;

    LoopResult result;
    result.best_val = std::numeric_limits<double>::infinity();
    std::vector<double> best = snapshot_values(params);
    std::size_t step = 0;
    bool first = true;

    std::vector<std::size_t> order(n_examples);
    std::iota(order.begin(), order.end(), 0u);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + epoch);
        std::shuffle(order.begin(), order.end(), rng);

        for (std::size_t b = 0; b < batches; ++b) {
            std::vector<std::size_t> idx(
                order.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
                order.begin() +
                    static_cast<std::ptrdiff_t>(std::min(n_examples, (b + 1) * cfg.batch_size)));
            Tape tape;
            for (const auto& p : params) {
                p->ensure_grad();
                p->zero_grad();
            }
            TensorPtr loss = batch_loss(tape, idx, rng);
            if (!std::isfinite(loss->value[0]))
                throw std::runtime_error("optimize: non-finite training loss");
            if (first) {
                result.initial_loss = loss->value[0];
                first = false;
            }
            tape.backward(loss);
            clip_global_norm(params, cfg.grad_clip);
            ++step;
            double lr = total_steps < 2 ? cfg.peak_lr
                                        : stlr_lr(step, total_steps, cfg.peak_lr,
                                                  cfg.warmup_fraction);
            adam_update(params, adam, lr);
        }

        double vl = val_loss();
        if (vl < result.best_val) {
            result.best_val = vl;
            result.best_epoch = epoch;
            best = snapshot_values(params);
        } else if (epoch - result.best_epoch >= cfg.patience) {
            break;
        }
    }
    restore_values(params, best);
    return result;
}

std::vector<TensorPtr> raw_params(const NamedParams& named) {
    std::vector<TensorPtr> out;
    out.reserve(named.size());
    for (const auto& [name, p] : named) {
        (void)name;
        out.push_back(p);
    }
    return out;
}

}  // namespace

AdapterTrainResult train_adapter(const EncoderModel& base, const PartitionDataset& ds,
                                 const KnowledgeGraph& kg, const Vocabulary& vocab,
                                 const TrainConfig& cfg) {
    cfg.validate();
    if (ds.examples.empty()) throw std::invalid_argument("train_adapter: empty dataset");

    auto [train, val] = split_dataset(ds, cfg.validation_fraction, cfg.seed);

    AdapterTrainResult result;
    result.adapter = build_adapter(base.cfg, cfg.bottleneck, ds.partition_index, cfg.seed);
    std::vector<std::string> surfaces;
    surfaces.reserve(ds.label_entities.size());
    for (int32_t e : ds.label_entities) surfaces.push_back(kg.entities.at(static_cast<std::size_t>(e)));
    result.head = build_entity_head(base, surfaces, vocab);

    std::vector<TensorPtr> params = raw_params(result.adapter.named_params());
    for (const auto& p : raw_params(result.head.named_params())) params.push_back(p);

    auto example_logits = [&](Tape& tape, const MaskedEntityExample& ex, bool training,
                              std::mt19937_64* rng) {
        EncodeOptions opt;
        opt.adapter = &result.adapter;
        opt.training = training;
        opt.rng = rng;
        TensorPtr hidden = encode(tape, base, ex.token_ids, ex.attention_mask, opt);
        return head_logits(tape, hidden, result.head);
    };

    auto batch_loss = [&](Tape& tape, const std::vector<std::size_t>& idx,
                          std::mt19937_64& rng) {
        std::vector<TensorPtr> rows;
        std::vector<int32_t> labels;
        rows.reserve(idx.size());
        for (std::size_t i : idx) {
            rows.push_back(example_logits(tape, train.examples[i], true, &rng));
            labels.push_back(train.examples[i].label);
        }
        return nn::cross_entropy_loss(tape, nn::concat_rows(tape, rows), labels);
    };

    const PartitionDataset& val_set = val.examples.empty() ? train : val;
    auto val_loss = [&]() {
        Tape tape;
        std::vector<TensorPtr> rows;
        std::vector<int32_t> labels;
        for (const auto& ex : val_set.examples) {
            rows.push_back(example_logits(tape, ex, false, nullptr));
            labels.push_back(ex.label);
        }
        return nn::cross_entropy_loss(tape, nn::concat_rows(tape, rows), labels)->value[0];
    };

    LoopResult loop = optimize(params, train.examples.size(), cfg, batch_loss, val_loss);
    result.best_epoch = loop.best_epoch;
    result.best_val_loss = loop.best_val;
    result.initial_loss = loop.initial_loss;
    result.train_accuracy = entity_prediction_accuracy(base, result.adapter, result.head, train);
    return result;
}

double entity_prediction_accuracy(const EncoderModel& base, const AdapterModule& adapter,
                                  const LinearHead& head, const PartitionDataset& ds) {
    if (ds.examples.empty()) throw std::invalid_argument("empty dataset");
    std::size_t correct = 0;
    for (const auto& ex : ds.examples) {
        Tape tape;
        EncodeOptions opt;
        opt.adapter = &adapter;
        TensorPtr hidden = encode(tape, base, ex.token_ids, ex.attention_mask, opt);
        TensorPtr logits = head_logits(tape, hidden, head);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < logits->size(); ++c)
            if (logits->value[c] > logits->value[arg]) arg = c;
        if (static_cast<int32_t>(arg) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.examples.size());
}

TaskExample encode_task_text(const Vocabulary& vocab, const std::string& text_a,
                             const std::string& text_b, std::size_t max_len) {
    if (max_len < 3) throw std::invalid_argument("encode_task_text: max_len too small");
    std::vector<int32_t> ids;
    ids.push_back(Vocabulary::kCls);
    for (const std::string& w : tokenize(normalize_surface(text_a)))
        ids.push_back(vocab.lookup(w));
    ids.push_back(Vocabulary::kSep);
    if (!text_b.empty()) {
        for (const std::string& w : tokenize(normalize_surface(text_b)))
            ids.push_back(vocab.lookup(w));
        ids.push_back(Vocabulary::kSep);
    }
    TaskExample ex;
    ex.token_ids.assign(max_len, Vocabulary::kPad);
    ex.mask.assign(max_len, 0);
    std::size_t used = std::min(ids.size(), max_len);
    for (std::size_t i = 0; i < used; ++i) {
        ex.token_ids[i] = ids[i];
        ex.mask[i] = 1;
    }
    if (ids.size() > max_len) ex.token_ids[max_len - 1] = Vocabulary::kSep;
    return ex;
}

TaskDataset load_task_tsv(const std::string& path, const Vocabulary& vocab, std::size_t max_len,
                          bool multi_label, const std::vector<std::string>* fixed_classes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open task file: " + path);

    TaskDataset ds;
    ds.multi_label = multi_label;
    ds.max_len = max_len;
    if (fixed_classes) ds.class_names = *fixed_classes;

    auto class_id = [&](const std::string& name) -> int32_t {
        for (std::size_t i = 0; i < ds.class_names.size(); ++i)
            if (ds.class_names[i] == name) return static_cast<int32_t>(i);
        if (fixed_classes)
            throw std::runtime_error("task label not in class list: " + name);
        ds.class_names.push_back(name);
        return static_cast<int32_t>(ds.class_names.size() - 1);
    };

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                cols.push_back(line.substr(start));
                break;
            }
            cols.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        if (cols.size() < 2 || cols.size() > 3)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected 2 or 3 columns");

        TaskExample ex = encode_task_text(vocab, cols[1], cols.size() == 3 ? cols[2] : "",
                                          max_len);
        if (multi_label) {
            std::stringstream labels(cols[0]);
            std::string one;
            while (std::getline(labels, one, ','))
                if (!one.empty()) ex.labels.push_back(class_id(one));
        } else {
            ex.labels.push_back(class_id(cols[0]));
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

namespace {

TensorPtr task_logits(Tape& tape, const EncoderModel& base,
                      const std::vector<const AdapterModule*>& adapters,
                      const FusionLayer* fusion, const LinearHead& head, const TaskExample& ex,
                      bool training, std::mt19937_64* rng) {
    EncodeOptions opt;
    if (!adapters.empty()) {
        opt.fusion_adapters = adapters;
        opt.fusion = fusion;
    }
    opt.training = training;
    opt.rng = rng;
    TensorPtr hidden = encode(tape, base, ex.token_ids, ex.mask, opt);
    return head_logits(tape, hidden, head);
}

}  // namespace

TaskTrainResult train_task_model(const EncoderModel& base,
                                 const std::vector<const AdapterModule*>& adapters,
                                 const TaskDataset& train, const TaskDataset& val,
                                 const TrainConfig& cfg) {
    cfg.validate();
    if (train.examples.empty()) throw std::invalid_argument("train_task_model: empty train set");
    if (train.class_names.empty()) throw std::invalid_argument("train_task_model: no classes");
    for (const auto& ex : train.examples)
        for (int32_t l : ex.labels)
            if (l < 0 || static_cast<std::size_t>(l) >= train.class_names.size())
                throw std::invalid_argument("train_task_model: label out of range");

    TaskTrainResult result;
    if (!adapters.empty()) result.fusion = build_fusion(base.cfg, cfg.seed);
    result.head = build_head(base.cfg.hidden, train.class_names.size(), cfg.seed ^ 0x5eedull);

    std::vector<TensorPtr> params = raw_params(result.head.named_params());
    if (!adapters.empty())
        for (const auto& p : raw_params(result.fusion.named_params())) params.push_back(p);

    std::size_t n_classes = train.class_names.size();
    auto loss_over = [&](Tape& tape, const TaskDataset& ds, const std::vector<std::size_t>& idx,
                         bool training, std::mt19937_64* rng) {
        std::vector<TensorPtr> rows;
        rows.reserve(idx.size());
        for (std::size_t i : idx)
            rows.push_back(task_logits(tape, base, adapters,
                                       adapters.empty() ? nullptr : &result.fusion, result.head,
                                       ds.examples[i], training, rng));
        TensorPtr logits = nn::concat_rows(tape, rows);
        if (train.multi_label) {
            std::vector<double> targets(idx.size() * n_classes, 0.0);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (int32_t l : ds.examples[idx[r]].labels)
                    targets[r * n_classes + static_cast<std::size_t>(l)] = 1.0;
            return nn::bce_with_logits(tape, logits, targets);
        }
        std::vector<int32_t> labels;
        labels.reserve(idx.size());
        for (std::size_t i : idx) labels.push_back(ds.examples[i].labels[0]);
        return nn::cross_entropy_loss(tape, logits, labels);
    };

    auto batch_loss = [&](Tape& tape, const std::vector<std::size_t>& idx,
                          std::mt19937_64& rng) { return loss_over(tape, train, idx, true, &rng); };

    const TaskDataset& val_set = val.examples.empty() ? train : val;
    std::vector<std::size_t> val_idx(val_set.examples.size());
    std::iota(val_idx.begin(), val_idx.end(), 0u);
    auto val_loss = [&]() {
        Tape tape;
        return loss_over(tape, val_set, val_idx, false, nullptr)->value[0];
    };

    LoopResult loop = optimize(params, train.examples.size(), cfg, batch_loss, val_loss);
    result.best_epoch = loop.best_epoch;
    result.best_val_loss = loop.best_val;
    return result;
}

TaskTrainResult train_fusion(const EncoderModel& base,
                             const std::vector<const AdapterModule*>& adapters,
                             const TaskDataset& train, const TaskDataset& val,
                             const TrainConfig& cfg) {
    if (adapters.empty()) throw std::invalid_argument("train_fusion: empty adapter list");
    return train_task_model(base, adapters, train, val, cfg);
}

double evaluate(const EncoderModel& base, const std::vector<const AdapterModule*>& adapters,
                const FusionLayer* fusion, const LinearHead& head, const TaskDataset& ds,
                Metric metric) {
    if (ds.examples.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::size_t n_classes = head.classes();
    std::size_t correct = 0, tp = 0, fp = 0, fn = 0;
    for (const auto& ex : ds.examples) {
        Tape tape;
        TensorPtr logits = task_logits(tape, base, adapters, fusion, head, ex, false, nullptr);
        if (metric == Metric::MicroF1) {
            std::vector<char> truth(n_classes, 0);
            for (int32_t l : ex.labels) truth[static_cast<std::size_t>(l)] = 1;
            for (std::size_t c = 0; c < n_classes; ++c) {
                bool pred = logits->value[c] > 0.0;  // sigmoid(x) > 0.5
                if (pred && truth[c]) ++tp;
                else if (pred && !truth[c]) ++fp;
                else if (!pred && truth[c]) ++fn;
            }
        } else {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < n_classes; ++c)
                if (logits->value[c] > logits->value[arg]) arg = c;
            if (!ex.labels.empty() && static_cast<int32_t>(arg) == ex.labels[0]) ++correct;
        }
    }
    if (metric == Metric::MicroF1) {
        std::size_t denom = 2 * tp + fp + fn;
        return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    return static_cast<double>(correct) / static_cast<double>(ds.examples.size());
}

RunReport repeated_runs(const std::vector<uint64_t>& seeds,
                        const std::function<std::pair<double, std::size_t>(uint64_t)>& run,
                        Metric metric) {
    if (seeds.empty()) throw std::invalid_argument("repeated_runs: need at least one seed");
    RunReport report;
    report.metric = metric;
    for (uint64_t seed : seeds) {
        auto [score, best_epoch] = run(seed);
        report.seeds.push_back(seed);
        report.scores.push_back(score);
        report.best_epochs.push_back(best_epoch);
    }
    report.finalize();
    return report;
}

}  // namespace klm
