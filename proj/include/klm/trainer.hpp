#pragma once
// Optimization loops: Adam with slanted-triangular LR (10% warm-up),
// gradient clipping, early stopping on validation loss, per-partition
// adapter training, fusion/classifier fine-tuning, metrics, and multi-seed
// aggregation.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "klm/corpus.hpp"
#include "klm/model.hpp"

namespace klm {

enum class Metric { Accuracy, MicroF1 };

const char* to_string(Metric m);
Metric parse_metric(const std::string& s);

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t patience = 5;
    std::size_t batch_size = 8;
    double peak_lr = 1e-3;
    double warmup_fraction = 0.10;
    std::size_t max_seq_len = 32;
    uint64_t seed = 0;
    Metric metric = Metric::Accuracy;
    double grad_clip = 1.0;
    double validation_fraction = 0.1;  // adapter-stage holdout
    std::size_t bottleneck = 16;       // adapter width

    void validate() const;
};

// W = ceil(warmup * total); step <= W: peak*step/W, else peak*(total-step)/(total-W).
double stlr_lr(std::size_t step, std::size_t total_steps, double peak,
               double warmup_fraction = 0.10);

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;

    explicit AdamState(const std::vector<nn::TensorPtr>& params);
};

// Bias-corrected Adam step from each param's accumulated grad. Throws on
// non-finite gradients.
void adam_update(const std::vector<nn::TensorPtr>& params, AdamState& state, double lr);

// Scales grads so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(const std::vector<nn::TensorPtr>& params, double max_norm);

struct RunReport {
    Metric metric = Metric::Accuracy;
    std::vector<uint64_t> seeds;
    std::vector<double> scores;
    std::vector<std::size_t> best_epochs;
    double mean = 0.0;
    double stddev = 0.0;  // sample std, n-1 denominator; 0 when n == 1

    void finalize();
};

void save_run_report(const RunReport& report, const std::string& path);

struct AdapterTrainResult {
    AdapterModule adapter;
    LinearHead head;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    double initial_loss = 0.0;
    double train_accuracy = 0.0;  // of the returned checkpoint, on its training split
};

// Entity-prediction training of one adapter against a frozen base. Only
// adapter + head parameters receive updates.
AdapterTrainResult train_adapter(const EncoderModel& base, const PartitionDataset& ds,
                                 const KnowledgeGraph& kg, const Vocabulary& vocab,
                                 const TrainConfig& cfg);

double entity_prediction_accuracy(const EncoderModel& base, const AdapterModule& adapter,
                                  const LinearHead& head, const PartitionDataset& ds);

// --- downstream classification tasks ---

struct TaskExample {
    std::vector<int32_t> token_ids;
    std::vector<uint8_t> mask;
    std::vector<int32_t> labels;  // single-label tasks: exactly one entry
};

struct TaskDataset {
    bool multi_label = false;
    std::size_t max_len = 0;
    std::vector<std::string> class_names;
    std::vector<TaskExample> examples;
};

// "[CLS] text_a [SEP]" or "[CLS] text_a [SEP] text_b [SEP]", padded/truncated.
TaskExample encode_task_text(const Vocabulary& vocab, const std::string& text_a,
                             const std::string& text_b, std::size_t max_len);

// TSV "label\ttext_a[\ttext_b]"; multi-label rows hold comma-separated
// labels. Classes come from first appearance, or from `fixed_classes`.
TaskDataset load_task_tsv(const std::string& path, const Vocabulary& vocab, std::size_t max_len,
                          bool multi_label,
                          const std::vector<std::string>* fixed_classes = nullptr);

struct TaskTrainResult {
    FusionLayer fusion;  // layers empty when trained without adapters
    LinearHead head;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
};

// Fusion + classifier head training on a downstream task; base and
// adapters stay frozen. With an empty adapter list this trains a
// classifier head on the bare frozen base (the no-knowledge baseline).
TaskTrainResult train_task_model(const EncoderModel& base,
                                 const std::vector<const AdapterModule*>& adapters,
                                 const TaskDataset& train, const TaskDataset& val,
                                 const TrainConfig& cfg);

// Same, but requires at least one adapter.
TaskTrainResult train_fusion(const EncoderModel& base,
                             const std::vector<const AdapterModule*>& adapters,
                             const TaskDataset& train, const TaskDataset& val,
                             const TrainConfig& cfg);

double evaluate(const EncoderModel& base, const std::vector<const AdapterModule*>& adapters,
                const FusionLayer* fusion, const LinearHead& head, const TaskDataset& ds,
                Metric metric);

// Full train+evaluate per seed; mean and sample std over the seed list.
RunReport repeated_runs(const std::vector<uint64_t>& seeds,
                        const std::function<std::pair<double, std::size_t>(uint64_t)>& run,
                        Metric metric);

}  // namespace klm
