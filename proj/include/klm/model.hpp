#pragma once
// Transformer encoder with per-layer bottleneck adapters (single down/up
// projection, residual, identity at init), softmax-attention fusion over
// multiple adapters' outputs, and linear heads on the [CLS] position.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "klm/tensor.hpp"

namespace klm {

struct EncoderConfig {
    std::size_t layers = 2;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t ffn = 256;
    std::size_t vocab = 0;
    std::size_t max_positions = 64;
    double dropout = 0.1;
};

using NamedParams = std::vector<std::pair<std::string, nn::TensorPtr>>;

struct EncoderModel {
    EncoderConfig cfg;
    nn::TensorPtr tok_emb;  // [vocab × d]
    nn::TensorPtr pos_emb;  // [max_positions × d]
    struct Layer {
        nn::TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;  // attention, d×d each
        nn::TensorPtr w1, b1, w2, b2;                  // FFN d×ffn, ffn×d
        nn::TensorPtr ln1_g, ln1_b, ln2_g, ln2_b;
    };
    std::vector<Layer> layers;

    NamedParams named_params() const;
    void set_requires_grad(bool on);
    std::size_t parameter_count() const;
};

// Seeded Gaussian init (std 0.02) for weights, zeros for biases and
// layer-norm beta, ones for gamma.
EncoderModel build_encoder(const EncoderConfig& cfg, uint64_t seed);

struct AdapterModule {
    std::size_t bottleneck = 16;
    uint32_t partition_index = 0;
    struct Layer {
        nn::TensorPtr down;    // [d × b]
        nn::TensorPtr bias_b;  // [b]
        nn::TensorPtr up;      // [b × d], zero at init
        nn::TensorPtr bias_d;  // [d], zero at init
    };
    std::vector<Layer> layers;

    NamedParams named_params() const;
    void set_requires_grad(bool on);
    std::size_t parameter_count() const;
};

AdapterModule build_adapter(const EncoderConfig& cfg, std::size_t bottleneck,
                            uint32_t partition_index, uint64_t seed);

struct FusionLayer {
    struct Layer {
        nn::TensorPtr wq, wk, wv;  // d×d; wv identity at init, wq/wk near-identity
    };
    std::vector<Layer> layers;

    NamedParams named_params() const;
    void set_requires_grad(bool on);
    std::size_t parameter_count() const;
};

FusionLayer build_fusion(const EncoderConfig& cfg, uint64_t seed);

struct LinearHead {
    nn::TensorPtr w;  // [d × classes]
    nn::TensorPtr b;  // [classes]

    NamedParams named_params(const std::string& prefix = "head") const;
    void set_requires_grad(bool on);
    std::size_t parameter_count() const;
    std::size_t classes() const { return b->size(); }
};

LinearHead build_head(std::size_t hidden, std::size_t classes, uint64_t seed);
// Entity head with rows initialized from the base model's token embeddings
// of each label entity's surface form (mean of word embeddings).
LinearHead build_entity_head(const EncoderModel& base, const std::vector<std::string>& surfaces,
                             const class Vocabulary& vocab);

struct EncodeOptions {
    const AdapterModule* adapter = nullptr;                // single active adapter
    std::vector<const AdapterModule*> fusion_adapters;     // adapter set under fusion
    const FusionLayer* fusion = nullptr;
    bool training = false;
    std::mt19937_64* rng = nullptr;                        // required when training
    // When set, receives per-layer fusion weights, row-major [seq × N].
    std::vector<std::vector<double>>* fusion_weights_out = nullptr;
};

// Standard post-norm encoder stack; adapter or fusion applies to each
// layer's FFN-sublayer output. Returns hidden states [seq × d].
nn::TensorPtr encode(nn::Tape& tape, const EncoderModel& model, const std::vector<int32_t>& ids,
                     const std::vector<uint8_t>& mask, const EncodeOptions& opt = {});

// h + up·relu(down·h + bias_b) + bias_d, residual bottleneck.
nn::TensorPtr adapter_bottleneck(nn::Tape& tape, const nn::TensorPtr& hidden,
                                 const AdapterModule::Layer& layer);

// Per position: alpha = softmax_i((W_Q h)·(W_K o_i)/sqrt(d)); output =
// sum_i alpha_i (W_V o_i). Weights retrievable via `weights_out`.
nn::TensorPtr fusion_mix(nn::Tape& tape, const nn::TensorPtr& hidden,
                         const std::vector<nn::TensorPtr>& adapter_outputs,
                         const FusionLayer::Layer& layer,
                         std::vector<double>* weights_out = nullptr);

// hidden[0] · W + b, logits over the head's label space.
nn::TensorPtr head_logits(nn::Tape& tape, const nn::TensorPtr& hidden, const LinearHead& head);

struct ParamCounts {
    std::size_t frozen = 0;
    std::size_t trainable = 0;
    double adapter_fraction = 0.0;  // adapter params / base params
    std::size_t total() const { return frozen + trainable; }
};

ParamCounts count_parameters(const EncoderModel& model,
                             const std::vector<const AdapterModule*>& adapters,
                             const FusionLayer* fusion);
// Closed-form variant for configs too large to materialize; the base is
// counted as frozen, adapters and fusion as trainable.
ParamCounts count_parameters(const EncoderConfig& cfg, std::size_t bottleneck,
                             std::size_t n_adapters, bool with_fusion);

}  // namespace klm
