#include "klm/model.hpp"

#include <cmath>
#include <stdexcept>

#include "klm/corpus.hpp"

namespace klm {

using nn::Tape;
using nn::TensorPtr;

namespace {

void set_group(const NamedParams& params, bool on) {
    for (const auto& [name, p] : params) {
        (void)name;
        p->requires_grad = on;
    }
}

std::size_t count_group(const NamedParams& params) {
    std::size_t n = 0;
    for (const auto& [name, p] : params) {
        (void)name;
        n += p->size();
    }
    return n;
}

}  // namespace

NamedParams EncoderModel::named_params() const {
    NamedParams out;
    out.emplace_back("encoder.tok_emb", tok_emb);
    out.emplace_back("encoder.pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const Layer& ly = layers[l];
        std::string p = "encoder.L" + std::to_string(l) + ".";
        out.emplace_back(p + "wq", ly.wq);
        out.emplace_back(p + "bq", ly.bq);
        out.emplace_back(p + "wk", ly.wk);
        out.emplace_back(p + "bk", ly.bk);
        out.emplace_back(p + "wv", ly.wv);
        out.emplace_back(p + "bv", ly.bv);
        out.emplace_back(p + "wo", ly.wo);
        out.emplace_back(p + "bo", ly.bo);
        out.emplace_back(p + "w1", ly.w1);
        out.emplace_back(p + "b1", ly.b1);
        out.emplace_back(p + "w2", ly.w2);
        out.emplace_back(p + "b2", ly.b2);
        out.emplace_back(p + "ln1_g", ly.ln1_g);
        out.emplace_back(p + "ln1_b", ly.ln1_b);
        out.emplace_back(p + "ln2_g", ly.ln2_g);
        out.emplace_back(p + "ln2_b", ly.ln2_b);
    }
    return out;
}

void EncoderModel::set_requires_grad(bool on) { set_group(named_params(), on); }
std::size_t EncoderModel::parameter_count() const { return count_group(named_params()); }

EncoderModel build_encoder(const EncoderConfig& cfg, uint64_t seed) {
    if (cfg.hidden == 0 || cfg.heads == 0 || cfg.layers == 0 || cfg.ffn == 0 || cfg.vocab == 0 ||
        cfg.max_positions == 0)
        throw std::invalid_argument("build_encoder: all dimensions must be >= 1");
    if (cfg.hidden % cfg.heads != 0)
        throw std::invalid_argument("build_encoder: hidden must be divisible by heads");

    std::mt19937_64 rng(seed);
    const double std_init = 0.02;
    std::size_t d = cfg.hidden;

    EncoderModel m;
    m.cfg = cfg;
    m.tok_emb = nn::randn({cfg.vocab, d}, std_init, rng, false);
    m.pos_emb = nn::randn({cfg.max_positions, d}, std_init, rng, false);
    m.layers.resize(cfg.layers);
    for (auto& ly : m.layers) {
        ly.wq = nn::randn({d, d}, std_init, rng, false);
        ly.bq = nn::make_tensor({d});
        ly.wk = nn::randn({d, d}, std_init, rng, false);
        ly.bk = nn::make_tensor({d});
        ly.wv = nn::randn({d, d}, std_init, rng, false);
        ly.bv = nn::make_tensor({d});
        ly.wo = nn::randn({d, d}, std_init, rng, false);
        ly.bo = nn::make_tensor({d});
        ly.w1 = nn::randn({d, cfg.ffn}, std_init, rng, false);
        ly.b1 = nn::make_tensor({cfg.ffn});
        ly.w2 = nn::randn({cfg.ffn, d}, std_init, rng, false);
        ly.b2 = nn::make_tensor({d});
        ly.ln1_g = nn::from_values({d}, std::vector<double>(d, 1.0));
        ly.ln1_b = nn::make_tensor({d});
        ly.ln2_g = nn::from_values({d}, std::vector<double>(d, 1.0));
        ly.ln2_b = nn::make_tensor({d});
    }
    return m;
}

NamedParams AdapterModule::named_params() const {
    NamedParams out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        std::string p = "adapter.L" + std::to_string(l) + ".";
        out.emplace_back(p + "down", layers[l].down);
        out.emplace_back(p + "bias_b", layers[l].bias_b);
        out.emplace_back(p + "up", layers[l].up);
        out.emplace_back(p + "bias_d", layers[l].bias_d);
    }
    return out;
}

void AdapterModule::set_requires_grad(bool on) { set_group(named_params(), on); }
std::size_t AdapterModule::parameter_count() const { return count_group(named_params()); }

AdapterModule build_adapter(const EncoderConfig& cfg, std::size_t bottleneck,
                            uint32_t partition_index, uint64_t seed) {
    if (bottleneck == 0) throw std::invalid_argument("build_adapter: bottleneck must be >= 1");
    std::mt19937_64 rng(seed);
    AdapterModule a;
    a.bottleneck = bottleneck;
    a.partition_index = partition_index;
    a.layers.resize(cfg.layers);
    for (auto& ly : a.layers) {
        ly.down = nn::randn({cfg.hidden, bottleneck}, 0.02, rng, true);
        ly.bias_b = nn::make_tensor({bottleneck}, true);
        ly.up = nn::make_tensor({bottleneck, cfg.hidden}, true);  // zero: identity at init
        ly.bias_d = nn::make_tensor({cfg.hidden}, true);
    }
    return a;
}

NamedParams FusionLayer::named_params() const {
    NamedParams out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        std::string p = "fusion.L" + std::to_string(l) + ".";
        out.emplace_back(p + "wq", layers[l].wq);
        out.emplace_back(p + "wk", layers[l].wk);
        out.emplace_back(p + "wv", layers[l].wv);
    }
    return out;
}

void FusionLayer::set_requires_grad(bool on) { set_group(named_params(), on); }
std::size_t FusionLayer::parameter_count() const { return count_group(named_params()); }

FusionLayer build_fusion(const EncoderConfig& cfg, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1e-3);
    std::size_t d = cfg.hidden;
    FusionLayer f;
    f.layers.resize(cfg.layers);
    for (auto& ly : f.layers) {
        ly.wq = nn::identity_matrix(d, true);
        for (double& v : ly.wq->value) v += noise(rng);
        ly.wk = nn::identity_matrix(d, true);
        for (double& v : ly.wk->value) v += noise(rng);
        ly.wv = nn::identity_matrix(d, true);
    }
    return f;
}

NamedParams LinearHead::named_params(const std::string& prefix) const {
    return {{prefix + ".w", w}, {prefix + ".b", b}};
}

void LinearHead::set_requires_grad(bool on) { set_group(named_params(), on); }
std::size_t LinearHead::parameter_count() const { return count_group(named_params()); }

LinearHead build_head(std::size_t hidden, std::size_t classes, uint64_t seed) {
    if (classes == 0) throw std::invalid_argument("build_head: need at least one class");
    std::mt19937_64 rng(seed);
    LinearHead h;
    h.w = nn::randn({hidden, classes}, 0.02, rng, true);
    h.b = nn::make_tensor({classes}, true);
    return h;
}

LinearHead build_entity_head(const EncoderModel& base, const std::vector<std::string>& surfaces,
                             const Vocabulary& vocab) {
    if (surfaces.empty()) throw std::invalid_argument("build_entity_head: empty label space");
    std::size_t d = base.cfg.hidden;
    LinearHead h;
    h.w = nn::make_tensor({d, surfaces.size()}, true);
    h.b = nn::make_tensor({surfaces.size()}, true);
    // tie each label column to the mean token embedding of its surface form
    for (std::size_t c = 0; c < surfaces.size(); ++c) {
        std::vector<std::string> words = tokenize(surfaces[c]);
        if (words.empty()) continue;
        for (const std::string& w : words) {
            std::size_t row = static_cast<std::size_t>(vocab.lookup(w));
            for (std::size_t j = 0; j < d; ++j)
                h.w->value[j * surfaces.size() + c] += base.tok_emb->value[row * d + j];
        }
        for (std::size_t j = 0; j < d; ++j)
            h.w->value[j * surfaces.size() + c] /= static_cast<double>(words.size());
    }
    return h;
}

TensorPtr adapter_bottleneck(Tape& tape, const TensorPtr& hidden,
                             const AdapterModule::Layer& layer) {
    TensorPtr mid = nn::relu(tape, nn::add_rowvec(tape, nn::matmul(tape, hidden, layer.down),
                                                  layer.bias_b));
    TensorPtr up = nn::add_rowvec(tape, nn::matmul(tape, mid, layer.up), layer.bias_d);
    return nn::add(tape, hidden, up);
}

TensorPtr fusion_mix(Tape& tape, const TensorPtr& hidden,
                     const std::vector<TensorPtr>& adapter_outputs,
                     const FusionLayer::Layer& layer, std::vector<double>* weights_out) {
    if (adapter_outputs.empty())
        throw std::invalid_argument("fusion_mix: need at least one adapter output");
    std::size_t d = hidden->shape[1];
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    TensorPtr q = nn::matmul(tape, hidden, layer.wq);
    std::vector<TensorPtr> scores;
    scores.reserve(adapter_outputs.size());
    for (const TensorPtr& o : adapter_outputs) {
        TensorPtr k = nn::matmul(tape, o, layer.wk);
        scores.push_back(nn::scale(tape, nn::row_sum(tape, nn::mul(tape, q, k)), inv_sqrt_d));
    }
    TensorPtr alpha = nn::softmax(tape, nn::concat_cols(tape, scores), 1);
    if (weights_out) *weights_out = alpha->value;

    TensorPtr out;
    for (std::size_t i = 0; i < adapter_outputs.size(); ++i) {
        TensorPtr v = nn::matmul(tape, adapter_outputs[i], layer.wv);
        TensorPtr term = nn::col_broadcast_mul(tape, v, nn::slice_cols(tape, alpha, i, 1));
        out = out ? nn::add(tape, out, term) : term;
    }
    return out;
}

TensorPtr head_logits(Tape& tape, const TensorPtr& hidden, const LinearHead& head) {
    if (hidden->shape.size() != 2 || hidden->shape[1] != head.w->shape[0])
        throw std::invalid_argument("head_logits: hidden/head dimension mismatch");
    TensorPtr cls = nn::slice_rows(tape, hidden, 0, 1);
    return nn::add_rowvec(tape, nn::matmul(tape, cls, head.w), head.b);
}

TensorPtr encode(Tape& tape, const EncoderModel& model, const std::vector<int32_t>& ids,
                 const std::vector<uint8_t>& mask, const EncodeOptions& opt) {
    const EncoderConfig& cfg = model.cfg;
    std::size_t seq = ids.size();
    if (seq == 0 || seq > cfg.max_positions)
        throw std::invalid_argument("encode: sequence length out of range");
    if (mask.size() != seq) throw std::invalid_argument("encode: mask length mismatch");
    for (int32_t id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab)
            throw std::invalid_argument("encode: token id out of vocabulary");
    if (opt.training && opt.rng == nullptr)
        throw std::invalid_argument("encode: training mode requires an RNG");
    if (opt.fusion && opt.fusion_adapters.empty())
        throw std::invalid_argument("encode: fusion requires at least one adapter");

    std::size_t d = cfg.hidden;
    std::size_t dh = d / cfg.heads;
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    auto drop = [&](const TensorPtr& x) {
        return opt.training ? nn::dropout(tape, x, cfg.dropout, *opt.rng, true) : x;
    };

    // additive attention bias: padded key positions get -1e9
    auto bias = nn::make_tensor({seq, seq});
    for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t j = 0; j < seq; ++j)
            if (!mask[j]) bias->value[i * seq + j] = -1e9;

    TensorPtr x = nn::add(tape, nn::embedding(tape, model.tok_emb, ids),
                          nn::slice_rows(tape, model.pos_emb, 0, seq));
    x = drop(x);

    if (opt.fusion_weights_out) opt.fusion_weights_out->assign(cfg.layers, {});

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const EncoderModel::Layer& ly = model.layers[l];
        TensorPtr q = nn::add_rowvec(tape, nn::matmul(tape, x, ly.wq), ly.bq);
        TensorPtr k = nn::add_rowvec(tape, nn::matmul(tape, x, ly.wk), ly.bk);
        TensorPtr v = nn::add_rowvec(tape, nn::matmul(tape, x, ly.wv), ly.bv);

        std::vector<TensorPtr> heads;
        heads.reserve(cfg.heads);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            TensorPtr qi = nn::slice_cols(tape, q, h * dh, dh);
            TensorPtr ki = nn::slice_cols(tape, k, h * dh, dh);
            TensorPtr vi = nn::slice_cols(tape, v, h * dh, dh);
            TensorPtr s = nn::scale(tape, nn::matmul(tape, qi, nn::transpose(tape, ki)),
                                    inv_sqrt_dh);
            TensorPtr attn = nn::softmax(tape, nn::add(tape, s, bias), 1);
            heads.push_back(nn::matmul(tape, attn, vi));
        }
        TensorPtr attn_out =
            nn::add_rowvec(tape, nn::matmul(tape, nn::concat_cols(tape, heads), ly.wo), ly.bo);
        x = nn::layer_norm(tape, nn::add(tape, x, drop(attn_out)), ly.ln1_g, ly.ln1_b);

        TensorPtr mid = nn::gelu(tape, nn::add_rowvec(tape, nn::matmul(tape, x, ly.w1), ly.b1));
        TensorPtr ffn_out = nn::add_rowvec(tape, nn::matmul(tape, mid, ly.w2), ly.b2);
        x = nn::layer_norm(tape, nn::add(tape, x, drop(ffn_out)), ly.ln2_g, ly.ln2_b);

        if (opt.adapter) {
            x = adapter_bottleneck(tape, x, opt.adapter->layers[l]);
        } else if (opt.fusion) {
            std::vector<TensorPtr> outs;
            outs.reserve(opt.fusion_adapters.size());
            for (const AdapterModule* a : opt.fusion_adapters)
                outs.push_back(adapter_bottleneck(tape, x, a->layers[l]));
            std::vector<double>* wout =
                opt.fusion_weights_out ? &(*opt.fusion_weights_out)[l] : nullptr;
            x = fusion_mix(tape, x, outs, opt.fusion->layers[l], wout);
        }
    }
    return x;
}

ParamCounts count_parameters(const EncoderModel& model,
                             const std::vector<const AdapterModule*>& adapters,
                             const FusionLayer* fusion) {
    ParamCounts counts;
    std::size_t base = 0, adapter = 0;
    auto tally = [&counts](const NamedParams& params) {
        for (const auto& [name, p] : params) {
            (void)name;
            (p->requires_grad ? counts.trainable : counts.frozen) += p->size();
        }
    };
    tally(model.named_params());
    base = model.parameter_count();
    for (const AdapterModule* a : adapters) {
        tally(a->named_params());
        adapter += a->parameter_count();
    }
    if (fusion) tally(fusion->named_params());
    counts.adapter_fraction = base > 0 ? static_cast<double>(adapter) / static_cast<double>(base)
                                       : 0.0;
    return counts;
}

ParamCounts count_parameters(const EncoderConfig& cfg, std::size_t bottleneck,
                             std::size_t n_adapters, bool with_fusion) {
    std::size_t d = cfg.hidden, f = cfg.ffn;
    std::size_t base = cfg.vocab * d + cfg.max_positions * d +
                       cfg.layers * (4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d);
    std::size_t adapter = n_adapters * cfg.layers * (2 * d * bottleneck + bottleneck + d);
    std::size_t fusion = with_fusion ? cfg.layers * 3 * d * d : 0;
    ParamCounts counts;
    counts.frozen = base;
    counts.trainable = adapter + fusion;
    counts.adapter_fraction =
        base > 0 ? static_cast<double>(adapter) / static_cast<double>(base) : 0.0;
    return counts;
}

}  // namespace klm
