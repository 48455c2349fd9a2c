#pragma once
// Masked-entity-prediction corpus: whitespace vocabulary over KG surface
// forms, "[CLS] s [SEP] r [SEP]" verbalization, per-partition label spaces,
// and a little-endian binary cache format.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "klm/kg.hpp"
#include "klm/partition.hpp"

namespace klm {

struct Vocabulary {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kUnk = 1;
    static constexpr int32_t kCls = 2;
    static constexpr int32_t kSep = 3;
    static constexpr int32_t kMask = 4;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int32_t> ids;

    Vocabulary();
    int32_t add(const std::string& token);           // idempotent
    int32_t lookup(const std::string& token) const;  // kUnk if absent
    std::size_t size() const { return tokens.size(); }
};

std::vector<std::string> tokenize(const std::string& text);  // whitespace split

// Specials plus all word tokens of entity and relation surface forms in
// first-appearance order. Typed KGs additionally get their "[type]" tokens.
Vocabulary build_vocabulary(const KnowledgeGraph& kg);

void save_vocabulary(const Vocabulary& v, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

struct MaskedEntityExample {
    std::vector<int32_t> token_ids;       // length max_len
    std::vector<uint8_t> attention_mask;  // 1 = real token, 0 = [PAD]
    int32_t label = -1;                   // local index into label_entities
};

struct PartitionDataset {
    uint32_t partition_index = 0;
    std::size_t max_len = 0;
    std::vector<int32_t> label_entities;  // global entity ids, ascending
    std::vector<MaskedEntityExample> examples;
};

// Input is "[CLS] subject-words [SEP] relation-words [SEP]" padded or
// right-truncated (final [SEP] kept); the object never appears. The label
// field is left unresolved (-1).
MaskedEntityExample verbalize_triple(const Triple& t, const KnowledgeGraph& kg,
                                     const Vocabulary& vocab, std::size_t max_len);

// One example per retained triple; labels index the subgraph's entity list.
PartitionDataset build_partition_dataset(const Subgraph& sub, const KnowledgeGraph& kg,
                                         const Vocabulary& vocab, std::size_t max_len);

// Seeded shuffle then split; validation gets floor(fraction * n) examples.
std::pair<PartitionDataset, PartitionDataset> split_dataset(const PartitionDataset& ds,
                                                            double holdout_fraction,
                                                            uint64_t seed);

void save_dataset(const PartitionDataset& ds, const std::string& path);
PartitionDataset load_dataset(const std::string& path);

}  // namespace klm
