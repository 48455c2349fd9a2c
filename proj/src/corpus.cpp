#include "klm/corpus.hpp"

#include <cstring>
#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace klm {

namespace {

void write_u32(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("dataset file truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

constexpr char kDatasetMagic[5] = {'K', 'L', 'M', 'D', '1'};

}  // namespace

Vocabulary::Vocabulary() {
    const char* specials[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    for (const char* s : specials) {
        ids.emplace(s, static_cast<int32_t>(tokens.size()));
        tokens.emplace_back(s);
    }
}

int32_t Vocabulary::add(const std::string& token) {
    auto it = ids.find(token);
    if (it != ids.end()) return it->second;
    int32_t id = static_cast<int32_t>(tokens.size());
    tokens.push_back(token);
    ids.emplace(token, id);
    return id;
}

int32_t Vocabulary::lookup(const std::string& token) const {
    auto it = ids.find(token);
    return it == ids.end() ? kUnk : it->second;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

Vocabulary build_vocabulary(const KnowledgeGraph& kg) {
    Vocabulary v;
    for (const std::string& surface : kg.entities)
        for (const std::string& w : tokenize(surface)) v.add(w);
    for (const std::string& surface : kg.relations)
        for (const std::string& w : tokenize(surface)) v.add(w);
    if (kg.mode == KgMode::Typed) {
        // typed verbalization needs the "[type]" tokens
        for (const Triple& t : kg.triples) {
            if (!t.has_types()) continue;
            v.add("[" + t.subject_type + "]");
            v.add("[" + t.object_type + "]");
        }
    }
    return v;
}

void save_vocabulary(const Vocabulary& v, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
    for (const std::string& t : v.tokens) out << t << '\n';
    if (!out) throw std::runtime_error("I/O error writing " + path);
}

Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary: " + path);
    Vocabulary v;
    std::string line;
    std::size_t idx = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (idx < v.tokens.size()) {
            if (line != v.tokens[idx])
                throw std::runtime_error("vocabulary file has wrong special token order");
        } else {
            v.add(line);
        }
        ++idx;
    }
    return v;
}

MaskedEntityExample verbalize_triple(const Triple& t, const KnowledgeGraph& kg,
                                     const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 4)
        throw std::invalid_argument("verbalize_triple: max_len must hold [CLS] and two [SEP]s");
    std::vector<int32_t> ids;
    ids.push_back(Vocabulary::kCls);
    for (const std::string& w : tokenize(kg.entities.at(static_cast<std::size_t>(t.subject))))
        ids.push_back(vocab.lookup(w));
    ids.push_back(Vocabulary::kSep);
    for (const std::string& w : tokenize(kg.relation_key(t)))
        ids.push_back(vocab.lookup(w));
    ids.push_back(Vocabulary::kSep);

    MaskedEntityExample ex;
    ex.token_ids.assign(max_len, Vocabulary::kPad);
    ex.attention_mask.assign(max_len, 0);
    std::size_t used = std::min(ids.size(), max_len);
    for (std::size_t i = 0; i < used; ++i) ex.token_ids[i] = ids[i];
    if (ids.size() > max_len) ex.token_ids[max_len - 1] = Vocabulary::kSep;
    for (std::size_t i = 0; i < used; ++i) ex.attention_mask[i] = 1;
    return ex;
}

PartitionDataset build_partition_dataset(const Subgraph& sub, const KnowledgeGraph& kg,
                                         const Vocabulary& vocab, std::size_t max_len) {
    if (sub.triples.empty())
        throw std::runtime_error("build_partition_dataset: subgraph has no triples");
    PartitionDataset ds;
    ds.partition_index = sub.partition_index;
    ds.max_len = max_len;
    ds.label_entities = sub.entity_ids;  // already ascending by global id

    std::unordered_map<int32_t, int32_t> local;
    for (std::size_t i = 0; i < ds.label_entities.size(); ++i)
        local[ds.label_entities[i]] = static_cast<int32_t>(i);

    for (const Triple& t : sub.triples) {
        MaskedEntityExample ex = verbalize_triple(t, kg, vocab, max_len);
        auto it = local.find(t.object);
        if (it == local.end())
            throw std::runtime_error("build_partition_dataset: object outside subgraph entities");
        ex.label = it->second;
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

std::pair<PartitionDataset, PartitionDataset> split_dataset(const PartitionDataset& ds,
                                                            double holdout_fraction,
                                                            uint64_t seed) {
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
        throw std::invalid_argument("split_dataset: fraction must be in [0, 1)");
    std::vector<std::size_t> order(ds.examples.size());
    std::iota(order.begin(), order.end(), 0u);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t val_n = static_cast<std::size_t>(holdout_fraction * ds.examples.size());
    PartitionDataset train = ds, val = ds;
    train.examples.clear();
    val.examples.clear();
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < order.size() - val_n ? train : val).examples.push_back(ds.examples[order[i]]);
    }
    return {std::move(train), std::move(val)};
}

void save_dataset(const PartitionDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset: " + path);
    out.write(kDatasetMagic, sizeof(kDatasetMagic));
    write_u32(out, ds.partition_index);
    write_u32(out, static_cast<uint32_t>(ds.label_entities.size()));
    write_u32(out, static_cast<uint32_t>(ds.max_len));
    write_u32(out, static_cast<uint32_t>(ds.examples.size()));
    for (int32_t e : ds.label_entities) write_u32(out, static_cast<uint32_t>(e));
    for (const MaskedEntityExample& ex : ds.examples) {
        for (int32_t id : ex.token_ids) write_u32(out, static_cast<uint32_t>(id));
        out.write(reinterpret_cast<const char*>(ex.attention_mask.data()),
                  static_cast<std::streamsize>(ex.attention_mask.size()));
        write_u32(out, static_cast<uint32_t>(ex.label));
    }
    if (!out) throw std::runtime_error("I/O error writing " + path);
}

PartitionDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kDatasetMagic, 5) != 0)
        throw std::runtime_error("bad dataset magic in " + path);
    PartitionDataset ds;
    ds.partition_index = read_u32(in);
    uint32_t label_n = read_u32(in);
    ds.max_len = read_u32(in);
    uint32_t n = read_u32(in);
    ds.label_entities.resize(label_n);
    for (uint32_t i = 0; i < label_n; ++i) ds.label_entities[i] = static_cast<int32_t>(read_u32(in));
    ds.examples.resize(n);
    for (MaskedEntityExample& ex : ds.examples) {
        ex.token_ids.resize(ds.max_len);
        for (std::size_t i = 0; i < ds.max_len; ++i)
            ex.token_ids[i] = static_cast<int32_t>(read_u32(in));
        ex.attention_mask.resize(ds.max_len);
        in.read(reinterpret_cast<char*>(ex.attention_mask.data()),
                static_cast<std::streamsize>(ds.max_len));
        ex.label = static_cast<int32_t>(read_u32(in));
    }
    if (!in) throw std::runtime_error("dataset file truncated: " + path);
    return ds;
}

}  // namespace klm
