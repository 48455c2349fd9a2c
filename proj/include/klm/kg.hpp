#pragma once
// Knowledge-graph triple store: TSV ingestion, dense entity/relation
// vocabularies, fused vs. typed relation keys, frequency-based filtering.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace klm {

enum class KgMode { Fused, Typed };

const char* to_string(KgMode mode);
KgMode parse_kg_mode(const std::string& s);  // throws on unknown

struct Triple {
    int32_t subject = -1;
    int32_t relation = -1;
    int32_t object = -1;
    std::string subject_type;  // empty unless the source row carried type tags
    std::string object_type;

    bool has_types() const { return !subject_type.empty() && !object_type.empty(); }
};

struct KnowledgeGraph {
    KgMode mode = KgMode::Fused;
    std::vector<std::string> entities;   // id -> surface form (lowercased, whitespace-normalized)
    std::vector<std::string> relations;  // id -> surface form
    std::vector<Triple> triples;

    // Fused: the relation surface form. Typed: "[subject_type] relation [object_type]".
    std::string relation_key(const Triple& t) const;
};

// Lowercase, trim, collapse internal whitespace runs to single spaces.
std::string normalize_surface(const std::string& s);

// TSV loader: '#' lines are comments, blank lines skipped. Rows have 3
// columns (s, r, o) or 5 columns (s, r, o, s_type, o_type); typed mode
// rejects 3-column rows. Duplicate triples are kept.
KnowledgeGraph load_triples(const std::string& path, KgMode mode);

// Inverse of load_triples; loading the written file reproduces the KG.
void save_triples(const KnowledgeGraph& kg, const std::string& path);

// n most frequent relation keys, descending count, ties by ascending key.
std::vector<std::pair<std::string, std::size_t>> top_relations(const KnowledgeGraph& kg,
                                                               std::size_t n);

// Keeps exactly the triples whose relation key is in `keep`; entity and
// relation ids are re-densified in first-appearance order.
KnowledgeGraph filter_by_relations(const KnowledgeGraph& kg, const std::set<std::string>& keep);

}  // namespace klm
