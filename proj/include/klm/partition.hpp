#pragma once
// Balanced k-way partitioning of the KG entity graph.
//
// The heuristic is the classic multilevel scheme: coarsen by heavy-edge
// matching, region-grow an initial partition on the coarsest graph, then
// uncoarsen with greedy boundary refinement at every level. A brute-force
// enumerator serves as an optimality oracle on tiny instances.

#include <cstdint>
#include <utility>
#include <vector>

#include "klm/kg.hpp"

namespace klm {

struct EntityGraph {
    std::size_t node_count = 0;
    // adjacency[u] = sorted (neighbor, weight) pairs; symmetric, no self-loops.
    std::vector<std::vector<std::pair<uint32_t, int64_t>>> adjacency;
    std::vector<int64_t> node_weight;  // >= 1 each

    int64_t total_node_weight() const;
    int64_t total_edge_weight() const;  // each undirected edge counted once
    int64_t degree_weight(uint32_t u) const;
};

struct PartitionConfig {
    uint32_t k = 20;
    double epsilon = 0.03;
    uint64_t seed = 0;
    uint32_t max_refine_passes = 10;
};

struct PartitionAssignment {
    std::vector<uint32_t> part_of;
    uint32_t k = 1;
};

struct Subgraph {
    uint32_t partition_index = 0;
    std::vector<int32_t> entity_ids;  // local -> global, ascending global id
    std::vector<Triple> triples;      // global entity/relation ids
};

enum class CutTriplePolicy { Drop, Subject };

CutTriplePolicy parse_cut_policy(const std::string& s);

struct TripleAssignment {
    std::vector<Subgraph> subgraphs;  // one per partition, possibly empty
    std::size_t dropped = 0;          // crossing triples excluded under Drop
};

// Max allowed part weight: (1 + eps) * ceil(total_weight / k), floored.
int64_t balance_cap(int64_t total_weight, uint32_t k, double epsilon);

// One node per entity; undirected edge per connected pair weighted by the
// number of triples between the pair (either direction). Self-loop triples
// contribute no edge.
EntityGraph build_entity_graph(const KnowledgeGraph& kg);

PartitionAssignment partition(const EntityGraph& g, const PartitionConfig& cfg);

int64_t edge_cut(const EntityGraph& g, const PartitionAssignment& a);

// One greedy pass of boundary moves by descending gain with per-pass move
// locking; balance-violating moves are skipped. Cut never increases.
PartitionAssignment refine_pass(const EntityGraph& g, const PartitionAssignment& a,
                                const PartitionConfig& cfg);

// Exhaustive minimum-cut search over balanced assignments, up to part
// relabeling. Guarded to node_count <= 14.
std::pair<PartitionAssignment, int64_t> brute_force_partition(const EntityGraph& g,
                                                              const PartitionConfig& cfg);

TripleAssignment assign_triples(const KnowledgeGraph& kg, const PartitionAssignment& a,
                                CutTriplePolicy policy);

// Assignment TSV: header comment with k/eps/seed/cut/dropped, then one
// "entity-surface\tpartition" line per entity.
void save_assignment(const KnowledgeGraph& kg, const PartitionAssignment& a,
                     const PartitionConfig& cfg, int64_t cut, std::size_t dropped,
                     const std::string& path);
PartitionAssignment load_assignment(const KnowledgeGraph& kg, const std::string& path);

}  // namespace klm
