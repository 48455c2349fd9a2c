#include "klm/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace klm {

namespace {
constexpr uint32_t kUnassigned = std::numeric_limits<uint32_t>::max();
}

int64_t EntityGraph::total_node_weight() const {
    return std::accumulate(node_weight.begin(), node_weight.end(), int64_t{0});
}

int64_t EntityGraph::total_edge_weight() const {
    int64_t sum = 0;
    for (uint32_t u = 0; u < node_count; ++u)
        for (auto [v, w] : adjacency[u])
            if (v > u) sum += w;
    return sum;
}

int64_t EntityGraph::degree_weight(uint32_t u) const {
    int64_t sum = 0;
    for (auto [v, w] : adjacency[u]) sum += w;
    return sum;
}

CutTriplePolicy parse_cut_policy(const std::string& s) {
    if (s == "drop") return CutTriplePolicy::Drop;
    if (s == "subject") return CutTriplePolicy::Subject;
    throw std::invalid_argument("unknown cut-triple policy: " + s);
}

int64_t balance_cap(int64_t total_weight, uint32_t k, double epsilon) {
    int64_t per_part = (total_weight + k - 1) / k;
    return static_cast<int64_t>(std::floor((1.0 + epsilon) * static_cast<double>(per_part) + 1e-9));
}

EntityGraph build_entity_graph(const KnowledgeGraph& kg) {
    EntityGraph g;
    g.node_count = kg.entities.size();
    g.node_weight.assign(g.node_count, 1);
    g.adjacency.assign(g.node_count, {});

    std::map<std::pair<uint32_t, uint32_t>, int64_t> edges;
    for (const Triple& t : kg.triples) {
        if (t.subject == t.object) continue;
        uint32_t a = static_cast<uint32_t>(std::min(t.subject, t.object));
        uint32_t b = static_cast<uint32_t>(std::max(t.subject, t.object));
        ++edges[{a, b}];
    }
    for (const auto& [e, w] : edges) {
        g.adjacency[e.first].emplace_back(e.second, w);
        g.adjacency[e.second].emplace_back(e.first, w);
    }
    for (auto& adj : g.adjacency) std::sort(adj.begin(), adj.end());
    return g;
}

int64_t edge_cut(const EntityGraph& g, const PartitionAssignment& a) {
    if (a.part_of.size() != g.node_count)
        throw std::invalid_argument("edge_cut: assignment/graph size mismatch");
    int64_t cut = 0;
    for (uint32_t u = 0; u < g.node_count; ++u)
        for (auto [v, w] : g.adjacency[u])
            if (v > u && a.part_of[u] != a.part_of[v]) cut += w;
    return cut;
}

namespace {

struct Level {
    EntityGraph graph;
    std::vector<uint32_t> fine_to_coarse;  // maps previous level's nodes into this graph
};

std::vector<int64_t> part_weights(const EntityGraph& g, const std::vector<uint32_t>& part_of,
                                  uint32_t k) {
    std::vector<int64_t> w(k, 0);
    for (uint32_t u = 0; u < g.node_count; ++u)
        if (part_of[u] != kUnassigned) w[part_of[u]] += g.node_weight[u];
    return w;
}

// Connection weight from u into each part it touches; conn[part] accumulated
// into a small scratch map to stay deterministic.
int64_t connection(const EntityGraph& g, const std::vector<uint32_t>& part_of, uint32_t u,
                   uint32_t part) {
    int64_t c = 0;
    for (auto [v, w] : g.adjacency[u])
        if (part_of[v] == part) c += w;
    return c;
}

// One FM-style pass: greedy positive-gain boundary moves with locking,
// falling back to balance-preserving pair swaps when no single move is
// feasible. Returns true if anything was applied.
bool fm_pass(const EntityGraph& g, std::vector<uint32_t>& part_of, uint32_t k, int64_t cap,
             std::vector<int64_t>& weights) {
    std::vector<char> locked(g.node_count, 0);
    bool moved_any = false;
    while (true) {
        int64_t best_gain = 0;
        uint32_t best_u = kUnassigned;
        uint32_t best_q = kUnassigned;
        for (uint32_t u = 0; u < g.node_count; ++u) {
            if (locked[u] || part_of[u] == kUnassigned) continue;
            int64_t internal = connection(g, part_of, u, part_of[u]);
            // candidate target parts = parts of u's neighbors
            std::set<uint32_t> targets;
            for (auto [v, w] : g.adjacency[u]) {
                (void)w;
                if (part_of[v] != kUnassigned && part_of[v] != part_of[u])
                    targets.insert(part_of[v]);
            }
            for (uint32_t q : targets) {
                if (weights[q] + g.node_weight[u] > cap) continue;
                int64_t gain = connection(g, part_of, u, q) - internal;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_u = u;
                    best_q = q;
                }
            }
        }
        if (best_u != kUnassigned) {
            weights[part_of[best_u]] -= g.node_weight[best_u];
            weights[best_q] += g.node_weight[best_u];
            part_of[best_u] = best_q;
            locked[best_u] = 1;
            moved_any = true;
            continue;
        }

        // Kernighan-Lin style swap across a part boundary.
        std::vector<uint32_t> boundary;
        for (uint32_t u = 0; u < g.node_count; ++u) {
            if (locked[u] || part_of[u] == kUnassigned) continue;
            for (auto [v, w] : g.adjacency[u]) {
                (void)w;
                if (part_of[v] != kUnassigned && part_of[v] != part_of[u]) {
                    boundary.push_back(u);
                    break;
                }
            }
        }
        int64_t best_swap = 0;
        uint32_t su = kUnassigned, sv = kUnassigned;
        for (std::size_t i = 0; i < boundary.size(); ++i) {
            uint32_t u = boundary[i];
            uint32_t pu = part_of[u];
            for (std::size_t j = i + 1; j < boundary.size(); ++j) {
                uint32_t v = boundary[j];
                uint32_t pv = part_of[v];
                if (pu == pv) continue;
                if (weights[pu] - g.node_weight[u] + g.node_weight[v] > cap) continue;
                if (weights[pv] - g.node_weight[v] + g.node_weight[u] > cap) continue;
                int64_t uv = 0;
                for (auto [n, w] : g.adjacency[u])
                    if (n == v) uv = w;
                int64_t gain = connection(g, part_of, u, pv) - connection(g, part_of, u, pu) +
                               connection(g, part_of, v, pu) - connection(g, part_of, v, pv) -
                               2 * uv;
                if (gain > best_swap) {
                    best_swap = gain;
                    su = u;
                    sv = v;
                }
            }
        }
        if (su == kUnassigned) break;
        uint32_t pu = part_of[su], pv = part_of[sv];
        weights[pu] += g.node_weight[sv] - g.node_weight[su];
        weights[pv] += g.node_weight[su] - g.node_weight[sv];
        part_of[su] = pv;
        part_of[sv] = pu;
        locked[su] = locked[sv] = 1;
        moved_any = true;
    }
    return moved_any;
}

// Move nodes out of overweight parts, minimum cut damage first. Returns
// false when stuck (only possible with non-unit node weights).
bool rebalance(const EntityGraph& g, std::vector<uint32_t>& part_of, uint32_t k, int64_t cap,
               std::vector<int64_t>& weights) {
    while (true) {
        uint32_t over = kUnassigned;
        for (uint32_t p = 0; p < k; ++p)
            if (weights[p] > cap) {
                over = p;
                break;
            }
        if (over == kUnassigned) return true;

        int64_t best_loss = std::numeric_limits<int64_t>::max();
        uint32_t best_u = kUnassigned, best_q = kUnassigned;
        for (uint32_t u = 0; u < g.node_count; ++u) {
            if (part_of[u] == kUnassigned || weights[part_of[u]] <= cap) continue;
            int64_t internal = connection(g, part_of, u, part_of[u]);
            for (uint32_t q = 0; q < k; ++q) {
                if (q == part_of[u] || weights[q] + g.node_weight[u] > cap) continue;
                int64_t loss = internal - connection(g, part_of, u, q);
                if (loss < best_loss) {
                    best_loss = loss;
                    best_u = u;
                    best_q = q;
                }
            }
        }
        if (best_u == kUnassigned) return false;
        weights[part_of[best_u]] -= g.node_weight[best_u];
        weights[best_q] += g.node_weight[best_u];
        part_of[best_u] = best_q;
    }
}

// Heavy-edge matching; pairs may not exceed max_merged_weight. Returns the
// coarse graph and the fine->coarse map, or nullopt-like empty graph when
// the matching stalls.
bool coarsen_once(const EntityGraph& g, std::mt19937_64& rng, int64_t max_merged_weight,
                  Level& out) {
    std::vector<uint32_t> order(g.node_count);
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<uint32_t> match(g.node_count, kUnassigned);
    std::size_t pairs = 0;
    for (uint32_t u : order) {
        if (match[u] != kUnassigned) continue;
        int64_t best_w = -1;
        uint32_t best_v = kUnassigned;
        for (auto [v, w] : g.adjacency[u]) {
            if (match[v] != kUnassigned) continue;
            if (g.node_weight[u] + g.node_weight[v] > max_merged_weight) continue;
            if (w > best_w || (w == best_w && v < best_v)) {
                best_w = w;
                best_v = v;
            }
        }
        if (best_v != kUnassigned) {
            match[u] = best_v;
            match[best_v] = u;
            ++pairs;
        } else {
            match[u] = u;
        }
    }
    std::size_t coarse_n = g.node_count - pairs;
    if (pairs == 0 || coarse_n > g.node_count * 95 / 100) return false;

    out.fine_to_coarse.assign(g.node_count, kUnassigned);
    out.graph.node_count = coarse_n;
    out.graph.node_weight.assign(coarse_n, 0);
    out.graph.adjacency.assign(coarse_n, {});
    uint32_t next_id = 0;
    for (uint32_t u = 0; u < g.node_count; ++u) {
        if (out.fine_to_coarse[u] != kUnassigned) continue;
        out.fine_to_coarse[u] = next_id;
        out.fine_to_coarse[match[u]] = next_id;  // match[u] == u for singletons
        out.graph.node_weight[next_id] =
            g.node_weight[u] + (match[u] != u ? g.node_weight[match[u]] : 0);
        ++next_id;
    }
    std::map<std::pair<uint32_t, uint32_t>, int64_t> edges;
    for (uint32_t u = 0; u < g.node_count; ++u) {
        uint32_t cu = out.fine_to_coarse[u];
        for (auto [v, w] : g.adjacency[u]) {
            uint32_t cv = out.fine_to_coarse[v];
            if (cu < cv) edges[{cu, cv}] += w;
        }
    }
    for (const auto& [e, w] : edges) {
        out.graph.adjacency[e.first].emplace_back(e.second, w);
        out.graph.adjacency[e.second].emplace_back(e.first, w);
    }
    for (auto& adj : out.graph.adjacency) std::sort(adj.begin(), adj.end());
    return true;
}

// Greedy region growing from k random seeds; isolated nodes are left
// unassigned for the caller. May exceed cap only when forced.
std::vector<uint32_t> region_grow(const EntityGraph& g, uint32_t k, int64_t cap,
                                  std::mt19937_64& rng) {
    std::vector<uint32_t> part_of(g.node_count, kUnassigned);
    std::vector<uint32_t> growable;
    for (uint32_t u = 0; u < g.node_count; ++u)
        if (!g.adjacency[u].empty()) growable.push_back(u);
    if (growable.empty()) return part_of;

    std::shuffle(growable.begin(), growable.end(), rng);
    std::vector<int64_t> weights(k, 0);
    std::vector<char> open(k, 1);
    std::size_t seeds = std::min<std::size_t>(k, growable.size());
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < seeds; ++p) {
        part_of[growable[p]] = static_cast<uint32_t>(p);
        weights[p] += g.node_weight[growable[p]];
        ++assigned;
    }

    while (assigned < growable.size()) {
        // lightest open part grows next
        uint32_t p = kUnassigned;
        for (uint32_t q = 0; q < k; ++q)
            if (open[q] && (p == kUnassigned || weights[q] < weights[p])) p = q;
        if (p == kUnassigned) {
            // all parts closed; dump the rest on the lightest part
            for (uint32_t u : growable) {
                if (part_of[u] != kUnassigned) continue;
                uint32_t q = 0;
                for (uint32_t r = 1; r < k; ++r)
                    if (weights[r] < weights[q]) q = r;
                part_of[u] = q;
                weights[q] += g.node_weight[u];
                ++assigned;
            }
            break;
        }
        // best unassigned node touching part p
        int64_t best_conn = -1;
        uint32_t best_u = kUnassigned;
        for (uint32_t u : growable) {
            if (part_of[u] != kUnassigned) continue;
            if (weights[p] + g.node_weight[u] > cap) continue;
            int64_t c = connection(g, part_of, u, p);
            if (c > best_conn || (c == best_conn && u < best_u)) {
                best_conn = c;
                best_u = u;
            }
        }
        if (best_u == kUnassigned) {
            open[p] = 0;
            continue;
        }
        part_of[best_u] = p;
        weights[p] += g.node_weight[best_u];
        ++assigned;
    }
    return part_of;
}

void project(const Level& level, const std::vector<uint32_t>& coarse,
             std::vector<uint32_t>& fine) {
    fine.resize(level.fine_to_coarse.size());
    for (std::size_t u = 0; u < fine.size(); ++u) fine[u] = coarse[level.fine_to_coarse[u]];
}

void assign_isolated(const EntityGraph& g, std::vector<uint32_t>& part_of, uint32_t k,
                     std::vector<int64_t>& weights) {
    for (uint32_t u = 0; u < g.node_count; ++u) {
        if (part_of[u] != kUnassigned) continue;
        uint32_t q = 0;
        for (uint32_t r = 1; r < k; ++r)
            if (weights[r] < weights[q]) q = r;
        part_of[u] = q;
        weights[q] += g.node_weight[u];
    }
}

void validate_config(const EntityGraph& g, const PartitionConfig& cfg) {
    if (cfg.k < 1) throw std::invalid_argument("partition: k must be >= 1");
    if (cfg.k > g.node_count) throw std::invalid_argument("partition: k exceeds node count");
    if (cfg.epsilon < 0.0 || cfg.epsilon >= 1.0)
        throw std::invalid_argument("partition: epsilon must be in [0, 1)");
}

}  // namespace

PartitionAssignment partition(const EntityGraph& g, const PartitionConfig& cfg) {
    validate_config(g, cfg);
    PartitionAssignment result;
    result.k = cfg.k;
    if (cfg.k == 1) {
        result.part_of.assign(g.node_count, 0);
        return result;
    }

    int64_t total = g.total_node_weight();
    int64_t cap = balance_cap(total, cfg.k, cfg.epsilon);
    for (int64_t w : g.node_weight)
        if (w > cap) throw std::runtime_error("partition: node weight exceeds balance cap");

    // Coarsening: heavy-edge matching until the graph is small or stalls.
    std::mt19937_64 rng(cfg.seed);
    std::vector<Level> levels;
    const EntityGraph* cur = &g;
    std::size_t target = std::max<std::size_t>(4ull * cfg.k, 64);
    int64_t merge_limit = std::max<int64_t>(2, total / (2 * cfg.k));
    while (cur->node_count > target) {
        Level next;
        if (!coarsen_once(*cur, rng, merge_limit, next)) break;
        levels.push_back(std::move(next));
        cur = &levels.back().graph;
    }

    // Multi-restart initial partitioning on the coarsest graph, then
    // uncoarsen with refinement; keep the best balanced result.
    bool have_best = false;
    int64_t best_cut = 0;
    std::vector<uint32_t> best_assign;
    constexpr int kRestarts = 4;
    for (int restart = 0; restart < kRestarts; ++restart) {
        std::mt19937_64 r(cfg.seed ^ (0x9e3779b97f4a7c15ull * (restart + 1)));
        std::vector<uint32_t> a = region_grow(*cur, cfg.k, cap, r);
        {
            auto w = part_weights(*cur, a, cfg.k);
            rebalance(*cur, a, cfg.k, cap, w);
            for (uint32_t pass = 0; pass < cfg.max_refine_passes; ++pass)
                if (!fm_pass(*cur, a, cfg.k, cap, w)) break;
        }
        for (std::size_t li = levels.size(); li-- > 0;) {
            std::vector<uint32_t> fine;
            project(levels[li], a, fine);
            a = std::move(fine);
            const EntityGraph& fg = li == 0 ? g : levels[li - 1].graph;
            auto w = part_weights(fg, a, cfg.k);
            rebalance(fg, a, cfg.k, cap, w);
            for (uint32_t pass = 0; pass < cfg.max_refine_passes; ++pass)
                if (!fm_pass(fg, a, cfg.k, cap, w)) break;
        }
        auto w = part_weights(g, a, cfg.k);
        assign_isolated(g, a, cfg.k, w);
        if (!rebalance(g, a, cfg.k, cap, w)) continue;
        for (uint32_t pass = 0; pass < cfg.max_refine_passes; ++pass)
            if (!fm_pass(g, a, cfg.k, cap, w)) break;
        if (*std::max_element(w.begin(), w.end()) > cap) continue;
        PartitionAssignment cand{a, cfg.k};
        int64_t cut = edge_cut(g, cand);
        if (!have_best || cut < best_cut) {
            have_best = true;
            best_cut = cut;
            best_assign = std::move(a);
        }
    }
    if (!have_best)
        throw std::runtime_error("partition: no balanced assignment found (epsilon too tight)");
    result.part_of = std::move(best_assign);
    return result;
}

PartitionAssignment refine_pass(const EntityGraph& g, const PartitionAssignment& a,
                                const PartitionConfig& cfg) {
    if (a.part_of.size() != g.node_count)
        throw std::invalid_argument("refine_pass: assignment/graph size mismatch");
    PartitionAssignment out = a;
    int64_t cap = balance_cap(g.total_node_weight(), a.k, cfg.epsilon);
    auto w = part_weights(g, out.part_of, a.k);
    fm_pass(g, out.part_of, a.k, cap, w);
    return out;
}

std::pair<PartitionAssignment, int64_t> brute_force_partition(const EntityGraph& g,
                                                              const PartitionConfig& cfg) {
    if (g.node_count > 14)
        throw std::invalid_argument("brute_force_partition: too many nodes (limit 14)");
    validate_config(g, cfg);
    int64_t cap = balance_cap(g.total_node_weight(), cfg.k, cfg.epsilon);

    std::vector<uint32_t> assign(g.node_count, kUnassigned);
    std::vector<int64_t> weights(cfg.k, 0);
    std::vector<uint32_t> best;
    int64_t best_cut = std::numeric_limits<int64_t>::max();

    // Canonical enumeration: node i may open at most one new part, which
    // removes part-relabeling duplicates.
    auto dfs = [&](auto&& self, uint32_t node, uint32_t used, int64_t cut) -> void {
        if (cut >= best_cut) return;
        if (node == g.node_count) {
            best_cut = cut;
            best = assign;
            return;
        }
        uint32_t limit = std::min<uint32_t>(used + 1, cfg.k);
        for (uint32_t p = 0; p < limit; ++p) {
            if (weights[p] + g.node_weight[node] > cap) continue;
            int64_t extra = 0;
            for (auto [v, w] : g.adjacency[node])
                if (v < node && assign[v] != p) extra += w;
            assign[node] = p;
            weights[p] += g.node_weight[node];
            self(self, node + 1, std::max(used, p + 1), cut + extra);
            weights[p] -= g.node_weight[node];
            assign[node] = kUnassigned;
        }
    };
    dfs(dfs, 0, 0, 0);
    if (best_cut == std::numeric_limits<int64_t>::max())
        throw std::runtime_error("brute_force_partition: no balanced assignment exists");
    return {PartitionAssignment{std::move(best), cfg.k}, best_cut};
}

TripleAssignment assign_triples(const KnowledgeGraph& kg, const PartitionAssignment& a,
                                CutTriplePolicy policy) {
    if (a.part_of.size() != kg.entities.size())
        throw std::invalid_argument("assign_triples: assignment does not cover the KG");
    TripleAssignment out;
    out.subgraphs.resize(a.k);
    std::vector<std::set<int32_t>> members(a.k);
    std::vector<char> has_triple(kg.entities.size(), 0);
    for (uint32_t p = 0; p < a.k; ++p) out.subgraphs[p].partition_index = p;

    for (const Triple& t : kg.triples) {
        has_triple[t.subject] = 1;
        has_triple[t.object] = 1;
        uint32_t ps = a.part_of[static_cast<std::size_t>(t.subject)];
        uint32_t po = a.part_of[static_cast<std::size_t>(t.object)];
        if (ps == po) {
            out.subgraphs[ps].triples.push_back(t);
            members[ps].insert(t.subject);
            members[ps].insert(t.object);
        } else if (policy == CutTriplePolicy::Subject) {
            out.subgraphs[ps].triples.push_back(t);
            members[ps].insert(t.subject);
            members[ps].insert(t.object);
        } else {
            ++out.dropped;
        }
    }
    // entities with no incident triple stay with their assigned part
    for (std::size_t e = 0; e < kg.entities.size(); ++e)
        if (!has_triple[e]) members[a.part_of[e]].insert(static_cast<int32_t>(e));
    for (uint32_t p = 0; p < a.k; ++p)
        out.subgraphs[p].entity_ids.assign(members[p].begin(), members[p].end());
    return out;
}

void save_assignment(const KnowledgeGraph& kg, const PartitionAssignment& a,
                     const PartitionConfig& cfg, int64_t cut, std::size_t dropped,
                     const std::string& path) {
    if (a.part_of.size() != kg.entities.size())
        throw std::invalid_argument("save_assignment: assignment does not cover the KG");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write assignment file: " + path);
    char header[160];
    std::snprintf(header, sizeof(header), "# k=%u epsilon=%.6g seed=%llu cut=%lld dropped=%zu\n",
                  a.k, cfg.epsilon, static_cast<unsigned long long>(cfg.seed),
                  static_cast<long long>(cut), dropped);
    out << header;
    for (std::size_t e = 0; e < kg.entities.size(); ++e)
        out << kg.entities[e] << '\t' << a.part_of[e] << '\n';
    if (!out) throw std::runtime_error("I/O error writing " + path);
}

PartitionAssignment load_assignment(const KnowledgeGraph& kg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open assignment file: " + path);
    std::unordered_map<std::string, std::size_t> ids;
    for (std::size_t e = 0; e < kg.entities.size(); ++e) ids[kg.entities[e]] = e;

    PartitionAssignment a;
    a.part_of.assign(kg.entities.size(), kUnassigned);
    a.k = 1;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::size_t pos = line.find("k=");
            if (pos != std::string::npos) a.k = static_cast<uint32_t>(std::stoul(line.substr(pos + 2)));
            continue;
        }
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("malformed assignment line: " + line);
        auto it = ids.find(line.substr(0, tab));
        if (it == ids.end())
            throw std::runtime_error("assignment entity not in KG: " + line.substr(0, tab));
        a.part_of[it->second] = static_cast<uint32_t>(std::stoul(line.substr(tab + 1)));
    }
    for (std::size_t e = 0; e < a.part_of.size(); ++e)
        if (a.part_of[e] == kUnassigned)
            throw std::runtime_error("assignment missing entity: " + kg.entities[e]);
    return a;
}

}  // namespace klm
