#include "klm/kg.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace klm {

const char* to_string(KgMode mode) {
    return mode == KgMode::Fused ? "fused" : "typed";
}

KgMode parse_kg_mode(const std::string& s) {
    if (s == "fused") return KgMode::Fused;
    if (s == "typed") return KgMode::Typed;
    throw std::invalid_argument("unknown kg mode: " + s);
}

std::string normalize_surface(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

std::string KnowledgeGraph::relation_key(const Triple& t) const {
    const std::string& rel = relations.at(static_cast<std::size_t>(t.relation));
    if (mode == KgMode::Typed) {
        return "[" + t.subject_type + "] " + rel + " [" + t.object_type + "]";
    }
    return rel;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
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
    return cols;
}

class Interner {
  public:
    explicit Interner(std::vector<std::string>& store) : store_(store) {}

    int32_t intern(const std::string& surface) {
        auto it = ids_.find(surface);
        if (it != ids_.end()) return it->second;
        int32_t id = static_cast<int32_t>(store_.size());
        store_.push_back(surface);
        ids_.emplace(surface, id);
        return id;
    }

  private:
    std::vector<std::string>& store_;
    std::unordered_map<std::string, int32_t> ids_;
};

}  // namespace

KnowledgeGraph load_triples(const std::string& path, KgMode mode) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open triple file: " + path);

    KnowledgeGraph kg;
    kg.mode = mode;
    Interner entities(kg.entities);
    Interner relations(kg.relations);

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;

        std::vector<std::string> cols = split_tabs(line);
        if (cols.size() != 3 && cols.size() != 5) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected 3 or 5 tab-separated columns, got " +
                                     std::to_string(cols.size()));
        }
        if (mode == KgMode::Typed && cols.size() != 5) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": typed mode requires 5 columns");
        }
        for (auto& c : cols) {
            c = normalize_surface(c);
            if (c.empty()) {
                throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                         ": empty surface form");
            }
        }

        Triple t;
        t.subject = entities.intern(cols[0]);
        t.relation = relations.intern(cols[1]);
        t.object = entities.intern(cols[2]);
        if (cols.size() == 5) {
            t.subject_type = cols[3];
            t.object_type = cols[4];
        }
        kg.triples.push_back(std::move(t));
    }
    if (in.bad()) throw std::runtime_error("I/O error reading " + path);
    return kg;
}

void save_triples(const KnowledgeGraph& kg, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write triple file: " + path);
    for (const Triple& t : kg.triples) {
        out << kg.entities.at(static_cast<std::size_t>(t.subject)) << '\t'
            << kg.relations.at(static_cast<std::size_t>(t.relation)) << '\t'
            << kg.entities.at(static_cast<std::size_t>(t.object));
        if (t.has_types()) out << '\t' << t.subject_type << '\t' << t.object_type;
        out << '\n';
    }
    if (!out) throw std::runtime_error("I/O error writing " + path);
}

std::vector<std::pair<std::string, std::size_t>> top_relations(const KnowledgeGraph& kg,
                                                               std::size_t n) {
    if (n < 1) throw std::invalid_argument("top_relations: n must be >= 1");
    std::unordered_map<std::string, std::size_t> counts;
    for (const Triple& t : kg.triples) ++counts[kg.relation_key(t)];

    std::vector<std::pair<std::string, std::size_t>> table(counts.begin(), counts.end());
    std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (table.size() > n) table.resize(n);
    return table;
}

KnowledgeGraph filter_by_relations(const KnowledgeGraph& kg, const std::set<std::string>& keep) {
    KnowledgeGraph out;
    out.mode = kg.mode;
    Interner entities(out.entities);
    Interner relations(out.relations);
    for (const Triple& t : kg.triples) {
        if (!keep.count(kg.relation_key(t))) continue;
        Triple nt = t;
        nt.subject = entities.intern(kg.entities.at(static_cast<std::size_t>(t.subject)));
        nt.relation = relations.intern(kg.relations.at(static_cast<std::size_t>(t.relation)));
        nt.object = entities.intern(kg.entities.at(static_cast<std::size_t>(t.object)));
        out.triples.push_back(std::move(nt));
    }
    return out;
}

}  // namespace klm
