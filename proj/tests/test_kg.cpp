#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "klm/kg.hpp"
#include "util.hpp"

using namespace klm;
using testutil::write_file;

TEST_CASE("load_triples counts entities, relations, triples") {
    auto path = write_file("kg_basic.tsv", "a\ttreats\tb\nc\ttreats\tb\n");
    KnowledgeGraph kg = load_triples(path, KgMode::Fused);
    CHECK(kg.entities.size() == 3);
    CHECK(kg.relations.size() == 1);
    CHECK(kg.triples.size() == 2);
    CHECK(kg.entities[0] == "a");
    CHECK(kg.entities[1] == "b");
    CHECK(kg.entities[2] == "c");
}

TEST_CASE("empty file yields an empty KG") {
    auto path = write_file("kg_empty.tsv", "");
    KnowledgeGraph kg = load_triples(path, KgMode::Fused);
    CHECK(kg.entities.empty());
    CHECK(kg.relations.empty());
    CHECK(kg.triples.empty());
}

TEST_CASE("typed row carries its type tags") {
    auto path = write_file("kg_typed.tsv",
                           "diazepam\ttreats\tbrain injury\tsubstance\tdisease\n");
    KnowledgeGraph kg = load_triples(path, KgMode::Typed);
    REQUIRE(kg.triples.size() == 1);
    CHECK(kg.triples[0].subject_type == "substance");
    CHECK(kg.triples[0].object_type == "disease");
    CHECK(kg.entities[kg.triples[0].object] == "brain injury");
    CHECK(kg.relation_key(kg.triples[0]) == "[substance] treats [disease]");
}

TEST_CASE("wrong column count is rejected") {
    auto path = write_file("kg_twocol.tsv", "a\tb\n");
    CHECK_THROWS(load_triples(path, KgMode::Fused));
}

TEST_CASE("typed mode rejects three-column rows") {
    auto path = write_file("kg_threecol.tsv", "a\tr\tb\n");
    CHECK_THROWS(load_triples(path, KgMode::Typed));
    CHECK_NOTHROW(load_triples(path, KgMode::Fused));
}

TEST_CASE("fused mode keeps type tags from five-column rows but ignores them in keys") {
    auto path = write_file("kg_fused5.tsv", "a\tr\tb\tsubstance\tdisease\n");
    KnowledgeGraph kg = load_triples(path, KgMode::Fused);
    REQUIRE(kg.triples.size() == 1);
    CHECK(kg.triples[0].has_types());
    CHECK(kg.relation_key(kg.triples[0]) == "r");
}

TEST_CASE("comments and blank lines are skipped; duplicates kept") {
    auto path = write_file("kg_comments.tsv", "# header\na\tr\tb\n\na\tr\tb\n");
    KnowledgeGraph kg = load_triples(path, KgMode::Fused);
    CHECK(kg.triples.size() == 2);
}

TEST_CASE("surface forms are lowercased with whitespace collapsed") {
    CHECK(normalize_surface("  Brain   INJURY ") == "brain injury");
    CHECK(normalize_surface("x") == "x");
    auto path = write_file("kg_norm.tsv", "Aspirin\tTREATS\t Head  Ache \n");
    KnowledgeGraph kg = load_triples(path, KgMode::Fused);
    CHECK(kg.entities[0] == "aspirin");
    CHECK(kg.entities[1] == "head ache");
    CHECK(kg.relations[0] == "treats");
}

TEST_CASE("empty surface form after normalization is rejected") {
    auto path = write_file("kg_blank_field.tsv", "a\t \tb\n");
    CHECK_THROWS(load_triples(path, KgMode::Fused));
}

static KnowledgeGraph three_triple_kg(KgMode mode) {
    auto path = testutil::write_file(
        "kg_three.tsv",
        "s1\tinduces\to1\tsubstance\tdisease\n"
        "s2\tinduces\to2\tphysiology\tdisease\n"
        "s3\ttreats\to3\tsubstance\tdisease\n");
    return load_triples(path, mode);
}

TEST_CASE("top_relations fused counts") {
    KnowledgeGraph kg = three_triple_kg(KgMode::Fused);
    auto top = top_relations(kg, 2);
    REQUIRE(top.size() == 2);
    CHECK(top[0] == std::pair<std::string, std::size_t>{"induces", 2});
    CHECK(top[1] == std::pair<std::string, std::size_t>{"treats", 1});
}

TEST_CASE("top_relations typed keys break ties lexicographically") {
    KnowledgeGraph kg = three_triple_kg(KgMode::Typed);
    auto top = top_relations(kg, 3);
    REQUIRE(top.size() == 3);
    CHECK(top[0].first == "[physiology] induces [disease]");
    CHECK(top[1].first == "[substance] induces [disease]");
    CHECK(top[2].first == "[substance] treats [disease]");
    for (const auto& [key, count] : top) CHECK(count == 1);
}

TEST_CASE("top_relations on an empty KG is empty") {
    KnowledgeGraph kg;
    CHECK(top_relations(kg, 20).empty());
}

TEST_CASE("relation-key counts are non-increasing and sum to the triple count") {
    std::mt19937_64 rng(7);
    std::string text;
    for (int i = 0; i < 200; ++i) {
        text += "e" + std::to_string(rng() % 40) + "\tr" + std::to_string(rng() % 12) + "\te" +
                std::to_string(rng() % 40) + "\n";
    }
    auto path = write_file("kg_random.tsv", text);
    KnowledgeGraph kg = load_triples(path, KgMode::Fused);
    auto top = top_relations(kg, kg.triples.size());
    std::size_t sum = 0;
    for (std::size_t i = 0; i < top.size(); ++i) {
        if (i > 0) CHECK(top[i].second <= top[i - 1].second);
        sum += top[i].second;
    }
    CHECK(sum == kg.triples.size());
}

TEST_CASE("filter_by_relations keeps exactly the requested keys") {
    KnowledgeGraph kg = three_triple_kg(KgMode::Fused);
    auto top1 = top_relations(kg, 1);
    KnowledgeGraph kept = filter_by_relations(kg, {top1[0].first});
    CHECK(kept.triples.size() == 2);
    for (const Triple& t : kept.triples) CHECK(kept.relation_key(t) == "induces");

    CHECK(filter_by_relations(kg, {}).triples.empty());
    CHECK(filter_by_relations(kg, {"no such key"}).triples.empty());
}

TEST_CASE("filtering with all keys preserves every triple, re-densified") {
    KnowledgeGraph kg = three_triple_kg(KgMode::Typed);
    std::set<std::string> all;
    for (const Triple& t : kg.triples) all.insert(kg.relation_key(t));
    KnowledgeGraph kept = filter_by_relations(kg, all);
    REQUIRE(kept.triples.size() == kg.triples.size());
    for (std::size_t i = 0; i < kg.triples.size(); ++i) {
        CHECK(kept.entities[kept.triples[i].subject] == kg.entities[kg.triples[i].subject]);
        CHECK(kept.entities[kept.triples[i].object] == kg.entities[kg.triples[i].object]);
        CHECK(kept.relation_key(kept.triples[i]) == kg.relation_key(kg.triples[i]));
    }
    // ids are dense again
    CHECK(kept.entities.size() <= kg.entities.size());
}

TEST_CASE("save then load is a fixed point") {
    KnowledgeGraph kg = three_triple_kg(KgMode::Typed);
    auto path = testutil::tmp_path("kg_roundtrip.tsv");
    save_triples(kg, path);
    KnowledgeGraph again = load_triples(path, KgMode::Typed);
    REQUIRE(again.triples.size() == kg.triples.size());
    CHECK(again.entities == kg.entities);
    CHECK(again.relations == kg.relations);
    for (std::size_t i = 0; i < kg.triples.size(); ++i)
        CHECK(again.relation_key(again.triples[i]) == kg.relation_key(kg.triples[i]));

    save_triples(again, path);
    KnowledgeGraph third = load_triples(path, KgMode::Typed);
    CHECK(third.entities == again.entities);
}

TEST_CASE("kg mode parsing") {
    CHECK(parse_kg_mode("fused") == KgMode::Fused);
    CHECK(parse_kg_mode("typed") == KgMode::Typed);
    CHECK_THROWS(parse_kg_mode("other"));
    CHECK(std::string(to_string(KgMode::Typed)) == "typed");
}
