#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "klm/checkpoint.hpp"
#include "klm/trainer.hpp"
#include "util.hpp"

using namespace klm;
using klm::nn::TensorPtr;

namespace {

EncoderConfig toy_config(std::size_t vocab) {
    EncoderConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn = 32;
    cfg.vocab = vocab;
    cfg.max_positions = 12;
    cfg.dropout = 0.0;
    return cfg;
}

struct Pipeline {
    KnowledgeGraph kg;
    Vocabulary vocab;
    PartitionDataset dataset;
};

Pipeline toy_pipeline() {
    std::string rows;
    const char* subjects[] = {"ant", "bee", "cat", "dog", "elk", "fox"};
    const char* objects[] = {"pond", "cave", "nest"};
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 2; ++j)
            rows += std::string(subjects[i]) + "\tlives in\t" + objects[(i + j) % 3] + "\n";
    auto path = testutil::write_file("trainer_kg.tsv", rows);
    Pipeline p;
    p.kg = load_triples(path, KgMode::Fused);
    p.vocab = build_vocabulary(p.kg);
    PartitionAssignment assign{std::vector<uint32_t>(p.kg.entities.size(), 0), 1};
    TripleAssignment ta = assign_triples(p.kg, assign, CutTriplePolicy::Drop);
    p.dataset = build_partition_dataset(ta.subgraphs[0], p.kg, p.vocab, 8);
    return p;
}

}  // namespace

TEST_CASE("stlr schedule hits its landmarks") {
    CHECK(stlr_lr(10, 100, 1e-5) == doctest::Approx(1e-5).epsilon(1e-15));
    CHECK(stlr_lr(100, 100, 1e-5) == 0.0);
    CHECK(stlr_lr(55, 100, 1e-5) == doctest::Approx(0.5e-5).epsilon(1e-12));
    CHECK_THROWS(stlr_lr(1, 1, 1e-5));
    CHECK_THROWS(stlr_lr(0, 100, 1e-5));
    CHECK_THROWS(stlr_lr(101, 100, 1e-5));
}

TEST_CASE("stlr is piecewise linear with its peak exactly at the warmup end") {
    for (std::size_t total : {10ul, 100ul, 1000ul}) {
        std::size_t warm = static_cast<std::size_t>(std::ceil(0.1 * total));
        double peak = 3e-4;
        double best = -1.0;
        std::size_t best_step = 0;
        std::vector<double> lrs(total + 1);
        for (std::size_t s = 1; s <= total; ++s) {
            lrs[s] = stlr_lr(s, total, peak);
            if (lrs[s] > best) {
                best = lrs[s];
                best_step = s;
            }
        }
        CHECK(best_step == warm);
        CHECK(best == doctest::Approx(peak).epsilon(1e-15));
        for (std::size_t s = 2; s + 1 <= total; ++s) {
            if (s + 1 <= warm || s - 1 > warm) {
                double second = lrs[s + 1] - 2 * lrs[s] + lrs[s - 1];
                CHECK(std::abs(second) < 1e-18);
            }
        }
    }
}

TEST_CASE("adam first step moves by roughly -lr sign(g)") {
    auto p = nn::from_values({1}, {1.0}, true);
    p->ensure_grad();
    p->grad = {0.3};
    AdamState state({p});
    adam_update({p}, state, 0.01);
    CHECK(p->value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-4));

    auto q = nn::from_values({1}, {1.0}, true);
    q->ensure_grad();
    q->grad = {0.0};
    AdamState qs({q});
    adam_update({q}, qs, 0.01);
    CHECK(q->value[0] == 1.0);
}

TEST_CASE("adam is deterministic and rejects non-finite grads") {
    auto run = [] {
        auto p = nn::from_values({3}, {0.5, -0.2, 0.9}, true);
        p->ensure_grad();
        p->grad = {0.1, -0.4, 0.7};
        AdamState s({p});
        adam_update({p}, s, 0.005);
        adam_update({p}, s, 0.003);
        return p->value;
    };
    CHECK(run() == run());

    auto bad = nn::from_values({1}, {1.0}, true);
    bad->ensure_grad();
    bad->grad = {std::nan("")};
    AdamState bs({bad});
    CHECK_THROWS(adam_update({bad}, bs, 0.01));
}

TEST_CASE("gradient clipping caps the global norm") {
    auto a = nn::from_values({2}, {0.0, 0.0}, true);
    a->ensure_grad();
    a->grad = {3.0, 4.0};
    double before = clip_global_norm({a}, 1.0);
    CHECK(before == doctest::Approx(5.0));
    CHECK(a->grad[0] == doctest::Approx(0.6));
    CHECK(a->grad[1] == doctest::Approx(0.8));

    a->grad = {0.3, 0.4};
    CHECK(clip_global_norm({a}, 1.0) == doctest::Approx(0.5));
    CHECK(a->grad[0] == doctest::Approx(0.3));  // untouched below the cap
}

TEST_CASE("run report mean and sample std") {
    RunReport r;
    r.metric = Metric::Accuracy;
    r.seeds = {7, 7, 7};
    r.scores = {0.75, 0.75, 0.75};
    r.best_epochs = {1, 1, 1};
    r.finalize();
    CHECK(r.mean == doctest::Approx(0.75));
    CHECK(r.stddev == 0.0);

    RunReport one;
    one.seeds = {3};
    one.scores = {0.9};
    one.best_epochs = {2};
    one.finalize();
    CHECK(one.mean == doctest::Approx(0.9));
    CHECK(one.stddev == 0.0);

    RunReport two;
    two.seeds = {1, 2};
    two.scores = {0.5, 0.7};
    two.best_epochs = {1, 1};
    two.finalize();
    CHECK(two.mean == doctest::Approx(0.6));
    CHECK(two.stddev == doctest::Approx(std::sqrt(0.02 / 1.0)).epsilon(1e-9));
}

TEST_CASE("run report file carries per-seed rows and the mean/std footer") {
    RunReport r;
    r.metric = Metric::MicroF1;
    r.seeds = {11, 12};
    r.scores = {0.25, 0.75};
    r.best_epochs = {3, 4};
    r.finalize();
    auto path = testutil::tmp_path("report.tsv");
    save_run_report(r, path);
    std::string text = testutil::read_file(path);
    CHECK(text.find("11\tmicro-f1\t0.250000\t3\n") != std::string::npos);
    CHECK(text.find("12\tmicro-f1\t0.750000\t4\n") != std::string::npos);
    CHECK(text.find("mean\t0.500000\tstd\t") != std::string::npos);
}

TEST_CASE("train_adapter freezes the base, improves on the initial loss, reproduces by seed") {
    Pipeline p = toy_pipeline();
    EncoderConfig cfg = toy_config(p.vocab.size());
    EncoderModel base = build_encoder(cfg, 21);
    base.set_requires_grad(false);
    std::string base_before = checkpoint_bytes(base.named_params());

    TrainConfig tc;
    tc.epochs = 12;
    tc.patience = 6;
    tc.batch_size = 4;
    tc.peak_lr = 5e-3;
    tc.seed = 1;
    tc.bottleneck = 8;

    AdapterTrainResult r1 = train_adapter(base, p.dataset, p.kg, p.vocab, tc);
    CHECK(checkpoint_bytes(base.named_params()) == base_before);
    CHECK(r1.best_val_loss <= r1.initial_loss);
    CHECK(r1.best_epoch >= 1);
    CHECK(r1.best_epoch <= tc.epochs);

    AdapterTrainResult r2 = train_adapter(base, p.dataset, p.kg, p.vocab, tc);
    CHECK(checkpoint_bytes(r1.adapter.named_params()) ==
          checkpoint_bytes(r2.adapter.named_params()));
    CHECK(checkpoint_bytes(r1.head.named_params()) == checkpoint_bytes(r2.head.named_params()));

    double acc = entity_prediction_accuracy(base, r1.adapter, r1.head, p.dataset);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);

    PartitionDataset empty;
    CHECK_THROWS(train_adapter(base, empty, p.kg, p.vocab, tc));
}

TEST_CASE("encode_task_text wraps segments in CLS/SEP") {
    Vocabulary v;
    v.add("hello");
    v.add("world");
    TaskExample one = encode_task_text(v, "hello world", "", 6);
    CHECK(one.token_ids == std::vector<int32_t>{Vocabulary::kCls, v.lookup("hello"),
                                                v.lookup("world"), Vocabulary::kSep,
                                                Vocabulary::kPad, Vocabulary::kPad});
    CHECK(one.mask == std::vector<uint8_t>{1, 1, 1, 1, 0, 0});

    TaskExample two = encode_task_text(v, "hello", "world", 6);
    CHECK(two.token_ids == std::vector<int32_t>{Vocabulary::kCls, v.lookup("hello"),
                                                Vocabulary::kSep, v.lookup("world"),
                                                Vocabulary::kSep, Vocabulary::kPad});
}

TEST_CASE("task TSV loading: class order, fixed classes, multi-label") {
    Vocabulary v;
    v.add("x");
    auto path = testutil::write_file("task.tsv", "pos\tx\nneg\tx\npos\tx\n");
    TaskDataset ds = load_task_tsv(path, v, 6, false);
    CHECK(ds.class_names == std::vector<std::string>{"pos", "neg"});
    REQUIRE(ds.examples.size() == 3);
    CHECK(ds.examples[0].labels == std::vector<int32_t>{0});
    CHECK(ds.examples[1].labels == std::vector<int32_t>{1});

    std::vector<std::string> fixed = {"neg", "pos"};
    TaskDataset fixed_ds = load_task_tsv(path, v, 6, false, &fixed);
    CHECK(fixed_ds.examples[0].labels == std::vector<int32_t>{1});

    auto mpath = testutil::write_file("task_multi.tsv", "a,b\tx\nb\tx\n");
    TaskDataset multi = load_task_tsv(mpath, v, 6, true);
    CHECK(multi.multi_label);
    CHECK(multi.examples[0].labels == std::vector<int32_t>{0, 1});
    CHECK(multi.examples[1].labels == std::vector<int32_t>{1});

    std::vector<std::string> missing = {"a"};
    CHECK_THROWS(load_task_tsv(path, v, 6, false, &missing));
}

TEST_CASE("evaluate: exact accuracy and pooled micro-F1 arithmetic") {
    Vocabulary v;
    v.add("x");
    EncoderConfig cfg = toy_config(v.size());
    EncoderModel base = build_encoder(cfg, 31);
    base.set_requires_grad(false);

    LinearHead head = build_head(cfg.hidden, 2, 1);
    for (auto& w : head.w->value) w = 0.0;
    head.b->value = {2.0, -2.0};  // constant class-0 predictor

    TaskExample ex = encode_task_text(v, "x", "", 6);
    TaskDataset single;
    single.max_len = 6;
    single.class_names = {"zero", "one"};
    TaskExample e0 = ex;
    e0.labels = {0};
    TaskExample e1 = ex;
    e1.labels = {1};
    single.examples = {e0, e1};
    CHECK(evaluate(base, {}, nullptr, head, single, Metric::Accuracy) == doctest::Approx(0.5));

    TaskDataset multi;
    multi.multi_label = true;
    multi.max_len = 6;
    multi.class_names = {"zero", "one"};
    TaskExample m0 = ex;
    m0.labels = {0};
    TaskExample m01 = ex;
    m01.labels = {0, 1};
    TaskExample mnone = ex;
    mnone.labels = {};
    multi.examples = {m0, m01, mnone};
    // predictions: class 0 on every row -> TP=2, FP=1, FN=1
    CHECK(evaluate(base, {}, nullptr, head, multi, Metric::MicroF1) ==
          doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    TaskDataset empty;
    CHECK_THROWS(evaluate(base, {}, nullptr, head, empty, Metric::Accuracy));
}

TEST_CASE("task training: baseline head only, fusion freezes adapters") {
    Pipeline p = toy_pipeline();
    EncoderConfig cfg = toy_config(p.vocab.size());
    EncoderModel base = build_encoder(cfg, 41);
    base.set_requires_grad(false);

    TrainConfig tc;
    tc.epochs = 4;
    tc.patience = 4;
    tc.batch_size = 2;
    tc.peak_lr = 1e-2;
    tc.seed = 3;
    tc.max_seq_len = 8;

    auto path = testutil::write_file("task_train.tsv",
                                     "yes\tant lives in pond\nno\tant lives in cave\n"
                                     "yes\tbee lives in cave\nno\tbee lives in pond\n");
    TaskDataset train = load_task_tsv(path, p.vocab, tc.max_seq_len, false);

    TaskTrainResult baseline = train_task_model(base, {}, train, train, tc);
    CHECK(baseline.fusion.layers.empty());
    CHECK(baseline.head.classes() == 2);

    TrainConfig atc = tc;
    atc.bottleneck = 4;
    AdapterTrainResult ar = train_adapter(base, p.dataset, p.kg, p.vocab, atc);
    ar.adapter.set_requires_grad(false);
    std::string adapter_before = checkpoint_bytes(ar.adapter.named_params());
    std::string base_before = checkpoint_bytes(base.named_params());

    TaskTrainResult fused = train_fusion(base, {&ar.adapter}, train, train, tc);
    CHECK(fused.fusion.layers.size() == cfg.layers);
    CHECK(checkpoint_bytes(ar.adapter.named_params()) == adapter_before);
    CHECK(checkpoint_bytes(base.named_params()) == base_before);

    CHECK_THROWS(train_fusion(base, {}, train, train, tc));

    double score = evaluate(base, {&ar.adapter}, &fused.fusion, fused.head, train,
                            Metric::Accuracy);
    CHECK(score >= 0.0);
    CHECK(score <= 1.0);
}

TEST_CASE("repeated runs aggregate in seed order") {
    RunReport r = repeated_runs(
        {5, 6, 5},
        [](uint64_t seed) {
            return std::make_pair(seed == 6 ? 1.0 : 0.5, static_cast<std::size_t>(seed));
        },
        Metric::Accuracy);
    CHECK(r.seeds == std::vector<uint64_t>{5, 6, 5});
    CHECK(r.scores == std::vector<double>{0.5, 1.0, 0.5});
    CHECK(r.best_epochs == std::vector<std::size_t>{5, 6, 5});
    CHECK(r.mean == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("checkpoints round-trip exactly and validate names/shapes") {
    Pipeline p = toy_pipeline();
    EncoderConfig cfg = toy_config(p.vocab.size());
    EncoderModel a = build_encoder(cfg, 51);
    EncoderModel b = build_encoder(cfg, 52);
    CHECK(checkpoint_bytes(a.named_params()) != checkpoint_bytes(b.named_params()));

    auto path = testutil::tmp_path("enc.klmc");
    save_checkpoint(path, a.named_params(), "{\"note\":1}");
    load_checkpoint_into(path, b.named_params());
    CHECK(checkpoint_bytes(a.named_params()) == checkpoint_bytes(b.named_params()));
    CHECK(testutil::read_file(path + ".json").find("note") != std::string::npos);
    CHECK(testutil::read_file(path).rfind("KLMC1", 0) == 0);

    EncoderConfig other = cfg;
    other.hidden = 32;
    other.heads = 2;
    EncoderModel wrong = build_encoder(other, 1);
    CHECK_THROWS(load_checkpoint_into(path, wrong.named_params()));

    AdapterModule adapter = build_adapter(cfg, 4, 0, 1);
    CHECK_THROWS(load_checkpoint_into(path, adapter.named_params()));
}

TEST_CASE("train config validation and metric parsing") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.epochs = 0;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    c.warmup_fraction = 1.0;
    CHECK_THROWS(c.validate());
    CHECK(parse_metric("accuracy") == Metric::Accuracy);
    CHECK(parse_metric("micro-f1") == Metric::MicroF1);
    CHECK_THROWS(parse_metric("f2"));
}
