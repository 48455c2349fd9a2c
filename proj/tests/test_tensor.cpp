#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "klm/tensor.hpp"

using namespace klm::nn;

namespace {

TensorPtr rand_param(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    auto t = make_tensor(std::move(shape), true);
    std::normal_distribution<double> d(0.0, scale);
    for (auto& v : t->value) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
    Tape tape;
    auto x = from_values({3}, {0.0, 0.0, 0.0});
    auto y = softmax(tape, x);
    for (double v : y->value) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax is shift invariant and overflow safe") {
    Tape tape;
    auto x = from_values({3}, {1.0, -2.0, 0.5});
    auto xc = from_values({3}, {1.0 + 7.5, -2.0 + 7.5, 0.5 + 7.5});
    auto a = softmax(tape, x);
    auto b = softmax(tape, xc);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(a->value[i] == doctest::Approx(b->value[i]).epsilon(1e-12));

    auto big = from_values({3}, {100.0, 0.0, 0.0});
    auto s = softmax(tape, big);
    CHECK(s->value[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(s->value[1] < 1e-6);
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(2);
    Tape tape;
    auto x = rand_param({4, 6}, rng, 3.0);
    auto y = softmax(tape, x, -1);
    for (std::size_t r = 0; r < 4; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < 6; ++c) sum += y->value[r * 6 + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layer_norm normalizes each row") {
    Tape tape;
    auto gamma = from_values({4}, {1.0, 1.0, 1.0, 1.0});
    auto beta = from_values({4}, {0.0, 0.0, 0.0, 0.0});
    auto constant = from_values({1, 4}, {3.0, 3.0, 3.0, 3.0});
    auto zeroed = layer_norm(tape, constant, gamma, beta);
    for (double v : zeroed->value) CHECK(std::abs(v) < 1e-9);
    for (double v : zeroed->value) CHECK(std::isfinite(v));

    auto x = from_values({2, 4}, {1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0});
    auto y = layer_norm(tape, x, gamma, beta);
    for (std::size_t r = 0; r < 2; ++r) {
        double mean = 0, var = 0;
        for (std::size_t c = 0; c < 4; ++c) mean += y->value[r * 4 + c];
        mean /= 4;
        for (std::size_t c = 0; c < 4; ++c) {
            double d = y->value[r * 4 + c] - mean;
            var += d * d;
        }
        var /= 4;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("cross entropy of uniform logits is ln C") {
    Tape tape;
    auto logits = from_values({2, 5}, std::vector<double>(10, 0.7));
    auto loss = cross_entropy_loss(tape, logits, {0, 3});
    CHECK(loss->value[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy decreases as the correct logit grows") {
    double prev = 1e9;
    for (double l : {0.0, 2.0, 5.0, 10.0, 20.0}) {
        Tape tape;
        auto logits = from_values({1, 3}, {l, 0.0, 0.0});
        auto loss = cross_entropy_loss(tape, logits, {0});
        CHECK(loss->value[0] < prev);
        prev = loss->value[0];
    }
    CHECK(prev < 1e-8);
}

TEST_CASE("cross entropy of duplicated rows equals the single-row loss") {
    Tape tape;
    auto one = from_values({1, 4}, {0.3, -1.2, 0.8, 0.1});
    auto two = from_values({2, 4}, {0.3, -1.2, 0.8, 0.1, 0.3, -1.2, 0.8, 0.1});
    auto l1 = cross_entropy_loss(tape, one, {2});
    auto l2 = cross_entropy_loss(tape, two, {2, 2});
    CHECK(l1->value[0] == doctest::Approx(l2->value[0]).epsilon(1e-14));
    CHECK_THROWS(cross_entropy_loss(tape, one, {4}));
}

TEST_CASE("grad_check on a closed form") {
    auto x = from_values({2}, {1.0, 2.0}, true);
    double err = grad_check([&](Tape& t) { return sum_all(t, mul(t, x, x)); }, {x});
    CHECK(err < 1e-8);
    Tape t;
    x->ensure_grad();
    x->zero_grad();
    auto loss = sum_all(t, mul(t, x, x));
    t.backward(loss);
    CHECK(x->grad[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x->grad[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("every primitive passes grad_check") {
    std::mt19937_64 rng(5);
    auto a = rand_param({3, 4}, rng);
    auto b = rand_param({3, 4}, rng);
    auto m = rand_param({4, 5}, rng);
    auto v = rand_param({4}, rng);
    auto col = rand_param({3, 1}, rng);
    auto gamma = rand_param({4}, rng, 0.1);
    for (auto& g : gamma->value) g += 1.0;
    auto beta = rand_param({4}, rng, 0.1);

    auto check = [&](const char* name, std::function<TensorPtr(Tape&)> f,
                     std::vector<TensorPtr> params) {
        CAPTURE(name);
        CHECK(grad_check(f, params) < 1e-6);
    };

    check("add", [&](Tape& t) { return sum_all(t, add(t, a, b)); }, {a, b});
    check("sub", [&](Tape& t) { return sum_all(t, sub(t, a, b)); }, {a, b});
    check("mul", [&](Tape& t) { return sum_all(t, mul(t, a, b)); }, {a, b});
    check("scale", [&](Tape& t) { return sum_all(t, scale(t, a, -1.7)); }, {a});
    check("add_rowvec", [&](Tape& t) { return sum_all(t, mul(t, add_rowvec(t, a, v), a)); },
          {a, v});
    check("matmul", [&](Tape& t) { return mean_all(t, matmul(t, a, m)); }, {a, m});
    check("transpose", [&](Tape& t) { return sum_all(t, mul(t, transpose(t, a), transpose(t, b))); },
          {a, b});
    check("relu+offset",
          [&](Tape& t) { return sum_all(t, relu(t, add_rowvec(t, a, v))); }, {a, v});
    check("gelu", [&](Tape& t) { return sum_all(t, gelu(t, a)); }, {a});
    check("sigmoid", [&](Tape& t) { return sum_all(t, sigmoid(t, a)); }, {a});
    check("softmax", [&](Tape& t) { return sum_all(t, mul(t, softmax(t, a), b)); }, {a});
    check("layer_norm",
          [&](Tape& t) { return sum_all(t, mul(t, layer_norm(t, a, gamma, beta), b)); },
          {a, gamma, beta});
    check("row_sum", [&](Tape& t) { return sum_all(t, row_sum(t, a)); }, {a});
    check("col_broadcast_mul",
          [&](Tape& t) { return sum_all(t, col_broadcast_mul(t, a, col)); }, {a, col});
    check("concat_cols",
          [&](Tape& t) { return sum_all(t, mul(t, concat_cols(t, {a, b}), concat_cols(t, {b, a}))); },
          {a, b});
    check("concat_rows",
          [&](Tape& t) { return sum_all(t, mul(t, concat_rows(t, {a, b}), concat_rows(t, {b, a}))); },
          {a, b});
    check("slice_rows", [&](Tape& t) { return sum_all(t, slice_rows(t, a, 1, 2)); }, {a});
    check("slice_cols", [&](Tape& t) { return sum_all(t, slice_cols(t, a, 1, 2)); }, {a});
    auto c = rand_param({3, 5}, rng);
    check("embedding",
          [&](Tape& t) { return sum_all(t, mul(t, embedding(t, m, {0, 2, 2}), c)); }, {m});
    check("cross_entropy",
          [&](Tape& t) { return cross_entropy_loss(t, matmul(t, a, m), {0, 4, 2}); }, {a, m});
    check("bce_with_logits",
          [&](Tape& t) {
              return bce_with_logits(t, matmul(t, a, m),
                                     {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0});
          },
          {a, m});
}

TEST_CASE("backward is linear over summed losses") {
    std::mt19937_64 rng(9);
    auto x = rand_param({3, 3}, rng);
    auto w = rand_param({3, 3}, rng);

    auto grads_for = [&](bool combined) {
        x->ensure_grad();
        x->zero_grad();
        w->ensure_grad();
        w->zero_grad();
        if (combined) {
            Tape t;
            auto loss = add(t, sum_all(t, matmul(t, x, w)), sum_all(t, mul(t, x, x)));
            t.backward(loss);
        } else {
            Tape t1;
            t1.backward(sum_all(t1, matmul(t1, x, w)));
            Tape t2;
            t2.backward(sum_all(t2, mul(t2, x, x)));
        }
        return std::pair{x->grad, w->grad};
    };
    auto [gx1, gw1] = grads_for(true);
    auto [gx2, gw2] = grads_for(false);
    for (std::size_t i = 0; i < gx1.size(); ++i)
        CHECK(gx1[i] == doctest::Approx(gx2[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < gw1.size(); ++i)
        CHECK(gw1[i] == doctest::Approx(gw2[i]).epsilon(1e-12));
}

TEST_CASE("calling backward twice doubles leaf grads exactly") {
    auto x = from_values({2}, {0.5, -1.5}, true);
    Tape t;
    auto loss = sum_all(t, mul(t, x, x));
    x->ensure_grad();
    x->zero_grad();
    t.backward(loss);
    auto once = x->grad;
    t.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(x->grad[i] == 2.0 * once[i]);
}

TEST_CASE("dropout is identity in eval mode and inverted when training") {
    std::mt19937_64 rng(13);
    Tape t;
    auto x = from_values({1, 1000}, std::vector<double>(1000, 1.0));
    auto eval = dropout(t, x, 0.5, rng, false);
    CHECK(eval->value == x->value);

    auto trained = dropout(t, x, 0.5, rng, true);
    double mean = 0;
    int zeros = 0;
    for (double v : trained->value) {
        if (v == 0.0)
            ++zeros;
        else
            CHECK(v == doctest::Approx(2.0));
        mean += v;
    }
    mean /= 1000.0;
    CHECK(zeros > 350);
    CHECK(zeros < 650);
    CHECK(mean == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("shape validation throws") {
    Tape t;
    auto a = make_tensor({2, 3});
    auto b = make_tensor({3, 2});
    CHECK_THROWS(add(t, a, b));
    CHECK_THROWS(mul(t, a, b));
    CHECK_THROWS(matmul(t, a, a));
    auto v = make_tensor({2});
    CHECK_THROWS(add_rowvec(t, a, v));
    CHECK_THROWS(slice_rows(t, a, 1, 5));
}

TEST_CASE("randn and identity_matrix are deterministic builders") {
    std::mt19937_64 r1(7), r2(7);
    auto a = randn({3, 3}, 0.02, r1);
    auto b = randn({3, 3}, 0.02, r2);
    CHECK(a->value == b->value);
    auto eye = identity_matrix(3);
    CHECK(eye->value == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
}
