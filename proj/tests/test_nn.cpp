#include <cmath>
#include <vector>

#include <doctest.h>

#include "gflowmask/nn.hpp"
#include "gflowmask/rng.hpp"
#include "gradcheck.hpp"

using gfm::DenseLayer;
using gfm::NodeId;
using gfm::ParamRegistry;
using gfm::Tape;
using gfm::Tensor;

namespace {
std::mt19937_64 rng_at(int tag) { return gfm::substream(1234, gfm::Stream::init, tag); }
} // namespace

TEST_SUITE("nn") {

TEST_CASE("dense identity, zero, and hand cases") {
    ParamRegistry reg;
    auto rng = rng_at(0);
    DenseLayer d(reg, "d", 2, 2, rng);

    d.w->value = Tensor({2, 2}, {1, 0, 0, 1});
    d.b->value = Tensor::vec({0, 0});
    Tape t1;
    NodeId y1 = d.apply(t1, t1.constant(Tensor::vec({3, 4})));
    CHECK(t1.value(y1)[0] == 3.0);
    CHECK(t1.value(y1)[1] == 4.0);

    d.w->value = Tensor({2, 2}, {0, 0, 0, 0});
    d.b->value = Tensor::vec({1, 2});
    Tape t2;
    NodeId y2 = d.apply(t2, t2.constant(Tensor::vec({-7, 11})));
    CHECK(t2.value(y2)[0] == 1.0);
    CHECK(t2.value(y2)[1] == 2.0);

    d.w->value = Tensor({2, 2}, {1, 2, 3, 4});
    d.b->value = Tensor::vec({0, 0});
    Tape t3;
    NodeId y3 = d.apply(t3, t3.constant(Tensor::vec({1, 1})));
    CHECK(t3.value(y3)[0] == 3.0);
    CHECK(t3.value(y3)[1] == 7.0);

    // row variant agrees with the vector variant
    Tape t4;
    NodeId rows = d.apply_rows(t4, t4.constant(Tensor({2, 2}, {1, 1, 2, -1})));
    CHECK(t4.value(rows).at(0, 0) == 3.0);
    CHECK(t4.value(rows).at(0, 1) == 7.0);
    CHECK(t4.value(rows).at(1, 0) == 0.0);  // [2,-1]: 1*2 + 2*(-1)
    CHECK(t4.value(rows).at(1, 1) == 2.0);  // 3*2 + 4*(-1)
}

TEST_CASE("kaiming uniform stays in bound") {
    auto rng = rng_at(1);
    Tensor w = gfm::kaiming_uniform({64, 9}, 9, rng);
    const double bound = std::sqrt(6.0 / 9.0);
    double mx = 0.0;
    for (double v : w.data) mx = std::max(mx, std::abs(v));
    CHECK(mx <= bound);
    CHECK(mx > 0.1 * bound); // not degenerate
}

TEST_CASE("residual block with zero weights is relu of input") {
    ParamRegistry reg;
    auto rng = rng_at(2);
    gfm::ResidualBlock blk(reg, "blk", 2, 2, 1, rng);
    CHECK_FALSE(blk.projected_skip);
    blk.conv1.w->value.fill(0.0);
    blk.conv2.w->value.fill(0.0);

    Tensor x({2, 3, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 * (double)i - 4.0;
    Tape t;
    NodeId y = blk.apply(t, t.constant(x));
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(t.value(y)[i] == std::max(x[i], 0.0));
}

TEST_CASE("residual block gradient includes identity path") {
    ParamRegistry reg;
    auto rng = rng_at(3);
    gfm::ResidualBlock blk(reg, "blk", 1, 1, 1, rng);
    blk.conv1.w->value.fill(0.0);
    blk.conv2.w->value.fill(0.0);

    gfm::Parameter x("x", Tensor({1, 2, 2}, {1.0, -2.0, 3.0, 4.0}));
    Tape t;
    t.backward(t.sum_all(blk.apply(t, t.param(x))));
    CHECK(x.grad[0] == 1.0); // positive entries pass straight through the skip
    CHECK(x.grad[1] == 0.0); // negative entry killed by the output relu
    CHECK(x.grad[2] == 1.0);
    CHECK(x.grad[3] == 1.0);
}

TEST_CASE("single-pixel convolution hand value") {
    ParamRegistry reg;
    auto rng = rng_at(4);
    gfm::ConvLayer conv(reg, "c", 1, 1, 3, 1, 1, rng);
    conv.w->value.fill(0.25);
    conv.w->value.at(0, 0, 1, 1) = 5.0; // only the center tap lands on a 1x1 input
    conv.b->value[0] = 0.125;
    Tape t;
    NodeId y = conv.apply(t, t.constant(Tensor({1, 1, 1}, {2.0})));
    CHECK(t.value(y).size() == 1);
    CHECK(t.value(y)[0] == doctest::Approx(10.125).epsilon(1e-15));
}

TEST_CASE("strided residual block projects the shortcut") {
    ParamRegistry reg;
    auto rng = rng_at(5);
    gfm::ResidualBlock blk(reg, "blk", 2, 4, 2, rng);
    CHECK(blk.projected_skip);
    Tape t;
    NodeId y = blk.apply(t, t.constant(Tensor({2, 8, 8}, 0.3)));
    CHECK(t.value(y).shape == std::vector<std::size_t>{4, 4, 4});
}

TEST_CASE("attention over one token is the value projection") {
    ParamRegistry reg;
    auto rng = rng_at(6);
    gfm::AttentionBlock blk(reg, "b", 2, 1, 3, rng);
    Tape t;
    NodeId x = t.constant(Tensor({1, 2}, {0.7, -0.4}));
    NodeId att = blk.attend(t, x);
    NodeId v = blk.wv.apply_rows(t, x);
    CHECK(t.value(att)[0] == doctest::Approx(t.value(v)[0]).epsilon(1e-15));
    CHECK(t.value(att)[1] == doctest::Approx(t.value(v)[1]).epsilon(1e-15));
}

TEST_CASE("attention block with zero projections is the identity") {
    ParamRegistry reg;
    auto rng = rng_at(7);
    gfm::AttentionBlock blk(reg, "b", 4, 2, 8, rng);
    blk.wo.w->value.fill(0.0);
    blk.fc2.w->value.fill(0.0);
    Tensor x({3, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.37 * (double)i - 1.9;
    Tape t;
    NodeId y = blk.apply(t, t.constant(x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(t.value(y)[i] == x[i]);
}

TEST_CASE("two-token attention matches brute-force softmax(QK^T/sqrt(d))V") {
    ParamRegistry reg;
    auto rng = rng_at(8);
    gfm::AttentionBlock blk(reg, "b", 2, 1, 3, rng);
    blk.wq.w->value = Tensor({2, 2}, {1, 0, 0, 1});
    blk.wq.b->value.fill(0.0);
    blk.wk.w->value = Tensor({2, 2}, {1, 0, 0, 1});
    blk.wk.b->value.fill(0.0);
    blk.wv.w->value = Tensor({2, 2}, {1, 2, 3, 4});
    blk.wv.b->value.fill(0.0);

    const double X[2][2] = {{1, 0}, {0, 1}};
    // Q = K = X; V[t][j] = sum_k X[t][k] * wv[j][k]
    double V[2][2] = {{1, 3}, {2, 4}};
    const double inv = 1.0 / std::sqrt(2.0);
    double expect[2][2];
    for (int i = 0; i < 2; ++i) {
        double s0 = (X[i][0] * X[0][0] + X[i][1] * X[0][1]) * inv;
        double s1 = (X[i][0] * X[1][0] + X[i][1] * X[1][1]) * inv;
        double m = std::max(s0, s1);
        double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
        double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        for (int j = 0; j < 2; ++j) expect[i][j] = a0 * V[0][j] + a1 * V[1][j];
    }

    Tape t;
    NodeId att = blk.attend(t, t.constant(Tensor({2, 2}, {1, 0, 0, 1})));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(t.value(att).at(i, j) == doctest::Approx(expect[i][j]).epsilon(1e-12));
}

TEST_CASE("attention block is permutation equivariant") {
    ParamRegistry reg;
    auto rng = rng_at(9);
    gfm::AttentionBlock blk(reg, "b", 4, 2, 8, rng);
    Tensor x({3, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(1.0 + (double)i);
    Tensor xp = x; // swap rows 0 and 2
    for (std::size_t d = 0; d < 4; ++d) std::swap(xp.at(0, d), xp.at(2, d));

    Tape t;
    NodeId y = blk.apply(t, t.constant(x));
    NodeId yp = blk.apply(t, t.constant(xp));
    for (std::size_t d = 0; d < 4; ++d) {
        CHECK(t.value(yp).at(0, d) == doctest::Approx(t.value(y).at(2, d)).epsilon(1e-12));
        CHECK(t.value(yp).at(2, d) == doctest::Approx(t.value(y).at(0, d)).epsilon(1e-12));
        CHECK(t.value(yp).at(1, d) == doctest::Approx(t.value(y).at(1, d)).epsilon(1e-12));
    }
}

TEST_CASE("attention block gradcheck") {
    ParamRegistry reg;
    auto rng = rng_at(10);
    gfm::AttentionBlock blk(reg, "b", 2, 1, 3, rng);
    gfm::Parameter x("x", Tensor({2, 2}, {0.3, -0.8, 1.1, 0.4}));
    std::vector<gfm::Parameter*> params = reg.pointers();
    params.push_back(&x);
    check_gradients(
        params,
        [&](Tape& t) { return t.sum_all(t.square(blk.apply(t, t.param(x)))); },
        1e-5, 1e-4);
}

TEST_CASE("value-level softmax, cross entropy, argmax") {
    auto p = gfm::softmax_values({1.0, 2.0, 3.0});
    double s = p[0] + p[1] + p[2];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[2] > p[1]);
    CHECK(gfm::cross_entropy_value({1.0, 2.0, 3.0}, 2) ==
          doctest::Approx(0.40760596444438104).epsilon(1e-12));
    CHECK(gfm::argmax_index({1.0, 3.0, 3.0}) == 1); // tie -> lowest index
    CHECK_THROWS_AS(gfm::cross_entropy_value({1.0, 2.0}, 2), gfm::ShapeError);
}

TEST_CASE("param registry rejects duplicates and finds by name") {
    ParamRegistry reg;
    reg.add("a", Tensor::vec({1}));
    CHECK_THROWS_AS(reg.add("a", Tensor::vec({2})), gfm::Error);
    CHECK(reg.find("a") != nullptr);
    CHECK(reg.find("b") == nullptr);
    CHECK(reg.total_size() == 1);
}

} // TEST_SUITE
