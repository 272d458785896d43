#include <cmath>
#include <vector>

#include <doctest.h>

#include "gflowmask/autodiff.hpp"
#include "gradcheck.hpp"

using gfm::NodeId;
using gfm::Parameter;
using gfm::Tape;
using gfm::Tensor;

TEST_SUITE("autodiff") {

TEST_CASE("matvec plus bias hand case") {
    Tape t;
    NodeId w = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    NodeId x = t.constant(Tensor::vec({1, 1}));
    NodeId b = t.constant(Tensor::vec({0, 0}));
    NodeId y = t.add(t.matvec(w, x), b);
    CHECK(t.value(y)[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(t.value(y)[1] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("sum and square gradients") {
    Parameter x("x", Tensor::vec({3.0, -1.0, 2.0}));
    Tape t;
    NodeId loss = t.sum_all(t.square(t.param(x)));
    t.backward(loss);
    CHECK(t.value(loss).item() == doctest::Approx(14.0).epsilon(1e-15));
    CHECK(x.grad[0] == doctest::Approx(6.0));
    CHECK(x.grad[1] == doctest::Approx(-2.0));
    CHECK(x.grad[2] == doctest::Approx(4.0));
}

TEST_CASE("cross entropy closed forms") {
    Tape t;
    NodeId l1 = t.constant(Tensor::vec({0.0, 0.0}));
    CHECK(t.value(t.cross_entropy(l1, 0)).item() ==
          doctest::Approx(0.6931471805599453).epsilon(1e-14));

    NodeId l2 = t.constant(Tensor::vec({1.0, 2.0, 3.0}));
    CHECK(t.value(t.cross_entropy(l2, 2)).item() ==
          doctest::Approx(0.40760596444438104).epsilon(1e-12));

    NodeId l3 = t.constant(Tensor::vec({0.0, 0.0, 0.0}));
    CHECK(t.value(t.cross_entropy(l3, 1)).item() ==
          doctest::Approx(1.0986122886681098).epsilon(1e-14));
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
    Parameter l("l", Tensor::vec({0.0, 0.0}));
    Tape t;
    t.backward(t.cross_entropy(t.param(l), 0));
    CHECK(l.grad[0] == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(l.grad[1] == doctest::Approx(0.5).epsilon(1e-14));

    Parameter l2("l2", Tensor::vec({0.3, -0.2, 0.5, 0.1}));
    check_gradients({&l2}, [&](Tape& tp) { return tp.cross_entropy(tp.param(l2), 2); });
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Tape t;
    NodeId a = t.constant(Tensor({2, 3}, {1, 2, 3, -5, 0, 5}));
    NodeId b = t.constant(Tensor({2, 3}, {101, 102, 103, 95, 100, 105}));
    NodeId sa = t.softmax_rows(a);
    NodeId sb = t.softmax_rows(b);
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            sum += t.value(sa).at(r, c);
            CHECK(t.value(sa).at(r, c) ==
                  doctest::Approx(t.value(sb).at(r, c)).epsilon(1e-12));
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("matmul hand case and transposed variants agree") {
    Tape t;
    NodeId a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    NodeId b = t.constant(Tensor({2, 2}, {5, 6, 7, 8}));
    NodeId c = t.matmul(a, b);
    CHECK(t.value(c).at(0, 0) == 19.0);
    CHECK(t.value(c).at(0, 1) == 22.0);
    CHECK(t.value(c).at(1, 0) == 43.0);
    CHECK(t.value(c).at(1, 1) == 50.0);

    NodeId d = t.constant(Tensor({3, 2}, {1, 0, 2, -1, 0.5, 4}));
    NodeId nt = t.matmul_nt(a, d);       // a [2,2] x d^T [2,3]
    NodeId tt = t.matmul(a, t.transpose(d));
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(t.value(nt)[i] == doctest::Approx(t.value(tt)[i]).epsilon(1e-15));
}

TEST_CASE("matmul family gradcheck") {
    Parameter a("a", Tensor({2, 3}, {0.1, -0.4, 0.7, 0.2, 0.9, -0.3}));
    Parameter b("b", Tensor({4, 3}, {0.5, 0.1, -0.2, 0.3, -0.6, 0.4,
                                     0.8, 0.2, 0.1, -0.5, 0.7, 0.6}));
    check_gradients({&a, &b}, [&](Tape& t) {
        NodeId c1 = t.matmul_nt(t.param(a), t.param(b));
        NodeId c2 = t.matmul(t.param(a), t.transpose(t.param(b)));
        return t.sum_all(t.square(t.add(c1, c2)));
    });

    Parameter w("w", Tensor({3, 2}, {0.2, -0.1, 0.4, 0.3, -0.7, 0.5}));
    Parameter x("x", Tensor::vec({0.6, -0.8}));
    check_gradients({&w, &x}, [&](Tape& t) {
        return t.sum_all(t.square(t.matvec(t.param(w), t.param(x))));
    });
}

TEST_CASE("conv2d counts overlaps with all-ones kernel") {
    Tape t;
    NodeId x = t.constant(Tensor({1, 4, 4}, 1.0));
    NodeId w = t.constant(Tensor({1, 1, 3, 3}, 1.0));
    NodeId b = t.constant(Tensor::vec({0.0}));
    NodeId y = t.conv2d(x, w, b, 1, 1);
    CHECK(t.value(y).shape == std::vector<std::size_t>{1, 4, 4});
    CHECK(t.value(y).at(0, 0, 0) == 4.0);  // corner: 2x2 taps inside
    CHECK(t.value(y).at(0, 0, 1) == 6.0);  // edge: 2x3 taps
    CHECK(t.value(y).at(0, 1, 1) == 9.0);  // interior: full 3x3
    CHECK(t.value(y).at(0, 2, 2) == 9.0);
}

TEST_CASE("conv2d stride subsamples") {
    Tape t;
    Tensor img({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
    NodeId x = t.constant(img);
    NodeId w = t.constant(Tensor({1, 1, 1, 1}, {1.0}));
    NodeId b = t.constant(Tensor::vec({0.0}));
    NodeId y = t.conv2d(x, w, b, 2, 0);
    CHECK(t.value(y).shape == std::vector<std::size_t>{1, 2, 2});
    CHECK(t.value(y).at(0, 0, 0) == 0.0);
    CHECK(t.value(y).at(0, 0, 1) == 2.0);
    CHECK(t.value(y).at(0, 1, 0) == 8.0);
    CHECK(t.value(y).at(0, 1, 1) == 10.0);
}

TEST_CASE("conv2d gradcheck") {
    Parameter x("x", Tensor({2, 3, 3}));
    Parameter w("w", Tensor({2, 2, 2, 2}));
    Parameter b("b", Tensor::vec({0.1, -0.2}));
    for (std::size_t i = 0; i < x.value.size(); ++i)
        x.value[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
    for (std::size_t i = 0; i < w.value.size(); ++i)
        w.value[i] = 0.05 * static_cast<double>(i % 5) - 0.1;
    check_gradients({&x, &w, &b}, [&](Tape& t) {
        return t.sum_all(
            t.square(t.conv2d(t.param(x), t.param(w), t.param(b), 2, 1)));
    });
}

TEST_CASE("layer norm normalizes rows") {
    Tape t;
    NodeId x = t.constant(Tensor({2, 3}, {1, 2, 3, -4, 0, 4}));
    NodeId g = t.constant(Tensor::vec({1, 1, 1}));
    NodeId b = t.constant(Tensor::vec({0, 0, 0}));
    NodeId y = t.layer_norm(x, g, b);
    for (std::size_t r = 0; r < 2; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 3; ++c) mean += t.value(y).at(r, c);
        mean /= 3.0;
        for (std::size_t c = 0; c < 3; ++c) {
            double d = t.value(y).at(r, c) - mean;
            var += d * d;
        }
        var /= 3.0;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4)); // eps shrinks it slightly
    }

    // gamma/beta shift-and-scale the normalized values
    NodeId g2 = t.constant(Tensor::vec({2, 2, 2}));
    NodeId b2 = t.constant(Tensor::vec({1, 1, 1}));
    NodeId y2 = t.layer_norm(x, g2, b2);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(t.value(y2)[i] ==
              doctest::Approx(2.0 * t.value(y)[i] + 1.0).epsilon(1e-12));
}

TEST_CASE("layer norm and softmax gradcheck") {
    Parameter x("x", Tensor({3, 4}));
    Parameter g("g", Tensor::vec({1.1, 0.9, 1.3, 0.7}));
    Parameter b("b", Tensor::vec({0.1, -0.1, 0.2, 0.0}));
    for (std::size_t i = 0; i < x.value.size(); ++i)
        x.value[i] = 0.3 * static_cast<double>(i % 5) - 0.6;
    check_gradients(
        {&x, &g, &b},
        [&](Tape& t) {
            NodeId y = t.softmax_rows(t.layer_norm(t.param(x), t.param(g), t.param(b)));
            return t.sum_all(t.square(y));
        },
        1e-5, 1e-5);
}

TEST_CASE("activation values") {
    Tape t;
    NodeId x = t.constant(Tensor::vec({0.0, 1.0, -1.0}));
    NodeId ge = t.gelu(x);
    CHECK(t.value(ge)[0] == 0.0);
    CHECK(t.value(ge)[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    CHECK(t.value(ge)[2] == doctest::Approx(-0.15865525393145707).epsilon(1e-12));

    NodeId sg = t.logistic(x);
    CHECK(t.value(sg)[0] == 0.5);
    CHECK(t.value(sg)[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));

    NodeId r = t.relu(t.constant(Tensor::vec({-2.0, 0.0, 3.0})));
    CHECK(t.value(r)[0] == 0.0);
    CHECK(t.value(r)[1] == 0.0);
    CHECK(t.value(r)[2] == 3.0);

    NodeId cl = t.clamp(t.constant(Tensor::vec({-2.0, 0.3, 3.0})), 0.0, 1.0);
    CHECK(t.value(cl)[0] == 0.0);
    CHECK(t.value(cl)[1] == 0.3);
    CHECK(t.value(cl)[2] == 1.0);
}

TEST_CASE("smooth elementwise gradcheck") {
    Parameter v("v", Tensor::vec({0.1, -0.3, 0.7}));
    check_gradients({&v}, [&](Tape& t) {
        NodeId z = t.logistic(t.param(v));              // in (0.4, 0.7)
        NodeId c = t.clamp(z, 0.2, 0.8);                // interior, passthrough
        return t.sum_all(t.log(c));
    });

    Parameter u("u", Tensor::vec({0.4, -1.2, 2.1}));
    check_gradients({&u}, [&](Tape& t) {
        return t.mean_all(t.square(t.gelu(t.param(u))));
    });
}

TEST_CASE("relu gradient masks negatives") {
    Parameter x("x", Tensor::vec({0.5, -0.7, 1.2}));
    Tape t;
    t.backward(t.sum_all(t.relu(t.param(x))));
    CHECK(x.grad[0] == 1.0);
    CHECK(x.grad[1] == 0.0);
    CHECK(x.grad[2] == 1.0);
}

TEST_CASE("row ops values and gradcheck") {
    Tape t;
    NodeId x = t.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    NodeId b = t.constant(Tensor::vec({10, 20, 30}));
    NodeId y = t.add_row_vector(x, b);
    CHECK(t.value(y).at(1, 2) == 36.0);

    NodeId m = t.constant(Tensor::vec({2, 0, -1}));
    NodeId z = t.mul_cols(x, m);
    CHECK(t.value(z).at(0, 0) == 2.0);
    CHECK(t.value(z).at(0, 1) == 0.0);
    CHECK(t.value(z).at(1, 2) == -6.0);

    NodeId rm = t.row_mean(x);
    CHECK(t.value(rm)[0] == doctest::Approx(2.5));
    CHECK(t.value(rm)[2] == doctest::Approx(4.5));

    NodeId s1 = t.slice_cols(x, 0, 2);
    NodeId s2 = t.slice_cols(x, 2, 3);
    CHECK(t.value(s1).shape == std::vector<std::size_t>{2, 2});
    CHECK(t.value(s2).at(1, 0) == 6.0);
    std::vector<NodeId> parts{s1, s2};
    NodeId cat = t.concat_cols(parts);
    for (std::size_t i = 0; i < 6; ++i) CHECK(t.value(cat)[i] == t.value(x)[i]);

    Parameter px("px", Tensor({2, 3}, {0.1, 0.5, -0.2, 0.4, -0.6, 0.3}));
    Parameter pb("pb", Tensor::vec({0.2, -0.1, 0.3}));
    Parameter pm("pm", Tensor::vec({1.5, -0.5, 0.8}));
    check_gradients({&px, &pb, &pm}, [&](Tape& tp) {
        NodeId a = tp.add_row_vector(tp.param(px), tp.param(pb));
        NodeId mm = tp.mul_cols(a, tp.param(pm));
        std::vector<NodeId> pieces{tp.slice_cols(mm, 0, 1), tp.slice_cols(mm, 1, 3)};
        NodeId back = tp.concat_cols(pieces);
        return tp.sum_all(tp.square(back));
    });

    check_gradients({&px}, [&](Tape& tp) {
        return tp.sum_all(tp.square(tp.row_mean(tp.param(px))));
    });
}

TEST_CASE("channel ops values and gradcheck") {
    Tape t;
    NodeId x = t.constant(Tensor({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
    NodeId cm = t.channel_mean(x);
    CHECK(t.value(cm)[0] == doctest::Approx(2.5));
    CHECK(t.value(cm)[1] == doctest::Approx(6.5));

    NodeId m = t.constant(Tensor::vec({2.0, 0.0}));
    NodeId y = t.mul_channels(x, m);
    CHECK(t.value(y).at(0, 1, 1) == 8.0);
    CHECK(t.value(y).at(1, 0, 0) == 0.0);

    Parameter px("px", Tensor({2, 2, 2}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8}));
    Parameter pm("pm", Tensor::vec({1.2, -0.7}));
    check_gradients({&px, &pm}, [&](Tape& tp) {
        return tp.sum_all(
            tp.square(tp.channel_mean(tp.mul_channels(tp.param(px), tp.param(pm)))));
    });
}

TEST_CASE("patchify layout and gradcheck") {
    Tape t;
    Tensor img({1, 2, 2}, {1, 2, 3, 4});
    NodeId p1 = t.patchify(t.constant(img), 1);
    CHECK(t.value(p1).shape == std::vector<std::size_t>{4, 1});
    CHECK(t.value(p1)[0] == 1.0);
    CHECK(t.value(p1)[1] == 2.0); // token order is row-major over the patch grid
    CHECK(t.value(p1)[3] == 4.0);

    Tensor rgb({3, 2, 2});
    for (std::size_t i = 0; i < 12; ++i) rgb[i] = static_cast<double>(i);
    NodeId p2 = t.patchify(t.constant(rgb), 2);
    CHECK(t.value(p2).shape == std::vector<std::size_t>{1, 12});
    for (std::size_t i = 0; i < 12; ++i)
        CHECK(t.value(p2)[i] == static_cast<double>(i)); // features ordered (c, dy, dx)

    Parameter px("px", Tensor({3, 4, 4}));
    for (std::size_t i = 0; i < px.value.size(); ++i)
        px.value[i] = 0.07 * static_cast<double>(i % 11) - 0.3;
    check_gradients({&px}, [&](Tape& tp) {
        NodeId p = tp.patchify(tp.param(px), 2);
        return tp.sum_all(tp.square(tp.row_mean(p)));
    });
}

TEST_CASE("scalar utilities") {
    Tape t;
    NodeId v = t.constant(Tensor::vec({5, 6, 7}));
    CHECK(t.value(t.pick(v, 1)).item() == 6.0);
    CHECK_THROWS_AS(t.pick(v, 3), gfm::ShapeError);

    std::vector<NodeId> xs{t.constant(Tensor::scalar(1.0)),
                           t.constant(Tensor::scalar(2.0)),
                           t.constant(Tensor::scalar(3.0))};
    CHECK(t.value(t.mean_scalars(xs)).item() == doctest::Approx(2.0).epsilon(1e-15));

    NodeId cv = t.concat_vec(t.constant(Tensor::vec({1, 2})),
                             t.constant(Tensor::vec({3})));
    CHECK(t.value(cv).shape == std::vector<std::size_t>{3});
    CHECK(t.value(cv)[2] == 3.0);

    Parameter a("a", Tensor::vec({0.4, -0.9}));
    Parameter b("b", Tensor::vec({1.3}));
    check_gradients({&a, &b}, [&](Tape& tp) {
        NodeId cat = tp.concat_vec(tp.param(a), tp.param(b));
        std::vector<NodeId> parts{tp.pick(cat, 0), tp.pick(cat, 2),
                                  tp.sum_all(tp.square(cat))};
        return tp.mean_scalars(parts);
    });
}

TEST_CASE("parameter rebinding and gradient accumulation") {
    Parameter p("w", Tensor::vec({2.0}));
    {
        Tape t;
        NodeId a = t.param(p);
        NodeId b = t.param(p);
        CHECK(a == b);
        t.backward(t.mul(a, b)); // w^2
    }
    CHECK(p.grad[0] == doctest::Approx(4.0));
    {
        Tape t;
        t.backward(t.sum_all(t.param(p)));
    }
    CHECK(p.grad[0] == doctest::Approx(5.0)); // accumulates across tapes
    p.zero_grad();
    CHECK(p.grad[0] == 0.0);
}

TEST_CASE("stop gradient blocks flow") {
    Parameter p("x", Tensor::vec({3.0}));
    Tape t;
    NodeId x = t.param(p);
    NodeId loss = t.mul(x, t.stop_gradient(x)); // x * const(3)
    t.backward(loss);
    CHECK(p.grad[0] == doctest::Approx(3.0)); // not 2x = 6
}

TEST_CASE("backward misuse throws") {
    Parameter p("x", Tensor::vec({1.0, 2.0}));
    Tape t;
    NodeId x = t.param(p);
    CHECK_THROWS_AS(t.backward(x), gfm::ShapeError); // non-scalar loss
    NodeId loss = t.sum_all(x);
    t.backward(loss);
    CHECK_THROWS_AS(t.backward(loss), gfm::Error); // one backward per tape
}

TEST_CASE("shape mismatches throw") {
    Tape t;
    NodeId a = t.constant(Tensor::vec({1, 2}));
    NodeId b = t.constant(Tensor::vec({1, 2, 3}));
    CHECK_THROWS_AS(t.add(a, b), gfm::ShapeError);
    NodeId m1 = t.constant(Tensor({2, 3}));
    NodeId m2 = t.constant(Tensor({2, 3}));
    CHECK_THROWS_AS(t.matmul(m1, m2), gfm::ShapeError);
    CHECK_THROWS_AS(t.cross_entropy(a, 2), gfm::ShapeError);
}

} // TEST_SUITE
