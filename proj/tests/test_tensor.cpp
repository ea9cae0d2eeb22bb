#include <catch2/catch_amalgamated.hpp>

#include "voxdiff/gradcheck.hpp"
#include "voxdiff/ops_spatial.hpp"
#include "voxdiff/serialize.hpp"

using namespace voxdiff;

namespace {
Tensor t2(std::vector<Scalar> v) { return Tensor::from_data({2, 2}, std::move(v)); }
}  // namespace

TEST_CASE("matmul identity and hand-computed product") {
    Tensor eye = t2({1, 0, 0, 1});
    Tensor a = t2({1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == a.data()[i]);

    // brute-force scalar-loop oracle
    Tensor b = t2({5, 6, 7, 8});
    Tensor c = matmul(a, b);
    Scalar expect[4];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            Scalar acc = 0;
            for (int k = 0; k < 2; ++k) acc += a.data()[i * 2 + k] * b.data()[k * 2 + j];
            expect[i * 2 + j] = acc;
        }
    CHECK(c.data()[0] == 19.0);
    CHECK(c.data()[1] == 22.0);
    CHECK(c.data()[2] == 43.0);
    CHECK(c.data()[3] == 50.0);
    for (int i = 0; i < 4; ++i) CHECK(c.data()[i] == expect[i]);
}

TEST_CASE("matmul shape errors name both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    Scalar err = finite_diff_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a);
    CHECK(err < 1e-6);
    err = finite_diff_check([&](const Tensor& x) { return sum(matmul(a, x)); }, b);
    CHECK(err < 1e-6);
}

TEST_CASE("matmul broadcasts batch dims") {
    Rng rng(9);
    Tensor a = Tensor::randn({2, 3, 4, 5}, rng);
    Tensor b = Tensor::randn({5, 6}, rng);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 3, 4, 6});
    // one spot-check against the scalar loop
    Scalar acc = 0;
    for (int k = 0; k < 5; ++k)
        acc += a.data()[((1 * 3 + 2) * 4 + 3) * 5 + k] * b.data()[k * 6 + 4];
    CHECK(std::abs(c.data()[((1 * 3 + 2) * 4 + 3) * 6 + 4] - acc) < 1e-14);

    Scalar err = finite_diff_check([&](const Tensor& x) { return sum(square(matmul(a, x))); }, b);
    CHECK(err < 1e-5);
}

TEST_CASE("softmax normalization and stability") {
    Tensor s = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
    for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));

    // direct exp/sum oracle
    Tensor x = Tensor::from_data({3}, {10, 0, 0});
    Tensor y = softmax(x, 0);
    Scalar z = std::exp(10.0) + 2.0;
    CHECK(std::abs(y.data()[0] - std::exp(10.0) / z) < 1e-12);
    CHECK(std::abs(y.data()[1] - 1.0 / z) < 1e-12);

    Rng rng(3);
    Tensor big = Tensor::rand_uniform({4, 9}, rng, -50, 50);
    Tensor sm = softmax(big, 1);
    for (int r = 0; r < 4; ++r) {
        Scalar total = 0;
        for (int c = 0; c < 9; ++c) {
            Scalar v = sm.data()[r * 9 + c];
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
    }

    CHECK_THROWS_AS(softmax(big, 2), ShapeError);

    Scalar err = finite_diff_check(
        [&](const Tensor& t) { return sum(square(softmax(t, 1))); }, Tensor::randn({3, 5}, rng));
    CHECK(err < 1e-6);
}

TEST_CASE("layer_norm closed forms") {
    Tensor gain = Tensor::ones({3});
    Tensor bias = Tensor::zeros({3});
    Tensor constant = layer_norm(Tensor::from_data({3}, {4, 4, 4}), gain, bias);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(constant.data()[i]) < 1e-9);

    Tensor g2 = Tensor::ones({2});
    Tensor b2 = Tensor::zeros({2});
    Tensor pair = layer_norm(Tensor::from_data({2}, {1, 3}), g2, b2);
    CHECK(std::abs(pair.data()[0] + 1.0) < 1e-4);
    CHECK(std::abs(pair.data()[1] - 1.0) < 1e-4);

    CHECK_THROWS_AS(layer_norm(Tensor::zeros({4}), gain, Tensor::zeros({4})), ShapeError);

    Rng rng(11);
    Tensor x = Tensor::randn({4, 6}, rng);
    Tensor g = Tensor::randn({6}, rng);
    Tensor b = Tensor::randn({6}, rng);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(layer_norm(t, g, b))); }, x) < 1e-6);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(layer_norm(x, t, b))); }, g) < 1e-6);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(layer_norm(x, g, t))); }, b) < 1e-6);
}

TEST_CASE("bilinear_sample interpolation identities") {
    Rng rng(5);
    Tensor feat = Tensor::randn({8, 8, 3}, rng);

    // integer lattice coordinates reduce to indexing
    Tensor at = bilinear_sample(feat, Tensor::from_data({2}, {3, 5}));
    for (int c = 0; c < 3; ++c) CHECK(at.data()[c] == feat.data()[(5 * 8 + 3) * 3 + c]);

    // center of a 2x2 patch is the mean of the four pixels
    Tensor mid = bilinear_sample(feat, Tensor::from_data({2}, {2.5, 4.5}));
    for (int c = 0; c < 3; ++c) {
        Scalar mean4 = 0.25 * (feat.data()[(4 * 8 + 2) * 3 + c] + feat.data()[(4 * 8 + 3) * 3 + c] +
                               feat.data()[(5 * 8 + 2) * 3 + c] + feat.data()[(5 * 8 + 3) * 3 + c]);
        CHECK(std::abs(mid.data()[c] - mean4) < 1e-15);
    }

    // zero padding outside the image
    Tensor far = bilinear_sample(feat, Tensor::from_data({2}, {100.0, 3.0}));
    for (int c = 0; c < 3; ++c) CHECK(far.data()[c] == 0.0);

    // gradients wrt uv away from the integer lattice
    Tensor uv = Tensor::from_data({4, 2}, {1.3, 2.7, 4.6, 5.2, 0.4, 0.9, 6.2, 3.8});
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(bilinear_sample(feat, t))); },
                            uv) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(bilinear_sample(t, uv))); },
                            feat) < 1e-6);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(x).backward();
    for (Scalar g : x.grad()) CHECK(g == 1.0);

    Tensor y = Tensor::from_data({3}, {1, 2, 3}, true);
    sum(square(y)).backward();
    CHECK(y.grad()[0] == 2.0);
    CHECK(y.grad()[1] == 4.0);
    CHECK(y.grad()[2] == 6.0);

    CHECK_THROWS_AS(x.backward(), ContractError);  // non-scalar loss
}

TEST_CASE("backward is deterministic bitwise") {
    Rng rng(21);
    Tensor x = Tensor::randn({4, 4}, rng);
    Tensor w = Tensor::randn({4, 4}, rng);
    auto run = [&]() {
        Tensor xs = Tensor::from_data(x.shape(), x.vec(), true);
        Tensor ws = Tensor::from_data(w.shape(), w.vec(), true);
        Tensor g1 = Tensor::ones({4});
        Tensor b1 = Tensor::zeros({4});
        Tensor loss = sum(square(softmax(matmul(layer_norm(xs, g1, b1), ws), 1)));
        loss.backward();
        auto gx = xs.grad();
        auto gw = ws.grad();
        gx.insert(gx.end(), gw.begin(), gw.end());
        return gx;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(std::memcmp(&a[i], &b[i], sizeof(Scalar)) == 0);
}

TEST_CASE("composite pipeline gradient vs finite differences") {
    Rng rng(13);
    Tensor w = Tensor::randn({5, 5}, rng);
    Tensor g = Tensor::randn({5}, rng);
    Tensor b = Tensor::randn({5}, rng);
    Tensor x = Tensor::randn({3, 5}, rng);
    auto f = [&](const Tensor& t) {
        return sum(square(softmax(matmul(layer_norm(t, g, b), w), 1)));
    };
    CHECK(finite_diff_check(f, x) < 1e-5);
}

TEST_CASE("finite_diff_check on simple functions") {
    Rng rng(17);
    Tensor x = Tensor::randn({6}, rng);
    CHECK(finite_diff_check([](const Tensor& t) { return sum(t); }, x) < 1e-10);
    CHECK(finite_diff_check([](const Tensor& t) { return sum(vsin(t)); }, x) < 1e-6);
}

TEST_CASE("elementwise op gradients at random inputs") {
    Rng rng(23);
    auto keep_away_from_kinks = [&](Shape s) {
        Tensor t = Tensor::randn(s, rng);
        for (auto& v : t.vec())
            if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
        return t;
    };
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = keep_away_from_kinks({3, 4});
        Tensor y = keep_away_from_kinks({3, 4});
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(add(t, y))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(sub(t, y))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(mul(t, y))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(scale(t, 2.5)); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(vexp(scale(t, 0.3))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(vlog(vexp(t))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(vsin(t)); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(relu(t))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(gelu(t))); }, x) < 1e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(sigmoid(t))); }, x) < 1e-4);
    }
}

TEST_CASE("broadcasting add/mul with gradient reduction") {
    Rng rng(29);
    Tensor x = Tensor::randn({4, 3, 5}, rng);
    Tensor bias = Tensor::randn({5}, rng);
    Tensor row = Tensor::randn({3, 1}, rng);
    Tensor out = add(mul(x, row), bias);
    CHECK(out.shape() == Shape{4, 3, 5});
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(add(mul(x, row), t))); }, bias) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(add(mul(x, t), bias))); }, row) < 1e-5);
    CHECK_THROWS_AS(add(Tensor::zeros({3}), Tensor::zeros({4})), ShapeError);
}

TEST_CASE("shape ops round trips and gradients") {
    Rng rng(31);
    Tensor x = Tensor::randn({2, 3, 4}, rng);
    Tensor p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 4; ++k)
                CHECK(p.data()[(k * 2 + i) * 3 + j] == x.data()[(i * 3 + j) * 4 + k]);

    CHECK(finite_diff_check(
              [&](const Tensor& t) { return sum(square(permute(t, {2, 0, 1}))); }, x) < 1e-5);
    CHECK(finite_diff_check(
              [&](const Tensor& t) { return sum(square(reshape(t, {6, 4}))); }, x) < 1e-5);
    CHECK(finite_diff_check(
              [&](const Tensor& t) { return sum(square(slice(t, 1, 1, 2))); }, x) < 1e-5);
    CHECK(finite_diff_check(
              [&](const Tensor& t) {
                  return sum(square(concat({t, scale(t, 2.0)}, 2)));
              },
              x) < 1e-5);
    CHECK(finite_diff_check(
              [&](const Tensor& t) { return sum(square(expand(t, {5, 2, 3, 4}))); }, x) < 1e-5);
    CHECK(finite_diff_check(
              [&](const Tensor& t) { return sum(square(take_rows(t, {1, 0, 1}))); }, x) < 1e-5);

    CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
    CHECK_THROWS_AS(slice(x, 0, 1, 5), ShapeError);
}

TEST_CASE("reductions") {
    Tensor x = Tensor::from_data({2, 3}, {1, 5, 2, 7, 0, 4});
    Tensor m = reduce_max(x, 1);
    CHECK(m.data()[0] == 5.0);
    CHECK(m.data()[1] == 7.0);
    Tensor s = sum_axis(x, 0);
    CHECK(s.data()[0] == 8.0);
    CHECK(s.data()[1] == 5.0);
    CHECK(s.data()[2] == 6.0);

    Rng rng(37);
    Tensor y = Tensor::randn({3, 4}, rng);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(reduce_max(t, 1))); }, y) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return mean(square(sum_axis(t, 0))); }, y) < 1e-5);
}

TEST_CASE("clamp composition is differentiable and exact at bounds") {
    Tensor x = Tensor::from_data({4}, {-2.0, 0.3, 0.9, 1.7});
    Tensor c = clamp(x, 0.0, 1.0);
    CHECK(c.data()[0] == 0.0);
    CHECK(std::abs(c.data()[1] - 0.3) < 1e-15);
    CHECK(std::abs(c.data()[2] - 0.9) < 1e-15);
    CHECK(c.data()[3] == 1.0);
}

TEST_CASE("conv2d matches direct convolution and gradients") {
    Rng rng(41);
    Tensor x = Tensor::randn({2, 6, 6, 3}, rng);
    Tensor w = Tensor::randn({3, 3, 3, 4}, rng);
    Tensor b = Tensor::randn({4}, rng);
    Tensor out = conv2d(x, w, b, 2, 1);
    CHECK(out.shape() == Shape{2, 3, 3, 4});

    // scalar-loop oracle at one output location
    auto oracle = [&](int n, int oy, int ox, int co) {
        Scalar acc = b.data()[co];
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                for (int ci = 0; ci < 3; ++ci)
                    acc += x.data()[((n * 6 + iy) * 6 + ix) * 3 + ci] *
                           w.data()[((ky * 3 + kx) * 3 + ci) * 4 + co];
            }
        return acc;
    };
    for (int n = 0; n < 2; ++n)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox)
                for (int co = 0; co < 4; ++co)
                    CHECK(std::abs(out.data()[((n * 3 + oy) * 3 + ox) * 4 + co] -
                                   oracle(n, oy, ox, co)) < 1e-12);

    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv2d(t, w, b, 2, 1))); }, x) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv2d(x, t, b, 2, 1))); }, w) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv2d(x, w, t, 2, 1))); }, b) < 1e-5);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 6, 6, 2}), w, b, 1, 1), ShapeError);
}

TEST_CASE("conv3d gradients") {
    Rng rng(43);
    Tensor x = Tensor::randn({1, 4, 4, 4, 2}, rng);
    Tensor w = Tensor::randn({3, 3, 3, 2, 3}, rng);
    Tensor b = Tensor::randn({3}, rng);
    Tensor out = conv3d(x, w, b, 2, 1);
    CHECK(out.shape() == Shape{1, 2, 2, 2, 3});
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv3d(t, w, b, 2, 1))); }, x) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv3d(x, t, b, 2, 1))); }, w) < 1e-5);
}

TEST_CASE("deform_sample equals composed bilinear sampling") {
    Rng rng(47);
    const int64_t Q = 6, M = 2, P = 3, C = 4;
    Tensor values = Tensor::randn({1, 7, 7, C}, rng);
    Tensor locs = Tensor::rand_uniform({Q, M, P, 2}, rng, 0.2, 5.7);
    Tensor weights = softmax(Tensor::randn({Q, M, P}, rng), 2);
    auto valid = std::make_shared<std::vector<uint8_t>>(Q, 1);
    (*valid)[2] = 0;
    Tensor out = deform_sample(values, locs, weights, valid);

    Tensor vmap = reshape(values, {7, 7, C});
    for (int64_t q = 0; q < Q; ++q) {
        for (int64_t c = 0; c < C; ++c) {
            Scalar expect = 0.0;
            if ((*valid)[static_cast<size_t>(q)]) {
                const int64_t m = c / (C / M);
                for (int64_t p = 0; p < P; ++p) {
                    Tensor uv = Tensor::from_data({2}, {locs.data()[((q * M + m) * P + p) * 2],
                                                        locs.data()[((q * M + m) * P + p) * 2 + 1]});
                    Tensor sampled = bilinear_sample(vmap, uv);
                    expect += weights.data()[(q * M + m) * P + p] * sampled.data()[c];
                }
            }
            CHECK(std::abs(out.data()[q * C + c] - expect) < 1e-12);
        }
    }

    // gradients through all three inputs
    auto sq = [&](Tensor t) { return sum(square(std::move(t))); };
    CHECK(finite_diff_check([&](const Tensor& t) { return sq(deform_sample(t, locs, weights, valid)); },
                            values) < 1e-5);
    CHECK(finite_diff_check([&](const Tensor& t) { return sq(deform_sample(values, t, weights, valid)); },
                            locs) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& t) { return sq(deform_sample(values, locs, t, valid)); },
                            weights) < 1e-5);
}

TEST_CASE("debug finite checks catch non-finite forward values") {
    const bool prev = finite_checks_enabled();
    set_finite_checks(true);
    Tensor x = Tensor::from_data({2}, {1.0, -1.0});
    CHECK_THROWS_AS(vlog(x), ContractError);  // log(-1) = nan
    set_finite_checks(false);
    CHECK_NOTHROW(vlog(x));
    set_finite_checks(prev);
}

TEST_CASE("tensor serialization round trip is bit exact") {
    Rng rng(53);
    Tensor t = Tensor::randn({3, 4, 5}, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor r = read_tensor(ss);
    REQUIRE(r.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i)
        CHECK(std::memcmp(&r.data()[i], &t.data()[i], sizeof(Scalar)) == 0);

    // container header: magic + u32 rank + u64 extents
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "VDPT");
    CHECK(static_cast<unsigned char>(bytes[4]) == 3);  // rank, little-endian
}

TEST_CASE("tensors reject invalid shapes") {
    CHECK_THROWS_AS(Tensor::zeros({2, 0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
}
