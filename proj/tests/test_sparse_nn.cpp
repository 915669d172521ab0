#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <vector>

#include "testers.hpp"
#include "voxelkp/checkpoint.hpp"
#include "voxelkp/nn_ops.hpp"
#include "voxelkp/sparse_nn.hpp"

using vkp::Coord4;
using vkp::Mat;
using vkp::Param;
using vkp::ParamStore;
using vkp::Rng;
using vkp::SparseTensor3D;
using vkp::Tape;
using vkt::rel_err;

namespace {

// Wraps a differentiable tape leaf owned by the test: perturbable value plus a
// stable buffer the probe copies analytic input-gradients into.
struct LeafGrad {
    Mat<double> value;
    Mat<double> grad;
    explicit LeafGrad(Mat<double> v) : value(std::move(v)), grad(value.rows, value.cols) {}
};

void copy_grad(Tape<double>& tp, int id, Mat<double>& dst) {
    Mat<double>& g = tp.grad(id);
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] = g.data[i];
}

void track(vkt::GradProbe& p, LeafGrad& leaf) {
    for (size_t i = 0; i < leaf.value.size(); ++i)
        p.slots.push_back({&leaf.value.data[i], &leaf.grad.data[i]});
}

void track(vkt::GradProbe& p, Param<double>& prm) {
    for (size_t i = 0; i < prm.value.size(); ++i)
        p.slots.push_back({&prm.value.data[i], &prm.grad.data[i]});
}

Mat<double> positive_mask(Rng& rng, int rows, int cols) {
    return vkt::random_mat(rng, rows, cols, 0.1, 1.0);
}

constexpr double kFdTol = 1e-4;

}  // namespace

// ============================================================
// Submanifold convolution
// ============================================================

TEST_CASE("submanifold conv with an identity kernel reproduces the input") {
    Rng rng(11);
    auto t = vkt::random_sparse_tensor(rng, {6, 5, 4}, 3, 0.4);
    const int c = 3;
    Mat<double> w(27 * c, c);
    const int center = ((0 + 1) * 3 + (0 + 1)) * 3 + (0 + 1);
    for (int ci = 0; ci < c; ++ci) w(center * c + ci, ci) = 1.0;
    auto out = vkp::subm_conv3d(t, w, Mat<double>(), {3, 3, 3});
    REQUIRE(out.features.rows == t.features.rows);
    for (size_t i = 0; i < t.features.size(); ++i) CHECK(out.features.data[i] == t.features.data[i]);
    CHECK(out.indices == t.indices);
}

TEST_CASE("an isolated voxel sees only the center tap plus bias") {
    Rng rng(12);
    SparseTensor3D<double> t;
    t.spatial_shape = {16, 16, 16};
    t.batch_size = 1;
    t.indices = {Coord4{0, 7, 9, 3}};
    t.features = vkt::random_mat(rng, 1, 4);
    Mat<double> w = vkt::random_mat(rng, 27 * 4, 5);
    Mat<double> b = vkt::random_mat(rng, 1, 5);
    auto out = vkp::subm_conv3d(t, w, b, {3, 3, 3});
    const int center = 13;
    for (int co = 0; co < 5; ++co) {
        double want = b(0, co);
        for (int ci = 0; ci < 4; ++ci) want += t.features(0, ci) * w(center * 4 + ci, co);
        CHECK(rel_err(out.features(0, co), want) < 1e-12);
    }
}

TEST_CASE("submanifold conv matches a dense masked oracle") {
    Rng rng(13);
    for (std::array<int, 3> ksize : {std::array<int, 3>{3, 3, 3}, std::array<int, 3>{5, 5, 5}}) {
        auto t = vkt::random_sparse_tensor(rng, {8, 8, 8}, 4, 0.2, 2);
        Mat<double> w = vkt::random_mat(rng, ksize[0] * ksize[1] * ksize[2] * 4, 5);
        Mat<double> b = vkt::random_mat(rng, 1, 5);
        auto out = vkp::subm_conv3d(t, w, b, ksize);
        CHECK(out.indices == t.indices);
        std::array<vkt::DenseGrid, 2> grids{vkt::densify(t, 0), vkt::densify(t, 1)};
        for (size_t r = 0; r < out.indices.size(); ++r) {
            const Coord4& c = out.indices[r];
            auto want = vkt::dense_conv_at(grids[c[0]], w, b, ksize, c[1], c[2], c[3]);
            for (int co = 0; co < 5; ++co)
                CHECK(rel_err(out.features(static_cast<int>(r), co), want[co]) < 1e-5);
        }
    }
}

TEST_CASE("convolution is linear in its input") {
    Rng rng(14);
    auto t1 = vkt::random_sparse_tensor(rng, {7, 6, 5}, 3, 0.3);
    auto t2 = t1;
    for (size_t i = 0; i < t2.features.size(); ++i) t2.features.data[i] = rng.uniform(-1.0, 1.0);
    const double a = 1.7;
    auto t3 = t1;
    for (size_t i = 0; i < t3.features.size(); ++i)
        t3.features.data[i] = a * t1.features.data[i] + t2.features.data[i];

    Mat<double> w = vkt::random_mat(rng, 27 * 3, 4);
    auto y1 = vkp::subm_conv3d(t1, w, Mat<double>(), {3, 3, 3});
    auto y2 = vkp::subm_conv3d(t2, w, Mat<double>(), {3, 3, 3});
    auto y3 = vkp::subm_conv3d(t3, w, Mat<double>(), {3, 3, 3});
    for (size_t i = 0; i < y3.features.size(); ++i)
        CHECK(rel_err(y3.features.data[i], a * y1.features.data[i] + y2.features.data[i]) < 1e-10);
}

// ============================================================
// Strided convolution
// ============================================================

TEST_CASE("strided conv drops a lone voxel into its stride bucket") {
    Rng rng(15);
    SparseTensor3D<double> t;
    t.spatial_shape = {16, 16, 16};
    t.batch_size = 1;
    t.indices = {Coord4{0, 5, 3, 7}};
    t.features = vkt::random_mat(rng, 1, 2);
    Mat<double> w = vkt::random_mat(rng, 27 * 2, 3);
    Mat<double> b = vkt::random_mat(rng, 1, 3);
    auto out = vkp::sparse_conv3d_strided(t, w, b, {3, 3, 3}, {2, 2, 2});
    REQUIRE(out.indices.size() == 1);
    CHECK(out.indices[0] == Coord4{0, 2, 1, 3});
    CHECK(out.spatial_shape == std::array<int, 3>{8, 8, 8});
    // anchor (4, 2, 6), so the input sits at offset (+1, +1, +1)
    const int k = ((1 + 1) * 3 + (1 + 1)) * 3 + (1 + 1);
    for (int co = 0; co < 3; ++co) {
        double want = b(0, co);
        for (int ci = 0; ci < 2; ++ci) want += t.features(0, ci) * w(k * 2 + ci, co);
        CHECK(rel_err(out.features(0, co), want) < 1e-12);
    }
}

TEST_CASE("stride 2 over a dense 4x4x4 block yields the full 2x2x2 output") {
    SparseTensor3D<double> t;
    t.spatial_shape = {4, 4, 4};
    t.batch_size = 1;
    for (int x = 0; x < 4; ++x)
        for (int y = 0; y < 4; ++y)
            for (int z = 0; z < 4; ++z) t.indices.push_back(Coord4{0, x, y, z});
    t.features = Mat<double>(64, 2);
    t.features.fill(1.0);
    vkp::canonical_sort(t);
    Mat<double> w(27 * 2, 2);
    w.fill(0.5);
    auto out = vkp::sparse_conv3d_strided(t, w, Mat<double>(), {3, 3, 3}, {2, 2, 2});
    CHECK(out.indices.size() == 8);
    CHECK(out.spatial_shape == std::array<int, 3>{2, 2, 2});
}

TEST_CASE("strided conv matches a dense strided oracle") {
    Rng rng(16);
    for (std::array<int, 3> ksize : {std::array<int, 3>{3, 3, 3}, std::array<int, 3>{5, 5, 5}}) {
        auto t = vkt::random_sparse_tensor(rng, {8, 8, 8}, 3, 0.3, 2);
        Mat<double> w = vkt::random_mat(rng, ksize[0] * ksize[1] * ksize[2] * 3, 4);
        Mat<double> b = vkt::random_mat(rng, 1, 4);
        auto out = vkp::sparse_conv3d_strided(t, w, b, ksize, {2, 2, 2});
        CHECK(out.spatial_shape == std::array<int, 3>{4, 4, 4});
        std::array<vkt::DenseGrid, 2> grids{vkt::densify(t, 0), vkt::densify(t, 1)};
        for (size_t r = 0; r < out.indices.size(); ++r) {
            const Coord4& c = out.indices[r];
            auto want = vkt::dense_conv_at(grids[c[0]], w, b, ksize, c[1], c[2], c[3], {2, 2, 2});
            for (int co = 0; co < 4; ++co)
                CHECK(rel_err(out.features(static_cast<int>(r), co), want[co]) < 1e-5);
        }
        // every output bucket must hold at least one input voxel
        std::set<std::array<int32_t, 4>> buckets;
        for (const Coord4& c : t.indices)
            buckets.insert({c[0], c[1] / 2, c[2] / 2, c[3] / 2});
        CHECK(buckets.size() == out.indices.size());
    }
}

TEST_CASE("rulebook pair counts equal brute-force in-bounds tap counts") {
    auto dense_coords = [](int d) {
        std::vector<Coord4> coords;
        for (int x = 0; x < d; ++x)
            for (int y = 0; y < d; ++y)
                for (int z = 0; z < d; ++z) coords.push_back(Coord4{0, x, y, z});
        std::sort(coords.begin(), coords.end(), [](const Coord4& a, const Coord4& b) { return vkp::coord_less(a, b); });
        return coords;
    };
    auto in_bounds_taps = [](int pos, int h, int lim) {
        int n = 0;
        for (int d = -h; d <= h; ++d)
            if (pos + d >= 0 && pos + d < lim) ++n;
        return n;
    };

    for (auto [d, k] : std::vector<std::pair<int, int>>{{5, 3}, {4, 5}}) {
        auto coords = dense_coords(d);
        vkp::VoxelIndex index(coords);
        auto rb = vkp::build_subm_rulebook3d(coords, index, {d, d, d}, {k, k, k});
        size_t want = 0;
        for (int x = 0; x < d; ++x)
            for (int y = 0; y < d; ++y)
                for (int z = 0; z < d; ++z)
                    want += static_cast<size_t>(in_bounds_taps(x, k / 2, d)) * in_bounds_taps(y, k / 2, d) *
                            in_bounds_taps(z, k / 2, d);
        CHECK(rb.pair_count() == want);
        // gather entries keep ascending kernel-offset order per output row
        for (int o = 0; o < rb.out_rows; ++o)
            for (int32_t e = rb.gather_start[o] + 1; e < rb.gather_start[o + 1]; ++e)
                CHECK(rb.gather[e - 1].first < rb.gather[e].first);
    }

    {
        const int d = 5, k = 3, s = 2;
        auto coords = dense_coords(d);
        vkp::VoxelIndex index(coords);
        auto plan = vkp::build_strided_rulebook3d(coords, index, {d, d, d}, {k, k, k}, {s, s, s});
        CHECK(plan.out_coords.size() == 27);  // ceil(5/2)^3
        size_t want = 0;
        for (int qx = 0; qx < 3; ++qx)
            for (int qy = 0; qy < 3; ++qy)
                for (int qz = 0; qz < 3; ++qz)
                    want += static_cast<size_t>(in_bounds_taps(qx * s, 1, d)) * in_bounds_taps(qy * s, 1, d) *
                            in_bounds_taps(qz * s, 1, d);
        CHECK(plan.rb.pair_count() == want);
    }
}

// ============================================================
// Linear and normalization
// ============================================================

TEST_CASE("linear layer closed forms and naive matmul oracle") {
    Rng rng(17);
    Mat<double> x = vkt::random_mat(rng, 10, 4);

    Mat<double> eye(4, 4);
    for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
    Mat<double> y = vkp::linear_forward(x, eye, Mat<double>());
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.data[i] == x.data[i]);

    Mat<double> zeros(4, 6);
    Mat<double> b = vkt::random_mat(rng, 1, 6);
    y = vkp::linear_forward(x, zeros, b);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 6; ++j) CHECK(y(i, j) == b(0, j));

    Mat<double> w = vkt::random_mat(rng, 4, 6);
    y = vkp::linear_forward(x, w, b);
    for (int i = 0; i < 10; ++i) {
        for (int j = 0; j < 6; ++j) {
            double want = b(0, j);
            for (int k = 0; k < 4; ++k) want += x(i, k) * w(k, j);
            CHECK(rel_err(y(i, j), want) < 1e-6);
        }
    }
}

TEST_CASE("batch norm closed forms, running stats, and direct-formula oracle") {
    Rng rng(18);
    const double momentum = 0.1, eps = 1e-5;

    {  // constant input in train mode collapses to the shift
        Mat<double> x(6, 3);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 3; ++j) x(i, j) = 2.5 + j;
        Mat<double> gamma = vkt::random_mat(rng, 1, 3);
        Mat<double> beta = vkt::random_mat(rng, 1, 3);
        Mat<double> rm(1, 3), rv(1, 3);
        rv.fill(1.0);
        Mat<double> y = vkp::batch_norm_forward(x, gamma, beta, rm, rv, momentum, eps, true);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 3; ++j) CHECK(y(i, j) == beta(0, j));
        // running stats land on the float lattice (checkpoint-exact state)
        auto q = [](double x) { return static_cast<double>(static_cast<float>(x)); };
        for (int j = 0; j < 3; ++j) {
            CHECK(rel_err(rm(0, j), q(0.1 * (2.5 + j))) < 1e-12);
            CHECK(rel_err(rv(0, j), q(0.9)) < 1e-12);  // batch variance is zero
        }
    }

    {  // eval mode with unit running stats is the identity up to eps
        Mat<double> x = vkt::random_mat(rng, 8, 4);
        Mat<double> gamma(1, 4), beta(1, 4), rm(1, 4), rv(1, 4);
        gamma.fill(1.0);
        rv.fill(1.0);
        Mat<double> y = vkp::batch_norm_forward(x, gamma, beta, rm, rv, momentum, eps, false);
        for (size_t i = 0; i < x.size(); ++i) CHECK(rel_err(y.data[i], x.data[i]) < 1e-5);
    }

    {  // train-mode oracle on 50 x 8
        const int v = 50, c = 8;
        Mat<double> x = vkt::random_mat(rng, v, c);
        Mat<double> gamma = vkt::random_mat(rng, 1, c, 0.5, 1.5);
        Mat<double> beta = vkt::random_mat(rng, 1, c);
        Mat<double> rm(1, c), rv(1, c);
        rv.fill(1.0);
        Mat<double> rm0 = rm, rv0 = rv;
        Mat<double> y = vkp::batch_norm_forward(x, gamma, beta, rm, rv, momentum, eps, true);
        for (int j = 0; j < c; ++j) {
            double mean = 0.0;
            for (int i = 0; i < v; ++i) mean += x(i, j);
            mean /= v;
            double var = 0.0;
            for (int i = 0; i < v; ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
            var /= v;
            for (int i = 0; i < v; ++i) {
                const double want = (x(i, j) - mean) / std::sqrt(var + eps) * gamma(0, j) + beta(0, j);
                CHECK(rel_err(y(i, j), want) < 1e-6);
            }
            auto q = [](double s) { return static_cast<double>(static_cast<float>(s)); };
            CHECK(rel_err(rm(0, j), q(0.9 * rm0(0, j) + 0.1 * mean)) < 1e-9);
            CHECK(rel_err(rv(0, j), q(0.9 * rv0(0, j) + 0.1 * var * (50.0 / 49.0))) < 1e-9);
        }
    }
}

TEST_CASE("activation closed forms") {
    Mat<double> x(1, 3);
    x(0, 0) = -1.0;
    x(0, 1) = 0.0;
    x(0, 2) = 2.0;
    Mat<double> y = vkp::relu_forward(x);
    CHECK(y(0, 0) == 0.0);
    CHECK(y(0, 1) == 0.0);
    CHECK(y(0, 2) == 2.0);

    Mat<double> s(1, 5);
    const double vals[5] = {-30.0, -1.0, 0.0, 2.0, 30.0};
    for (int i = 0; i < 5; ++i) s(0, i) = vals[i];
    Mat<double> sy = vkp::sigmoid_forward(s);
    for (int i = 0; i < 5; ++i) CHECK(rel_err(sy(0, i), 1.0 / (1.0 + std::exp(-vals[i]))) < 1e-12);

    Mat<double> u(1, 4);
    u.fill(0.7);
    Mat<double> uy = vkp::softmax_rows_forward(u);
    for (int i = 0; i < 4; ++i) CHECK(uy(0, i) == 0.25);

    Rng rng(19);
    Mat<double> z = vkt::random_mat(rng, 20, 7, -4.0, 4.0);
    Mat<double> zy = vkp::softmax_rows_forward(z);
    for (int i = 0; i < 20; ++i) {
        double den = 0.0;
        for (int j = 0; j < 7; ++j) den += std::exp(z(i, j));
        for (int j = 0; j < 7; ++j) CHECK(rel_err(zy(i, j), std::exp(z(i, j)) / den) < 1e-7);
    }
}

TEST_CASE("summed identity-linear output has closed-form gradients") {
    Rng rng(20);
    const int v = 9, c = 5;
    Mat<double> x = vkt::random_mat(rng, v, c);
    ParamStore<double> store;
    Param<double>& w = store.create("w", c, c);
    Param<double>& b = store.create("b", 1, c);
    for (int i = 0; i < c; ++i) w.value(i, i) = 1.0;

    Tape<double> tp;
    int xi = tp.leaf(x, true);
    int y = vkp::ops::linear(tp, xi, w, &b);
    int loss = vkp::ops::sum_all(tp, y);
    tp.backward(loss);

    for (int i = 0; i < c; ++i) {
        double col = 0.0;
        for (int r = 0; r < v; ++r) col += x(r, i);
        for (int j = 0; j < c; ++j) CHECK(rel_err(w.grad(i, j), col) < 1e-12);
    }
    for (int j = 0; j < c; ++j) CHECK(b.grad(0, j) == static_cast<double>(v));
    for (int r = 0; r < v; ++r)
        for (int i = 0; i < c; ++i) CHECK(rel_err(tp.grad(xi)(r, i), 1.0) < 1e-12);
}

// ============================================================
// Finite differences, op by op
// ============================================================

TEST_CASE("finite differences: submanifold conv into relu") {
    Rng rng(21);
    auto t = vkt::random_sparse_tensor(rng, {6, 6, 4}, 3, 0.3);
    ParamStore<double> store;
    Param<double>& w = store.create("w", 27 * 3, 4);
    Param<double>& b = store.create("b", 1, 4);
    vkp::init_uniform(w, rng, 27 * 3);
    vkp::init_uniform(b, rng, 27 * 3);
    vkp::VoxelIndex index(t.indices);
    auto rb = std::make_shared<vkp::Rulebook>(
        vkp::build_subm_rulebook3d(t.indices, index, t.spatial_shape, {3, 3, 3}));
    LeafGrad x(t.features);
    Mat<double> mask = positive_mask(rng, t.features.rows, 4);

    vkt::GradProbe probe;
    probe.run = [&](bool bw) {
        Tape<double> tp;
        int xi = tp.leaf(x.value, true);
        int y = vkp::ops::rulebook_conv(tp, xi, rb, w, &b);
        y = vkp::ops::relu(tp, y);
        int m = tp.leaf(mask);
        int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, m));
        if (bw) {
            store.zero_grads();
            tp.backward(loss);
            copy_grad(tp, xi, x.grad);
        }
        return tp.val(loss)(0, 0);
    };
    track(probe, x);
    track(probe, w);
    track(probe, b);
    CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
}

TEST_CASE("finite differences: strided conv") {
    Rng rng(22);
    auto t = vkt::random_sparse_tensor(rng, {6, 6, 6}, 2, 0.3);
    ParamStore<double> store;
    Param<double>& w = store.create("w", 27 * 2, 3);
    Param<double>& b = store.create("b", 1, 3);
    vkp::init_uniform(w, rng, 27 * 2);
    vkp::init_uniform(b, rng, 27 * 2);
    vkp::VoxelIndex index(t.indices);
    auto plan = vkp::build_strided_rulebook3d(t.indices, index, t.spatial_shape, {3, 3, 3}, {2, 2, 2});
    auto rb = std::make_shared<vkp::Rulebook>(std::move(plan.rb));
    LeafGrad x(t.features);
    Mat<double> mask = positive_mask(rng, rb->out_rows, 3);

    vkt::GradProbe probe;
    probe.run = [&](bool bw) {
        Tape<double> tp;
        int xi = tp.leaf(x.value, true);
        int y = vkp::ops::rulebook_conv(tp, xi, rb, w, &b);
        int m = tp.leaf(mask);
        int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, m));
        if (bw) {
            store.zero_grads();
            tp.backward(loss);
            copy_grad(tp, xi, x.grad);
        }
        return tp.val(loss)(0, 0);
    };
    track(probe, x);
    track(probe, w);
    track(probe, b);
    CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
}

TEST_CASE("finite differences: linear") {
    Rng rng(23);
    LeafGrad x(vkt::random_mat(rng, 12, 5));
    ParamStore<double> store;
    Param<double>& w = store.create("w", 5, 7);
    Param<double>& b = store.create("b", 1, 7);
    vkp::init_uniform(w, rng, 5);
    vkp::init_uniform(b, rng, 5);
    Mat<double> mask = positive_mask(rng, 12, 7);

    vkt::GradProbe probe;
    probe.run = [&](bool bw) {
        Tape<double> tp;
        int xi = tp.leaf(x.value, true);
        int y = vkp::ops::linear(tp, xi, w, &b);
        int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
        if (bw) {
            store.zero_grads();
            tp.backward(loss);
            copy_grad(tp, xi, x.grad);
        }
        return tp.val(loss)(0, 0);
    };
    track(probe, x);
    track(probe, w);
    track(probe, b);
    CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
}

TEST_CASE("finite differences: batch norm in train and eval modes") {
    Rng rng(24);
    for (bool training : {true, false}) {
        LeafGrad x(vkt::random_mat(rng, 10, 4));
        ParamStore<double> store;
        auto bn = vkp::ops::make_batch_norm(store, "bn", 4);
        for (int j = 0; j < 4; ++j) {
            bn.gamma->value(0, j) = rng.uniform(0.5, 1.5);
            bn.beta->value(0, j) = rng.uniform(-0.5, 0.5);
            bn.running_mean->value(0, j) = rng.uniform(-0.3, 0.3);
            bn.running_var->value(0, j) = rng.uniform(0.5, 1.5);
        }
        Mat<double> mask = positive_mask(rng, 10, 4);

        vkt::GradProbe probe;
        probe.run = [&](bool bw) {
            Tape<double> tp;
            int xi = tp.leaf(x.value, true);
            int y = vkp::ops::batch_norm(tp, xi, bn, training);
            int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
            if (bw) {
                store.zero_grads();
                tp.backward(loss);
                copy_grad(tp, xi, x.grad);
            }
            return tp.val(loss)(0, 0);
        };
        track(probe, x);
        track(probe, *bn.gamma);
        track(probe, *bn.beta);
        CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
    }
}

TEST_CASE("finite differences: layer norm") {
    Rng rng(25);
    LeafGrad x(vkt::random_mat(rng, 8, 6));
    ParamStore<double> store;
    Param<double>& gamma = store.create("g", 1, 6);
    Param<double>& beta = store.create("b", 1, 6);
    for (int j = 0; j < 6; ++j) gamma.value(0, j) = rng.uniform(0.5, 1.5);
    Mat<double> mask = positive_mask(rng, 8, 6);

    vkt::GradProbe probe;
    probe.run = [&](bool bw) {
        Tape<double> tp;
        int xi = tp.leaf(x.value, true);
        int y = vkp::ops::layer_norm(tp, xi, gamma, beta);
        int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
        if (bw) {
            store.zero_grads();
            tp.backward(loss);
            copy_grad(tp, xi, x.grad);
        }
        return tp.val(loss)(0, 0);
    };
    track(probe, x);
    track(probe, gamma);
    track(probe, beta);
    CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
}

TEST_CASE("finite differences: sigmoid and softmax") {
    Rng rng(26);
    {
        LeafGrad x(vkt::random_mat(rng, 7, 5, -3.0, 3.0));
        Mat<double> mask = positive_mask(rng, 7, 5);
        vkt::GradProbe probe;
        probe.run = [&](bool bw) {
            Tape<double> tp;
            int xi = tp.leaf(x.value, true);
            int y = vkp::ops::sigmoid(tp, xi);
            int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
            if (bw) {
                tp.backward(loss);
                copy_grad(tp, xi, x.grad);
            }
            return tp.val(loss)(0, 0);
        };
        track(probe, x);
        CHECK(vkt::fd_max_rel_err(probe, rng, 35) < kFdTol);
    }
    {
        LeafGrad x(vkt::random_mat(rng, 6, 6, -2.0, 2.0));
        Mat<double> mask = positive_mask(rng, 6, 6);
        vkt::GradProbe probe;
        probe.run = [&](bool bw) {
            Tape<double> tp;
            int xi = tp.leaf(x.value, true);
            int y = vkp::ops::softmax_rows(tp, xi);
            int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
            if (bw) {
                tp.backward(loss);
                copy_grad(tp, xi, x.grad);
            }
            return tp.val(loss)(0, 0);
        };
        track(probe, x);
        CHECK(vkt::fd_max_rel_err(probe, rng, 36) < kFdTol);
    }
}

TEST_CASE("finite differences: relu away from the kink") {
    Rng rng(27);
    Mat<double> raw = vkt::random_mat(rng, 8, 4);
    for (size_t i = 0; i < raw.size(); ++i)
        if (std::abs(raw.data[i]) < 0.05) raw.data[i] += raw.data[i] >= 0 ? 0.1 : -0.1;
    LeafGrad x(raw);
    Mat<double> mask = positive_mask(rng, 8, 4);
    vkt::GradProbe probe;
    probe.run = [&](bool bw) {
        Tape<double> tp;
        int xi = tp.leaf(x.value, true);
        int y = vkp::ops::relu(tp, xi);
        int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
        if (bw) {
            tp.backward(loss);
            copy_grad(tp, xi, x.grad);
        }
        return tp.val(loss)(0, 0);
    };
    track(probe, x);
    CHECK(vkt::fd_max_rel_err(probe, rng, 32) < kFdTol);
}

TEST_CASE("finite differences: structural ops") {
    Rng rng(28);
    LeafGrad a(vkt::random_mat(rng, 10, 3));
    LeafGrad b(vkt::random_mat(rng, 10, 3));
    Mat<double> mask = positive_mask(rng, 6, 3);
    auto picks = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{0, 0, 5, 9, 5, 2});

    vkt::GradProbe probe;
    probe.run = [&](bool bw) {
        Tape<double> tp;
        int ai = tp.leaf(a.value, true);
        int bi = tp.leaf(b.value, true);
        int s = vkp::ops::add(tp, ai, bi);
        s = vkp::ops::mul(tp, s, bi);
        s = vkp::ops::scale(tp, s, 1.3);
        int g = vkp::ops::gather_rows(tp, s, picks);
        int sl = vkp::ops::slice_rows(tp, s, 2, 6);
        int l1 = vkp::ops::sum_all(tp, vkp::ops::mul(tp, g, tp.leaf(mask)));
        int l2 = vkp::ops::sum_all(tp, vkp::ops::mul(tp, sl, tp.leaf(mask)));
        int loss = vkp::ops::weighted_sum_scalars(tp, {l1, l2}, {0.7, -1.4});
        if (bw) {
            tp.backward(loss);
            copy_grad(tp, ai, a.grad);
            copy_grad(tp, bi, b.grad);
        }
        return tp.val(loss)(0, 0);
    };
    track(probe, a);
    track(probe, b);
    CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
}

TEST_CASE("finite differences: per-sample pooling, scaling, and block softmax") {
    Rng rng(29);
    auto row_batch = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{0, 0, 0, 1, 1, 2, 2, 2, 2});
    const int v = 9, c = 4, bsz = 3;
    {
        LeafGrad x(vkt::random_mat(rng, v, c));
        Mat<double> mask = positive_mask(rng, bsz, c);
        vkt::GradProbe probe;
        probe.run = [&](bool bw) {
            Tape<double> tp;
            int xi = tp.leaf(x.value, true);
            int y = vkp::ops::sparse_gap(tp, xi, row_batch, bsz);
            int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
            if (bw) {
                tp.backward(loss);
                copy_grad(tp, xi, x.grad);
            }
            return tp.val(loss)(0, 0);
        };
        track(probe, x);
        CHECK(vkt::fd_max_rel_err(probe, rng, 36) < kFdTol);
    }
    {
        LeafGrad x(vkt::random_mat(rng, v, c));
        LeafGrad w(vkt::random_mat(rng, bsz, c));
        Mat<double> mask = positive_mask(rng, v, c);
        vkt::GradProbe probe;
        probe.run = [&](bool bw) {
            Tape<double> tp;
            int xi = tp.leaf(x.value, true);
            int wi = tp.leaf(w.value, true);
            int y = vkp::ops::rows_scale_by_sample(tp, xi, wi, row_batch);
            int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
            if (bw) {
                tp.backward(loss);
                copy_grad(tp, xi, x.grad);
                copy_grad(tp, wi, w.grad);
            }
            return tp.val(loss)(0, 0);
        };
        track(probe, x);
        track(probe, w);
        CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
    }
    {
        const int R = 3, rows = 4, cols = 5;
        std::vector<LeafGrad> logits;
        for (int r = 0; r < R; ++r) logits.emplace_back(vkt::random_mat(rng, rows, cols, -2.0, 2.0));
        Mat<double> mask = positive_mask(rng, R * rows, cols);
        vkt::GradProbe probe;
        probe.run = [&](bool bw) {
            Tape<double> tp;
            std::vector<int> ids;
            for (auto& l : logits) ids.push_back(tp.leaf(l.value, true));
            int y = vkp::ops::softmax_blocks(tp, ids);
            int loss = vkp::ops::sum_all(tp, vkp::ops::mul(tp, y, tp.leaf(mask)));
            if (bw) {
                tp.backward(loss);
                for (int r = 0; r < R; ++r) copy_grad(tp, ids[r], logits[r].grad);
            }
            return tp.val(loss)(0, 0);
        };
        for (auto& l : logits) track(probe, l);
        CHECK(vkt::fd_max_rel_err(probe, rng, 48) < kFdTol);
    }
}

TEST_CASE("sparse global pooling is an exact grouped mean") {
    auto row_batch = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{0, 0, 1, 1, 1, 1});
    Mat<double> x(6, 2);
    const double vals[6][2] = {{1, 10}, {3, 30}, {4, 0}, {8, 4}, {0, 8}, {4, 4}};
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 2; ++j) x(i, j) = vals[i][j];
    Tape<double> tp;
    int y = vkp::ops::sparse_gap(tp, tp.leaf(x), row_batch, 2);
    CHECK(tp.val(y)(0, 0) == 2.0);
    CHECK(tp.val(y)(0, 1) == 20.0);
    CHECK(tp.val(y)(1, 0) == 4.0);
    CHECK(tp.val(y)(1, 1) == 4.0);

    auto bad = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{0, 0, 0, 0, 0, 0});
    Tape<double> tp2;
    CHECK_THROWS_WITH_AS(vkp::ops::sparse_gap(tp2, tp2.leaf(x), bad, 2),
                         doctest::Contains("no active voxels"), std::runtime_error);
}

// ============================================================
// Checkpoints
// ============================================================

TEST_CASE("weight checkpoints round-trip, sort by name, and detect damage") {
    const char* path = "ckpt_roundtrip.vkpw";
    Rng rng(30);
    ParamStore<double> a;
    Param<double>& p1 = a.create("zed.gamma", 1, 4);
    Param<double>& p2 = a.create("alpha", 2, 3);
    Param<double>& p3 = a.create("m.weight", 5, 2, false);
    for (Param<double>* p : a.all())
        for (size_t i = 0; i < p->value.size(); ++i) p->value.data[i] = rng.uniform(-2.0, 2.0);

    vkp::save_checkpoint(path, vkp::snapshot_params(a));
    auto loaded = vkp::load_checkpoint(path);
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[0].name == "alpha");
    CHECK(loaded[1].name == "m.weight");
    CHECK(loaded[2].name == "zed.gamma");

    ParamStore<double> b;
    b.create("zed.gamma", 1, 4);
    b.create("alpha", 2, 3);
    b.create("m.weight", 5, 2, false);
    vkp::restore_params(b, loaded);
    for (Param<double>* p : std::vector<Param<double>*>{&p1, &p2, &p3}) {
        Param<double>* q = b.find(p->name);
        REQUIRE(q != nullptr);
        for (size_t i = 0; i < p->value.size(); ++i)
            CHECK(q->value.data[i] == static_cast<double>(static_cast<float>(p->value.data[i])));
    }

    {  // file missing a parameter the store owns
        ParamStore<double> c;
        c.create("alpha", 2, 3);
        c.create("orphan", 1, 1);
        CHECK_THROWS_WITH_AS(vkp::restore_params(c, loaded), doctest::Contains("does not cover"),
                             std::runtime_error);
    }
    {  // stored shape disagrees with the store
        ParamStore<double> c;
        c.create("zed.gamma", 1, 4);
        c.create("alpha", 3, 2);
        c.create("m.weight", 5, 2, false);
        CHECK_THROWS_WITH_AS(vkp::restore_params(c, loaded), doctest::Contains("shape mismatch"),
                             std::runtime_error);
    }

    {  // truncation must not pass silently
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(vkp::load_checkpoint(path), std::runtime_error);
    }
    std::remove(path);
}
