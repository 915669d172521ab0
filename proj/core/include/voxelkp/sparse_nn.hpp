#pragma once

#include <memory>

#include "voxelkp/nn_ops.hpp"
#include "voxelkp/sparse_tensor.hpp"

namespace vkp {

inline std::vector<int32_t> batch_of_rows(const std::vector<Coord4>& coords) {
    std::vector<int32_t> out(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) out[i] = coords[i][0];
    return out;
}

inline std::vector<int32_t> batch_of_rows(const std::vector<Coord3>& coords) {
    std::vector<int32_t> out(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) out[i] = coords[i][0];
    return out;
}

// Concrete single-op forwards. Training composes the tape-level ops directly;
// these wrappers exist so a single operation can be exercised (and oracled) in
// isolation on plain tensors. weights: (K1*K2*K3*C_in) x C_out offset-major.
template <typename T>
SparseTensor3D<T> subm_conv3d(const SparseTensor3D<T>& t, const Mat<T>& weights, const Mat<T>& bias,
                              const std::array<int, 3>& ksize) {
    validate(t);
    VoxelIndex index(t.indices);
    auto rb = std::make_shared<Rulebook>(build_subm_rulebook3d(t.indices, index, t.spatial_shape, ksize));
    Param<T> w{"w", weights, Mat<T>(weights.rows, weights.cols), true};
    Param<T> b{"b", bias, Mat<T>(bias.rows, bias.cols), true};
    Tape<T> tape;
    int x = tape.leaf(t.features);
    int y = ops::rulebook_conv(tape, x, rb, w, bias.size() ? &b : nullptr);
    SparseTensor3D<T> out;
    out.features = tape.val(y);
    out.indices = t.indices;
    out.spatial_shape = t.spatial_shape;
    out.batch_size = t.batch_size;
    return out;
}

template <typename T>
SparseTensor3D<T> sparse_conv3d_strided(const SparseTensor3D<T>& t, const Mat<T>& weights, const Mat<T>& bias,
                                        const std::array<int, 3>& ksize, const std::array<int, 3>& stride) {
    validate(t);
    VoxelIndex index(t.indices);
    StridedPlan plan = build_strided_rulebook3d(t.indices, index, t.spatial_shape, ksize, stride);
    auto rb = std::make_shared<Rulebook>(std::move(plan.rb));
    Param<T> w{"w", weights, Mat<T>(weights.rows, weights.cols), true};
    Param<T> b{"b", bias, Mat<T>(bias.rows, bias.cols), true};
    Tape<T> tape;
    int x = tape.leaf(t.features);
    int y = ops::rulebook_conv(tape, x, rb, w, bias.size() ? &b : nullptr);
    SparseTensor3D<T> out;
    out.features = tape.val(y);
    out.indices = std::move(plan.out_coords);
    out.spatial_shape = plan.out_shape;
    out.batch_size = t.batch_size;
    validate(out);
    return out;
}

template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const Mat<T>& weights, const Mat<T>& bias) {
    Param<T> w{"w", weights, Mat<T>(weights.rows, weights.cols), true};
    Param<T> b{"b", bias, Mat<T>(bias.rows, bias.cols), true};
    Tape<T> tape;
    int xi = tape.leaf(x);
    int y = ops::linear(tape, xi, w, bias.size() ? &b : nullptr);
    return tape.val(y);
}

template <typename T>
Mat<T> batch_norm_forward(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta,
                          Mat<T>& running_mean, Mat<T>& running_var, T momentum, T eps, bool training) {
    Param<T> g{"g", gamma, Mat<T>(gamma.rows, gamma.cols), true};
    Param<T> b{"b", beta, Mat<T>(beta.rows, beta.cols), true};
    Param<T> rm{"rm", running_mean, Mat<T>(running_mean.rows, running_mean.cols), false};
    Param<T> rv{"rv", running_var, Mat<T>(running_var.rows, running_var.cols), false};
    ops::BatchNormState<T> bn;
    bn.gamma = &g;
    bn.beta = &b;
    bn.running_mean = &rm;
    bn.running_var = &rv;
    bn.momentum = momentum;
    bn.eps = eps;
    Tape<T> tape;
    int xi = tape.leaf(x);
    int y = ops::batch_norm(tape, xi, bn, training);
    running_mean = rm.value;
    running_var = rv.value;
    return tape.val(y);
}

template <typename T>
Mat<T> relu_forward(const Mat<T>& x) {
    Tape<T> tape;
    return tape.val(ops::relu(tape, tape.leaf(x)));
}

template <typename T>
Mat<T> sigmoid_forward(const Mat<T>& x) {
    Tape<T> tape;
    return tape.val(ops::sigmoid(tape, tape.leaf(x)));
}

template <typename T>
Mat<T> softmax_rows_forward(const Mat<T>& x) {
    Tape<T> tape;
    return tape.val(ops::softmax_rows(tape, tape.leaf(x)));
}

}  // namespace vkp
