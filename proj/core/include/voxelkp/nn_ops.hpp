#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "voxelkp/mat.hpp"
#include "voxelkp/rulebook.hpp"
#include "voxelkp/tape.hpp"

namespace vkp {
namespace ops {

// ============================================================
// Convolution (generic rulebook form: 3D/2D submanifold, strided,
// and z-column height encoding all reduce to this)
// ============================================================

// weights: (num_offsets * C_in) x C_out, offset-major rows; bias: 1 x C_out.
// Per output row the gather list is walked in fixed kernel-offset order and
// per weight column the pair lists are walked in fixed order, so results and
// gradients never depend on thread count.
template <typename T>
int rulebook_conv(Tape<T>& tape, int x, std::shared_ptr<const Rulebook> rb,
                  Param<T>& weights, Param<T>* bias) {
    const Mat<T>& in = tape.val(x);
    if (in.rows != rb->in_rows) throw std::invalid_argument("rulebook_conv: input row count mismatch");
    const int c_in = in.cols;
    const int c_out = weights.value.cols;
    if (weights.value.rows != rb->num_offsets * c_in)
        throw std::invalid_argument("rulebook_conv: weight shape does not match kernel/channels");
    if (bias && (bias->value.rows != 1 || bias->value.cols != c_out))
        throw std::invalid_argument("rulebook_conv: bias shape mismatch");

    Mat<T> out(rb->out_rows, c_out);
    {
        const Rulebook& r = *rb;
        const T* W = weights.value.data.data();
        const T* X = in.data.data();
#pragma omp parallel for schedule(static) if (r.out_rows > 512)
        for (int o = 0; o < r.out_rows; ++o) {
            T* dst = out.row(o);
            if (bias) {
                const T* b = bias->value.row(0);
                for (int c = 0; c < c_out; ++c) dst[c] = b[c];
            }
            for (int32_t e = r.gather_start[o]; e < r.gather_start[o + 1]; ++e) {
                const auto [k, in_row] = r.gather[e];
                const T* src = X + static_cast<size_t>(in_row) * c_in;
                const T* wk = W + static_cast<size_t>(k) * c_in * c_out;
                for (int ci = 0; ci < c_in; ++ci) {
                    const T s = src[ci];
                    if (s == T(0)) continue;
                    const T* wrow = wk + static_cast<size_t>(ci) * c_out;
                    for (int co = 0; co < c_out; ++co) dst[co] += s * wrow[co];
                }
            }
        }
    }

    Param<T>* wp = &weights;
    return tape.emit(std::move(out), [x, rb, wp, bias, c_in, c_out](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& xin = t.val(x);
        const Rulebook& r = *rb;
        // d/dX via the input-major view (one writer per input row).
        {
            Mat<T>& gx = t.grad(x);
            const T* W = wp->value.data.data();
#pragma omp parallel for schedule(static) if (r.in_rows > 512)
            for (int i = 0; i < r.in_rows; ++i) {
                T* dst = gx.row(i);
                for (int32_t e = r.scatter_start[i]; e < r.scatter_start[i + 1]; ++e) {
                    const auto [k, out_row] = r.scatter[e];
                    const T* go = g.row(out_row);
                    const T* wk = W + static_cast<size_t>(k) * c_in * c_out;
                    for (int ci = 0; ci < c_in; ++ci) {
                        const T* wrow = wk + static_cast<size_t>(ci) * c_out;
                        T acc = T(0);
                        for (int co = 0; co < c_out; ++co) acc += go[co] * wrow[co];
                        dst[ci] += acc;
                    }
                }
            }
        }
        // d/dW: each output channel column is owned by one thread.
        {
            T* gw = wp->grad.data.data();
#pragma omp parallel for schedule(static) if (c_out > 4 && r.pair_count() > 2048)
            for (int co = 0; co < c_out; ++co) {
                for (int k = 0; k < r.num_offsets; ++k) {
                    T* gcol = gw + static_cast<size_t>(k) * c_in * c_out + co;
                    for (const auto& [in_row, out_row] : r.pairs[k]) {
                        const T go = g(out_row, co);
                        if (go == T(0)) continue;
                        const T* src = xin.row(in_row);
                        for (int ci = 0; ci < c_in; ++ci) gcol[static_cast<size_t>(ci) * c_out] += src[ci] * go;
                    }
                }
            }
        }
        if (bias) {
            T* gb = bias->grad.row(0);
            for (int o = 0; o < g.rows; ++o) {
                const T* go = g.row(o);
                for (int co = 0; co < c_out; ++co) gb[co] += go[co];
            }
        }
    });
}

// ============================================================
// Linear
// ============================================================

template <typename T>
int linear(Tape<T>& tape, int x, Param<T>& weights, Param<T>* bias) {
    const Mat<T>& in = tape.val(x);
    const int c_in = weights.value.rows;
    const int c_out = weights.value.cols;
    if (in.cols != c_in) throw std::invalid_argument("linear: input channels do not match weights");
    if (bias && (bias->value.rows != 1 || bias->value.cols != c_out))
        throw std::invalid_argument("linear: bias shape mismatch");

    Mat<T> out(in.rows, c_out);
    {
        const T* W = weights.value.data.data();
#pragma omp parallel for schedule(static) if (in.rows > 512)
        for (int i = 0; i < in.rows; ++i) {
            const T* src = in.row(i);
            T* dst = out.row(i);
            if (bias) {
                const T* b = bias->value.row(0);
                for (int c = 0; c < c_out; ++c) dst[c] = b[c];
            }
            for (int ci = 0; ci < c_in; ++ci) {
                const T s = src[ci];
                if (s == T(0)) continue;
                const T* wrow = W + static_cast<size_t>(ci) * c_out;
                for (int co = 0; co < c_out; ++co) dst[co] += s * wrow[co];
            }
        }
    }

    Param<T>* wp = &weights;
    return tape.emit(std::move(out), [x, wp, bias, c_in, c_out](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& xin = t.val(x);
        Mat<T>& gx = t.grad(x);
        const T* W = wp->value.data.data();
#pragma omp parallel for schedule(static) if (xin.rows > 512)
        for (int i = 0; i < xin.rows; ++i) {
            const T* go = g.row(i);
            T* dst = gx.row(i);
            for (int ci = 0; ci < c_in; ++ci) {
                const T* wrow = W + static_cast<size_t>(ci) * c_out;
                T acc = T(0);
                for (int co = 0; co < c_out; ++co) acc += go[co] * wrow[co];
                dst[ci] += acc;
            }
        }
        T* gw = wp->grad.data.data();
#pragma omp parallel for schedule(static) if (c_out > 4 && xin.rows > 512)
        for (int co = 0; co < c_out; ++co) {
            for (int i = 0; i < xin.rows; ++i) {
                const T go = g(i, co);
                if (go == T(0)) continue;
                const T* src = xin.row(i);
                for (int ci = 0; ci < c_in; ++ci) gw[static_cast<size_t>(ci) * c_out + co] += src[ci] * go;
            }
        }
        if (bias) {
            T* gb = bias->grad.row(0);
            for (int i = 0; i < g.rows; ++i) {
                const T* go = g.row(i);
                for (int co = 0; co < c_out; ++co) gb[co] += go[co];
            }
        }
    });
}

// ============================================================
// Normalization
// ============================================================

template <typename T>
struct BatchNormState {
    Param<T>* gamma = nullptr;         // 1 x C
    Param<T>* beta = nullptr;          // 1 x C
    Param<T>* running_mean = nullptr;  // 1 x C, non-trainable
    Param<T>* running_var = nullptr;   // 1 x C, non-trainable
    T momentum = T(0.1);
    T eps = T(1e-5);
};

template <typename T>
BatchNormState<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels) {
    BatchNormState<T> bn;
    bn.gamma = &store.create(name + ".gamma", 1, channels);
    bn.beta = &store.create(name + ".beta", 1, channels);
    bn.running_mean = &store.create(name + ".running_mean", 1, channels, false);
    bn.running_var = &store.create(name + ".running_var", 1, channels, false);
    bn.gamma->value.fill(T(1));
    bn.running_var->value.fill(T(1));
    return bn;
}

// Train mode normalizes by batch statistics over all rows (biased variance)
// and folds an exponential update into the running stats; eval mode reads the
// running stats. Running stats are write-only in train mode, so a train-mode
// forward stays a pure function of (input, params), which the finite-
// difference harness relies on.
template <typename T>
int batch_norm(Tape<T>& tape, int x, const BatchNormState<T>& bn, bool training) {
    const Mat<T>& in = tape.val(x);
    const int v = in.rows, c = in.cols;
    if (v == 0) throw std::invalid_argument("batch_norm: empty input");
    if (bn.gamma->value.cols != c) throw std::invalid_argument("batch_norm: channel mismatch");

    Mat<T> mean(1, c), var(1, c);
    if (training) {
        for (int i = 0; i < v; ++i) {
            const T* src = in.row(i);
            for (int j = 0; j < c; ++j) mean(0, j) += src[j];
        }
        for (int j = 0; j < c; ++j) mean(0, j) /= static_cast<T>(v);
        for (int i = 0; i < v; ++i) {
            const T* src = in.row(i);
            for (int j = 0; j < c; ++j) {
                const T d = src[j] - mean(0, j);
                var(0, j) += d * d;
            }
        }
        for (int j = 0; j < c; ++j) var(0, j) /= static_cast<T>(v);
        const T unbias = v > 1 ? static_cast<T>(v) / static_cast<T>(v - 1) : T(1);
        // stats live on the float lattice like the optimizer state, so the
        // 32-bit checkpoint payload is lossless and a resumed run is bit-exact
        for (int j = 0; j < c; ++j) {
            bn.running_mean->value(0, j) = static_cast<T>(static_cast<float>(
                (T(1) - bn.momentum) * bn.running_mean->value(0, j) + bn.momentum * mean(0, j)));
            bn.running_var->value(0, j) = static_cast<T>(static_cast<float>(
                (T(1) - bn.momentum) * bn.running_var->value(0, j) +
                bn.momentum * var(0, j) * unbias));
        }
    } else {
        mean = bn.running_mean->value;
        var = bn.running_var->value;
    }

    Mat<T> inv_std(1, c);
    for (int j = 0; j < c; ++j) inv_std(0, j) = T(1) / std::sqrt(var(0, j) + bn.eps);

    Mat<T> xhat(v, c);
    Mat<T> out(v, c);
    for (int i = 0; i < v; ++i) {
        const T* src = in.row(i);
        T* xh = xhat.row(i);
        T* dst = out.row(i);
        for (int j = 0; j < c; ++j) {
            xh[j] = (src[j] - mean(0, j)) * inv_std(0, j);
            dst[j] = xh[j] * bn.gamma->value(0, j) + bn.beta->value(0, j);
        }
    }

    auto saved_xhat = std::make_shared<Mat<T>>(std::move(xhat));
    auto saved_inv = std::make_shared<Mat<T>>(std::move(inv_std));
    return tape.emit(std::move(out), [x, bn, training, saved_xhat, saved_inv, v, c](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(x);
        const Mat<T>& xh = *saved_xhat;
        T* ggamma = bn.gamma->grad.row(0);
        T* gbeta = bn.beta->grad.row(0);
        for (int j = 0; j < c; ++j) {
            T sum_g = T(0), sum_gx = T(0);
            for (int i = 0; i < v; ++i) {
                const T gi = g(i, j);
                sum_g += gi;
                sum_gx += gi * xh(i, j);
            }
            ggamma[j] += sum_gx;
            gbeta[j] += sum_g;
            const T gamma_inv = bn.gamma->value(0, j) * (*saved_inv)(0, j);
            if (training) {
                const T inv_v = T(1) / static_cast<T>(v);
                for (int i = 0; i < v; ++i)
                    gx(i, j) += gamma_inv * (g(i, j) - inv_v * sum_g - inv_v * xh(i, j) * sum_gx);
            } else {
                for (int i = 0; i < v; ++i) gx(i, j) += gamma_inv * g(i, j);
            }
        }
    });
}

// Per-row normalization over channels with affine parameters.
template <typename T>
int layer_norm(Tape<T>& tape, int x, Param<T>& gamma, Param<T>& beta, T eps = T(1e-5)) {
    const Mat<T>& in = tape.val(x);
    const int v = in.rows, c = in.cols;
    if (gamma.value.cols != c || beta.value.cols != c)
        throw std::invalid_argument("layer_norm: channel mismatch");

    Mat<T> xhat(v, c), out(v, c), inv_std(v, 1);
    for (int i = 0; i < v; ++i) {
        const T* src = in.row(i);
        T mu = T(0);
        for (int j = 0; j < c; ++j) mu += src[j];
        mu /= static_cast<T>(c);
        T var = T(0);
        for (int j = 0; j < c; ++j) {
            const T d = src[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std(i, 0) = inv;
        T* xh = xhat.row(i);
        T* dst = out.row(i);
        for (int j = 0; j < c; ++j) {
            xh[j] = (src[j] - mu) * inv;
            dst[j] = xh[j] * gamma.value(0, j) + beta.value(0, j);
        }
    }

    Param<T>* gp = &gamma;
    Param<T>* bp = &beta;
    auto saved_xhat = std::make_shared<Mat<T>>(std::move(xhat));
    auto saved_inv = std::make_shared<Mat<T>>(std::move(inv_std));
    return tape.emit(std::move(out), [x, gp, bp, saved_xhat, saved_inv, v, c](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(x);
        const Mat<T>& xh = *saved_xhat;
        T* ggamma = gp->grad.row(0);
        T* gbeta = bp->grad.row(0);
        for (int i = 0; i < v; ++i) {
            const T* gi = g.row(i);
            T sum_g = T(0), sum_gx = T(0);
            for (int j = 0; j < c; ++j) {
                const T gh = gi[j] * gp->value(0, j);
                sum_g += gh;
                sum_gx += gh * xh(i, j);
                ggamma[j] += gi[j] * xh(i, j);
                gbeta[j] += gi[j];
            }
            const T inv_c = T(1) / static_cast<T>(c);
            for (int j = 0; j < c; ++j) {
                const T gh = gi[j] * gp->value(0, j);
                gx(i, j) += (*saved_inv)(i, 0) * (gh - inv_c * sum_g - inv_c * xh(i, j) * sum_gx);
            }
        }
    });
}

// ============================================================
// Activations
// ============================================================

template <typename T>
int relu(Tape<T>& tape, int x) {
    const Mat<T>& in = tape.val(x);
    Mat<T> out(in.rows, in.cols);
    for (size_t i = 0; i < in.size(); ++i) out.data[i] = in.data[i] > T(0) ? in.data[i] : T(0);
    return tape.emit(std::move(out), [x](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& xin = t.val(x);
        Mat<T>& gx = t.grad(x);
        for (size_t i = 0; i < g.size(); ++i)
            if (xin.data[i] > T(0)) gx.data[i] += g.data[i];
    });
}

template <typename T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
int sigmoid(Tape<T>& tape, int x) {
    const Mat<T>& in = tape.val(x);
    Mat<T> out(in.rows, in.cols);
    for (size_t i = 0; i < in.size(); ++i) out.data[i] = sigmoid_scalar(in.data[i]);
    return tape.emit(std::move(out), [x](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& y = t.val(self);
        Mat<T>& gx = t.grad(x);
        for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * y.data[i] * (T(1) - y.data[i]);
    });
}

template <typename T>
int softmax_rows(Tape<T>& tape, int x) {
    const Mat<T>& in = tape.val(x);
    Mat<T> out(in.rows, in.cols);
    for (int i = 0; i < in.rows; ++i) {
        const T* src = in.row(i);
        T* dst = out.row(i);
        T mx = src[0];
        for (int j = 1; j < in.cols; ++j) mx = std::max(mx, src[j]);
        T sum = T(0);
        for (int j = 0; j < in.cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (int j = 0; j < in.cols; ++j) dst[j] /= sum;
    }
    return tape.emit(std::move(out), [x](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& y = t.val(self);
        Mat<T>& gx = t.grad(x);
        for (int i = 0; i < g.rows; ++i) {
            T dot = T(0);
            for (int j = 0; j < g.cols; ++j) dot += g(i, j) * y(i, j);
            for (int j = 0; j < g.cols; ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
        }
    });
}

// ============================================================
// Structure ops
// ============================================================

template <typename T>
int add(Tape<T>& tape, int a, int b) {
    const Mat<T>& va = tape.val(a);
    const Mat<T>& vb = tape.val(b);
    check_same_shape(va, vb, "add");
    Mat<T> out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) out.data[i] = va.data[i] + vb.data[i];
    return tape.emit(std::move(out), [a, b](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& ga = t.grad(a);
        Mat<T>& gb = t.grad(b);
        for (size_t i = 0; i < g.size(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] += g.data[i];
        }
    });
}

template <typename T>
int mul(Tape<T>& tape, int a, int b) {
    const Mat<T>& va = tape.val(a);
    const Mat<T>& vb = tape.val(b);
    check_same_shape(va, vb, "mul");
    Mat<T> out(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) out.data[i] = va.data[i] * vb.data[i];
    return tape.emit(std::move(out), [a, b](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& va = t.val(a);
        const Mat<T>& vb = t.val(b);
        Mat<T>& ga = t.grad(a);
        Mat<T>& gb = t.grad(b);
        for (size_t i = 0; i < g.size(); ++i) {
            ga.data[i] += g.data[i] * vb.data[i];
            gb.data[i] += g.data[i] * va.data[i];
        }
    });
}

template <typename T>
int scale(Tape<T>& tape, int x, T k) {
    const Mat<T>& in = tape.val(x);
    Mat<T> out(in.rows, in.cols);
    for (size_t i = 0; i < in.size(); ++i) out.data[i] = in.data[i] * k;
    return tape.emit(std::move(out), [x, k](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(x);
        for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * k;
    });
}

template <typename T>
int sum_all(Tape<T>& tape, int x) {
    const Mat<T>& in = tape.val(x);
    T acc = T(0);
    for (size_t i = 0; i < in.size(); ++i) acc += in.data[i];
    Mat<T> out(1, 1);
    out(0, 0) = acc;
    return tape.emit(std::move(out), [x](Tape<T>& t, int self) {
        const T g = t.grad(self)(0, 0);
        Mat<T>& gx = t.grad(x);
        for (size_t i = 0; i < gx.size(); ++i) gx.data[i] += g;
    });
}

template <typename T>
int weighted_sum_scalars(Tape<T>& tape, const std::vector<int>& ids, const std::vector<T>& w) {
    if (ids.size() != w.size() || ids.empty())
        throw std::invalid_argument("weighted_sum_scalars: id/weight length mismatch");
    T acc = T(0);
    for (size_t i = 0; i < ids.size(); ++i) {
        const Mat<T>& v = tape.val(ids[i]);
        if (v.rows != 1 || v.cols != 1) throw std::invalid_argument("weighted_sum_scalars: non-scalar term");
        acc += w[i] * v(0, 0);
    }
    Mat<T> out(1, 1);
    out(0, 0) = acc;
    return tape.emit(std::move(out), [ids, w](Tape<T>& t, int self) {
        const T g = t.grad(self)(0, 0);
        for (size_t i = 0; i < ids.size(); ++i) t.grad(ids[i])(0, 0) += g * w[i];
    });
}

template <typename T>
int slice_rows(Tape<T>& tape, int x, int row0, int nrows) {
    const Mat<T>& in = tape.val(x);
    if (row0 < 0 || nrows < 0 || row0 + nrows > in.rows)
        throw std::out_of_range("slice_rows: range outside input");
    Mat<T> out(nrows, in.cols);
    for (int i = 0; i < nrows; ++i)
        for (int j = 0; j < in.cols; ++j) out(i, j) = in(row0 + i, j);
    return tape.emit(std::move(out), [x, row0, nrows](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(x);
        for (int i = 0; i < nrows; ++i)
            for (int j = 0; j < g.cols; ++j) gx(row0 + i, j) += g(i, j);
    });
}

template <typename T>
int gather_rows(Tape<T>& tape, int x, std::shared_ptr<const std::vector<int32_t>> rows) {
    const Mat<T>& in = tape.val(x);
    Mat<T> out(static_cast<int>(rows->size()), in.cols);
    for (size_t i = 0; i < rows->size(); ++i) {
        const int32_t r = (*rows)[i];
        if (r < 0 || r >= in.rows) throw std::out_of_range("gather_rows: row index outside input");
        for (int j = 0; j < in.cols; ++j) out(static_cast<int>(i), j) = in(r, j);
    }
    return tape.emit(std::move(out), [x, rows](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(x);
        for (size_t i = 0; i < rows->size(); ++i)
            for (int j = 0; j < g.cols; ++j) gx((*rows)[i], j) += g(static_cast<int>(i), j);
    });
}

// ============================================================
// Per-sample pooling and broadcast scaling
// ============================================================

// Mean of each sample's rows: V x C -> B x C. row_batch[i] gives row i's
// sample; rows are canonically sorted so each sample is a contiguous run.
template <typename T>
int sparse_gap(Tape<T>& tape, int x, std::shared_ptr<const std::vector<int32_t>> row_batch, int batch_size) {
    const Mat<T>& in = tape.val(x);
    if (static_cast<int>(row_batch->size()) != in.rows)
        throw std::invalid_argument("sparse_gap: row/batch map length mismatch");
    Mat<T> out(batch_size, in.cols);
    std::vector<int> counts(batch_size, 0);
    for (int i = 0; i < in.rows; ++i) {
        const int b = (*row_batch)[i];
        if (b < 0 || b >= batch_size) throw std::out_of_range("sparse_gap: batch id out of range");
        counts[b] += 1;
        const T* src = in.row(i);
        T* dst = out.row(b);
        for (int j = 0; j < in.cols; ++j) dst[j] += src[j];
    }
    for (int b = 0; b < batch_size; ++b) {
        if (counts[b] == 0) throw std::runtime_error("sparse_gap: sample has no active voxels");
        T* dst = out.row(b);
        for (int j = 0; j < in.cols; ++j) dst[j] /= static_cast<T>(counts[b]);
    }
    auto shared_counts = std::make_shared<std::vector<int>>(std::move(counts));
    return tape.emit(std::move(out), [x, row_batch, shared_counts](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(x);
        for (int i = 0; i < gx.rows; ++i) {
            const int b = (*row_batch)[i];
            const T inv = T(1) / static_cast<T>((*shared_counts)[b]);
            const T* go = g.row(b);
            T* dst = gx.row(i);
            for (int j = 0; j < g.cols; ++j) dst[j] += go[j] * inv;
        }
    });
}

// out[i, c] = x[i, c] * w[batch(i), c]; the per-sample weight matrix is a
// differentiable input too (selection weights in the kernel-selection block).
template <typename T>
int rows_scale_by_sample(Tape<T>& tape, int x, int w, std::shared_ptr<const std::vector<int32_t>> row_batch) {
    const Mat<T>& in = tape.val(x);
    const Mat<T>& ws = tape.val(w);
    if (static_cast<int>(row_batch->size()) != in.rows)
        throw std::invalid_argument("rows_scale_by_sample: row/batch map length mismatch");
    if (ws.cols != in.cols) throw std::invalid_argument("rows_scale_by_sample: channel mismatch");
    Mat<T> out(in.rows, in.cols);
    for (int i = 0; i < in.rows; ++i) {
        const int b = (*row_batch)[i];
        if (b < 0 || b >= ws.rows) throw std::out_of_range("rows_scale_by_sample: batch id out of range");
        const T* src = in.row(i);
        const T* wrow = ws.row(b);
        T* dst = out.row(i);
        for (int j = 0; j < in.cols; ++j) dst[j] = src[j] * wrow[j];
    }
    return tape.emit(std::move(out), [x, w, row_batch](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& xin = t.val(x);
        const Mat<T>& ws = t.val(w);
        Mat<T>& gx = t.grad(x);
        Mat<T>& gw = t.grad(w);
        for (int i = 0; i < g.rows; ++i) {
            const int b = (*row_batch)[i];
            const T* go = g.row(i);
            const T* src = xin.row(i);
            const T* wrow = ws.row(b);
            T* dx = gx.row(i);
            T* dw = gw.row(b);
            for (int j = 0; j < g.cols; ++j) {
                dx[j] += go[j] * wrow[j];
                dw[j] += go[j] * src[j];
            }
        }
    });
}

// Softmax across R stacked blocks per (row, channel): input ids are R
// matrices of identical shape; output is one (R*B) x C stack of weights that
// sum to 1 across blocks. Slice per block with slice_rows.
template <typename T>
int softmax_blocks(Tape<T>& tape, const std::vector<int>& logits) {
    if (logits.empty()) throw std::invalid_argument("softmax_blocks: no inputs");
    const int R = static_cast<int>(logits.size());
    const Mat<T>& first = tape.val(logits[0]);
    const int b = first.rows, c = first.cols;
    for (int r = 1; r < R; ++r) check_same_shape(first, tape.val(logits[r]), "softmax_blocks");

    Mat<T> out(R * b, c);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < c; ++j) {
            T mx = tape.val(logits[0])(i, j);
            for (int r = 1; r < R; ++r) mx = std::max(mx, tape.val(logits[r])(i, j));
            T sum = T(0);
            for (int r = 0; r < R; ++r) {
                const T e = std::exp(tape.val(logits[r])(i, j) - mx);
                out(r * b + i, j) = e;
                sum += e;
            }
            for (int r = 0; r < R; ++r) out(r * b + i, j) /= sum;
        }
    }
    return tape.emit(std::move(out), [logits, R, b, c](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        const Mat<T>& y = t.val(self);
        for (int i = 0; i < b; ++i) {
            for (int j = 0; j < c; ++j) {
                T dot = T(0);
                for (int r = 0; r < R; ++r) dot += g(r * b + i, j) * y(r * b + i, j);
                for (int r = 0; r < R; ++r)
                    t.grad(logits[r])(i, j) += y(r * b + i, j) * (g(r * b + i, j) - dot);
            }
        }
    });
}

}  // namespace ops
}  // namespace vkp
