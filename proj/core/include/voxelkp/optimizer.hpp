#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxelkp/checkpoint.hpp"
#include "voxelkp/tape.hpp"

namespace vkp {

struct AdamWConfig {
    double lr = 0.003;  // schedule peak
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline void validate_adamw_config(const AdamWConfig& c) {
    if (c.lr <= 0) throw std::invalid_argument("optimizer: lr must be positive");
    if (c.weight_decay < 0) throw std::invalid_argument("optimizer: negative weight decay");
    if (c.beta1 < 0 || c.beta1 >= 1 || c.beta2 < 0 || c.beta2 >= 1)
        throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
    if (c.eps <= 0) throw std::invalid_argument("optimizer: eps must be positive");
}

// Adaptive moments with decoupled weight decay. All state (parameters and
// moments) is kept on the float32 lattice: every value written is first
// rounded through float, which makes the 32-bit checkpoint payload lossless
// and a resumed run bit-identical to an uninterrupted one.
template <typename T>
class AdamW {
public:
    AdamW(ParamStore<T>& store, const AdamWConfig& cfg) : store_(&store), cfg_(cfg) {
        validate_adamw_config(cfg);
        for (Param<T>* p : store.all()) {
            if (!p->trainable) continue;
            for (T& v : p->value.data) v = quantize(v);
            m_.emplace_back(p->value.rows, p->value.cols);
            v_.emplace_back(p->value.rows, p->value.cols);
        }
    }

    static T quantize(T x) { return static_cast<T>(static_cast<float>(x)); }

    // One update from the gradients currently held in the store.
    void step(T lr) {
        ++t_;
        const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
        const T bc1 = T(1) - std::pow(b1, T(t_));
        const T bc2 = T(1) - std::pow(b2, T(t_));
        size_t slot = 0;
        for (Param<T>* p : store_->all()) {
            if (!p->trainable) continue;
            Mat<T>& m = m_[slot];
            Mat<T>& v = v_[slot];
            ++slot;
            for (size_t i = 0; i < p->value.size(); ++i) {
                const T g = p->grad.data[i];
                m.data[i] = quantize(b1 * m.data[i] + (T(1) - b1) * g);
                v.data[i] = quantize(b2 * v.data[i] + (T(1) - b2) * g * g);
                const T mhat = m.data[i] / bc1;
                const T vhat = v.data[i] / bc2;
                const T update = mhat / (std::sqrt(vhat) + T(cfg_.eps)) +
                                 T(cfg_.weight_decay) * p->value.data[i];
                p->value.data[i] = quantize(p->value.data[i] - lr * update);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

    // Moments and step counter under reserved names, for the weight file.
    std::vector<NamedTensor> snapshot_state() const {
        std::vector<NamedTensor> out;
        size_t slot = 0;
        for (Param<T>* p : store_->all()) {
            if (!p->trainable) continue;
            for (const char* kind : {"m", "v"}) {
                const Mat<T>& src = kind[0] == 'm' ? m_[slot] : v_[slot];
                NamedTensor t;
                t.name = std::string("opt.") + kind + "." + p->name;
                t.dims = {static_cast<uint32_t>(src.rows), static_cast<uint32_t>(src.cols)};
                t.data.resize(src.size());
                for (size_t i = 0; i < t.data.size(); ++i)
                    t.data[i] = static_cast<float>(src.data[i]);
                out.push_back(std::move(t));
            }
            ++slot;
        }
        NamedTensor st;
        st.name = "opt.step";
        st.dims = {1, 1};
        st.data = {static_cast<float>(t_)};
        out.push_back(std::move(st));
        return out;
    }

    void restore_state(const std::vector<NamedTensor>& tensors) {
        size_t matched = 0;
        for (const NamedTensor& t : tensors) {
            if (t.name == "opt.step") {
                t_ = static_cast<int64_t>(t.data.at(0));
                ++matched;
                continue;
            }
            const bool is_m = t.name.rfind("opt.m.", 0) == 0;
            const bool is_v = t.name.rfind("opt.v.", 0) == 0;
            if (!is_m && !is_v) continue;
            const std::string pname = t.name.substr(6);
            size_t slot = 0;
            bool found = false;
            for (Param<T>* p : store_->all()) {
                if (!p->trainable) continue;
                if (p->name == pname) {
                    Mat<T>& dst = is_m ? m_[slot] : v_[slot];
                    if (t.dims.size() != 2 || static_cast<int>(t.dims[0]) != dst.rows ||
                        static_cast<int>(t.dims[1]) != dst.cols)
                        throw std::runtime_error("optimizer: shape mismatch for " + t.name);
                    for (size_t i = 0; i < t.data.size(); ++i)
                        dst.data[i] = static_cast<T>(t.data[i]);
                    found = true;
                    ++matched;
                    break;
                }
                ++slot;
            }
            if (!found) throw std::runtime_error("optimizer: unknown state tensor " + t.name);
        }
        if (matched != 2 * m_.size() + 1)
            throw std::runtime_error("optimizer: incomplete state in checkpoint");
    }

private:
    ParamStore<T>* store_;
    AdamWConfig cfg_;
    std::vector<Mat<T>> m_, v_;
    int64_t t_ = 0;
};

// One-cycle schedule: cosine ramp from peak/25 up to the peak at 30% of the
// run, cosine anneal down to peak/1000 by the final step.
struct OneCycle {
    double peak = 0.003;
    int total_steps = 1;
    double start_div = 25.0;
    double end_div = 1000.0;

    double lr(int step) const {
        if (total_steps <= 1) return peak;
        const int warm = warmup_steps();
        const double start = peak / start_div, end = peak / end_div;
        constexpr double pi = 3.141592653589793238462643383279502884;
        if (step <= warm) {
            // zero-length warmup (2-step runs) still starts low
            const double t = warm == 0 ? 0.0 : static_cast<double>(step) / warm;
            return start + (peak - start) * 0.5 * (1.0 - std::cos(pi * t));
        }
        const int last = total_steps - 1;
        const double u = last == warm ? 1.0 : static_cast<double>(step - warm) / (last - warm);
        return peak + (end - peak) * 0.5 * (1.0 - std::cos(pi * u));
    }

    // at least one anneal step so the schedule always ends low
    int warmup_steps() const {
        const int w = static_cast<int>(std::lround(0.3 * total_steps));
        return std::max(0, std::min(w, total_steps - 2));
    }
};

inline OneCycle make_one_cycle(double peak, int total_steps) {
    if (peak <= 0) throw std::invalid_argument("schedule: peak lr must be positive");
    if (total_steps < 1) throw std::invalid_argument("schedule: need at least one step");
    OneCycle s;
    s.peak = peak;
    s.total_steps = total_steps;
    return s;
}

}  // namespace vkp
