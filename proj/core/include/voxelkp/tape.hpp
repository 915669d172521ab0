#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxelkp/mat.hpp"
#include "voxelkp/rng.hpp"

namespace vkp {

// Trainable (or persistent) tensor. Ops capture raw pointers, so a Param must
// outlive every tape it appears on; ParamStore guarantees stable addresses.
template <typename T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    bool trainable = true;

    void zero_grad() { grad.zero(); }
};

template <typename T>
class ParamStore {
  public:
    Param<T>& create(const std::string& name, int rows, int cols, bool trainable = true) {
        if (by_name_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
        auto p = std::make_unique<Param<T>>();
        p->name = name;
        p->value = Mat<T>(rows, cols);
        p->grad = Mat<T>(rows, cols);
        p->trainable = trainable;
        Param<T>* raw = p.get();
        items_.push_back(std::move(p));
        by_name_[name] = raw;
        return *raw;
    }

    Param<T>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    // Creation order; stable across runs because construction is code-driven.
    std::vector<Param<T>*> all() const {
        std::vector<Param<T>*> out;
        out.reserve(items_.size());
        for (const auto& p : items_) out.push_back(p.get());
        return out;
    }

    void zero_grads() {
        for (const auto& p : items_) p->grad.zero();
    }

    size_t size() const { return items_.size(); }

  private:
    std::vector<std::unique_ptr<Param<T>>> items_;
    std::unordered_map<std::string, Param<T>*> by_name_;
};

template <typename T>
void init_uniform(Param<T>& p, Rng& rng, int fan_in) {
    const double bound = std::sqrt(1.0 / fan_in);
    for (size_t i = 0; i < p.value.size(); ++i)
        p.value.data[i] = static_cast<T>(rng.uniform(-bound, bound));
}

// Reverse-mode tape. Each emitted node owns its value, its gradient buffer,
// and a closure that pushes the node's gradient into its inputs (and params).
// backward() replays closures in exact reverse emission order.
template <typename T>
class Tape {
  public:
    // Backward closure: (tape, own node id). Reads grad(self), accumulates
    // into input nodes' grads and captured Param grads.
    using BackFn = std::function<void(Tape<T>&, int)>;

    int leaf(Mat<T> value, bool needs_grad = false) {
        nodes_.push_back(Node{std::move(value), Mat<T>(), nullptr, needs_grad});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int emit(Mat<T> value, BackFn back) {
        nodes_.push_back(Node{std::move(value), Mat<T>(), std::move(back), true});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Mat<T>& val(int id) const { return nodes_.at(id).value; }

    Mat<T>& grad(int id) {
        Node& n = nodes_.at(id);
        if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols)
            n.grad = Mat<T>(n.value.rows, n.value.cols);
        return n.grad;
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps backward. The loss must be the
    // scalar result of a recorded forward pass.
    void backward(int loss_id) {
        if (nodes_.empty() || loss_id < 0 || loss_id >= static_cast<int>(nodes_.size()))
            throw std::runtime_error("Tape::backward: no recorded forward pass for this loss");
        Node& loss = nodes_[loss_id];
        if (loss.value.rows != 1 || loss.value.cols != 1)
            throw std::invalid_argument("Tape::backward: loss must be a 1x1 scalar");
        grad(loss_id)(0, 0) = T(1);
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && n.grad.rows > 0) n.back(*this, i);
        }
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        BackFn back;
        bool needs_grad;
    };
    std::vector<Node> nodes_;
};

}  // namespace vkp
