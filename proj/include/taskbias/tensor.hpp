#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "taskbias/common.hpp"

namespace taskbias {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense 64-bit float tensor with value semantics on the handle and shared
// storage underneath. A tensor is a leaf (requires_grad flag) or the output
// of a recorded primitive; gradients live beside the values and are only
// populated while a tape replays backward.
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;   // empty until backward touches this node
        bool requires_grad = false;
        bool tracked = false;       // participates in the active tape's graph
    };

    Tensor() : node_(std::make_shared<Node>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = false) {
        Tensor t;
        t.node_->value.assign(shape_numel(shape), v);
        t.node_->shape = std::move(shape);
        t.node_->requires_grad = requires_grad;
        t.node_->tracked = requires_grad;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DataError("tensor shape " + shape_str(shape) + " does not match data length " +
                            std::to_string(data.size()));
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        t.node_->tracked = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) { return filled({1}, v, requires_grad); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& x : t.node_->value) x = rng.normal() * stddev;
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }

    std::span<double> data() { return node_->value; }
    std::span<const double> data() const { return node_->value; }
    double* ptr() { return node_->value.data(); }
    const double* ptr() const { return node_->value.data(); }

    double item() const {
        if (size() != 1) throw NumericError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        node_->tracked = node_->tracked || rg;
    }

    bool tracked() const { return node_->tracked; }

    // gradient buffer; empty span when backward never touched this tensor
    std::span<const double> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    Tensor grad_tensor() const {
        if (node_->grad.empty()) return Tensor::zeros(node_->shape);
        return Tensor::from_data(node_->shape, node_->grad);
    }

    bool all_finite() const {
        for (double v : node_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void check_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite values in " + what);
    }

    Tensor clone() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        t.node_->requires_grad = node_->requires_grad;
        t.node_->tracked = node_->requires_grad;
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Ordered record of primitive operations. Backward replays the record in
// reverse, accumulating into .grad buffers; every node is zeroed first so a
// second replay is bit-identical to the first.
class GradientTape {
public:
    struct Record {
        std::vector<std::shared_ptr<Tensor::Node>> inputs;
        std::shared_ptr<Tensor::Node> output;
        // reads output->grad, accumulates into input grads
        std::function<void()> backward;
    };

    void record(std::vector<std::shared_ptr<Tensor::Node>> inputs, std::shared_ptr<Tensor::Node> output,
                std::function<void()> backward) {
        records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    // d(loss)/d(param) for each param. Params off the loss path get zeros;
    // params that were never marked requires_grad are an error.
    std::vector<Tensor> gradients(const Tensor& loss, std::span<const Tensor> params) {
        if (loss.size() != 1)
            throw NumericError("gradients() needs a scalar loss, got shape " + shape_str(loss.shape()));
        for (const Tensor& p : params)
            if (!p.requires_grad())
                throw DataError("gradient requested for a tensor detached from the tape (requires_grad is false)");

        // reset every buffer this tape can touch
        for (auto& rec : records_) {
            rec.output->grad.assign(rec.output->value.size(), 0.0);
            for (auto& in : rec.inputs)
                if (in->tracked) in->grad.assign(in->value.size(), 0.0);
        }
        for (const Tensor& p : params) {
            auto n = p.node();
            if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
            else std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }

        auto loss_node = loss.node();
        if (loss_node->grad.size() != 1) loss_node->grad.assign(1, 0.0);
        loss_node->grad[0] = 1.0;

        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->output->grad.empty()) it->backward();
        }

        std::vector<Tensor> out;
        out.reserve(params.size());
        for (const Tensor& p : params) out.push_back(p.grad_tensor());
        return out;
    }

    std::vector<Tensor> gradients(const Tensor& loss, std::initializer_list<Tensor> params) {
        std::vector<Tensor> v(params);
        return gradients(loss, std::span<const Tensor>(v));
    }

private:
    std::vector<Record> records_;
};

namespace detail {
inline GradientTape*& active_tape_slot() {
    thread_local GradientTape* tape = nullptr;
    return tape;
}
}  // namespace detail

inline GradientTape* active_tape() { return detail::active_tape_slot(); }

// One tape per logical execution context; scopes must not interleave across
// threads onto the same tape.
class TapeScope {
public:
    explicit TapeScope(GradientTape& tape) : prev_(detail::active_tape_slot()) {
        detail::active_tape_slot() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradientTape* prev_;
};

}  // namespace taskbias
