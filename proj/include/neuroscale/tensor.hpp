#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "neuroscale/errors.hpp"

namespace neuroscale {

// Dense row-major tensor of 64-bit reals. Value type: copies share the
// underlying buffer, ops never mutate their inputs. The in-place writers
// (data_mut, optimizer updates) are only legal outside a recording scope.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    int64_t numel() const { return numel_; }

    const std::vector<double>& data() const { return *data_; }
    std::vector<double>& data_mut() { return *data_; }
    double value() const; // scalar only

    double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
    double at(int i, int j) const {
        return (*data_)[static_cast<size_t>(i) * shape_[1] + static_cast<size_t>(j)];
    }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool b) { requires_grad_ = b; }

    // Identity of the storage buffer; gradient tapes key leaf tensors by it.
    const void* buffer_id() const { return static_cast<const void*>(data_.get()); }

    bool defined() const { return static_cast<bool>(data_); }
    bool all_finite() const;
    std::string shape_str() const;

    // Tape bookkeeping (set by ops when recording).
    int node = -1;
    uint64_t tape_id = 0;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    int64_t numel_ = 0;
    bool requires_grad_ = false;
};

// Gradient context handed to an op's backward function. in_grads[i] is empty
// when parent i is untracked (no gradient needed).
struct BackCtx {
    std::span<const double> out_grad;
    std::vector<std::span<double>> in_grads;
};

using BackwardFn = std::function<void(BackCtx&)>;

// Ordered record of differentiable op applications for one loss evaluation.
// Ops append nodes while a TapeScope is active; backward() replays the record
// in reverse. Replay order is fixed by emission order, so gradients are
// bit-identical across repeated runs on identical inputs.
class GradTape {
public:
    GradTape();

    uint64_t id() const { return id_; }

    // Leaf node for a requires_grad tensor, created on first use. Keyed by the
    // storage buffer so every copy of a parameter maps to the same node.
    int leaf(const Tensor& t);

    // Record an op. parents entries may be -1 (constant input).
    int emit(int64_t numel, std::vector<int> parents, BackwardFn fn);

    void backward(const Tensor& loss);

    // Gradient of the loss w.r.t. a leaf tensor; zeros if the parameter was
    // never touched by the recorded computation. Valid after backward().
    std::vector<double> grad(const Tensor& t) const;

    size_t size() const { return nodes_.size(); }

    static GradTape* current();

private:
    struct Node {
        std::vector<int> parents;
        BackwardFn fn;
        int64_t numel;
    };

    uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, int> leaf_ids_;

    friend class TapeScope;
};

// RAII activation of a tape; ops record onto the innermost active scope.
class TapeScope {
public:
    explicit TapeScope(GradTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* prev_;
};

// Central-difference gradient estimate, (f(p+h) - f(p-h)) / (2h) per
// coordinate. Throws oracle_error naming the coordinate if f is non-finite at
// any probe point. Independent of the tape machinery by construction.
std::vector<double> fd_gradient_oracle(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& params, double h);

} // namespace neuroscale
