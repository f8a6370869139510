#include "neuroscale/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace neuroscale {

namespace {
int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw contract_error("tensor extent must be positive");
        n *= e;
    }
    return n;
}

thread_local GradTape* g_current_tape = nullptr;
std::atomic<uint64_t> g_tape_counter{1};
} // namespace

Tensor::Tensor(std::vector<int> shape, double fill, bool requires_grad)
    : shape_(std::move(shape)),
      numel_(shape_numel(shape_)),
      requires_grad_(requires_grad) {
    data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(numel_), fill);
}

Tensor Tensor::scalar(double v) {
    Tensor t({1}, v);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    if (static_cast<size_t>(t.numel_) != values.size()) {
        throw contract_error("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + t.shape_str());
    }
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    t.requires_grad_ = requires_grad;
    return t;
}

double Tensor::value() const {
    if (numel_ != 1) throw contract_error("value() on non-scalar tensor " + shape_str());
    return (*data_)[0];
}

bool Tensor::all_finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

GradTape::GradTape() : id_(g_tape_counter.fetch_add(1)) {}

GradTape* GradTape::current() { return g_current_tape; }

int GradTape::leaf(const Tensor& t) {
    auto it = leaf_ids_.find(t.buffer_id());
    if (it != leaf_ids_.end()) return it->second;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, nullptr, t.numel()});
    leaf_ids_.emplace(t.buffer_id(), id);
    return id;
}

int GradTape::emit(int64_t numel, std::vector<int> parents, BackwardFn fn) {
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), std::move(fn), numel});
    return id;
}

void GradTape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw contract_error("backward() needs a scalar loss, got " + loss.shape_str());
    if (loss.tape_id != id_ || loss.node < 0) {
        throw contract_error("backward() loss was not recorded on this tape");
    }
    grads_.assign(nodes_.size(), {});
    std::vector<char> touched(nodes_.size(), 0);
    grads_[static_cast<size_t>(loss.node)].assign(1, 1.0);
    touched[static_cast<size_t>(loss.node)] = 1;

    for (int i = loss.node; i >= 0; --i) {
        if (!touched[static_cast<size_t>(i)]) continue;
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.fn) continue; // leaf
        BackCtx ctx;
        ctx.out_grad = grads_[static_cast<size_t>(i)];
        ctx.in_grads.reserve(n.parents.size());
        for (int p : n.parents) {
            if (p < 0) {
                ctx.in_grads.emplace_back();
                continue;
            }
            auto& g = grads_[static_cast<size_t>(p)];
            if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(p)].numel), 0.0);
            touched[static_cast<size_t>(p)] = 1;
            ctx.in_grads.emplace_back(g);
        }
        n.fn(ctx);
    }
}

std::vector<double> GradTape::grad(const Tensor& t) const {
    auto it = leaf_ids_.find(t.buffer_id());
    if (it == leaf_ids_.end() || grads_.empty() ||
        grads_[static_cast<size_t>(it->second)].empty()) {
        return std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
    }
    return grads_[static_cast<size_t>(it->second)];
}

TapeScope::TapeScope(GradTape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }

TapeScope::~TapeScope() { g_current_tape = prev_; }

std::vector<double> fd_gradient_oracle(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& params, double h) {
    if (!(h > 0.0)) throw contract_error("fd_gradient_oracle: step h must be positive");
    std::vector<double> p = params;
    std::vector<double> g(params.size(), 0.0);
    for (size_t i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + h;
        const double fp = f(p);
        p[i] = saved - h;
        const double fm = f(p);
        p[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw oracle_error("fd_gradient_oracle: non-finite value at coordinate " + std::to_string(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

} // namespace neuroscale
