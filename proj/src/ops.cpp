#include "neuroscale/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace neuroscale::ops {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool tracked(const Tensor& t) {
    GradTape* tape = GradTape::current();
    if (!tape) return false;
    if (t.requires_grad()) return true;
    return t.node >= 0 && t.tape_id == tape->id();
}

int parent_id(GradTape& tape, const Tensor& t) {
    if (t.node >= 0 && t.tape_id == tape.id()) return t.node;
    if (t.requires_grad()) return tape.leaf(t);
    return -1;
}

Tensor finish(Tensor out, std::initializer_list<const Tensor*> parents, BackwardFn fn) {
    GradTape* tape = GradTape::current();
    if (!tape) return out;
    bool any = false;
    for (const Tensor* p : parents) {
        if (tracked(*p)) { any = true; break; }
    }
    if (!any) return out;
    std::vector<int> pids;
    pids.reserve(parents.size());
    for (const Tensor* p : parents) pids.push_back(parent_id(*tape, *p));
    out.node = tape->emit(out.numel(), std::move(pids), std::move(fn));
    out.tape_id = tape->id();
    return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw contract_error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

void check_2d(const Tensor& a, const char* op) {
    if (a.ndim() != 2) throw contract_error(std::string(op) + ": expected 2-D tensor, got " + a.shape_str());
}

size_t su(int v) { return static_cast<size_t>(v); }

} // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return finish(Tensor::from(a.shape(), std::move(out)), {&a, &b}, [](BackCtx& c) {
        for (int p = 0; p < 2; ++p) {
            if (c.in_grads[su(p)].empty()) continue;
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[su(p)][i] += c.out_grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return finish(Tensor::from(a.shape(), std::move(out)), {&a, &b}, [](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
        }
        if (!c.in_grads[1].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[1][i] -= c.out_grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return finish(Tensor::from(a.shape(), std::move(out)), {&a, &b}, [a, b](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i] * b.data()[i];
        }
        if (!c.in_grads[1].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[1][i] += c.out_grad[i] * a.data()[i];
        }
    });
}

Tensor scale(const Tensor& a, double cst) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * cst;
    return finish(Tensor::from(a.shape(), std::move(out)), {&a}, [cst](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i] * cst;
    });
}

Tensor addc(const Tensor& a, double cst) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + cst;
    return finish(Tensor::from(a.shape(), std::move(out)), {&a}, [](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
    });
}

Tensor vexp(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return finish(Tensor::from(a.shape(), std::move(out)), {&a}, [a](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) {
            c.in_grads[0][i] += c.out_grad[i] * std::exp(a.data()[i]);
        }
    });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
    return finish(Tensor::from(a.shape(), std::move(out)), {&a}, [a](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-a.data()[i]));
            c.in_grads[0][i] += c.out_grad[i] * s * (1.0 - s);
        }
    });
}

Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    return finish(Tensor::from(a.shape(), std::move(out)), {&a}, [a](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) {
            const double x = a.data()[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            c.in_grads[0][i] += c.out_grad[i] * (cdf + x * pdf);
        }
    });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw contract_error("scale_by: scale must be a 1-element tensor, got " + s.shape_str());
    const double sv = s.data()[0];
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    return finish(Tensor::from(a.shape(), std::move(out)), {&a, &s}, [a, sv](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i] * sv;
        }
        if (!c.in_grads[1].empty()) {
            double acc = 0.0;
            for (size_t i = 0; i < c.out_grad.size(); ++i) acc += c.out_grad[i] * a.data()[i];
            c.in_grads[1][0] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// matrix
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a.extent(1) != b.extent(0)) {
        throw contract_error("matmul: inner extents disagree, " + a.shape_str() + " x " + b.shape_str());
    }
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    std::vector<double> out(su(m) * su(n), 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = ad[su(i) * su(k) + su(kk)];
            if (av == 0.0) continue;
            const size_t bo = su(kk) * su(n);
            const size_t oo = su(i) * su(n);
            for (int j = 0; j < n; ++j) out[oo + su(j)] += av * bd[bo + su(j)];
        }
    }
    return finish(Tensor::from({m, n}, std::move(out)), {&a, &b}, [a, b, m, k, n](BackCtx& c) {
        const auto& ad = a.data();
        const auto& bd = b.data();
        if (!c.in_grads[0].empty()) {
            // ga[i,kk] += sum_j g[i,j] * b[kk,j]
            for (int i = 0; i < m; ++i) {
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const size_t go = su(i) * su(n);
                    const size_t bo = su(kk) * su(n);
                    for (int j = 0; j < n; ++j) acc += c.out_grad[go + su(j)] * bd[bo + su(j)];
                    c.in_grads[0][su(i) * su(k) + su(kk)] += acc;
                }
            }
        }
        if (!c.in_grads[1].empty()) {
            // gb[kk,j] += sum_i a[i,kk] * g[i,j]
            for (int i = 0; i < m; ++i) {
                const size_t go = su(i) * su(n);
                for (int kk = 0; kk < k; ++kk) {
                    const double av = ad[su(i) * su(k) + su(kk)];
                    if (av == 0.0) continue;
                    const size_t bo = su(kk) * su(n);
                    for (int j = 0; j < n; ++j) c.in_grads[1][bo + su(j)] += av * c.out_grad[go + su(j)];
                }
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_2d(x, "linear");
    check_2d(w, "linear");
    if (x.extent(1) != w.extent(0)) {
        throw contract_error("linear: inner extents disagree, x " + x.shape_str() + " vs w " + w.shape_str());
    }
    if (bias.ndim() != 1 || bias.extent(0) != w.extent(1)) {
        throw contract_error("linear: bias " + bias.shape_str() + " does not match w " + w.shape_str());
    }
    const int n = x.extent(0), a = x.extent(1), b = w.extent(1);
    std::vector<double> out(su(n) * su(b));
    const auto& xd = x.data();
    const auto& wd = w.data();
    const auto& bd = bias.data();
    for (int i = 0; i < n; ++i) {
        const size_t oo = su(i) * su(b);
        for (int j = 0; j < b; ++j) out[oo + su(j)] = bd[su(j)];
        for (int kk = 0; kk < a; ++kk) {
            const double xv = xd[su(i) * su(a) + su(kk)];
            if (xv == 0.0) continue;
            const size_t wo = su(kk) * su(b);
            for (int j = 0; j < b; ++j) out[oo + su(j)] += xv * wd[wo + su(j)];
        }
    }
    return finish(Tensor::from({n, b}, std::move(out)), {&x, &w, &bias}, [x, w, n, a, b](BackCtx& c) {
        const auto& xd = x.data();
        const auto& wd = w.data();
        if (!c.in_grads[0].empty()) {
            for (int i = 0; i < n; ++i) {
                const size_t go = su(i) * su(b);
                for (int kk = 0; kk < a; ++kk) {
                    double acc = 0.0;
                    const size_t wo = su(kk) * su(b);
                    for (int j = 0; j < b; ++j) acc += c.out_grad[go + su(j)] * wd[wo + su(j)];
                    c.in_grads[0][su(i) * su(a) + su(kk)] += acc;
                }
            }
        }
        if (!c.in_grads[1].empty()) {
            for (int i = 0; i < n; ++i) {
                const size_t go = su(i) * su(b);
                for (int kk = 0; kk < a; ++kk) {
                    const double xv = xd[su(i) * su(a) + su(kk)];
                    if (xv == 0.0) continue;
                    const size_t wo = su(kk) * su(b);
                    for (int j = 0; j < b; ++j) c.in_grads[1][wo + su(j)] += xv * c.out_grad[go + su(j)];
                }
            }
        }
        if (!c.in_grads[2].empty()) {
            for (int i = 0; i < n; ++i) {
                const size_t go = su(i) * su(b);
                for (int j = 0; j < b; ++j) c.in_grads[2][su(j)] += c.out_grad[go + su(j)];
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    check_2d(a, "transpose");
    const int m = a.extent(0), n = a.extent(1);
    std::vector<double> out(su(m) * su(n));
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out[su(j) * su(m) + su(i)] = a.data()[su(i) * su(n) + su(j)];
    }
    return finish(Tensor::from({n, m}, std::move(out)), {&a}, [m, n](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                c.in_grads[0][su(i) * su(n) + su(j)] += c.out_grad[su(j) * su(m) + su(i)];
            }
        }
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    if (n != a.numel()) {
        throw contract_error("reshape: numel mismatch, " + a.shape_str() + " -> requested product " + std::to_string(n));
    }
    std::vector<double> out = a.data();
    return finish(Tensor::from(std::move(shape), std::move(out)), {&a}, [](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
    });
}

// ---------------------------------------------------------------------------
// slicing / concatenation
// ---------------------------------------------------------------------------

Tensor slice_rows(const Tensor& a, int first, int count) {
    check_2d(a, "slice_rows");
    const int n = a.extent(0), d = a.extent(1);
    if (first < 0 || count <= 0 || first + count > n) {
        throw contract_error("slice_rows: range [" + std::to_string(first) + "," +
                             std::to_string(first + count) + ") outside " + a.shape_str());
    }
    std::vector<double> out(su(count) * su(d));
    std::copy_n(a.data().begin() + su(first) * su(d), out.size(), out.begin());
    return finish(Tensor::from({count, d}, std::move(out)), {&a}, [first, d](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        const size_t off = su(first) * su(d);
        for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][off + i] += c.out_grad[i];
    });
}

Tensor slice_cols(const Tensor& a, int first, int count) {
    check_2d(a, "slice_cols");
    const int n = a.extent(0), d = a.extent(1);
    if (first < 0 || count <= 0 || first + count > d) {
        throw contract_error("slice_cols: range [" + std::to_string(first) + "," +
                             std::to_string(first + count) + ") outside " + a.shape_str());
    }
    std::vector<double> out(su(n) * su(count));
    for (int i = 0; i < n; ++i) {
        std::copy_n(a.data().begin() + su(i) * su(d) + su(first), su(count), out.begin() + su(i) * su(count));
    }
    return finish(Tensor::from({n, count}, std::move(out)), {&a}, [first, count, n, d](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < count; ++j) {
                c.in_grads[0][su(i) * su(d) + su(first) + su(j)] += c.out_grad[su(i) * su(count) + su(j)];
            }
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw contract_error("concat_rows: no parts");
    const int d = parts[0].extent(1);
    int total = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_rows");
        if (p.extent(1) != d) {
            throw contract_error("concat_rows: column mismatch " + p.shape_str() + " vs d=" + std::to_string(d));
        }
        total += p.extent(0);
    }
    std::vector<double> out;
    out.reserve(su(total) * su(d));
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

    std::vector<int64_t> sizes;
    for (const Tensor& p : parts) sizes.push_back(p.numel());
    Tensor result = Tensor::from({total, d}, std::move(out));
    GradTape* tape = GradTape::current();
    if (!tape) return result;
    bool any = false;
    for (const Tensor& p : parts) {
        if (tracked(p)) { any = true; break; }
    }
    if (!any) return result;
    std::vector<int> pids;
    for (const Tensor& p : parts) pids.push_back(parent_id(*tape, p));
    result.node = tape->emit(result.numel(), std::move(pids), [sizes](BackCtx& c) {
        size_t off = 0;
        for (size_t p = 0; p < sizes.size(); ++p) {
            const size_t n = static_cast<size_t>(sizes[p]);
            if (!c.in_grads[p].empty()) {
                for (size_t i = 0; i < n; ++i) c.in_grads[p][i] += c.out_grad[off + i];
            }
            off += n;
        }
    });
    result.tape_id = tape->id();
    return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: no parts");
    const int n = parts[0].extent(0);
    int total = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_cols");
        if (p.extent(0) != n) {
            throw contract_error("concat_cols: row mismatch " + p.shape_str() + " vs n=" + std::to_string(n));
        }
        total += p.extent(1);
    }
    std::vector<double> out(su(n) * su(total));
    int coff = 0;
    for (const Tensor& p : parts) {
        const int d = p.extent(1);
        for (int i = 0; i < n; ++i) {
            std::copy_n(p.data().begin() + su(i) * su(d), su(d), out.begin() + su(i) * su(total) + su(coff));
        }
        coff += d;
    }
    std::vector<int> widths;
    for (const Tensor& p : parts) widths.push_back(p.extent(1));
    Tensor result = Tensor::from({n, total}, std::move(out));
    GradTape* tape = GradTape::current();
    if (!tape) return result;
    bool any = false;
    for (const Tensor& p : parts) {
        if (tracked(p)) { any = true; break; }
    }
    if (!any) return result;
    std::vector<int> pids;
    for (const Tensor& p : parts) pids.push_back(parent_id(*tape, p));
    result.node = tape->emit(result.numel(), std::move(pids), [widths, n, total](BackCtx& c) {
        int coff2 = 0;
        for (size_t p = 0; p < widths.size(); ++p) {
            const int d = widths[p];
            if (!c.in_grads[p].empty()) {
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < d; ++j) {
                        c.in_grads[p][su(i) * su(d) + su(j)] += c.out_grad[su(i) * su(total) + su(coff2 + j)];
                    }
                }
            }
            coff2 += d;
        }
    });
    result.tape_id = tape->id();
    return result;
}

// ---------------------------------------------------------------------------
// broadcast
// ---------------------------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    check_2d(x, "add_rowvec");
    if (v.ndim() != 1 || v.extent(0) != x.extent(1)) {
        throw contract_error("add_rowvec: v " + v.shape_str() + " does not match x " + x.shape_str());
    }
    const int n = x.extent(0), d = x.extent(1);
    std::vector<double> out(su(n) * su(d));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out[su(i) * su(d) + su(j)] = x.data()[su(i) * su(d) + su(j)] + v.data()[su(j)];
    }
    return finish(Tensor::from({n, d}, std::move(out)), {&x, &v}, [n, d](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
        }
        if (!c.in_grads[1].empty()) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) c.in_grads[1][su(j)] += c.out_grad[su(i) * su(d) + su(j)];
            }
        }
    });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    check_2d(x, "mul_rowvec");
    if (v.ndim() != 1 || v.extent(0) != x.extent(1)) {
        throw contract_error("mul_rowvec: v " + v.shape_str() + " does not match x " + x.shape_str());
    }
    const int n = x.extent(0), d = x.extent(1);
    std::vector<double> out(su(n) * su(d));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out[su(i) * su(d) + su(j)] = x.data()[su(i) * su(d) + su(j)] * v.data()[su(j)];
    }
    return finish(Tensor::from({n, d}, std::move(out)), {&x, &v}, [x, v, n, d](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    c.in_grads[0][su(i) * su(d) + su(j)] += c.out_grad[su(i) * su(d) + su(j)] * v.data()[su(j)];
                }
            }
        }
        if (!c.in_grads[1].empty()) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    c.in_grads[1][su(j)] += c.out_grad[su(i) * su(d) + su(j)] * x.data()[su(i) * su(d) + su(j)];
                }
            }
        }
    });
}

Tensor add_colvec(const Tensor& x, const Tensor& v) {
    check_2d(x, "add_colvec");
    if (v.ndim() != 1 || v.extent(0) != x.extent(0)) {
        throw contract_error("add_colvec: v " + v.shape_str() + " does not match x " + x.shape_str());
    }
    const int n = x.extent(0), d = x.extent(1);
    std::vector<double> out(su(n) * su(d));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out[su(i) * su(d) + su(j)] = x.data()[su(i) * su(d) + su(j)] + v.data()[su(i)];
    }
    return finish(Tensor::from({n, d}, std::move(out)), {&x, &v}, [n, d](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
        }
        if (!c.in_grads[1].empty()) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) c.in_grads[1][su(i)] += c.out_grad[su(i) * su(d) + su(j)];
            }
        }
    });
}

Tensor mul_colvec(const Tensor& x, const Tensor& v) {
    check_2d(x, "mul_colvec");
    if (v.ndim() != 1 || v.extent(0) != x.extent(0)) {
        throw contract_error("mul_colvec: v " + v.shape_str() + " does not match x " + x.shape_str());
    }
    const int n = x.extent(0), d = x.extent(1);
    std::vector<double> out(su(n) * su(d));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out[su(i) * su(d) + su(j)] = x.data()[su(i) * su(d) + su(j)] * v.data()[su(i)];
    }
    return finish(Tensor::from({n, d}, std::move(out)), {&x, &v}, [x, v, n, d](BackCtx& c) {
        if (!c.in_grads[0].empty()) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    c.in_grads[0][su(i) * su(d) + su(j)] += c.out_grad[su(i) * su(d) + su(j)] * v.data()[su(i)];
                }
            }
        }
        if (!c.in_grads[1].empty()) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    c.in_grads[1][su(i)] += c.out_grad[su(i) * su(d) + su(j)] * x.data()[su(i) * su(d) + su(j)];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return finish(Tensor::from({1}, {acc}), {&a}, [](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (auto& g : c.in_grads[0]) g += c.out_grad[0];
    });
}

Tensor mean_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return finish(Tensor::from({1}, {acc * inv}), {&a}, [inv](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (auto& g : c.in_grads[0]) g += c.out_grad[0] * inv;
    });
}

Tensor mean_rows(const Tensor& a) {
    check_2d(a, "mean_rows");
    const int n = a.extent(0), d = a.extent(1);
    const double inv = 1.0 / static_cast<double>(n);
    std::vector<double> out(su(d), 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out[su(j)] += a.data()[su(i) * su(d) + su(j)];
    }
    for (double& v : out) v *= inv;
    return finish(Tensor::from({d}, std::move(out)), {&a}, [n, d, inv](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < d; ++j) c.in_grads[0][su(i) * su(d) + su(j)] += c.out_grad[su(j)] * inv;
        }
    });
}

// ---------------------------------------------------------------------------
// row-wise
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_impl(const Tensor& a, const std::vector<uint8_t>* mask) {
    check_2d(a, "row_softmax");
    const int n = a.extent(0), m = a.extent(1);
    if (mask && mask->size() != su(n) * su(m)) {
        throw contract_error("row_softmax_masked: mask length does not match " + a.shape_str());
    }
    auto probs = std::make_shared<std::vector<double>>(su(n) * su(m), 0.0);
    for (int i = 0; i < n; ++i) {
        const size_t off = su(i) * su(m);
        double mx = -1.0;
        bool seen = false;
        for (int j = 0; j < m; ++j) {
            if (mask && !(*mask)[off + su(j)]) continue;
            const double v = a.data()[off + su(j)];
            if (!seen || v > mx) { mx = v; seen = true; }
        }
        if (!seen) throw contract_error("row_softmax_masked: row " + std::to_string(i) + " fully masked");
        double denom = 0.0;
        for (int j = 0; j < m; ++j) {
            if (mask && !(*mask)[off + su(j)]) continue;
            const double e = std::exp(a.data()[off + su(j)] - mx);
            (*probs)[off + su(j)] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < m; ++j) {
            if (mask && !(*mask)[off + su(j)]) continue;
            (*probs)[off + su(j)] *= inv;
        }
    }
    std::vector<uint8_t> mcopy;
    if (mask) mcopy = *mask;
    Tensor out = Tensor::from({n, m}, *probs);
    return finish(std::move(out), {&a}, [probs, mcopy = std::move(mcopy), n, m](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        const bool has_mask = !mcopy.empty();
        for (int i = 0; i < n; ++i) {
            const size_t off = su(i) * su(m);
            double dot = 0.0;
            for (int j = 0; j < m; ++j) {
                if (has_mask && !mcopy[off + su(j)]) continue;
                dot += c.out_grad[off + su(j)] * (*probs)[off + su(j)];
            }
            for (int j = 0; j < m; ++j) {
                if (has_mask && !mcopy[off + su(j)]) continue;
                c.in_grads[0][off + su(j)] += (*probs)[off + su(j)] * (c.out_grad[off + su(j)] - dot);
            }
        }
    });
}

} // namespace

Tensor row_softmax(const Tensor& a) { return softmax_impl(a, nullptr); }

Tensor row_softmax_masked(const Tensor& a, const std::vector<uint8_t>& mask) {
    return softmax_impl(a, &mask);
}

Tensor row_standardize(const Tensor& a, double eps) {
    check_2d(a, "row_standardize");
    if (!(eps >= 0.0)) throw config_error("row_standardize: eps must be >= 0");
    const int n = a.extent(0), m = a.extent(1);
    const double invm = 1.0 / static_cast<double>(m);
    auto ys = std::make_shared<std::vector<double>>(su(n) * su(m));
    auto inv_std = std::make_shared<std::vector<double>>(su(n));
    for (int i = 0; i < n; ++i) {
        const size_t off = su(i) * su(m);
        double mean = 0.0;
        for (int j = 0; j < m; ++j) mean += a.data()[off + su(j)];
        mean *= invm;
        double var = 0.0;
        for (int j = 0; j < m; ++j) {
            const double d = a.data()[off + su(j)] - mean;
            var += d * d;
        }
        var *= invm;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[su(i)] = is;
        for (int j = 0; j < m; ++j) (*ys)[off + su(j)] = (a.data()[off + su(j)] - mean) * is;
    }
    Tensor out = Tensor::from({n, m}, *ys);
    return finish(std::move(out), {&a}, [ys, inv_std, n, m, invm](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (int i = 0; i < n; ++i) {
            const size_t off = su(i) * su(m);
            double gm = 0.0, gym = 0.0;
            for (int j = 0; j < m; ++j) {
                gm += c.out_grad[off + su(j)];
                gym += c.out_grad[off + su(j)] * (*ys)[off + su(j)];
            }
            gm *= invm;
            gym *= invm;
            const double is = (*inv_std)[su(i)];
            for (int j = 0; j < m; ++j) {
                c.in_grads[0][off + su(j)] +=
                    is * (c.out_grad[off + su(j)] - gm - (*ys)[off + su(j)] * gym);
            }
        }
    });
}

Tensor row_l2_normalize(const Tensor& a) {
    check_2d(a, "row_l2_normalize");
    const int n = a.extent(0), d = a.extent(1);
    auto ys = std::make_shared<std::vector<double>>(su(n) * su(d));
    auto inv_norm = std::make_shared<std::vector<double>>(su(n));
    for (int i = 0; i < n; ++i) {
        const size_t off = su(i) * su(d);
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += a.data()[off + su(j)] * a.data()[off + su(j)];
        const double r = std::sqrt(s);
        if (r == 0.0) throw contract_error("row_l2_normalize: row " + std::to_string(i) + " has zero norm");
        const double ir = 1.0 / r;
        (*inv_norm)[su(i)] = ir;
        for (int j = 0; j < d; ++j) (*ys)[off + su(j)] = a.data()[off + su(j)] * ir;
    }
    Tensor out = Tensor::from({n, d}, *ys);
    return finish(std::move(out), {&a}, [ys, inv_norm, n, d](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (int i = 0; i < n; ++i) {
            const size_t off = su(i) * su(d);
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += c.out_grad[off + su(j)] * (*ys)[off + su(j)];
            const double ir = (*inv_norm)[su(i)];
            for (int j = 0; j < d; ++j) {
                c.in_grads[0][off + su(j)] += ir * (c.out_grad[off + su(j)] - (*ys)[off + su(j)] * dot);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor softmax_xent_rows(const Tensor& logits, const std::vector<int>& targets) {
    check_2d(logits, "softmax_xent_rows");
    const int n = logits.extent(0), v = logits.extent(1);
    if (targets.size() != su(n)) {
        throw contract_error("softmax_xent_rows: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " rows");
    }
    for (int i = 0; i < n; ++i) {
        if (targets[su(i)] < 0 || targets[su(i)] >= v) {
            throw index_error("softmax_xent_rows: target " + std::to_string(targets[su(i)]) + " outside [0," +
                              std::to_string(v) + ") at row " + std::to_string(i));
        }
    }
    auto probs = std::make_shared<std::vector<double>>(su(n) * su(v));
    std::vector<double> losses(su(n));
    for (int i = 0; i < n; ++i) {
        const size_t off = su(i) * su(v);
        double mx = logits.data()[off];
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits.data()[off + su(j)]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(logits.data()[off + su(j)] - mx);
            (*probs)[off + su(j)] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < v; ++j) (*probs)[off + su(j)] *= inv;
        losses[su(i)] = std::log(denom) + mx - logits.data()[off + su(targets[su(i)])];
    }
    std::vector<int> tg = targets;
    return finish(Tensor::from({n}, std::move(losses)), {&logits},
                  [probs, tg = std::move(tg), n, v](BackCtx& c) {
                      if (c.in_grads[0].empty()) return;
                      for (int i = 0; i < n; ++i) {
                          const size_t off = su(i) * su(v);
                          const double g = c.out_grad[su(i)];
                          for (int j = 0; j < v; ++j) {
                              double p = (*probs)[off + su(j)];
                              if (j == tg[su(i)]) p -= 1.0;
                              c.in_grads[0][off + su(j)] += g * p;
                          }
                      }
                  });
}

Tensor softmax_xent(const Tensor& logits, int target) {
    Tensor row = logits.ndim() == 1 ? reshape(logits, {1, logits.extent(0)}) : logits;
    if (row.ndim() != 2 || row.extent(0) != 1) {
        throw contract_error("softmax_xent: expected a single logit vector, got " + logits.shape_str());
    }
    Tensor l = softmax_xent_rows(row, {target});
    return reshape(l, {1});
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    if (x.ndim() != 2) throw contract_error("conv1d: x must be [ci,L], got " + x.shape_str());
    if (w.ndim() != 3) throw contract_error("conv1d: w must be [co,ci,K], got " + w.shape_str());
    const int ci = x.extent(0), len = x.extent(1);
    const int co = w.extent(0), wci = w.extent(1), kk = w.extent(2);
    if (wci != ci) throw contract_error("conv1d: channel mismatch x " + x.shape_str() + " vs w " + w.shape_str());
    if (bias.ndim() != 1 || bias.extent(0) != co) {
        throw contract_error("conv1d: bias " + bias.shape_str() + " does not match w " + w.shape_str());
    }
    if (stride <= 0 || padding < 0) throw config_error("conv1d: invalid stride/padding");
    const int lout = (len + 2 * padding - kk) / stride + 1;
    if (len + 2 * padding < kk || lout <= 0) {
        throw config_error("conv1d: output length <= 0 for input length " + std::to_string(len) +
                           ", kernel " + std::to_string(kk) + ", stride " + std::to_string(stride) +
                           ", padding " + std::to_string(padding));
    }
    std::vector<double> out(su(co) * su(lout));
    for (int o = 0; o < co; ++o) {
        for (int t = 0; t < lout; ++t) {
            double acc = bias.data()[su(o)];
            const int start = t * stride - padding;
            for (int c = 0; c < ci; ++c) {
                for (int k = 0; k < kk; ++k) {
                    const int p = start + k;
                    if (p < 0 || p >= len) continue;
                    acc += x.data()[su(c) * su(len) + su(p)] * w.data()[(su(o) * su(ci) + su(c)) * su(kk) + su(k)];
                }
            }
            out[su(o) * su(lout) + su(t)] = acc;
        }
    }
    return finish(Tensor::from({co, lout}, std::move(out)), {&x, &w, &bias},
                  [x, w, ci, len, co, kk, lout, stride, padding](BackCtx& c) {
                      for (int o = 0; o < co; ++o) {
                          for (int t = 0; t < lout; ++t) {
                              const double g = c.out_grad[su(o) * su(lout) + su(t)];
                              if (g == 0.0) continue;
                              const int start = t * stride - padding;
                              if (!c.in_grads[2].empty()) c.in_grads[2][su(o)] += g;
                              for (int cc = 0; cc < ci; ++cc) {
                                  for (int k = 0; k < kk; ++k) {
                                      const int p = start + k;
                                      if (p < 0 || p >= len) continue;
                                      const size_t wi = (su(o) * su(ci) + su(cc)) * su(kk) + su(k);
                                      const size_t xi = su(cc) * su(len) + su(p);
                                      if (!c.in_grads[0].empty()) c.in_grads[0][xi] += g * w.data()[wi];
                                      if (!c.in_grads[1].empty()) c.in_grads[1][wi] += g * x.data()[xi];
                                  }
                              }
                          }
                      }
                  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    if (x.ndim() != 3) throw contract_error("conv2d: x must be [ci,H,W], got " + x.shape_str());
    if (w.ndim() != 4) throw contract_error("conv2d: w must be [co,ci,kh,kw], got " + w.shape_str());
    const int ci = x.extent(0), hh = x.extent(1), ww = x.extent(2);
    const int co = w.extent(0), wci = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    if (wci != ci) throw contract_error("conv2d: channel mismatch x " + x.shape_str() + " vs w " + w.shape_str());
    if (bias.ndim() != 1 || bias.extent(0) != co) {
        throw contract_error("conv2d: bias " + bias.shape_str() + " does not match w " + w.shape_str());
    }
    if (stride <= 0 || padding < 0) throw config_error("conv2d: invalid stride/padding");
    const int oh = (hh + 2 * padding - kh) / stride + 1;
    const int ow = (ww + 2 * padding - kw) / stride + 1;
    if (hh + 2 * padding < kh || ww + 2 * padding < kw || oh <= 0 || ow <= 0) {
        throw config_error("conv2d: output size <= 0 for input " + x.shape_str());
    }
    std::vector<double> out(su(co) * su(oh) * su(ow));
    for (int o = 0; o < co; ++o) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias.data()[su(o)];
                const int sy = oy * stride - padding;
                const int sx = ox * stride - padding;
                for (int c = 0; c < ci; ++c) {
                    for (int ky = 0; ky < kh; ++ky) {
                        const int py = sy + ky;
                        if (py < 0 || py >= hh) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int px = sx + kx;
                            if (px < 0 || px >= ww) continue;
                            acc += x.data()[(su(c) * su(hh) + su(py)) * su(ww) + su(px)] *
                                   w.data()[((su(o) * su(ci) + su(c)) * su(kh) + su(ky)) * su(kw) + su(kx)];
                        }
                    }
                }
                out[(su(o) * su(oh) + su(oy)) * su(ow) + su(ox)] = acc;
            }
        }
    }
    return finish(Tensor::from({co, oh, ow}, std::move(out)), {&x, &w, &bias},
                  [x, w, ci, hh, ww, co, kh, kw, oh, ow, stride, padding](BackCtx& c) {
                      for (int o = 0; o < co; ++o) {
                          for (int oy = 0; oy < oh; ++oy) {
                              for (int ox = 0; ox < ow; ++ox) {
                                  const double g = c.out_grad[(su(o) * su(oh) + su(oy)) * su(ow) + su(ox)];
                                  if (g == 0.0) continue;
                                  if (!c.in_grads[2].empty()) c.in_grads[2][su(o)] += g;
                                  const int sy = oy * stride - padding;
                                  const int sx = ox * stride - padding;
                                  for (int cc = 0; cc < ci; ++cc) {
                                      for (int ky = 0; ky < kh; ++ky) {
                                          const int py = sy + ky;
                                          if (py < 0 || py >= hh) continue;
                                          for (int kx = 0; kx < kw; ++kx) {
                                              const int px = sx + kx;
                                              if (px < 0 || px >= ww) continue;
                                              const size_t xi = (su(cc) * su(hh) + su(py)) * su(ww) + su(px);
                                              const size_t wi =
                                                  ((su(o) * su(ci) + su(cc)) * su(kh) + su(ky)) * su(kw) + su(kx);
                                              if (!c.in_grads[0].empty()) c.in_grads[0][xi] += g * w.data()[wi];
                                              if (!c.in_grads[1].empty()) c.in_grads[1][wi] += g * x.data()[xi];
                                          }
                                      }
                                  }
                              }
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// lookup
// ---------------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int>& rows) {
    check_2d(table, "gather_rows");
    const int v = table.extent(0), d = table.extent(1);
    for (int r : rows) {
        if (r < 0 || r >= v) {
            throw index_error("gather_rows: row " + std::to_string(r) + " outside [0," + std::to_string(v) + ")");
        }
    }
    const int n = static_cast<int>(rows.size());
    std::vector<double> out(su(n) * su(d));
    for (int i = 0; i < n; ++i) {
        std::copy_n(table.data().begin() + su(rows[su(i)]) * su(d), su(d), out.begin() + su(i) * su(d));
    }
    std::vector<int> rcopy = rows;
    return finish(Tensor::from({n, d}, std::move(out)), {&table}, [rcopy = std::move(rcopy), d](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < rcopy.size(); ++i) {
            const size_t to = su(rcopy[i]) * su(d);
            for (int j = 0; j < d; ++j) c.in_grads[0][to + su(j)] += c.out_grad[i * su(d) + su(j)];
        }
    });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace {

struct LinCoef {
    int i0, i1;
    double w0, w1;
};

std::vector<LinCoef> axis_coefs(int src, int dst) {
    std::vector<LinCoef> cs(su(dst));
    for (int i = 0; i < dst; ++i) {
        double s = (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
        if (s < 0.0) s = 0.0;
        if (s > static_cast<double>(src - 1)) s = static_cast<double>(src - 1);
        int i0 = static_cast<int>(std::floor(s));
        if (i0 > src - 1) i0 = src - 1;
        int i1 = std::min(i0 + 1, src - 1);
        const double f = s - static_cast<double>(i0);
        cs[su(i)] = {i0, i1, 1.0 - f, f};
    }
    return cs;
}

} // namespace

Tensor bilinear_resize(const Tensor& map, int out_h, int out_w) {
    if (map.ndim() != 3) throw contract_error("bilinear_resize: map must be [h,w,c], got " + map.shape_str());
    if (out_h < 1 || out_w < 1) throw contract_error("bilinear_resize: target sizes must be >= 1");
    const int h = map.extent(0), w = map.extent(1), ch = map.extent(2);
    if (out_h == h && out_w == w) {
        // identity resize is a bit-exact copy
        std::vector<double> out = map.data();
        return finish(Tensor::from({h, w, ch}, std::move(out)), {&map}, [](BackCtx& c) {
            if (c.in_grads[0].empty()) return;
            for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
        });
    }
    auto rows = std::make_shared<std::vector<LinCoef>>(axis_coefs(h, out_h));
    auto cols = std::make_shared<std::vector<LinCoef>>(axis_coefs(w, out_w));
    std::vector<double> out(su(out_h) * su(out_w) * su(ch), 0.0);
    for (int y = 0; y < out_h; ++y) {
        const LinCoef& ry = (*rows)[su(y)];
        for (int x = 0; x < out_w; ++x) {
            const LinCoef& rx = (*cols)[su(x)];
            const size_t oo = (su(y) * su(out_w) + su(x)) * su(ch);
            const size_t s00 = (su(ry.i0) * su(w) + su(rx.i0)) * su(ch);
            const size_t s01 = (su(ry.i0) * su(w) + su(rx.i1)) * su(ch);
            const size_t s10 = (su(ry.i1) * su(w) + su(rx.i0)) * su(ch);
            const size_t s11 = (su(ry.i1) * su(w) + su(rx.i1)) * su(ch);
            for (int c = 0; c < ch; ++c) {
                out[oo + su(c)] = ry.w0 * (rx.w0 * map.data()[s00 + su(c)] + rx.w1 * map.data()[s01 + su(c)]) +
                                  ry.w1 * (rx.w0 * map.data()[s10 + su(c)] + rx.w1 * map.data()[s11 + su(c)]);
            }
        }
    }
    return finish(Tensor::from({out_h, out_w, ch}, std::move(out)), {&map},
                  [rows, cols, w, ch, out_h, out_w](BackCtx& c) {
                      if (c.in_grads[0].empty()) return;
                      for (int y = 0; y < out_h; ++y) {
                          const LinCoef& ry = (*rows)[su(y)];
                          for (int x = 0; x < out_w; ++x) {
                              const LinCoef& rx = (*cols)[su(x)];
                              const size_t oo = (su(y) * su(out_w) + su(x)) * su(ch);
                              const size_t s00 = (su(ry.i0) * su(w) + su(rx.i0)) * su(ch);
                              const size_t s01 = (su(ry.i0) * su(w) + su(rx.i1)) * su(ch);
                              const size_t s10 = (su(ry.i1) * su(w) + su(rx.i0)) * su(ch);
                              const size_t s11 = (su(ry.i1) * su(w) + su(rx.i1)) * su(ch);
                              for (int cc = 0; cc < ch; ++cc) {
                                  const double g = c.out_grad[oo + su(cc)];
                                  c.in_grads[0][s00 + su(cc)] += g * ry.w0 * rx.w0;
                                  c.in_grads[0][s01 + su(cc)] += g * ry.w0 * rx.w1;
                                  c.in_grads[0][s10 + su(cc)] += g * ry.w1 * rx.w0;
                                  c.in_grads[0][s11 + su(cc)] += g * ry.w1 * rx.w1;
                              }
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

Tensor chw_to_hwc(const Tensor& a) {
    if (a.ndim() != 3) throw contract_error("chw_to_hwc: expected [c,h,w], got " + a.shape_str());
    const int c = a.extent(0), h = a.extent(1), w = a.extent(2);
    std::vector<double> out(a.data().size());
    for (int cc = 0; cc < c; ++cc) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                out[(su(y) * su(w) + su(x)) * su(c) + su(cc)] = a.data()[(su(cc) * su(h) + su(y)) * su(w) + su(x)];
            }
        }
    }
    return finish(Tensor::from({h, w, c}, std::move(out)), {&a}, [c, h, w](BackCtx& ctx) {
        if (ctx.in_grads[0].empty()) return;
        for (int cc = 0; cc < c; ++cc) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    ctx.in_grads[0][(su(cc) * su(h) + su(y)) * su(w) + su(x)] +=
                        ctx.out_grad[(su(y) * su(w) + su(x)) * su(c) + su(cc)];
                }
            }
        }
    });
}

Tensor hwc_to_chw(const Tensor& a) {
    if (a.ndim() != 3) throw contract_error("hwc_to_chw: expected [h,w,c], got " + a.shape_str());
    const int h = a.extent(0), w = a.extent(1), c = a.extent(2);
    std::vector<double> out(a.data().size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int cc = 0; cc < c; ++cc) {
                out[(su(cc) * su(h) + su(y)) * su(w) + su(x)] = a.data()[(su(y) * su(w) + su(x)) * su(c) + su(cc)];
            }
        }
    }
    return finish(Tensor::from({c, h, w}, std::move(out)), {&a}, [c, h, w](BackCtx& ctx) {
        if (ctx.in_grads[0].empty()) return;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int cc = 0; cc < c; ++cc) {
                    ctx.in_grads[0][(su(y) * su(w) + su(x)) * su(c) + su(cc)] +=
                        ctx.out_grad[(su(cc) * su(h) + su(y)) * su(w) + su(x)];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

Tensor stopgrad(const Tensor& a) {
    return Tensor::from(a.shape(), a.data());
}

Tensor straight_through(const Tensor& values, const Tensor& grad_path) {
    check_same_shape(values, grad_path, "straight_through");
    std::vector<double> out = values.data();
    return finish(Tensor::from(values.shape(), std::move(out)), {&grad_path}, [](BackCtx& c) {
        if (c.in_grads[0].empty()) return;
        for (size_t i = 0; i < c.out_grad.size(); ++i) c.in_grads[0][i] += c.out_grad[i];
    });
}

// ---------------------------------------------------------------------------
// composed helpers
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    return add_rowvec(mul_rowvec(row_standardize(x, eps), gamma), beta);
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
    check_2d(x, "group_norm");
    const int c = x.extent(0), t = x.extent(1);
    if (groups <= 0 || c % groups != 0) {
        throw config_error("group_norm: " + std::to_string(c) + " channels not divisible by " +
                           std::to_string(groups) + " groups");
    }
    Tensor grouped = reshape(x, {groups, (c / groups) * t});
    Tensor normed = reshape(row_standardize(grouped, eps), {c, t});
    return add_colvec(mul_colvec(normed, gamma), beta);
}

Tensor mean_softmax_xent(const Tensor& logits, const std::vector<int>& targets) {
    return mean_all(softmax_xent_rows(logits, targets));
}

} // namespace neuroscale::ops
