#include "neuroscale/nn.hpp"

#include <cmath>

namespace neuroscale::nn {

void init_linear(ParamStore& ps, const std::string& prefix, int in, int out, uint64_t seed) {
    ps.create_normal(prefix + "w", {in, out}, seed);
    ps.create(prefix + "b", {out}, 0.0);
}

Tensor apply_linear(const ParamStore& ps, const std::string& prefix, const Tensor& x) {
    return ops::linear(x, ps.get(prefix + "w"), ps.get(prefix + "b"));
}

void init_layer_norm(ParamStore& ps, const std::string& prefix, int dim) {
    ps.create(prefix + "gamma", {dim}, 1.0);
    ps.create(prefix + "beta", {dim}, 0.0);
}

Tensor apply_layer_norm(const ParamStore& ps, const std::string& prefix, const Tensor& x, double eps) {
    return ops::layer_norm(x, ps.get(prefix + "gamma"), ps.get(prefix + "beta"), eps);
}

void init_attention(ParamStore& ps, const std::string& prefix, int dim, uint64_t seed) {
    init_linear(ps, prefix + "q.", dim, dim, seed);
    init_linear(ps, prefix + "k.", dim, dim, seed);
    init_linear(ps, prefix + "v.", dim, dim, seed);
    init_linear(ps, prefix + "o.", dim, dim, seed);
}

Tensor self_attention(const ParamStore& ps, const std::string& prefix, const Tensor& x, int heads,
                      const std::vector<uint8_t>* mask) {
    const int d = x.extent(1);
    if (heads <= 0 || d % heads != 0) {
        throw config_error("self_attention: hidden size " + std::to_string(d) +
                           " not divisible by " + std::to_string(heads) + " heads");
    }
    const int dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = apply_linear(ps, prefix + "q.", x);
    Tensor k = apply_linear(ps, prefix + "k.", x);
    Tensor v = apply_linear(ps, prefix + "v.", x);
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : ops::slice_cols(q, h * dh, dh);
        Tensor kh = heads == 1 ? k : ops::slice_cols(k, h * dh, dh);
        Tensor vh = heads == 1 ? v : ops::slice_cols(v, h * dh, dh);
        Tensor scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), sc);
        Tensor probs = mask ? ops::row_softmax_masked(scores, *mask) : ops::row_softmax(scores);
        outs.push_back(ops::matmul(probs, vh));
    }
    Tensor cat = heads == 1 ? outs[0] : ops::concat_cols(outs);
    return apply_linear(ps, prefix + "o.", cat);
}

void init_block(ParamStore& ps, const std::string& prefix, int dim, int mlp, uint64_t seed) {
    init_layer_norm(ps, prefix + "ln1.", dim);
    init_attention(ps, prefix + "attn.", dim, seed);
    init_layer_norm(ps, prefix + "ln2.", dim);
    init_linear(ps, prefix + "mlp.fc1.", dim, mlp, seed);
    init_linear(ps, prefix + "mlp.fc2.", mlp, dim, seed);
}

Tensor block_forward(const ParamStore& ps, const std::string& prefix, const Tensor& x, int heads,
                     double eps, const std::vector<uint8_t>* mask) {
    Tensor a = self_attention(ps, prefix + "attn.", apply_layer_norm(ps, prefix + "ln1.", x, eps),
                              heads, mask);
    Tensor h = ops::add(x, a);
    Tensor m = apply_linear(ps, prefix + "mlp.fc2.",
                            ops::gelu(apply_linear(ps, prefix + "mlp.fc1.",
                                                   apply_layer_norm(ps, prefix + "ln2.", h, eps))));
    return ops::add(h, m);
}

} // namespace neuroscale::nn
