#pragma once

#include <string>
#include <vector>

#include "neuroscale/ops.hpp"
#include "neuroscale/optim.hpp"

namespace neuroscale::nn {

// Linear layer parameters under `prefix`: <prefix>w [in x out], <prefix>b [out].
void init_linear(ParamStore& ps, const std::string& prefix, int in, int out, uint64_t seed);
Tensor apply_linear(const ParamStore& ps, const std::string& prefix, const Tensor& x);

// Layer-norm affine under `prefix`: <prefix>gamma (ones), <prefix>beta (zeros).
void init_layer_norm(ParamStore& ps, const std::string& prefix, int dim);
Tensor apply_layer_norm(const ParamStore& ps, const std::string& prefix, const Tensor& x, double eps);

// Multi-head self-attention over x [t x d]; mask (when given) is a row-major
// t*t allow-matrix shared by every head. Parameters: <prefix>{q,k,v,o}.{w,b}.
void init_attention(ParamStore& ps, const std::string& prefix, int dim, uint64_t seed);
Tensor self_attention(const ParamStore& ps, const std::string& prefix, const Tensor& x, int heads,
                      const std::vector<uint8_t>* mask = nullptr);

// Pre-norm transformer block: x + attn(ln1(x)), then h + mlp(ln2(h)) with a
// GELU MLP. Parameters: <prefix>{ln1,ln2}.*, <prefix>attn.*, <prefix>mlp.fc{1,2}.*.
void init_block(ParamStore& ps, const std::string& prefix, int dim, int mlp, uint64_t seed);
Tensor block_forward(const ParamStore& ps, const std::string& prefix, const Tensor& x, int heads,
                     double eps, const std::vector<uint8_t>* mask = nullptr);

} // namespace neuroscale::nn
