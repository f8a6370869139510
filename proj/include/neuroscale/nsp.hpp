#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuroscale/nn.hpp"
#include "neuroscale/ops.hpp"
#include "neuroscale/optim.hpp"
#include "neuroscale/tokenizer.hpp"

namespace neuroscale::nsp {

// Decoder-only transformer that predicts token maps scale by scale. The
// input sequence is [s], then one block per scale at that scale's own
// resolution: block 1 carries only learned level/position embeddings (scale 1
// is predicted from [s] through attention), block k >= 2 carries projected
// cells of the upsampled cumulative feature through scale k-1. Positions of
// block k emit the logits for scale k's tokens; the start position's logits
// are unused.
struct NspConfig {
    int depth = 2;
    int hidden = 64;
    int mlp = 256;
    int heads = 4;
    int vocab = 64;         // V, must match the tokenizer codebook
    int cond_dim = 16;      // dimension d of the conditioning embedding e
    int feature_dim = 16;   // d_f of the tokenizer feature maps
    std::vector<int> schedule_sizes = {1, 2, 3, 4};
    double cond_drop_rate = 0.1;
    double cfg_ratio = 4.0; // guidance strength g
    int top_k = 64;         // min(900, V) at desk scale
    double ln_eps = 1e-6;

    tok::ScaleSchedule schedule() const { return tok::ScaleSchedule::square(schedule_sizes); }
    int seq_len() const { return 1 + schedule().total_tokens(); }
    void validate() const;
};

// Row-major allow-matrix over the block layout. With the start flag the
// blocks are ([s], scale 1, ..., scale K); without it just the scale blocks.
// A position may attend to every position in its own block and all earlier
// blocks.
std::vector<uint8_t> build_block_causal_mask(const tok::ScaleSchedule& schedule, bool include_start);

void init_nsp(ParamStore& ps, const NspConfig& cfg, uint64_t seed, const std::string& prefix = "nsp.");

// Linear projection of the conditioning embedding e [d] into the hidden
// width; returned as a [1 x hidden] row.
Tensor make_start_token(const Tensor& e, const NspConfig& cfg, const ParamStore& ps,
                        const std::string& prefix = "nsp.");

// Teacher-forcing inputs: entry i holds bilinear_resize(F_{i+1}, (h_{i+2},
// w_{i+2})), the input map for scale i+2. Scale 1 has no feature input.
std::vector<Tensor> next_scale_inputs(const tok::ResidualStack& stack,
                                      const tok::ScaleSchedule& schedule);

// Assemble the [L x hidden] input sequence from a start row and the per-scale
// feature maps (scale_feats[i] feeds scale i+2; may be shorter than K-1 when
// generating a prefix). Adds level and positional embeddings.
Tensor build_inputs(const Tensor& start_row, const std::vector<Tensor>& scale_feats,
                    const NspConfig& cfg, const ParamStore& ps, const std::string& prefix = "nsp.");

// Transformer + linear head. `mask` must be len(x)^2 entries. Logits for all
// positions; callers slice out the block they need.
Tensor forward_logits(const Tensor& inputs, const std::vector<uint8_t>& mask, const NspConfig& cfg,
                      const ParamStore& ps, const std::string& prefix = "nsp.");

struct NspSample {
    Tensor embed;             // conditioning e [d]
    tok::ResidualStack stack; // teacher tokens + residual maps
};

// One teacher-forced step: mean cross-entropy over every target token in the
// batch. Each sample's [s] is replaced by the learned null condition with
// probability cond_drop_rate (one uniform draw per sample from `rng`).
Tensor train_step(const std::vector<NspSample>& batch, const NspConfig& cfg, const ParamStore& ps,
                  Rng& rng, const std::string& prefix = "nsp.");

// uncond + g * (cond - uncond); g=1 returns cond bit-exactly, g=0 uncond.
Tensor cfg_mix(const Tensor& cond, const Tensor& uncond, double g);

// Keep the k largest logits (ties keep the lower index), softmax over them,
// and pick by inverse CDF at u in [0,1). k=1 is exact argmax.
int sample_top_k(const std::vector<double>& logits, int k, double u);

struct GenResult {
    std::vector<std::vector<int>> tokens; // per scale, row-major indices
    std::vector<Tensor> scale_images;     // decode_feature(F_k) for k = 1..K
    Tensor feature;                       // F_K [h x w x d_f]
    Tensor image;                         // final decoded image [c x H x W]
    int steps = 0;                        // autoregressive steps taken (== K)
};

// Autoregressive sampling: K steps, one scale per step, conditional and
// null-conditioned passes mixed with cfg_ratio. Token draws use the
// counter-based stream keyed by (seed, scale, cell), so results are
// bit-reproducible for a fixed seed.
GenResult generate(const Tensor& e, const NspConfig& cfg, const ParamStore& ps,
                   const tok::TokenizerConfig& tcfg, const ParamStore& tok_ps, uint64_t seed,
                   const std::string& prefix = "nsp.", const std::string& tok_prefix = "vq.");

} // namespace neuroscale::nsp
