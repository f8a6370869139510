#pragma once

#include <string>
#include <vector>

#include "neuroscale/nn.hpp"
#include "neuroscale/ops.hpp"
#include "neuroscale/optim.hpp"

namespace neuroscale::eeg {

// A set of recorded trials for one subject. Each epoch is a [C x T] tensor;
// the first `pre_samples` columns are the pre-stimulus interval (baseline
// window), the rest is the post-onset response.
struct EpochSet {
    std::string subject_id;
    std::vector<std::string> channels;   // channel names, size C
    std::vector<std::string> regions;    // optional per-channel region labels (empty or size C)
    double sample_rate = 0.0;            // Hz
    int pre_samples = 0;
    std::vector<Tensor> epochs;          // per trial, each [C x T]
    std::vector<int> stimulus_ids;       // per trial
    std::vector<int> repetition_index;   // per trial

    int trial_count() const { return static_cast<int>(epochs.size()); }
    int channel_count() const { return static_cast<int>(channels.size()); }
    int samples() const { return epochs.empty() ? 0 : epochs.front().extent(1); }
    void validate() const;
};

struct EncoderConfig {
    int window_w = 8;
    std::vector<int> conv_in = {1, 8, 8};
    std::vector<int> conv_out = {8, 8, 8};
    std::vector<int> conv_kernel = {15, 3, 3};
    std::vector<int> conv_stride = {8, 1, 1};
    std::vector<int> conv_padding = {7, 1, 1};
    int gn_groups = 4;     // group-norm groups inside each conv block
    int hidden = 200;      // transformer width
    int mlp = 800;
    int layers = 12;
    int heads = 10;
    int embed_dim = 200;   // output dimension d
    double drop_path = 0.0;          // honored as config, off by default
    double layer_lr_decay = 1.0;     // layer-wise lr decay, 1 = off
    double ln_eps = 1e-6;
    double gn_eps = 1e-5;

    void validate() const;
};

// Non-overlapping temporal patches of one epoch, channel-major: patch
// p = j * per_channel + k holds samples [k*w, (k+1)*w) of channel j.
struct PatchGrid {
    int window_w = 0;
    int channels = 0;     // C
    int per_channel = 0;  // floor(T / w)
    Tensor patches;       // [C * per_channel, w]

    int count() const { return channels * per_channel; }
    int channel_of(int p) const { return p / per_channel; }
    int time_of(int p) const { return p % per_channel; }
};

// Baseline-correct, crop to post-onset, decimate by bin averaging, rescale,
// and optionally average repeated presentations of the same stimulus.
EpochSet preprocess(const EpochSet& raw, double target_rate, double baseline_ms, double scale_mV,
                    bool average_repetitions);

PatchGrid patchify(const Tensor& epoch, int w);

// Parameter creation for the full encoder under `prefix` ("enc." by default).
// Table sizes depend on the post-onset sample count and channel count.
void init_encoder(ParamStore& ps, const EncoderConfig& cfg, int channels, int samples, uint64_t seed,
                  const std::string& prefix = "enc.");

// Per-patch conv stack (conv1d + group_norm + gelu per block), then
// flatten + linear to the transformer width. Returns [count x hidden].
Tensor temporal_encode(const PatchGrid& grid, const EncoderConfig& cfg, const ParamStore& ps,
                       const std::string& prefix = "enc.");

// out[p] = embeds[p] + te[time_of(p)] + se[channel_of(p)].
Tensor add_positional(const Tensor& embeds, const PatchGrid& grid, const Tensor& te, const Tensor& se);

// Full encoder: patchify -> temporal encode -> positional -> transformer
// stack -> mean pool -> linear head. Returns the embedding e as a [d] tensor.
Tensor encode(const Tensor& epoch, const EncoderConfig& cfg, const ParamStore& ps,
              const std::string& prefix = "enc.");

// Per-channel embeddings through the same trunk and head: transformer outputs
// are averaged per channel before projection. Returns [C x d]. Used by the
// region-by-scale analysis.
Tensor encode_channels(const Tensor& epoch, const EncoderConfig& cfg, const ParamStore& ps,
                       const std::string& prefix = "enc.");

// [B x d] embeddings for a list of epochs.
Tensor encode_batch(const std::vector<Tensor>& epochs, const EncoderConfig& cfg, const ParamStore& ps,
                    const std::string& prefix = "enc.");

} // namespace neuroscale::eeg
