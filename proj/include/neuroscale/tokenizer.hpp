#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "neuroscale/ops.hpp"
#include "neuroscale/optim.hpp"

namespace neuroscale::tok {

// Ordered list of residual-map resolutions, coarse to fine. The final entry
// must equal the feature-map resolution; token counts are strictly increasing.
struct ScaleSchedule {
    std::vector<std::pair<int, int>> sizes;

    static ScaleSchedule square(const std::vector<int>& s);

    int K() const { return static_cast<int>(sizes.size()); }
    int total_tokens() const;
    void validate() const;
    void validate_final(int h, int w) const;
};

// V code vectors of dimension d_f. `vectors` may alias a trainable parameter.
struct Codebook {
    Tensor vectors; // [V x d_f]

    int size() const { return vectors.extent(0); }
    int dim() const { return vectors.extent(1); }
};

// Output of the residual encode loop. tokens[k] are row-major indices into
// the codebook; residuals[k] is the looked-up value map R_k; pre_quant[k] is
// the downsampled residual the quantizer saw (training losses need it);
// final_residual is r after the last subtraction.
struct ResidualStack {
    ScaleSchedule schedule;
    std::vector<std::vector<int>> tokens;
    std::vector<Tensor> residuals;   // [h_k x w_k x d_f]
    std::vector<Tensor> pre_quant;   // [h_k x w_k x d_f]
    Tensor final_residual;           // [h x w x d_f]
};

// Nearest code by Euclidean distance; ties go to the lower index.
std::pair<int, std::vector<double>> quantize_vector(const std::vector<double>& v, const Codebook& cb);

// Residual encode loop: r <- F; per scale k: quantize the downsampled r,
// look the codes up, subtract the upsampled lookup from r.
ResidualStack encode_tokens(const Tensor& feature, const ScaleSchedule& schedule, const Codebook& cb);

// F_k = sum_{i<=k} resize(R_i, (h,w)): the reconstruction after k scales.
Tensor cumulative_feature(const ResidualStack& stack, int upto);

// Convolutional autoencoder around the quantizer. The encoder halves the
// image resolution `downsamples` times, so the feature grid is
// image_size / 2^downsamples square.
struct TokenizerConfig {
    int image_size = 8;
    int image_channels = 3;
    int hidden_channels = 16;
    int feature_dim = 16;       // d_f
    int vocab = 64;             // V
    int gn_groups = 4;
    int downsamples = 1;
    double gn_eps = 1e-5;
    std::vector<int> schedule_sizes = {1, 2, 3, 4};

    int grid() const { return image_size >> downsamples; }
    ScaleSchedule schedule() const { return ScaleSchedule::square(schedule_sizes); }
    void validate() const;
};

void init_tokenizer(ParamStore& ps, const TokenizerConfig& cfg, uint64_t seed,
                    const std::string& prefix = "vq.");

// image [c x H x W] -> feature map [h x w x d_f].
Tensor encode_image(const Tensor& image, const TokenizerConfig& cfg, const ParamStore& ps,
                    const std::string& prefix = "vq.");

// feature map [h x w x d_f] -> image [c x H x W] in [0,1] (sigmoid output).
Tensor decode_feature(const Tensor& feature, const TokenizerConfig& cfg, const ParamStore& ps,
                      const std::string& prefix = "vq.");

struct TokTrainConfig {
    int epochs = 200;
    int batch_size = 8;
    int warmup_epochs = 0;
    double lr = 2e-3;
    double min_lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.0;
    double beta_commit = 0.25;
    uint64_t seed = 0;

    void validate() const;
};

struct TokTrainResult {
    std::vector<double> recon_mse; // per epoch, mean over images
    int dead_restarts = 0;         // codes re-seeded after a silent epoch
};

// Reconstruction MSE + codebook + 0.25*commitment with straight-through
// gradients; dead codes are restarted from current batch features after any
// epoch in which they were never selected.
TokTrainResult train_vqvae(const std::vector<Tensor>& images, const TokenizerConfig& tcfg,
                           const TokTrainConfig& cfg, ParamStore& ps,
                           const std::string& prefix = "vq.",
                           std::map<std::string, AdamW::Slot>* opt_state_out = nullptr,
                           int64_t* opt_steps_out = nullptr);

} // namespace neuroscale::tok
