#pragma once

#include <cstdint>
#include <vector>

#include "neuroscale/eeg.hpp"
#include "neuroscale/ops.hpp"
#include "neuroscale/optim.hpp"

namespace neuroscale::align {

// Bidirectional contrastive loss over paired embeddings e, z [B x d]:
// cosine-similarity logits divided by tau, cross-entropy against the diagonal
// in both softmax directions, the two directions averaged. `log_tau` is a
// 1-element tensor holding ln(tau), so tau stays positive while trainable.
Tensor clip_loss(const Tensor& e, const Tensor& z, const Tensor& log_tau);
Tensor clip_loss(const Tensor& e, const Tensor& z, double tau);

// Mean over all B*d coordinates of (e - z)^2, on the values as given.
Tensor mse_loss(const Tensor& e, const Tensor& z);

// lambda * clip + (1 - lambda) * mse on the same batch.
Tensor combined_loss(const Tensor& e, const Tensor& z, double lambda, const Tensor& log_tau);

struct AlignTrainConfig {
    double lambda = 0.8;
    double tau_init = 0.07;
    int epochs = 10;
    int batch_size = 16;
    int warmup_epochs = 1;
    double lr = 2e-3;
    double min_lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.05;
    bool normalize_for_mse = true; // L2-normalize embeddings before the MSE term
    uint64_t seed = 0;

    void validate() const;
};

struct AlignResult {
    std::vector<double> train_loss; // mean batch loss per epoch
    std::vector<double> val_top1;   // per-epoch retrieval top-1 on the validation split
    int64_t steps = 0;
    bool diverged = false;
    int last_good_epoch = -1; // epoch whose parameters survive a divergence abort
};

// Stage-1 training: fits the encoder (and log-temperature) so encode(epoch)
// aligns with the frozen image embedding of the same row. `val_indices` rows
// are held out; the rest is the training split. A non-finite loss aborts the
// run and restores the last epoch-end parameter snapshot.
AlignResult train_alignment(const std::vector<Tensor>& epochs, const Tensor& image_embeds,
                            const eeg::EncoderConfig& enc_cfg, ParamStore& ps,
                            const AlignTrainConfig& cfg, const std::vector<int>& val_indices,
                            std::map<std::string, AdamW::Slot>* opt_state_out = nullptr,
                            int64_t* opt_steps_out = nullptr);

} // namespace neuroscale::align
