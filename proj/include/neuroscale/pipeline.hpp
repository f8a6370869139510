#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "neuroscale/align.hpp"
#include "neuroscale/eeg.hpp"
#include "neuroscale/metrics.hpp"
#include "neuroscale/nsp.hpp"
#include "neuroscale/optim.hpp"
#include "neuroscale/tokenizer.hpp"

namespace neuroscale::pipeline {

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    int classes = 16;
    int pairs_per_class = 8;
    int channels = 8;
    int samples = 64;       // post-onset samples per trial (T)
    int image_size = 16;
    int embed_dim = 16;     // frozen image-embedding dimension
    int val_per_class = 2;  // held-out pairs per class (the tail of each class)
    double noise_level = 0.1;
    double image_jitter = 0.02; // per-image pixel perturbation around the class prototype

    void validate() const;
};

// Stage-2 decoder training (the loop lives in this module; the other stages
// delegate to their own modules' trainers).
struct NspTrainConfig {
    int epochs = 120;
    int batch_size = 8;
    int warmup_epochs = 4;
    double lr = 4e-3;
    double min_lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.0;
    int overfit_pairs = 0; // > 0 restricts training to the first n training pairs

    void validate() const;
};

// Everything a run needs. Seeds for the individual stages are derived from
// `seed`; per-stage seed fields inside the sub-configs are ignored here so a
// single value pins the whole pipeline.
struct RunConfig {
    DatasetConfig data;
    eeg::EncoderConfig encoder;
    align::AlignTrainConfig align_train;
    tok::TokenizerConfig tokenizer;
    tok::TokTrainConfig tok_train;
    nsp::NspConfig nsp;
    NspTrainConfig nsp_train;
    uint64_t seed = 1;
    std::string out_dir = "runs/desk";
    bool sequential = true;      // deterministic reference path (the only path)
    bool eval_self_test = false; // score ground-truth images as their own reconstructions

    void validate() const; // includes cross-module consistency checks
};

// Profile used by the end-to-end desk run: 16 classes, 8 channels, T=64,
// 16x16 images, schedule (1,2,4).
RunConfig desk_config();

// Canonical serialization: JSON with lexicographically sorted keys and no
// insignificant whitespace. Fields omitted from the input keep their
// defaults; the round trip through from_json is the identity on the
// canonical form.
std::string to_canonical_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);
uint64_t config_hash(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Synthetic dataset

struct Dataset {
    DatasetConfig cfg;
    uint64_t seed = 0;
    eeg::EpochSet trials;        // stimulus_ids hold the class label
    std::vector<Tensor> images;  // one [3 x s x s] image per pair
    Tensor image_embeds;         // [n x embed_dim], L2-normalized rows
    Tensor projection;           // [embed_dim x 3*s*s] frozen random projection
    std::vector<int> pair_image; // trial i -> image row
    std::vector<int> val_indices;

    int pair_count() const { return static_cast<int>(images.size()); }
    void validate() const;
};

Dataset synth_dataset(const DatasetConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// Binary containers

// Generic sectioned container: magic "AVDS", u32 version, u32 section count,
// then per section a u32 tag, u64 payload length, the payload, and its CRC32.
// Everything is little-endian.
struct Section {
    uint32_t tag = 0;
    std::vector<uint8_t> payload;
};

void write_container(const std::string& path, const std::vector<Section>& sections);
std::vector<Section> read_container(const std::string& path);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Checkpoint: magic "AVCP", version, config hash, epoch, optimizer step
// count, named parameter table (name, shape, f64 values), and AdamW moment
// state, with a trailing CRC32. Reload is bit-exact.
struct Checkpoint {
    uint32_t version = 1;
    uint64_t config_hash = 0;
    int32_t epoch = 0;
    int64_t opt_steps = 0;
    std::map<std::string, Tensor> params;
    std::map<std::string, AdamW::Slot> opt_state;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Image and report emission

void write_ppm(const std::string& path, const Tensor& image); // [3 x h x w] in [0,1]
Tensor read_ppm(const std::string& path);

// Fixed "%.17g" formatting so reruns are byte-identical.
std::string fmt_double(double v);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// ---------------------------------------------------------------------------
// Stage runners. Each reads its prerequisites from cfg.out_dir and throws
// config_error naming the missing stage when an artifact is absent.

void run_synth(const RunConfig& cfg);
tok::TokTrainResult run_train_tokenizer(const RunConfig& cfg);
align::AlignResult run_train_align(const RunConfig& cfg);

struct NspTrainResult {
    std::vector<double> loss; // per-epoch mean batch loss
    int64_t steps = 0;
    bool diverged = false;
};
NspTrainResult run_train_nsp(const RunConfig& cfg);

struct GenerateSummary {
    int samples = 0;
    int scales = 0;
};
GenerateSummary run_generate(const RunConfig& cfg);

struct EvalSummary {
    metrics::ReconReport recon;
    metrics::RetrievalResult retrieval;
};
EvalSummary run_eval(const RunConfig& cfg);

metrics::RegionScaleMatrix run_analyze(const RunConfig& cfg);

struct BenchReport {
    int64_t params_encoder = 0;
    int64_t params_tokenizer = 0;
    int64_t params_nsp = 0;
    int64_t params_total = 0;
    int steps = 0;              // autoregressive steps per image (== K)
    int runs = 0;
    double latency_ms_median = 0.0; // per generated image, batched repetitions
    double latency_ms_iqr = 0.0;
    double spread = 0.0;        // IQR / median
    double flops_estimate = 0.0;    // analytic transformer FLOPs per image (estimate)
    int64_t peak_rss_kb = -1;       // VmHWM where the platform exposes it
};
BenchReport run_bench(const RunConfig& cfg, int runs = 20, int warmups = 3);

// Full pipeline per seed (synth through eval), collecting headline metrics
// and their mean/sd across seeds.
struct SweepSummary {
    std::vector<uint64_t> seeds;
    std::vector<std::string> metric_names;
    std::vector<std::vector<double>> values; // [metric][seed]
    std::vector<double> mean;
    std::vector<double> sd; // sample standard deviation (0 for a single seed)
};
SweepSummary run_sweep(const RunConfig& base, const std::vector<uint64_t>& seeds);

// Scalar count under a name prefix; the bench report's exact parameter counts.
int64_t param_count(const ParamStore& ps, const std::string& prefix);

} // namespace neuroscale::pipeline
