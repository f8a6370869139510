#pragma once

#include <string>
#include <vector>

#include "neuroscale/tensor.hpp"

namespace neuroscale::metrics {

struct RetrievalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    double topk = 0.0;      // hit rate at the requested k
    std::vector<int> ranks; // 1-based rank of each query's true match
    int n_way = 0;          // gallery size M
};

// Cosine ranking of each query against the gallery; pairs[i] is the gallery
// row that matches query i. Ties rank the lower gallery index first.
RetrievalResult retrieval_topk(const Tensor& queries, const Tensor& gallery,
                               const std::vector<int>& pairs, int k = 5);

// Pearson correlation over flattened values.
double pixcorr(const Tensor& a, const Tensor& b);

// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=1,
// computed on luminance (0.299 R + 0.587 G + 0.114 B for 3-channel input).
// Images smaller than the window fall back to one uniform global window.
double ssim(const Tensor& a, const Tensor& b);

// Bidirectional forced choice: each row's matched similarity against every
// distractor, ties scoring 0.5, averaged over rows and both directions.
double two_way_identification(const Tensor& recon_feats, const Tensor& true_feats);

struct ReconReport {
    double pixcorr = 0.0;
    double ssim = 0.0;
    double two_way = 0.0;
};

struct RegionScaleMatrix {
    std::vector<std::string> regions;        // lexicographically sorted
    std::vector<std::vector<double>> sims;   // [region][scale] cosine similarity
    std::vector<std::vector<double>> deltas; // stepwise increase, deltas[r][0] == sims[r][0]
};

// Maps a 10-20 electrode name onto one of the five scalp regions by prefix:
// Fp/AF/F -> frontal, FT/T/TP -> temporal, FC/C/CP -> central, P -> parietal,
// PO/O -> occipital.
std::string region_from_electrode(const std::string& name);

// Mean channel embedding per region label, cosine against each scale's image
// embedding, and the per-scale increments (sim_0 := 0).
RegionScaleMatrix region_scale_similarity(const Tensor& channel_embeds,
                                          const std::vector<std::string>& channel_regions,
                                          const std::vector<Tensor>& scale_embeds);

} // namespace neuroscale::metrics
