#include "neuroscale/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace neuroscale::metrics {

namespace {
size_t su(int v) { return static_cast<size_t>(v); }

std::vector<double> row_norms(const Tensor& m, const char* what) {
    const int n = m.extent(0), d = m.extent(1);
    std::vector<double> norms(su(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += m.at(i, j) * m.at(i, j);
        if (s == 0.0) {
            throw metric_error(std::string(what) + " row " + std::to_string(i) + " has zero norm");
        }
        norms[su(i)] = std::sqrt(s);
    }
    return norms;
}

// cosine similarity matrix [n x m]
std::vector<double> cosine_matrix(const Tensor& a, const Tensor& b, const char* an, const char* bn) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.extent(1) != b.extent(1)) {
        throw contract_error(std::string("cosine: shapes ") + a.shape_str() + " vs " + b.shape_str());
    }
    const int n = a.extent(0), m = b.extent(0), d = a.extent(1);
    auto na = row_norms(a, an);
    auto nb = row_norms(b, bn);
    std::vector<double> sims(su(n) * su(m));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += a.at(i, c) * b.at(j, c);
            sims[su(i) * su(m) + su(j)] = dot / (na[su(i)] * nb[su(j)]);
        }
    }
    return sims;
}

// luminance plane [h x w] from [h x w], [1 x h x w] or [3 x h x w]
std::vector<double> luminance(const Tensor& img, int& h, int& w) {
    if (img.ndim() == 2) {
        h = img.extent(0);
        w = img.extent(1);
        return img.data();
    }
    if (img.ndim() == 3 && (img.extent(0) == 1 || img.extent(0) == 3)) {
        h = img.extent(1);
        w = img.extent(2);
        std::vector<double> y(su(h) * su(w));
        const auto& d = img.data();
        const size_t plane = su(h) * su(w);
        if (img.extent(0) == 1) {
            std::copy(d.begin(), d.begin() + static_cast<long>(plane), y.begin());
        } else {
            for (size_t i = 0; i < plane; ++i) {
                y[i] = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
            }
        }
        return y;
    }
    throw contract_error("ssim: image must be [h x w], [1 x h x w] or [3 x h x w], got " +
                         img.shape_str());
}

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01; // (K1 L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

double ssim_term(double ma, double mb, double saa, double sbb, double sab) {
    return ((2.0 * ma * mb + kC1) * (2.0 * sab + kC2)) /
           ((ma * ma + mb * mb + kC1) * (saa + sbb + kC2));
}
} // namespace

RetrievalResult retrieval_topk(const Tensor& queries, const Tensor& gallery,
                               const std::vector<int>& pairs, int k) {
    const auto sims = cosine_matrix(queries, gallery, "query", "gallery");
    const int n = queries.extent(0), m = gallery.extent(0);
    if (static_cast<int>(pairs.size()) != n) {
        throw contract_error("retrieval_topk: " + std::to_string(pairs.size()) + " pairs for " +
                             std::to_string(n) + " queries");
    }
    if (k < 1 || k > m) {
        throw config_error("retrieval_topk: k=" + std::to_string(k) + " outside [1," +
                           std::to_string(m) + "]");
    }
    RetrievalResult res;
    res.n_way = m;
    int hit1 = 0, hit5 = 0, hitk = 0;
    for (int i = 0; i < n; ++i) {
        const int t = pairs[su(i)];
        if (t < 0 || t >= m) throw index_error("retrieval_topk: pair index " + std::to_string(t));
        const double st = sims[su(i) * su(m) + su(t)];
        int rank = 1;
        for (int j = 0; j < m; ++j) {
            const double sj = sims[su(i) * su(m) + su(j)];
            if (sj > st || (sj == st && j < t)) ++rank;
        }
        res.ranks.push_back(rank);
        if (rank <= 1) ++hit1;
        if (rank <= 5 && m >= 5) ++hit5;
        if (rank <= k) ++hitk;
    }
    res.top1 = static_cast<double>(hit1) / n;
    res.top5 = m >= 5 ? static_cast<double>(hit5) / n : 1.0;
    res.topk = static_cast<double>(hitk) / n;
    return res;
}

double pixcorr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw contract_error("pixcorr: shapes " + a.shape_str() + " vs " + b.shape_str());
    }
    const auto& x = a.data();
    const auto& y = b.data();
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double vx = 0.0, vy = 0.0, cov = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    if (vx == 0.0 || vy == 0.0) throw metric_error("pixcorr: zero-variance image");
    return cov / std::sqrt(vx * vy);
}

double ssim(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw contract_error("ssim: shapes " + a.shape_str() + " vs " + b.shape_str());
    }
    int h = 0, w = 0;
    const auto ya = luminance(a, h, w);
    const auto yb = luminance(b, h, w);
    auto at = [&](const std::vector<double>& p, int i, int j) { return p[su(i) * su(w) + su(j)]; };

    if (h < kWin || w < kWin) {
        // single uniform global window
        const double n = static_cast<double>(ya.size());
        double ma = 0.0, mb = 0.0;
        for (size_t i = 0; i < ya.size(); ++i) {
            ma += ya[i];
            mb += yb[i];
        }
        ma /= n;
        mb /= n;
        double saa = 0.0, sbb = 0.0, sab = 0.0;
        for (size_t i = 0; i < ya.size(); ++i) {
            saa += (ya[i] - ma) * (ya[i] - ma);
            sbb += (yb[i] - mb) * (yb[i] - mb);
            sab += (ya[i] - ma) * (yb[i] - mb);
        }
        saa /= n;
        sbb /= n;
        sab /= n;
        return ssim_term(ma, mb, saa, sbb, sab);
    }

    double g[kWin];
    double gsum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double x = i - (kWin - 1) / 2.0;
        g[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
        gsum += g[i];
    }
    for (double& v : g) v /= gsum;

    double total = 0.0;
    int count = 0;
    for (int i = 0; i + kWin <= h; ++i) {
        for (int j = 0; j + kWin <= w; ++j) {
            double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
            for (int u = 0; u < kWin; ++u) {
                for (int v = 0; v < kWin; ++v) {
                    const double wgt = g[u] * g[v];
                    const double pa = at(ya, i + u, j + v);
                    const double pb = at(yb, i + u, j + v);
                    ma += wgt * pa;
                    mb += wgt * pb;
                    saa += wgt * pa * pa;
                    sbb += wgt * pb * pb;
                    sab += wgt * pa * pb;
                }
            }
            saa -= ma * ma;
            sbb -= mb * mb;
            sab -= ma * mb;
            total += ssim_term(ma, mb, saa, sbb, sab);
            ++count;
        }
    }
    return total / count;
}

double two_way_identification(const Tensor& recon_feats, const Tensor& true_feats) {
    if (recon_feats.ndim() != 2 || recon_feats.shape() != true_feats.shape()) {
        throw contract_error("two_way_identification: shapes " + recon_feats.shape_str() + " vs " +
                             true_feats.shape_str());
    }
    const int n = recon_feats.extent(0);
    if (n < 2) throw contract_error("two_way_identification: need at least 2 rows");
    const auto sims = cosine_matrix(recon_feats, true_feats, "recon", "true");
    auto s = [&](int i, int j) { return sims[su(i) * su(n) + su(j)]; };
    double score = 0.0;
    int comparisons = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            // recon_i against true distractor j, and true_i against recon distractor j
            for (double diff : {s(i, i) - s(i, j), s(i, i) - s(j, i)}) {
                score += diff > 0.0 ? 1.0 : (diff == 0.0 ? 0.5 : 0.0);
                ++comparisons;
            }
        }
    }
    return score / comparisons;
}

std::string region_from_electrode(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    // longer prefixes first: Fp/FT/FC before F, PO before P/O, TP before T, CP before C
    if (starts("Fp") || starts("AF")) return "frontal";
    if (starts("FT") || starts("TP")) return "temporal";
    if (starts("FC") || starts("CP")) return "central";
    if (starts("PO")) return "occipital";
    if (starts("F")) return "frontal";
    if (starts("T")) return "temporal";
    if (starts("C")) return "central";
    if (starts("P")) return "parietal";
    if (starts("O")) return "occipital";
    throw metric_error("region_from_electrode: unknown electrode name '" + name + "'");
}

RegionScaleMatrix region_scale_similarity(const Tensor& channel_embeds,
                                          const std::vector<std::string>& channel_regions,
                                          const std::vector<Tensor>& scale_embeds) {
    if (channel_embeds.ndim() != 2) {
        throw contract_error("region_scale_similarity: channel embeddings " +
                             channel_embeds.shape_str() + " must be [C x d]");
    }
    const int c = channel_embeds.extent(0), d = channel_embeds.extent(1);
    if (static_cast<int>(channel_regions.size()) != c) {
        throw contract_error("region_scale_similarity: " + std::to_string(channel_regions.size()) +
                             " region labels for " + std::to_string(c) + " channels");
    }
    if (scale_embeds.empty()) throw contract_error("region_scale_similarity: no scale embeddings");
    for (const auto& e : scale_embeds) {
        if (e.ndim() != 1 || e.extent(0) != d) {
            throw contract_error("region_scale_similarity: scale embedding " + e.shape_str() +
                                 " does not match dim " + std::to_string(d));
        }
    }

    std::map<std::string, std::vector<int>> groups; // sorted by region name
    for (int i = 0; i < c; ++i) {
        if (channel_regions[su(i)].empty()) {
            throw metric_error("region_scale_similarity: channel " + std::to_string(i) +
                               " has an empty region label");
        }
        groups[channel_regions[su(i)]].push_back(i);
    }

    RegionScaleMatrix out;
    const int kk = static_cast<int>(scale_embeds.size());
    for (const auto& [region, rows] : groups) {
        std::vector<double> mean(su(d), 0.0);
        for (int r : rows) {
            for (int j = 0; j < d; ++j) mean[su(j)] += channel_embeds.at(r, j);
        }
        double norm = 0.0;
        for (double& v : mean) {
            v /= static_cast<double>(rows.size());
        }
        for (double v : mean) norm += v * v;
        if (norm == 0.0) {
            throw metric_error("region_scale_similarity: region '" + region +
                               "' has a zero-norm mean embedding");
        }
        norm = std::sqrt(norm);
        std::vector<double> sims(su(kk)), deltas(su(kk));
        for (int k = 0; k < kk; ++k) {
            double dot = 0.0, en = 0.0;
            for (int j = 0; j < d; ++j) {
                const double ev = scale_embeds[su(k)].data()[su(j)];
                dot += mean[su(j)] * ev;
                en += ev * ev;
            }
            if (en == 0.0) {
                throw metric_error("region_scale_similarity: scale " + std::to_string(k + 1) +
                                   " embedding has zero norm");
            }
            sims[su(k)] = dot / (norm * std::sqrt(en));
            deltas[su(k)] = k == 0 ? sims[0] : sims[su(k)] - sims[su(k - 1)];
        }
        out.regions.push_back(region);
        out.sims.push_back(std::move(sims));
        out.deltas.push_back(std::move(deltas));
    }
    return out;
}

} // namespace neuroscale::metrics
