#include "neuroscale/align.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace neuroscale::align {

namespace {

void check_pair(const Tensor& e, const Tensor& z, const char* op) {
    if (e.ndim() != 2 || z.ndim() != 2 || e.shape() != z.shape()) {
        throw contract_error(std::string(op) + ": embeddings " + e.shape_str() + " vs " + z.shape_str());
    }
}

void check_norms(const Tensor& m, const char* side) {
    const int b = m.extent(0), d = m.extent(1);
    for (int i = 0; i < b; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += m.at(i, j) * m.at(i, j);
        if (s == 0.0) {
            throw metric_error("clip_loss: zero-norm " + std::string(side) + " embedding at row " +
                               std::to_string(i));
        }
    }
}

std::map<std::string, std::vector<double>> snapshot(const ParamStore& ps) {
    std::map<std::string, std::vector<double>> s;
    for (const auto& [name, t] : ps.all()) s[name] = t.data();
    return s;
}

void restore(ParamStore& ps, const std::map<std::string, std::vector<double>>& snap) {
    for (auto& [name, t] : ps.all()) t.data_mut() = snap.at(name);
}

// Cosine top-1 over a gallery; ties resolved toward the lower gallery index.
double retrieval_top1(const Tensor& queries, const Tensor& gallery, const std::vector<int>& match) {
    const int n = queries.extent(0), m = gallery.extent(0), d = queries.extent(1);
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        double qn = 0.0;
        for (int j = 0; j < d; ++j) qn += queries.at(i, j) * queries.at(i, j);
        qn = std::sqrt(qn);
        int best = -1;
        double best_sim = 0.0;
        for (int g = 0; g < m; ++g) {
            double dot = 0.0, gn = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += queries.at(i, j) * gallery.at(g, j);
                gn += gallery.at(g, j) * gallery.at(g, j);
            }
            const double sim = dot / (qn * std::sqrt(gn));
            if (best < 0 || sim > best_sim) {
                best = g;
                best_sim = sim;
            }
        }
        if (best == match[static_cast<size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

} // namespace

Tensor clip_loss(const Tensor& e, const Tensor& z, const Tensor& log_tau) {
    check_pair(e, z, "clip_loss");
    if (log_tau.numel() != 1) throw contract_error("clip_loss: log_tau must be a 1-element tensor");
    check_norms(e, "eeg");
    check_norms(z, "image");
    const int b = e.extent(0);
    Tensor en = ops::row_l2_normalize(e);
    Tensor zn = ops::row_l2_normalize(z);
    Tensor sims = ops::matmul(en, ops::transpose(zn));
    Tensor inv_tau = ops::vexp(ops::scale(log_tau, -1.0));
    Tensor logits = ops::scale_by(sims, inv_tau);
    std::vector<int> diag(static_cast<size_t>(b));
    std::iota(diag.begin(), diag.end(), 0);
    Tensor forward = ops::mean_all(ops::softmax_xent_rows(logits, diag));
    Tensor backward = ops::mean_all(ops::softmax_xent_rows(ops::transpose(logits), diag));
    return ops::scale(ops::add(forward, backward), 0.5);
}

Tensor clip_loss(const Tensor& e, const Tensor& z, double tau) {
    if (!(tau > 0.0)) throw config_error("clip_loss: tau must be positive");
    return clip_loss(e, z, Tensor::from({1}, {std::log(tau)}));
}

Tensor mse_loss(const Tensor& e, const Tensor& z) {
    check_pair(e, z, "mse_loss");
    Tensor d = ops::sub(e, z);
    return ops::mean_all(ops::mul(d, d));
}

Tensor combined_loss(const Tensor& e, const Tensor& z, double lambda, const Tensor& log_tau) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw config_error("combined_loss: lambda " + std::to_string(lambda) + " outside [0,1]");
    }
    if (lambda == 1.0) return clip_loss(e, z, log_tau);
    if (lambda == 0.0) return mse_loss(e, z);
    return ops::add(ops::scale(clip_loss(e, z, log_tau), lambda),
                    ops::scale(mse_loss(e, z), 1.0 - lambda));
}

void AlignTrainConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw config_error("AlignTrainConfig: lambda outside [0,1]");
    if (!(tau_init > 0.0)) throw config_error("AlignTrainConfig: tau_init must be positive");
    if (epochs < 0 || batch_size < 1) throw config_error("AlignTrainConfig: bad epochs/batch_size");
    if (warmup_epochs < 0) throw config_error("AlignTrainConfig: warmup_epochs must be >= 0");
    if (lr < 0.0 || min_lr < 0.0) throw config_error("AlignTrainConfig: learning rates must be >= 0");
}

AlignResult train_alignment(const std::vector<Tensor>& epochs, const Tensor& image_embeds,
                            const eeg::EncoderConfig& enc_cfg, ParamStore& ps,
                            const AlignTrainConfig& cfg, const std::vector<int>& val_indices,
                            std::map<std::string, AdamW::Slot>* opt_state_out, int64_t* opt_steps_out) {
    cfg.validate();
    if (epochs.empty()) throw contract_error("train_alignment: empty dataset");
    const int n = static_cast<int>(epochs.size());
    if (image_embeds.ndim() != 2 || image_embeds.extent(0) != n ||
        image_embeds.extent(1) != enc_cfg.embed_dim) {
        throw contract_error("train_alignment: image embeddings " + image_embeds.shape_str() +
                             " do not pair with " + std::to_string(n) + " epochs of dim " +
                             std::to_string(enc_cfg.embed_dim));
    }
    std::vector<char> is_val(static_cast<size_t>(n), 0);
    for (int v : val_indices) {
        if (v < 0 || v >= n) throw index_error("train_alignment: validation index " + std::to_string(v));
        is_val[static_cast<size_t>(v)] = 1;
    }
    std::vector<int> train_idx;
    for (int i = 0; i < n; ++i) {
        if (!is_val[static_cast<size_t>(i)]) train_idx.push_back(i);
    }
    if (train_idx.empty()) throw contract_error("train_alignment: no training rows left");

    if (!ps.has("align.log_tau")) ps.create("align.log_tau", {1}, std::log(cfg.tau_init));

    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.min_lr = cfg.min_lr;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(ps, ocfg);
    if (enc_cfg.layer_lr_decay != 1.0) {
        for (int l = 0; l < enc_cfg.layers; ++l) {
            opt.set_scale_prefix("enc.block" + std::to_string(l) + ".",
                                 std::pow(enc_cfg.layer_lr_decay, enc_cfg.layers - 1 - l));
        }
    }

    const int64_t spe = (static_cast<int64_t>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = spe * cfg.epochs;
    const int64_t warm_steps = spe * cfg.warmup_epochs;

    AlignResult res;
    auto good = snapshot(ps);
    int64_t step = 0;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        Rng shuffle_rng(hash_mix(cfg.seed, static_cast<uint64_t>(ep) + 1));
        std::vector<int> order = train_idx;
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<int> rows(order.begin() + static_cast<long>(start),
                                  order.begin() + static_cast<long>(stop));
            GradTape tape;
            double lv = 0.0;
            try {
                TapeScope scope(tape);
                std::vector<Tensor> batch_eps;
                for (int r : rows) batch_eps.push_back(epochs[static_cast<size_t>(r)]);
                Tensor e = eeg::encode_batch(batch_eps, enc_cfg, ps);
                Tensor z = ops::gather_rows(image_embeds, rows);
                Tensor loss;
                if (cfg.normalize_for_mse) {
                    loss = combined_loss(ops::row_l2_normalize(e), ops::row_l2_normalize(z), cfg.lambda,
                                         ps.get("align.log_tau"));
                } else {
                    loss = combined_loss(e, z, cfg.lambda, ps.get("align.log_tau"));
                }
                lv = loss.value();
                if (!std::isfinite(lv)) throw numeric_error("train_alignment: non-finite loss");
                tape.backward(loss);
                opt.step(tape, cosine_lr(step, total_steps, warm_steps, cfg.lr, cfg.min_lr));
            } catch (const numeric_error&) {
                restore(ps, good);
                res.diverged = true;
                res.steps = step;
                if (opt_state_out) *opt_state_out = opt.state();
                if (opt_steps_out) *opt_steps_out = opt.steps_taken();
                return res;
            }
            loss_sum += lv;
            ++batches;
            ++step;
        }
        res.train_loss.push_back(loss_sum / static_cast<double>(batches));
        if (!val_indices.empty()) {
            std::vector<Tensor> val_eps;
            for (int v : val_indices) val_eps.push_back(epochs[static_cast<size_t>(v)]);
            Tensor q = eeg::encode_batch(val_eps, enc_cfg, ps);
            Tensor g = ops::gather_rows(image_embeds, val_indices);
            std::vector<int> match(val_indices.size());
            std::iota(match.begin(), match.end(), 0);
            res.val_top1.push_back(retrieval_top1(q, g, match));
        }
        good = snapshot(ps);
        res.last_good_epoch = ep;
    }
    res.steps = step;
    if (opt_state_out) *opt_state_out = opt.state();
    if (opt_steps_out) *opt_steps_out = opt.steps_taken();
    return res;
}

} // namespace neuroscale::align
