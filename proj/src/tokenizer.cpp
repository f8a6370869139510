#include "neuroscale/tokenizer.hpp"

#include <algorithm>
#include <cmath>

namespace neuroscale::tok {

namespace {
size_t su(int v) { return static_cast<size_t>(v); }

Tensor value_copy(const Tensor& t) {
    return Tensor::from(t.shape(), t.data()); // untracked, drops any tape linkage
}
} // namespace

ScaleSchedule ScaleSchedule::square(const std::vector<int>& s) {
    ScaleSchedule sched;
    for (int v : s) sched.sizes.emplace_back(v, v);
    sched.validate();
    return sched;
}

int ScaleSchedule::total_tokens() const {
    int n = 0;
    for (auto [h, w] : sizes) n += h * w;
    return n;
}

void ScaleSchedule::validate() const {
    if (sizes.empty()) throw config_error("ScaleSchedule: empty");
    if (sizes.front().first < 1 || sizes.front().second < 1) {
        throw config_error("ScaleSchedule: first scale must be >= 1x1");
    }
    for (size_t k = 1; k < sizes.size(); ++k) {
        const auto [ph, pw] = sizes[k - 1];
        const auto [h, w] = sizes[k];
        if (h < ph || w < pw) {
            throw config_error("ScaleSchedule: scale " + std::to_string(k) + " (" + std::to_string(h) + "x" +
                               std::to_string(w) + ") shrinks below its predecessor");
        }
        if (h * w <= ph * pw) {
            throw config_error("ScaleSchedule: scale " + std::to_string(k) +
                               " does not strictly increase the token count");
        }
    }
}

void ScaleSchedule::validate_final(int h, int w) const {
    validate();
    if (sizes.back() != std::make_pair(h, w)) {
        throw config_error("ScaleSchedule: final scale " + std::to_string(sizes.back().first) + "x" +
                           std::to_string(sizes.back().second) + " must equal the feature grid " +
                           std::to_string(h) + "x" + std::to_string(w));
    }
}

std::pair<int, std::vector<double>> quantize_vector(const std::vector<double>& v, const Codebook& cb) {
    const int n = cb.size(), d = cb.dim();
    if (n < 1) throw config_error("quantize_vector: empty codebook");
    if (static_cast<int>(v.size()) != d) {
        throw contract_error("quantize_vector: vector dim " + std::to_string(v.size()) +
                             " vs codebook dim " + std::to_string(d));
    }
    int best = 0;
    double best_d = 0.0;
    for (int i = 0; i < n; ++i) {
        double dist = 0.0;
        for (int j = 0; j < d; ++j) {
            const double diff = v[su(j)] - cb.vectors.at(i, j);
            dist += diff * diff;
        }
        if (i == 0 || dist < best_d) { // strict <: ties keep the lower index
            best = i;
            best_d = dist;
        }
    }
    std::vector<double> code(su(d));
    for (int j = 0; j < d; ++j) code[su(j)] = cb.vectors.at(best, j);
    return {best, std::move(code)};
}

ResidualStack encode_tokens(const Tensor& feature, const ScaleSchedule& schedule, const Codebook& cb) {
    if (feature.ndim() != 3) {
        throw contract_error("encode_tokens: feature must be [h x w x d_f], got " + feature.shape_str());
    }
    const int h = feature.extent(0), w = feature.extent(1), df = feature.extent(2);
    schedule.validate_final(h, w);
    if (cb.dim() != df) {
        throw config_error("encode_tokens: codebook dim " + std::to_string(cb.dim()) +
                           " vs feature dim " + std::to_string(df));
    }
    ResidualStack stack;
    stack.schedule = schedule;
    Tensor r = value_copy(feature);
    for (int k = 0; k < schedule.K(); ++k) {
        const auto [hk, wk] = schedule.sizes[su(k)];
        Tensor rd = ops::bilinear_resize(r, hk, wk);
        std::vector<int> tokens(su(hk * wk));
        std::vector<double> rk(su(hk) * su(wk) * su(df));
        std::vector<double> cell(su(df));
        for (int i = 0; i < hk * wk; ++i) {
            for (int j = 0; j < df; ++j) cell[su(j)] = rd.data()[su(i) * su(df) + su(j)];
            auto [idx, code] = quantize_vector(cell, cb);
            tokens[su(i)] = idx;
            std::copy(code.begin(), code.end(), rk.begin() + su(i) * su(df));
        }
        Tensor rk_map = Tensor::from({hk, wk, df}, std::move(rk));
        r = ops::sub(r, ops::bilinear_resize(rk_map, h, w));
        stack.tokens.push_back(std::move(tokens));
        stack.residuals.push_back(std::move(rk_map));
        stack.pre_quant.push_back(std::move(rd));
    }
    stack.final_residual = r;
    return stack;
}

Tensor cumulative_feature(const ResidualStack& stack, int upto) {
    const int k = static_cast<int>(stack.residuals.size());
    if (upto < 1 || upto > k) {
        throw contract_error("cumulative_feature: k=" + std::to_string(upto) + " outside [1," +
                             std::to_string(k) + "]");
    }
    const Tensor& last = stack.residuals.back();
    const int h = last.extent(0), w = last.extent(1);
    Tensor acc = ops::bilinear_resize(stack.residuals[0], h, w);
    for (int i = 1; i < upto; ++i) {
        acc = ops::add(acc, ops::bilinear_resize(stack.residuals[su(i)], h, w));
    }
    return acc;
}

void TokenizerConfig::validate() const {
    if (downsamples < 1 || downsamples > 4) {
        throw config_error("TokenizerConfig: downsamples must be in [1,4]");
    }
    if (image_size < 2 || image_size % (1 << downsamples) != 0) {
        throw config_error("TokenizerConfig: image_size must be a positive multiple of " +
                           std::to_string(1 << downsamples));
    }
    if (image_channels < 1 || hidden_channels < 1 || feature_dim < 1 || vocab < 1) {
        throw config_error("TokenizerConfig: sizes must be positive");
    }
    if (gn_groups < 1 || hidden_channels % gn_groups != 0) {
        throw config_error("TokenizerConfig: hidden_channels not divisible by gn_groups");
    }
    schedule().validate_final(grid(), grid());
}

void init_tokenizer(ParamStore& ps, const TokenizerConfig& cfg, uint64_t seed,
                    const std::string& prefix) {
    cfg.validate();
    auto conv = [&](const std::string& name, int co, int ci, int k, bool norm) {
        ps.create_normal(prefix + name + ".w", {co, ci, k, k}, seed);
        ps.create(prefix + name + ".b", {co}, 0.0);
        if (norm) {
            ps.create(prefix + name + ".gamma", {co}, 1.0);
            ps.create(prefix + name + ".beta", {co}, 0.0);
        }
    };
    conv("enc0", cfg.hidden_channels, cfg.image_channels, 3, true);
    for (int s = 0; s < cfg.downsamples; ++s) {
        conv("down" + std::to_string(s), cfg.hidden_channels, cfg.hidden_channels, 4, true);
    }
    conv("enc2", cfg.feature_dim, cfg.hidden_channels, 3, false);
    conv("dec0", cfg.hidden_channels, cfg.feature_dim, 3, true);
    for (int s = 0; s < cfg.downsamples; ++s) {
        conv("up" + std::to_string(s), cfg.hidden_channels, cfg.hidden_channels, 3, true);
    }
    conv("dec2", cfg.image_channels, cfg.hidden_channels, 3, false);
    ps.create_normal(prefix + "codebook", {cfg.vocab, cfg.feature_dim}, seed);
}

namespace {

Tensor conv_gn_gelu(const Tensor& x, const ParamStore& ps, const std::string& layer, int stride,
                    int pad, int groups, double eps) {
    Tensor y = ops::conv2d(x, ps.get(layer + ".w"), ps.get(layer + ".b"), stride, pad);
    const int co = y.extent(0), hh = y.extent(1), ww = y.extent(2);
    Tensor flat = ops::reshape(y, {co, hh * ww});
    flat = ops::group_norm(flat, groups, ps.get(layer + ".gamma"), ps.get(layer + ".beta"), eps);
    return ops::gelu(ops::reshape(flat, {co, hh, ww}));
}

} // namespace

Tensor encode_image(const Tensor& image, const TokenizerConfig& cfg, const ParamStore& ps,
                    const std::string& prefix) {
    if (image.ndim() != 3 || image.extent(0) != cfg.image_channels ||
        image.extent(1) != cfg.image_size || image.extent(2) != cfg.image_size) {
        throw contract_error("encode_image: image " + image.shape_str() + " does not match config [" +
                             std::to_string(cfg.image_channels) + "x" + std::to_string(cfg.image_size) +
                             "x" + std::to_string(cfg.image_size) + "]");
    }
    Tensor x = conv_gn_gelu(image, ps, prefix + "enc0", 1, 1, cfg.gn_groups, cfg.gn_eps);
    for (int s = 0; s < cfg.downsamples; ++s) {
        x = conv_gn_gelu(x, ps, prefix + "down" + std::to_string(s), 2, 1, cfg.gn_groups, cfg.gn_eps);
    }
    x = ops::conv2d(x, ps.get(prefix + "enc2.w"), ps.get(prefix + "enc2.b"), 1, 1);
    if (!x.all_finite()) throw numeric_error("encode_image: non-finite feature map");
    return ops::chw_to_hwc(x);
}

Tensor decode_feature(const Tensor& feature, const TokenizerConfig& cfg, const ParamStore& ps,
                      const std::string& prefix) {
    if (feature.ndim() != 3 || feature.extent(0) != cfg.grid() || feature.extent(1) != cfg.grid() ||
        feature.extent(2) != cfg.feature_dim) {
        throw contract_error("decode_feature: feature " + feature.shape_str() + " does not match a " +
                             std::to_string(cfg.grid()) + "x" + std::to_string(cfg.grid()) + "x" +
                             std::to_string(cfg.feature_dim) + " grid");
    }
    Tensor x = conv_gn_gelu(ops::hwc_to_chw(feature), ps, prefix + "dec0", 1, 1, cfg.gn_groups, cfg.gn_eps);
    for (int s = 0; s < cfg.downsamples; ++s) {
        const int hh = x.extent(1);
        x = ops::hwc_to_chw(ops::bilinear_resize(ops::chw_to_hwc(x), hh * 2, hh * 2));
        x = conv_gn_gelu(x, ps, prefix + "up" + std::to_string(s), 1, 1, cfg.gn_groups, cfg.gn_eps);
    }
    x = ops::conv2d(x, ps.get(prefix + "dec2.w"), ps.get(prefix + "dec2.b"), 1, 1);
    Tensor img = ops::sigmoid(x);
    if (!img.all_finite()) throw numeric_error("decode_feature: non-finite image");
    return img;
}

void TokTrainConfig::validate() const {
    if (epochs < 0 || batch_size < 1) throw config_error("TokTrainConfig: bad epochs/batch_size");
    if (lr < 0.0 || min_lr < 0.0 || beta_commit < 0.0) {
        throw config_error("TokTrainConfig: rates must be >= 0");
    }
}

TokTrainResult train_vqvae(const std::vector<Tensor>& images, const TokenizerConfig& tcfg,
                           const TokTrainConfig& cfg, ParamStore& ps, const std::string& prefix,
                           std::map<std::string, AdamW::Slot>* opt_state_out, int64_t* opt_steps_out) {
    tcfg.validate();
    cfg.validate();
    if (images.empty()) throw contract_error("train_vqvae: empty image set");
    const ScaleSchedule schedule = tcfg.schedule();
    const int kk = schedule.K();

    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.min_lr = cfg.min_lr;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(ps, ocfg);

    const int64_t spe = (static_cast<int64_t>(images.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = spe * cfg.epochs;
    const int64_t warm_steps = spe * cfg.warmup_epochs;

    TokTrainResult res;
    int64_t step = 0;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        Rng shuffle_rng(hash_mix(cfg.seed, static_cast<uint64_t>(ep) + 1));
        std::vector<int> order(images.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        shuffle_rng.shuffle(order);

        std::vector<int64_t> code_use(su(tcfg.vocab), 0);
        std::vector<std::vector<double>> restart_pool; // feature cells seen this epoch
        double recon_sum = 0.0;
        int recon_n = 0;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            GradTape tape;
            {
                TapeScope scope(tape);
                Tensor batch_loss;
                for (size_t bi = start; bi < stop; ++bi) {
                    const Tensor& img = images[su(order[bi])];
                    Tensor f = encode_image(img, tcfg, ps, prefix);
                    Codebook cb{ps.get(prefix + "codebook")};
                    ResidualStack stack = encode_tokens(f, schedule, cb);
                    for (const auto& toks : stack.tokens) {
                        for (int t : toks) ++code_use[su(t)];
                    }
                    for (int i = 0; i < tcfg.grid() * tcfg.grid(); ++i) {
                        std::vector<double> cell(su(tcfg.feature_dim));
                        for (int j = 0; j < tcfg.feature_dim; ++j) {
                            cell[su(j)] = stack.pre_quant.back().data()[su(i) * su(tcfg.feature_dim) + su(j)];
                        }
                        restart_pool.push_back(std::move(cell));
                    }

                    Tensor fq = ops::straight_through(cumulative_feature(stack, kk), f);
                    Tensor recon = decode_feature(fq, tcfg, ps, prefix);
                    Tensor diff = ops::sub(recon, img);
                    Tensor recon_loss = ops::mean_all(ops::mul(diff, diff));
                    recon_sum += recon_loss.value();
                    ++recon_n;

                    // codebook + commitment terms: replay the residual loop with
                    // the token choices frozen, so gradients reach the codebook
                    // (codebook term) and the encoder (commitment term) only.
                    Tensor cb_loss, commit_loss;
                    Tensor r = f;
                    for (int k = 0; k < kk; ++k) {
                        const auto [hk, wk] = schedule.sizes[su(k)];
                        const int cells = hk * wk;
                        Tensor rd = ops::reshape(ops::bilinear_resize(r, hk, wk), {cells, tcfg.feature_dim});
                        Tensor q_const = ops::reshape(value_copy(stack.residuals[su(k)]),
                                                      {cells, tcfg.feature_dim});
                        Tensor target = ops::reshape(value_copy(stack.pre_quant[su(k)]),
                                                     {cells, tcfg.feature_dim});
                        Tensor q_train = ops::gather_rows(ps.get(prefix + "codebook"), stack.tokens[su(k)]);
                        Tensor cd = ops::sub(q_train, target);
                        Tensor md = ops::sub(rd, q_const);
                        Tensor ck = ops::mean_all(ops::mul(cd, cd));
                        Tensor mk = ops::mean_all(ops::mul(md, md));
                        cb_loss = k == 0 ? ck : ops::add(cb_loss, ck);
                        commit_loss = k == 0 ? mk : ops::add(commit_loss, mk);
                        r = ops::sub(r, value_copy(ops::bilinear_resize(stack.residuals[su(k)],
                                                                        tcfg.grid(), tcfg.grid())));
                    }
                    Tensor loss = ops::add(recon_loss,
                                           ops::add(ops::scale(cb_loss, 1.0 / kk),
                                                    ops::scale(commit_loss, cfg.beta_commit / kk)));
                    batch_loss = bi == start ? loss : ops::add(batch_loss, loss);
                }
                Tensor mean_loss = ops::scale(batch_loss, 1.0 / static_cast<double>(stop - start));
                if (!std::isfinite(mean_loss.value())) {
                    throw numeric_error("train_vqvae: non-finite loss at step " + std::to_string(step));
                }
                tape.backward(mean_loss);
            }
            opt.step(tape, cosine_lr(step, total_steps, warm_steps, cfg.lr, cfg.min_lr));
            ++step;
        }
        res.recon_mse.push_back(recon_sum / static_cast<double>(recon_n));

        // restart codes that went silent for the whole epoch
        Rng restart_rng(hash_mix(cfg.seed ^ 0x9e3779b97f4a7c15ULL, static_cast<uint64_t>(ep) + 1));
        auto& book = ps.get(prefix + "codebook").data_mut();
        auto& slot = opt.mutable_state()[prefix + "codebook"];
        for (int v = 0; v < tcfg.vocab; ++v) {
            if (code_use[su(v)] != 0 || restart_pool.empty()) continue;
            const auto& cell =
                restart_pool[restart_rng.uniform_int(static_cast<uint32_t>(restart_pool.size()))];
            for (int j = 0; j < tcfg.feature_dim; ++j) {
                const size_t at = su(v) * su(tcfg.feature_dim) + su(j);
                book[at] = cell[su(j)];
                if (!slot.m.empty()) slot.m[at] = slot.v[at] = 0.0;
            }
            ++res.dead_restarts;
        }
    }
    if (opt_state_out) *opt_state_out = opt.state();
    if (opt_steps_out) *opt_steps_out = opt.steps_taken();
    return res;
}

} // namespace neuroscale::tok
