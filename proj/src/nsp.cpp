#include "neuroscale/nsp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace neuroscale::nsp {

namespace {
size_t su(int v) { return static_cast<size_t>(v); }

// (start offset, size) per block under the start-token layout.
std::vector<std::pair<int, int>> block_layout(const tok::ScaleSchedule& schedule, bool include_start) {
    std::vector<std::pair<int, int>> blocks;
    int at = 0;
    if (include_start) {
        blocks.emplace_back(0, 1);
        at = 1;
    }
    for (auto [h, w] : schedule.sizes) {
        blocks.emplace_back(at, h * w);
        at += h * w;
    }
    return blocks;
}

Tensor row_of(const ParamStore& ps, const std::string& name, int row) {
    return ops::reshape(ops::slice_rows(ps.get(name), row, 1), {ps.get(name).extent(1)});
}
} // namespace

void NspConfig::validate() const {
    if (depth < 0 || hidden < 1 || mlp < 1 || heads < 1 || vocab < 1 || cond_dim < 1 ||
        feature_dim < 1) {
        throw config_error("NspConfig: sizes must be positive");
    }
    if (hidden % heads != 0) {
        throw config_error("NspConfig: hidden " + std::to_string(hidden) + " not divisible by heads " +
                           std::to_string(heads));
    }
    if (!(cond_drop_rate >= 0.0 && cond_drop_rate < 1.0)) {
        throw config_error("NspConfig: cond_drop_rate outside [0,1)");
    }
    if (top_k < 1 || top_k > vocab) throw config_error("NspConfig: top_k outside [1,V]");
    schedule().validate();
}

std::vector<uint8_t> build_block_causal_mask(const tok::ScaleSchedule& schedule, bool include_start) {
    schedule.validate();
    const auto blocks = block_layout(schedule, include_start);
    const int n = blocks.back().first + blocks.back().second;
    std::vector<uint8_t> mask(su(n) * su(n), 0);
    for (const auto& [off, size] : blocks) {
        const int upto = off + size; // own block + everything before it
        for (int i = off; i < off + size; ++i) {
            for (int j = 0; j < upto; ++j) mask[su(i) * su(n) + su(j)] = 1;
        }
    }
    return mask;
}

void init_nsp(ParamStore& ps, const NspConfig& cfg, uint64_t seed, const std::string& prefix) {
    cfg.validate();
    nn::init_linear(ps, prefix + "cond.", cfg.cond_dim, cfg.hidden, seed);
    ps.create_normal(prefix + "null_cond", {cfg.hidden}, seed);
    nn::init_linear(ps, prefix + "in_proj.", cfg.feature_dim, cfg.hidden, seed);
    const auto schedule = cfg.schedule();
    ps.create_normal(prefix + "level", {schedule.K(), cfg.hidden}, seed);
    ps.create_normal(prefix + "pos", {schedule.total_tokens(), cfg.hidden}, seed);
    for (int l = 0; l < cfg.depth; ++l) {
        nn::init_block(ps, prefix + "block" + std::to_string(l) + ".", cfg.hidden, cfg.mlp, seed);
    }
    nn::init_linear(ps, prefix + "head.", cfg.hidden, cfg.vocab, seed);
}

Tensor make_start_token(const Tensor& e, const NspConfig& cfg, const ParamStore& ps,
                        const std::string& prefix) {
    if (e.ndim() != 1 || e.extent(0) != cfg.cond_dim) {
        throw contract_error("make_start_token: embedding " + e.shape_str() + " vs cond_dim " +
                             std::to_string(cfg.cond_dim));
    }
    return nn::apply_linear(ps, prefix + "cond.", ops::reshape(e, {1, cfg.cond_dim}));
}

std::vector<Tensor> next_scale_inputs(const tok::ResidualStack& stack,
                                      const tok::ScaleSchedule& schedule) {
    if (stack.schedule.sizes != schedule.sizes) {
        throw config_error("next_scale_inputs: stack schedule does not match");
    }
    std::vector<Tensor> feats;
    for (int k = 2; k <= schedule.K(); ++k) {
        const auto [hk, wk] = schedule.sizes[su(k - 1)];
        feats.push_back(ops::bilinear_resize(tok::cumulative_feature(stack, k - 1), hk, wk));
    }
    return feats;
}

Tensor build_inputs(const Tensor& start_row, const std::vector<Tensor>& scale_feats,
                    const NspConfig& cfg, const ParamStore& ps, const std::string& prefix) {
    if (start_row.ndim() != 2 || start_row.extent(0) != 1 || start_row.extent(1) != cfg.hidden) {
        throw contract_error("build_inputs: start row " + start_row.shape_str() + " must be [1x" +
                             std::to_string(cfg.hidden) + "]");
    }
    const auto schedule = cfg.schedule();
    if (scale_feats.size() + 1 > su(schedule.K())) {
        throw contract_error("build_inputs: more feature maps than scales");
    }
    std::vector<Tensor> rows = {start_row};
    int cell_at = 0;
    const int upto = static_cast<int>(scale_feats.size()) + 1; // blocks 1..upto present
    for (int k = 1; k <= upto; ++k) {
        const auto [hk, wk] = schedule.sizes[su(k - 1)];
        const int cells = hk * wk;
        Tensor content;
        if (k == 1) {
            content = Tensor::from({cells, cfg.hidden}, std::vector<double>(su(cells * cfg.hidden), 0.0));
        } else {
            const Tensor& f = scale_feats[su(k - 2)];
            if (f.ndim() != 3 || f.extent(0) != hk || f.extent(1) != wk ||
                f.extent(2) != cfg.feature_dim) {
                throw contract_error("build_inputs: scale " + std::to_string(k) + " feature map " +
                                     f.shape_str() + " must be [" + std::to_string(hk) + "x" +
                                     std::to_string(wk) + "x" + std::to_string(cfg.feature_dim) + "]");
            }
            content = nn::apply_linear(ps, prefix + "in_proj.",
                                       ops::reshape(f, {cells, cfg.feature_dim}));
        }
        content = ops::add_rowvec(content, row_of(ps, prefix + "level", k - 1));
        std::vector<int> pos_rows(su(cells));
        std::iota(pos_rows.begin(), pos_rows.end(), cell_at);
        content = ops::add(content, ops::gather_rows(ps.get(prefix + "pos"), pos_rows));
        rows.push_back(content);
        cell_at += cells;
    }
    return ops::concat_rows(rows);
}

Tensor forward_logits(const Tensor& inputs, const std::vector<uint8_t>& mask, const NspConfig& cfg,
                      const ParamStore& ps, const std::string& prefix) {
    if (inputs.ndim() != 2 || inputs.extent(1) != cfg.hidden) {
        throw contract_error("forward_logits: inputs " + inputs.shape_str() + " must be [Lx" +
                             std::to_string(cfg.hidden) + "]");
    }
    const int n = inputs.extent(0);
    if (mask.size() != su(n) * su(n)) {
        throw contract_error("forward_logits: mask size " + std::to_string(mask.size()) +
                             " vs sequence length " + std::to_string(n));
    }
    Tensor x = inputs;
    for (int l = 0; l < cfg.depth; ++l) {
        x = nn::block_forward(ps, prefix + "block" + std::to_string(l) + ".", x, cfg.heads, cfg.ln_eps,
                              &mask);
        if (!x.all_finite()) {
            throw numeric_error("forward_logits: non-finite activations in block " + std::to_string(l));
        }
    }
    return nn::apply_linear(ps, prefix + "head.", x);
}

Tensor train_step(const std::vector<NspSample>& batch, const NspConfig& cfg, const ParamStore& ps,
                  Rng& rng, const std::string& prefix) {
    if (batch.empty()) throw contract_error("train_step: empty batch");
    const auto schedule = cfg.schedule();
    const auto mask = build_block_causal_mask(schedule, true);
    Tensor total;
    for (size_t s = 0; s < batch.size(); ++s) {
        const auto& sample = batch[s];
        if (sample.stack.schedule.sizes != schedule.sizes) {
            throw contract_error("train_step: sample " + std::to_string(s) +
                                 " stack schedule does not match the config");
        }
        const bool drop = cfg.cond_drop_rate > 0.0 && rng.uniform() < cfg.cond_drop_rate;
        Tensor start = drop ? ops::reshape(ps.get(prefix + "null_cond"), {1, cfg.hidden})
                            : make_start_token(sample.embed, cfg, ps, prefix);
        Tensor inputs = build_inputs(start, next_scale_inputs(sample.stack, schedule), cfg, ps, prefix);
        Tensor logits = forward_logits(inputs, mask, cfg, ps, prefix);
        std::vector<int> targets;
        for (const auto& toks : sample.stack.tokens) targets.insert(targets.end(), toks.begin(), toks.end());
        for (int t : targets) {
            if (t < 0 || t >= cfg.vocab) {
                throw contract_error("train_step: token " + std::to_string(t) + " outside vocab");
            }
        }
        Tensor pred = ops::slice_rows(logits, 1, schedule.total_tokens());
        Tensor loss = ops::mean_softmax_xent(pred, targets);
        total = s == 0 ? loss : ops::add(total, loss);
    }
    return ops::scale(total, 1.0 / static_cast<double>(batch.size()));
}

Tensor cfg_mix(const Tensor& cond, const Tensor& uncond, double g) {
    if (cond.shape() != uncond.shape()) {
        throw contract_error("cfg_mix: shapes " + cond.shape_str() + " vs " + uncond.shape_str());
    }
    if (g == 1.0) return cond;
    if (g == 0.0) return uncond;
    return ops::add(uncond, ops::scale(ops::sub(cond, uncond), g));
}

int sample_top_k(const std::vector<double>& logits, int k, double u) {
    const int v = static_cast<int>(logits.size());
    if (v < 1) throw contract_error("sample_top_k: empty logits");
    if (k < 1 || k > v) {
        throw config_error("sample_top_k: k=" + std::to_string(k) + " outside [1," + std::to_string(v) +
                           "]");
    }
    if (k == 1) {
        int best = 0;
        for (int i = 1; i < v; ++i) {
            if (logits[su(i)] > logits[su(best)]) best = i;
        }
        return best;
    }
    std::vector<int> idx(su(v));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (logits[su(a)] != logits[su(b)]) return logits[su(a)] > logits[su(b)];
        return a < b; // ties keep the lower index in the support
    });
    std::vector<int> support(idx.begin(), idx.begin() + k);
    std::sort(support.begin(), support.end());
    double mx = logits[su(support[0])];
    for (int i : support) mx = std::max(mx, logits[su(i)]);
    double z = 0.0;
    std::vector<double> p(su(k));
    for (int i = 0; i < k; ++i) {
        p[su(i)] = std::exp(logits[su(support[su(i)])] - mx);
        z += p[su(i)];
    }
    double cum = 0.0;
    for (int i = 0; i < k; ++i) {
        cum += p[su(i)] / z;
        if (u < cum) return support[su(i)];
    }
    return support.back();
}

GenResult generate(const Tensor& e, const NspConfig& cfg, const ParamStore& ps,
                   const tok::TokenizerConfig& tcfg, const ParamStore& tok_ps, uint64_t seed,
                   const std::string& prefix, const std::string& tok_prefix) {
    cfg.validate();
    const auto schedule = cfg.schedule();
    schedule.validate_final(tcfg.grid(), tcfg.grid());
    if (cfg.vocab != tcfg.vocab || cfg.feature_dim != tcfg.feature_dim) {
        throw config_error("generate: transformer vocab/feature_dim do not match the tokenizer");
    }
    const Tensor& book = tok_ps.get(tok_prefix + "codebook");
    const int h = tcfg.grid(), w = tcfg.grid(), df = cfg.feature_dim;
    const auto full_mask = build_block_causal_mask(schedule, true);
    const int full_len = cfg.seq_len();

    Tensor start_c = make_start_token(e, cfg, ps, prefix);
    Tensor start_u = ops::reshape(ps.get(prefix + "null_cond"), {1, cfg.hidden});

    GenResult res;
    Tensor cum = Tensor::from({h, w, df}, std::vector<double>(su(h * w * df), 0.0));
    std::vector<Tensor> feats; // inputs for blocks 2..k, grows each step
    int offset = 1;            // first position of the current block
    for (int k = 1; k <= schedule.K(); ++k) {
        const auto [hk, wk] = schedule.sizes[su(k - 1)];
        const int cells = hk * wk;
        const int len = offset + cells;
        std::vector<uint8_t> mask(su(len) * su(len));
        for (int i = 0; i < len; ++i) {
            for (int j = 0; j < len; ++j) {
                mask[su(i) * su(len) + su(j)] = full_mask[su(i) * su(full_len) + su(j)];
            }
        }
        Tensor logits_c = forward_logits(build_inputs(start_c, feats, cfg, ps, prefix), mask, cfg, ps,
                                         prefix);
        Tensor logits_u = forward_logits(build_inputs(start_u, feats, cfg, ps, prefix), mask, cfg, ps,
                                         prefix);
        Tensor mixed = cfg_mix(ops::slice_rows(logits_c, offset, cells),
                               ops::slice_rows(logits_u, offset, cells), cfg.cfg_ratio);
        std::vector<int> toks(su(cells));
        std::vector<double> row(su(cfg.vocab));
        for (int i = 0; i < cells; ++i) {
            for (int j = 0; j < cfg.vocab; ++j) row[su(j)] = mixed.at(i, j);
            toks[su(i)] = sample_top_k(row, cfg.top_k, keyed_uniform(seed, su(k), su(i)));
        }
        Tensor rk = ops::reshape(ops::gather_rows(book, toks), {hk, wk, df});
        cum = ops::add(cum, ops::bilinear_resize(rk, h, w));
        res.tokens.push_back(std::move(toks));
        res.scale_images.push_back(tok::decode_feature(cum, tcfg, tok_ps, tok_prefix));
        if (k < schedule.K()) {
            const auto [hn, wn] = schedule.sizes[su(k)];
            feats.push_back(ops::bilinear_resize(cum, hn, wn));
        }
        offset += cells;
        ++res.steps;
    }
    res.feature = cum;
    res.image = res.scale_images.back();
    return res;
}

} // namespace neuroscale::nsp
