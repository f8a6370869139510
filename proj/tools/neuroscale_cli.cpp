#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neuroscale/pipeline.hpp"

namespace pl = neuroscale::pipeline;

namespace {

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw neuroscale::config_error("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"EEG-to-image decoding pipeline: synthetic data, two-stage training, "
                 "next-scale generation, evaluation, analysis, and benchmarking"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags are valid before or after the subcommand

    // Precedence: --config file (omitted keys take module defaults) < explicit
    // flags. Without --config the coherent desk profile is used; the shipped
    // configs/*.json are complete files meant to be copied and edited.
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
    bool sequential = false;
    app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the run seed")->each([&](const std::string&) { seed_set = true; });
    app.add_option("--out", out_dir, "override the output directory");
    app.add_flag("--sequential", sequential, "force the deterministic sequential path");

    auto* c_synth = app.add_subcommand("synth", "generate the synthetic dataset");
    auto* c_tok = app.add_subcommand("train-tokenizer", "train the multi-scale VQ tokenizer");
    auto* c_align = app.add_subcommand("train-align", "train the contrastive EEG-image alignment");
    auto* c_nsp = app.add_subcommand("train-nsp", "train the next-scale decoder");
    auto* c_gen = app.add_subcommand("generate", "decode validation trials into images");
    auto* c_eval = app.add_subcommand("eval", "score reconstructions and retrieval");
    bool self_eval = false;
    c_eval->add_flag("--self", self_eval, "score ground-truth images as their own reconstructions");
    auto* c_analyze = app.add_subcommand("analyze", "emit the region-by-scale similarity table");
    auto* c_bench = app.add_subcommand("bench", "measure per-image latency and parameter counts");
    int bench_runs = 20, bench_warmups = 3;
    c_bench->add_option("--runs", bench_runs, "timed generations")->check(CLI::PositiveNumber);
    c_bench->add_option("--warmups", bench_warmups, "untimed warmup generations");
    auto* c_sweep = app.add_subcommand("sweep", "full pipeline across several seeds");
    std::vector<uint64_t> sweep_seeds = {1, 2, 3, 4, 5};
    c_sweep->add_option("--seeds", sweep_seeds, "seed list")->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        pl::RunConfig cfg = config_path.empty() ? pl::desk_config()
                                                : pl::config_from_json(read_text(config_path));
        if (seed_set) cfg.seed = seed;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (sequential) cfg.sequential = true;

        if (c_synth->parsed()) {
            pl::run_synth(cfg);
            std::printf("dataset: %d classes x %d pairs -> %s/dataset.avds\n", cfg.data.classes,
                        cfg.data.pairs_per_class, cfg.out_dir.c_str());
        } else if (c_tok->parsed()) {
            const auto res = pl::run_train_tokenizer(cfg);
            std::printf("tokenizer: %zu epochs, final recon MSE %.6g, %d dead-code restarts\n",
                        res.recon_mse.size(), res.recon_mse.empty() ? 0.0 : res.recon_mse.back(),
                        res.dead_restarts);
        } else if (c_align->parsed()) {
            const auto res = pl::run_train_align(cfg);
            std::printf("alignment: %zu epochs, final loss %.6g, val top-1 %.4f%s\n",
                        res.train_loss.size(), res.train_loss.empty() ? 0.0 : res.train_loss.back(),
                        res.val_top1.empty() ? 0.0 : res.val_top1.back(),
                        res.diverged ? " (diverged; restored last good epoch)" : "");
        } else if (c_nsp->parsed()) {
            const auto res = pl::run_train_nsp(cfg);
            std::printf("nsp: %zu epochs, final loss %.6g%s\n", res.loss.size(),
                        res.loss.empty() ? 0.0 : res.loss.back(),
                        res.diverged ? " (diverged; restored last good epoch)" : "");
        } else if (c_gen->parsed()) {
            const auto res = pl::run_generate(cfg);
            std::printf("generated %d samples x %d scales under %s/gen\n", res.samples, res.scales,
                        cfg.out_dir.c_str());
        } else if (c_eval->parsed()) {
            cfg.eval_self_test = cfg.eval_self_test || self_eval;
            const auto res = pl::run_eval(cfg);
            std::printf("eval: pixcorr %.4f  ssim %.4f  two-way %.4f  top-1 %.4f (%d-way)\n",
                        res.recon.pixcorr, res.recon.ssim, res.recon.two_way, res.retrieval.top1,
                        res.retrieval.n_way);
        } else if (c_analyze->parsed()) {
            const auto m = pl::run_analyze(cfg);
            std::printf("analyze: %zu regions x %zu scales -> %s/analyze/region_scale.csv\n",
                        m.regions.size(), m.sims.empty() ? 0 : m.sims.front().size(),
                        cfg.out_dir.c_str());
        } else if (c_bench->parsed()) {
            const auto rep = pl::run_bench(cfg, bench_runs, bench_warmups);
            std::printf("bench: %lld params, %d steps/image, median %.3f ms (spread %.1f%%), "
                        "peak RSS %lld kB\n",
                        static_cast<long long>(rep.params_total), rep.steps, rep.latency_ms_median,
                        100.0 * rep.spread, static_cast<long long>(rep.peak_rss_kb));
        } else if (c_sweep->parsed()) {
            const auto sum = pl::run_sweep(cfg, sweep_seeds);
            std::printf("sweep over %zu seeds:\n", sum.seeds.size());
            for (size_t m = 0; m < sum.metric_names.size(); ++m) {
                std::printf("  %-14s mean %.4f  sd %.4f\n", sum.metric_names[m].c_str(), sum.mean[m],
                            sum.sd[m]);
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
