#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>

#include "tsrep/augment.hpp"
#include "tsrep/dwt.hpp"
#include "tsrep/errors.hpp"
#include "tsrep/eval.hpp"
#include "tsrep/harness.hpp"
#include "tsrep/sigreg.hpp"
#include "tsrep/synthgen.hpp"
#include "tsrep/tensor_io.hpp"
#include "tsrep/util.hpp"

namespace fs = std::filesystem;
using namespace tsrep;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
    for (const auto& o : overrides) cfg.set(o);
    return cfg;
}

void print_rows(const std::vector<MetricRecord>& rows, std::ostream& os) {
    os << metric_csv_header() << '\n';
    for (const auto& r : rows) os << to_csv_row(r) << '\n';
}

std::vector<std::uint64_t> seeds_or(const RunConfig& cfg, const std::vector<std::uint64_t>& chosen) {
    return chosen.empty() ? cfg.seeds : chosen;
}

std::vector<float> read_series_csv(const std::string& path, std::size_t column) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<float> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                cells.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        cells.push_back(cur);
        if (column >= cells.size()) throw ParseError(path + " line " + std::to_string(lineno) + ": missing column");
        try {
            std::size_t used = 0;
            out.push_back(std::stof(cells[column], &used));
        } catch (const std::logic_error&) {
            if (lineno == 1) continue;  // header
            throw ParseError(path + " line " + std::to_string(lineno) + ": '" + cells[column] + "' is not a number");
        }
    }
    return out;
}

std::vector<float> read_series_tsb(const std::string& path, std::size_t row) {
    const Tensor t = load_tsb(path);
    if (t.rank() == 1 && row == 0) return {t.data().begin(), t.data().end()};
    if (t.rank() != 2 && t.rank() != 3)
        throw ShapeError(path + ": expected a [T], [rows, T] or [rows, C, T] tensor, got " + shape_str(t.shape()));
    if (row >= t.dim(0)) throw ContractError(path + ": row " + std::to_string(row) + " out of range");
    const auto d = t.data();
    // For [rows, C, T] the first channel of the row is used.
    const auto T = static_cast<std::ptrdiff_t>(t.dim(t.rank() - 1));
    if (t.rank() == 3) {
        const auto stride = static_cast<std::ptrdiff_t>(t.dim(1)) * T;
        return {d.begin() + static_cast<std::ptrdiff_t>(row) * stride, d.begin() + static_cast<std::ptrdiff_t>(row) * stride + T};
    }
    return {d.begin() + static_cast<std::ptrdiff_t>(row) * T, d.begin() + static_cast<std::ptrdiff_t>(row + 1) * T};
}

// Long format: column, band (approx or detail level, 1 = finest), index, value.
void write_bands(const std::string& path, const std::vector<std::string>& names,
                 const std::vector<std::vector<float>>& cols, const DwtConfig& dwt) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os.precision(9);
    os << "column,band,index,value\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const Pyramid p = dwt_forward(cols[c], dwt);
        for (std::size_t i = 0; i < p.approx.size(); ++i) os << names[c] << ",approx," << i << ',' << p.approx[i] << '\n';
        for (std::size_t l = 0; l < p.details.size(); ++l)
            for (std::size_t i = 0; i < p.details[l].size(); ++i)
                os << names[c] << ",detail" << l + 1 << ',' << i << ',' << p.details[l][i] << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time-series self-supervised pre-training and evaluation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "Run configuration file");
        cmd->add_option("--set", overrides, "Override one key: section.key=value (repeatable)");
    };

    // generate
    auto* gen = app.add_subcommand("generate", "Sample a Gaussian-process synthetic corpus");
    LcmConfig lcm;
    std::string gen_out;
    bool univariate = false;
    std::size_t gen_workers = 1;
    std::uint64_t gen_seed = 2003;
    gen->add_option("-o,--out", gen_out, "Output directory")->required();
    gen->add_option("-n,--n-series", lcm.n_series, "Number of series")->capture_default_str();
    gen->add_option("-T,--length", lcm.length, "Samples per series")->capture_default_str();
    gen->add_option("--channels", lcm.n_channels, "Channels per multivariate series")->capture_default_str();
    gen->add_flag("--univariate", univariate, "One standardized GP per series instead of coregionalized channels");
    gen->add_option("--max-kernels", lcm.max_kernels, "Kernel atoms per composition (1..5)")->capture_default_str();
    gen->add_option("--shard-size", lcm.shard_size, "Series per shard")->capture_default_str();
    gen->add_option("-j,--workers", gen_workers, "Worker threads")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Pre-train the backbone for each configured seed");
    add_config(pre);
    std::vector<std::uint64_t> chosen_seeds;
    std::optional<std::string> pre_objective, pre_data, pre_out;
    std::optional<std::size_t> pre_layers, pre_d_model, pre_epochs, pre_batch;
    pre->add_option("--seed", chosen_seeds, "Restrict to these seeds");
    pre->add_option("--objective", pre_objective, "mae | ntp | diffusion | jepa | lejepa | dino");
    pre->add_option("--data", pre_data, "real | synthetic | hybrid");
    pre->add_option("--layers", pre_layers, "Encoder layers");
    pre->add_option("--d-model", pre_d_model, "Model width");
    pre->add_option("--epochs", pre_epochs, "Training epochs");
    pre->add_option("--batch", pre_batch, "Batch size");
    pre->add_option("--out", pre_out, "Output root; checkpoints land in <out>/<run_id>/seed-<seed>");

    // probe / finetune
    std::string ckpt_path, task_name = "classify", mode_name = "linear", embed_stem;
    std::uint64_t probe_seed = 2003;
    auto* probe = app.add_subcommand("probe", "Train a probe head on a frozen checkpoint and report metrics");
    auto* fine = app.add_subcommand("finetune", "Fine-tune a checkpoint end to end on one task");
    for (auto* cmd : {probe, fine}) {
        add_config(cmd);
        cmd->add_option("--checkpoint", ckpt_path, "Backbone checkpoint; omitted means random init")->check(CLI::ExistingFile);
        cmd->add_option("--task", task_name, "forecast | classify | anomaly")->capture_default_str();
        cmd->add_option("--seed", probe_seed, "Probe and suite seed")->capture_default_str();
    }
    probe->add_option("--mode", mode_name, "linear | mlp")->capture_default_str();
    probe->add_option("--export-embeddings", embed_stem, "Also write pooled test embeddings to <stem>.tsb/.csv");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Run the full pre-train and evaluation pipeline");
    add_config(evaluate);

    // sweep
    auto* sw = app.add_subcommand("sweep", "Repeat the pipeline over values of one dimension");
    add_config(sw);
    std::string dim_name;
    std::vector<std::string> values;
    sw->add_option("--dimension", dim_name, "layers | data_source | objective")->required();
    sw->add_option("--values", values, "Values to sweep")->required()->delimiter(',');

    // augment-preview
    auto* aug = app.add_subcommand("augment-preview", "Write a series and its augmented views as CSV");
    std::string aug_input, aug_out, aug_bands, transform = "dwt";
    std::size_t aug_column = 0, aug_length = 128;
    std::uint64_t aug_seed = 2003;
    DwtConfig dwt;
    aug->add_option("--input", aug_input, "CSV with one series per column, or a TSB1 tensor; omitted uses a sine mixture");
    aug->add_option("--column", aug_column, "CSV column, or row of a TSB1 [rows, T] tensor")->capture_default_str();
    aug->add_option("--length", aug_length, "Length of the built-in series")->capture_default_str();
    aug->add_option("--transform", transform, "dwt, or family:magnitude (e.g. lorentz:0.3)")->capture_default_str();
    aug->add_option("--wavelet-order", dwt.order, "Daubechies order for dwt")->capture_default_str();
    aug->add_option("--level", dwt.level, "Decomposition level for dwt")->capture_default_str();
    aug->add_option("--seed", aug_seed, "Seed")->capture_default_str();
    aug->add_option("-o,--out", aug_out, "Output CSV (default stdout)");
    aug->add_option("--bands", aug_bands, "With dwt: also write per-band coefficients of each column to this CSV");

    // sigreg-diagnose
    auto* sig = app.add_subcommand("sigreg-diagnose", "Epps-Pulley residuals and covariance spectrum of embeddings as CSV");
    std::string emb_path, sig_ckpt;
    EppsPulleyConfig ep;
    sig->add_option("--embeddings", emb_path, "TSB1 [N, D] embedding matrix")->check(CLI::ExistingFile);
    sig->add_option("--checkpoint", sig_ckpt, "Embed the toy classification series with this checkpoint")
        ->check(CLI::ExistingFile);
    sig->add_option("--projections", ep.n_projections, "Random projections")->capture_default_str();
    sig->add_flag("--standardize", ep.standardize, "Standardize dimensions before projecting");

    // export-metrics
    auto* exp = app.add_subcommand("export-metrics", "Concatenate per-run metric files into one CSV");
    std::vector<std::string> run_dirs;
    std::string exp_out;
    bool aggregates_only = false;
    exp->add_option("runs", run_dirs, "Run directories or metrics.csv files")->required();
    exp->add_option("-o,--out", exp_out, "Output CSV (default stdout)");
    exp->add_flag("--aggregates-only", aggregates_only, "Keep only mean/std rows");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            const auto m = generate_corpus(lcm, univariate, gen_out, gen_workers, gen_seed);
            std::cout << "wrote " << m.n_series << " series x " << m.channels << " channels x " << m.length << " samples in "
                      << m.shards.size() << " shards to " << gen_out << " (digest " << m.config_digest << ")\n";
        } else if (*pre) {
            RunConfig cfg = load_config(config_path, overrides);
            if (pre_objective) cfg.set("run.objective=" + *pre_objective);
            if (pre_data) cfg.set("run.data_source=" + *pre_data);
            if (pre_out) cfg.set("run.output_root=" + *pre_out);
            if (pre_layers) cfg.backbone.n_layers = *pre_layers;
            if (pre_d_model) cfg.backbone.d_model = *pre_d_model;
            if (pre_epochs) cfg.pretrain.epochs = *pre_epochs;
            if (pre_batch) cfg.pretrain.batch_size = *pre_batch;
            cfg.validate();
            if (cfg.objective == Objective::none) throw ConfigError("pretrain: run.objective is none");
            const SeriesBatch corpus = load_pretrain_corpus(cfg);
            for (auto seed : seeds_or(cfg, chosen_seeds)) {
                PretrainConfig p = cfg.pretrain;
                p.seed = seed;
                p.data_source = to_string(cfg.data_source);
                p.optim = cfg.optim.resolve(cfg.objective);
                p.out_dir = cfg.output_root / cfg.run_id / ("seed-" + std::to_string(seed));
                const auto r = pretrain(cfg.objective, corpus, cfg.backbone, cfg.objective_cfg, p);
                std::printf("seed %llu: %zu steps, loss %.5f -> %.5f, checkpoints in %s\n",
                            static_cast<unsigned long long>(seed), r.steps.size(), r.initial_loss,
                            r.epoch_train_loss.empty() ? r.initial_loss : r.epoch_train_loss.back(), p.out_dir.c_str());
            }
        } else if (*probe || *fine) {
            RunConfig cfg = load_config(config_path, overrides);
            cfg.validate();
            const ProbeMode mode = *fine ? ProbeMode::finetune : parse_probe_mode(mode_name);
            if (*probe && mode == ProbeMode::finetune) throw ConfigError("probe: use the finetune subcommand");
            const TaskKind task = parse_task(task_name);
            const BackboneCheckpoint ckpt = ckpt_path.empty() ? random_checkpoint(cfg.backbone, probe_seed) : load_checkpoint(ckpt_path);
            const EvalSuite suite = build_suite(cfg, probe_seed, {task});
            const RunLabels labels{cfg.run_id, ckpt.objective, ckpt.data_source, probe_seed};
            const EvalReport report = evaluate_checkpoint(ckpt, suite, mode, labels, cfg.eval.probe_epochs);
            print_rows(report.rows, std::cout);
            if (!embed_stem.empty()) {
                if (suite.classify.empty()) throw ConfigError("--export-embeddings needs a classification set");
                export_embeddings(ckpt, suite.classify.front().test_series, suite.classify.front().test_labels, embed_stem);
            }
        } else if (*evaluate) {
            const RunConfig cfg = load_config(config_path, overrides);
            const RunResult r = run_experiment(cfg);
            std::cerr << "evaluated " << r.evaluated << " (seed, task) pairs, skipped " << r.skipped << "; metrics in "
                      << r.metrics_csv.string() << '\n';
            print_rows(r.rows, std::cout);
        } else if (*sw) {
            const RunConfig cfg = load_config(config_path, overrides);
            const SweepResult r = sweep(parse_sweep_dimension(dim_name), values, cfg);
            std::cerr << r.child_runs << " child runs, " << r.failures.size() << " failures; combined metrics in "
                      << r.combined_csv.string() << '\n';
            for (const auto& f : r.failures) std::cerr << "  failed " << f.value << ": " << f.message << '\n';
            print_rows(r.rows, std::cout);
            if (!r.failures.empty()) return 1;
        } else if (*aug) {
            std::vector<float> x;
            if (!aug_input.empty() && fs::path(aug_input).extension() == ".tsb") {
                x = read_series_tsb(aug_input, aug_column);
            } else if (!aug_input.empty()) {
                x = read_series_csv(aug_input, aug_column);
            } else {
                x.resize(aug_length);
                for (std::size_t t = 0; t < aug_length; ++t) {
                    const double u = static_cast<double>(t) / static_cast<double>(aug_length);
                    x[t] = static_cast<float>(std::sin(2 * std::numbers::pi * 3 * u) + 0.5 * std::sin(2 * std::numbers::pi * 11 * u));
                }
            }
            std::vector<std::string> names = {"original"};
            std::vector<std::vector<float>> cols = {x};
            if (transform == "dwt") {
                const ViewPair v = make_dwt_views({x}, dwt, aug_seed);
                names.insert(names.end(), {"teacher", "student"});
                cols.push_back(v.teacher[0]);
                cols.push_back(v.student[0]);
            } else {
                const auto colon = transform.find(':');
                if (colon == std::string::npos) throw ConfigError("--transform expects dwt or family:magnitude");
                TransformSpec spec;
                spec.family = parse_transform_family(transform.substr(0, colon));
                spec.magnitude = std::stof(transform.substr(colon + 1));
                auto rng = make_rng(aug_seed, 0);
                names.push_back(transform.substr(0, colon));
                cols.push_back(apply_transform({x}, spec, rng)[0]);
            }
            std::ofstream file;
            if (!aug_out.empty()) {
                file.open(aug_out, std::ios::trunc);
                if (!file) throw IoError("cannot write " + aug_out);
            }
            std::ostream& os = aug_out.empty() ? std::cout : file;
            os << "t";
            for (const auto& n : names) os << ',' << n;
            os << '\n';
            for (std::size_t t = 0; t < x.size(); ++t) {
                os << t;
                for (const auto& c : cols) os << ',' << c[t];
                os << '\n';
            }
            if (!aug_bands.empty()) {
                if (transform != "dwt") throw ConfigError("--bands applies to the dwt transform");
                write_bands(aug_bands, names, cols, dwt);
            }
        } else if (*sig) {
            Tensor z;
            if (!emb_path.empty()) {
                z = load_tsb(emb_path);
            } else if (!sig_ckpt.empty()) {
                const BackboneCheckpoint ckpt = load_checkpoint(sig_ckpt);
                ToySuiteConfig tc;
                tc.window = ckpt.config.patch_len * std::min<std::size_t>(8, ckpt.config.max_patches);
                z = pooled_latents(ckpt.weights, ckpt.config, toy_classification(tc, 2003).test_series);
            } else {
                throw ConfigError("sigreg-diagnose needs --embeddings or --checkpoint");
            }
            if (z.rank() != 2) throw ShapeError("embeddings must be [N, D]");
            const auto residuals = epps_pulley_residuals(z, ep, 0);
            double stat = 0.0;
            for (double r : residuals) stat += r;
            stat /= static_cast<double>(residuals.size());
            const SpectrumDiagnostics spec = covariance_spectrum(z);
            std::printf("kind,index,value\n");
            std::printf("statistic,,%.9g\n", stat);
            std::printf("effective_rank,,%.9g\n", spec.effective_rank);
            std::printf("mean_std,,%.9g\n", spec.mean_std);
            for (std::size_t i = 0; i < residuals.size(); ++i) std::printf("residual,%zu,%.9g\n", i, residuals[i]);
            for (std::size_t i = 0; i < spec.eigenvalues.size(); ++i)
                std::printf("eigenvalue,%zu,%.9g\n", i, spec.eigenvalues[i]);
        } else if (*exp) {
            std::vector<MetricRecord> rows;
            std::set<std::string> keys;
            for (const auto& d : run_dirs) {
                const fs::path p = fs::is_directory(d) ? fs::path(d) / "metrics.csv" : fs::path(d);
                for (auto& r : read_metrics_csv(p)) {
                    const bool aggregate = r.seed == "mean" || r.seed == "std";
                    if (aggregates_only && !aggregate) continue;
                    if (keys.insert(r.key()).second) rows.push_back(std::move(r));
                }
            }
            if (exp_out.empty()) print_rows(rows, std::cout);
            else write_metrics_csv(exp_out, rows);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return 0;
}
