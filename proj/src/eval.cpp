#include "tsrep/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "tsrep/errors.hpp"
#include "tsrep/optim.hpp"
#include "tsrep/tensor_io.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

std::string to_string(ProbeMode mode) {
    switch (mode) {
        case ProbeMode::linear: return "linear";
        case ProbeMode::mlp: return "mlp";
        case ProbeMode::finetune: return "finetune";
    }
    return "unknown";
}

std::string to_string(TaskKind task) {
    switch (task) {
        case TaskKind::forecast: return "forecast";
        case TaskKind::classify: return "classify";
        case TaskKind::anomaly: return "anomaly";
    }
    return "unknown";
}

ProbeMode parse_probe_mode(const std::string& name) {
    for (auto m : {ProbeMode::linear, ProbeMode::mlp, ProbeMode::finetune})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown probe mode '" + name + "' (expected linear, mlp or finetune)");
}

TaskKind parse_task(const std::string& name) {
    for (auto t : {TaskKind::forecast, TaskKind::classify, TaskKind::anomaly})
        if (to_string(t) == name) return t;
    throw ConfigError("unknown task '" + name + "' (expected forecast, classify or anomaly)");
}

double default_probe_lr(TaskKind task) {
    switch (task) {
        case TaskKind::forecast: return 2e-4;
        case TaskKind::classify: return 1e-3;
        case TaskKind::anomaly: return 1e-4;
    }
    return 1e-3;
}

void ProbeSpec::validate() const {
    if (epochs < 1) throw ContractError("probe: epochs must be >= 1");
    if (batch_size < 1) throw ContractError("probe: batch_size must be >= 1");
    if (mode == ProbeMode::mlp && hidden < 1) throw ContractError("probe: mlp hidden width must be >= 1");
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ContractError("probe: dropout must be in [0, 1)");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ContractError("probe: lr and weight_decay must be >= 0");
}

ProbeSpec ProbeSpec::for_task(TaskKind task, ProbeMode mode) {
    ProbeSpec s;
    s.task = task;
    s.mode = mode;
    switch (task) {
        case TaskKind::forecast: s.batch_size = 32; break;
        case TaskKind::classify: s.batch_size = 64; break;
        case TaskKind::anomaly:
            s.epochs = 10;
            s.patience = 3;
            s.batch_size = 32;
            break;
    }
    return s;
}

NamedTensors ProbeHead::parameters() const {
    NamedTensors out;
    if (mode == ProbeMode::mlp) {
        append_parameters(out, "head.in", mlp.in);
        append_parameters(out, "head.out", mlp.out);
    } else {
        append_parameters(out, "head", linear);
    }
    return out;
}

ProbeHead ProbeHead::clone() const {
    auto copy = [](const Linear& l) {
        Linear c{l.weight.clone(), l.bias.clone()};
        c.weight.set_requires_grad(l.weight.requires_grad());
        c.bias.set_requires_grad(l.bias.requires_grad());
        return c;
    };
    ProbeHead h = *this;
    if (mode == ProbeMode::mlp) {
        h.mlp = {copy(mlp.in), copy(mlp.out)};
    } else {
        h.linear = copy(linear);
    }
    return h;
}

Tensor ProbeHead::apply(const Tensor& x, std::mt19937_64* rng) const {
    if (mode != ProbeMode::mlp) return apply_linear(linear, x);
    Tensor h = ops::gelu(apply_linear(mlp.in, x));
    if (rng != nullptr && dropout > 0.0f) h = ops::dropout(h, dropout, *rng);
    return apply_linear(mlp.out, h);
}

namespace {

std::size_t window_length(const SeriesBatch& b, const char* what) {
    if (b.empty()) throw ContractError(std::string(what) + " is empty");
    const std::size_t n = b.front().size();
    for (const auto& s : b)
        if (s.size() != n) throw ShapeError(std::string(what) + ": windows must share one length");
    return n;
}

void check_labels(std::span<const std::size_t> labels, std::size_t n_series, std::size_t n_classes, const char* what) {
    if (labels.size() != n_series) throw ContractError(std::string(what) + ": one label per series required");
    for (auto l : labels)
        if (l >= n_classes)
            throw ContractError(std::string(what) + ": label " + std::to_string(l) + " outside " +
                                std::to_string(n_classes) + " classes");
}

}  // namespace

void TaskData::validate(std::size_t patch_len) const {
    const std::size_t n = window_length(train_inputs, "train inputs");
    if (!val_inputs.empty() && window_length(val_inputs, "val inputs") != n)
        throw ShapeError("train and val windows differ in length");
    if (n < patch_len) throw ShapeError("windows shorter than one patch");
    switch (task) {
        case TaskKind::forecast:
            if (train_targets.size() != train_inputs.size() || val_targets.size() != val_inputs.size())
                throw ContractError("forecast: one target per input window required");
            window_length(train_targets, "train targets");
            for (const auto& t : val_targets)
                if (t.size() != train_targets.front().size()) throw ShapeError("forecast: targets differ in length");
            break;
        case TaskKind::classify:
            if (n_classes < 2) throw ContractError("classify: need at least 2 classes");
            check_labels(train_labels, train_inputs.size(), n_classes, "classify train");
            check_labels(val_labels, val_inputs.size(), n_classes, "classify val");
            break;
        case TaskKind::anomaly:
            if (n % patch_len != 0) throw ShapeError("anomaly: window length must be a multiple of patch_len");
            break;
    }
}

Tensor task_features(const EncoderWeights& w, const BackboneConfig& cfg, TaskKind task, const SeriesBatch& windows) {
    const Tensor z = encode(patchify_batch(normalized_windows(windows), cfg.patch_len), w, cfg);
    const std::size_t B = z.dim(0), N = z.dim(1), D = z.dim(2);
    switch (task) {
        case TaskKind::forecast: return ops::reshape(z, {B, N * D});
        case TaskKind::classify: return ops::mean(z, 1);
        case TaskKind::anomaly: return ops::reshape(z, {B * N, D});
    }
    return z;
}

Tensor task_targets(TaskKind task, const SeriesBatch& inputs, const SeriesBatch& targets, std::size_t patch_len) {
    if (task == TaskKind::classify) throw ContractError("task_targets: classification has labels, not targets");
    std::vector<float> out;
    if (task == TaskKind::forecast) {
        if (targets.size() != inputs.size()) throw ContractError("task_targets: one target per input required");
        const std::size_t H = window_length(targets, "targets");
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            std::vector<float> ctx = inputs[i];
            const InstanceStats st = instance_normalize(ctx);
            for (float v : targets[i]) out.push_back((v - st.mean) / st.stddev);
        }
        return Tensor::from_data({inputs.size(), H}, std::move(out));
    }
    const std::size_t T = window_length(inputs, "inputs");
    const std::size_t N = T / patch_len;
    for (const auto& s : normalized_windows(inputs)) out.insert(out.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(N * patch_len));
    return Tensor::from_data({inputs.size() * N, patch_len}, std::move(out));
}

namespace {

// Rows [first, first + count) of a cached [S, F] matrix, per window.
Tensor gather_windows(const Tensor& cache, std::span<const std::size_t> windows, std::size_t rows_per_window) {
    const std::size_t F = cache.dim(1);
    const auto src = cache.data();
    std::vector<float> out;
    out.reserve(windows.size() * rows_per_window * F);
    for (auto w : windows) {
        const auto begin = src.begin() + static_cast<std::ptrdiff_t>(w * rows_per_window * F);
        out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(rows_per_window * F));
    }
    return Tensor::from_data({windows.size() * rows_per_window, F}, std::move(out));
}

SeriesBatch pick(const SeriesBatch& b, std::span<const std::size_t> idx) {
    SeriesBatch out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(b[i]);
    return out;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t k) {
    std::vector<float> v(labels.size() * k, 0.0f);
    for (std::size_t i = 0; i < labels.size(); ++i) v[i * k + labels[i]] = 1.0f;
    return Tensor::from_data({labels.size(), k}, std::move(v));
}

Tensor task_loss(TaskKind task, const Tensor& pred, const Tensor& target) {
    if (task == TaskKind::classify) {
        const Tensor ce = ops::sum(ops::mul(ops::log_softmax(pred), target));
        return ops::mul_scalar(ce, -1.0f / static_cast<float>(pred.dim(0)));
    }
    return ops::mean(ops::square(ops::sub(pred, target)));
}

struct Split {
    const SeriesBatch* inputs;
    Tensor features;  // cached, frozen only
    Tensor targets;   // regression targets or one-hot labels
    std::size_t rows_per_window;
};

Tensor split_targets(const Split& s, std::span<const std::size_t> windows) {
    return gather_windows(s.targets, windows, s.rows_per_window);
}

}  // namespace

ProbeResult probe_train(const BackboneCheckpoint& ckpt, const ProbeSpec& spec, const TaskData& data) {
    spec.validate();
    const BackboneConfig& cfg = ckpt.config;
    if (data.task != spec.task) throw ContractError("probe_train: task data and probe spec disagree on the task");
    data.validate(cfg.patch_len);
    const bool frozen = spec.freeze_backbone();

    ProbeResult result;
    result.digest_before = weights_digest(ckpt.weights.named_parameters());

    const std::size_t T = data.train_inputs.front().size();
    const std::size_t N = T / cfg.patch_len;
    const std::size_t rows = data.task == TaskKind::anomaly ? N : 1;
    const std::size_t in_dim = data.task == TaskKind::forecast ? N * cfg.d_model : cfg.d_model;
    std::size_t out_dim = 0;
    switch (data.task) {
        case TaskKind::forecast: out_dim = data.train_targets.front().size(); break;
        case TaskKind::classify: out_dim = data.n_classes; break;
        case TaskKind::anomaly: out_dim = cfg.patch_len; break;
    }

    auto make_split = [&](const SeriesBatch& inputs, const SeriesBatch& targets, const std::vector<std::size_t>& labels) {
        Split s{&inputs, {}, {}, rows};
        if (inputs.empty()) return s;
        s.targets = data.task == TaskKind::classify ? one_hot(labels, data.n_classes)
                                                    : task_targets(data.task, inputs, targets, cfg.patch_len);
        if (frozen) {
            NoGradGuard guard;
            s.features = task_features(ckpt.weights, cfg, data.task, inputs);
        }
        return s;
    };
    const Split train = make_split(data.train_inputs, data.train_targets, data.train_labels);
    const Split val = make_split(data.val_inputs, data.val_targets, data.val_labels);

    auto rng = make_rng(spec.seed, 0x9e0b);
    ProbeHead head;
    head.mode = spec.mode;
    if (spec.mode == ProbeMode::mlp) {
        head.mlp = make_mlp(in_dim, spec.hidden, out_dim, rng);
        head.dropout = spec.dropout;
    } else {
        head.linear = make_linear(in_dim, out_dim, rng);
    }

    std::optional<EncoderWeights> tuned;
    std::vector<Tensor> params;
    for (auto& [name, t] : head.parameters()) params.push_back(t);
    if (!frozen) {
        tuned = ckpt.weights.clone();
        tuned->set_requires_grad(true);
        for (auto& t : tuned->parameters()) params.push_back(t);
    }

    OptimConfig oc;
    oc.kind = OptimizerKind::adamw;
    oc.lr = static_cast<float>(spec.lr > 0.0 ? spec.lr : default_probe_lr(spec.task));
    oc.weight_decay = static_cast<float>(spec.weight_decay);
    oc.warmup_fraction = 0.0f;
    Optimizer opt(params, oc);

    const std::size_t n_train = data.train_inputs.size();
    const std::size_t per_epoch = (n_train + spec.batch_size - 1) / spec.batch_size;
    const std::size_t total = per_epoch * spec.epochs;

    auto features_of = [&](const Split& s, std::span<const std::size_t> windows) {
        if (frozen) return gather_windows(s.features, windows, s.rows_per_window);
        return task_features(*tuned, cfg, data.task, pick(*s.inputs, windows));
    };
    auto eval_loss = [&](const Split& s) {
        NoGradGuard guard;
        std::vector<std::size_t> all(s.inputs->size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return static_cast<double>(task_loss(data.task, head.apply(features_of(s, all)), split_targets(s, all)).item());
    };

    double best = std::numeric_limits<double>::infinity();
    ProbeHead best_head = head.clone();
    std::optional<EncoderWeights> best_tuned;
    if (tuned) best_tuned = tuned->clone();
    std::size_t since_best = 0, step = 0;
    std::vector<std::size_t> order(n_train);
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        auto shuffle_rng = make_rng(spec.seed, 0x5a000000ULL + epoch);
        for (std::size_t i = n_train; i > 1; --i) {
            std::uniform_int_distribution<std::size_t> u(0, i - 1);
            std::swap(order[i - 1], order[u(shuffle_rng)]);
        }
        double sum = 0.0;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t lo = b * spec.batch_size, hi = std::min(n_train, lo + spec.batch_size);
            const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
            const Tensor pred = head.apply(features_of(train, idx), &rng);
            const Tensor loss = task_loss(data.task, pred, split_targets(train, idx));
            check_finite(loss, "probe loss at step " + std::to_string(step));
            loss.backward();
            opt.step(one_cycle_lr(oc, step, total));
            sum += loss.item();
            ++step;
        }
        result.train_loss.push_back(sum / static_cast<double>(per_epoch));
        const double v = val.inputs->empty() ? result.train_loss.back() : eval_loss(val);
        result.val_loss.push_back(v);
        result.epochs_run = epoch + 1;
        if (v < best) {
            best = v;
            result.best_epoch = epoch;
            best_head = head.clone();
            if (tuned) best_tuned = tuned->clone();
            since_best = 0;
        } else if (spec.patience > 0 && ++since_best >= spec.patience) {
            break;
        }
    }

    result.head = std::move(best_head);
    for (auto& [name, t] : result.head.parameters()) t.set_requires_grad(false);
    if (best_tuned) {
        best_tuned->set_requires_grad(false);
        result.tuned = std::move(best_tuned);
    }
    result.digest_after = weights_digest(ckpt.weights.named_parameters());
    if (frozen && result.digest_after != result.digest_before)
        throw ContractError("probe_train: frozen backbone parameters changed during probing");
    return result;
}

const EncoderWeights& probe_encoder(const BackboneCheckpoint& ckpt, const ProbeResult& result) {
    return result.tuned ? *result.tuned : ckpt.weights;
}

ForecastScores forecast_metrics(std::span<const float> preds, std::span<const float> targets) {
    if (preds.empty()) throw ContractError("forecast_metrics: empty input");
    if (preds.size() != targets.size()) throw ShapeError("forecast_metrics: predictions and targets differ in size");
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = static_cast<double>(preds[i]) - targets[i];
        se += d * d;
        ae += std::abs(d);
    }
    const double n = static_cast<double>(preds.size());
    return {se / n, ae / n};
}

SeriesBatch forecast_predict(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                             const SeriesBatch& contexts) {
    window_length(contexts, "forecast contexts");
    NoGradGuard guard;
    const Tensor pred = head.apply(task_features(w, cfg, TaskKind::forecast, contexts));
    const std::size_t H = pred.dim(1);
    SeriesBatch out(contexts.size());
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        std::vector<float> ctx = contexts[i];
        const InstanceStats st = instance_normalize(ctx);
        out[i].assign(pred.data().begin() + static_cast<std::ptrdiff_t>(i * H),
                      pred.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * H));
        instance_denormalize(out[i], st);
    }
    return out;
}

double accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2) throw ShapeError("accuracy: logits must be [S, K]");
    const std::size_t S = logits.dim(0), K = logits.dim(1);
    if (labels.size() != S) throw ShapeError("accuracy: one label per row required");
    if (S == 0) throw ContractError("accuracy: empty input");
    const auto d = logits.data();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < S; ++i) {
        if (labels[i] >= K) throw ContractError("accuracy: label " + std::to_string(labels[i]) + " outside " + std::to_string(K) + " classes");
        const auto row = d.subspan(i * K, K);
        const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += arg == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(S);
}

double classify_head_eval(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                          const SeriesBatch& series, std::span<const std::size_t> labels, std::size_t n_classes) {
    window_length(series, "classification series");
    check_labels(labels, series.size(), n_classes, "classify_head_eval");
    NoGradGuard guard;
    return accuracy(head.apply(task_features(w, cfg, TaskKind::classify, series)), labels);
}

std::vector<double> anomaly_scores(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                                   std::span<const float> series, std::size_t window_len) {
    if (window_len == 0 || window_len % cfg.patch_len != 0)
        throw ShapeError("anomaly_scores: window length must be a positive multiple of patch_len");
    if (series.size() < window_len) throw ShapeError("anomaly_scores: series shorter than one window");
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + window_len <= series.size(); s += window_len) starts.push_back(s);
    if (starts.back() + window_len < series.size()) starts.push_back(series.size() - window_len);

    std::vector<double> scores(series.size(), 0.0);
    constexpr std::size_t kChunk = 64;
    NoGradGuard guard;
    for (std::size_t c0 = 0; c0 < starts.size(); c0 += kChunk) {
        const std::size_t c1 = std::min(starts.size(), c0 + kChunk);
        SeriesBatch windows;
        for (std::size_t k = c0; k < c1; ++k)
            windows.emplace_back(series.begin() + static_cast<std::ptrdiff_t>(starts[k]),
                                 series.begin() + static_cast<std::ptrdiff_t>(starts[k] + window_len));
        const Tensor recon = head.apply(task_features(w, cfg, TaskKind::anomaly, windows));
        const auto r = recon.data();
        for (std::size_t k = c0; k < c1; ++k) {
            std::vector<float> x = windows[k - c0];
            const InstanceStats st = instance_normalize(x);
            std::vector<float> y(r.begin() + static_cast<std::ptrdiff_t>((k - c0) * window_len),
                                 r.begin() + static_cast<std::ptrdiff_t>((k - c0 + 1) * window_len));
            instance_denormalize(y, st);
            const auto& raw = windows[k - c0];
            // The end-aligned window only fills points the regular grid missed.
            const std::size_t from = (k > 0 && starts[k] < starts[k - 1] + window_len) ? starts[k - 1] + window_len - starts[k] : 0;
            for (std::size_t i = from; i < window_len; ++i) {
                const double d = static_cast<double>(y[i]) - raw[i];
                scores[starts[k] + i] = d * d;
            }
        }
    }
    return scores;
}

double percentile_threshold(std::span<const double> train_scores, std::span<const double> test_scores,
                            double percentile) {
    if (!(percentile > 0.0 && percentile < 100.0)) throw ContractError("threshold: percentile must be in (0, 100)");
    std::vector<double> all(train_scores.begin(), train_scores.end());
    all.insert(all.end(), test_scores.begin(), test_scores.end());
    if (all.empty()) throw ContractError("threshold: no scores");
    std::sort(all.begin(), all.end());
    const double pos = (100.0 - percentile) / 100.0 * static_cast<double>(all.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, all.size() - 1);
    return all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]);
}

std::vector<std::uint8_t> threshold_by_percentile(std::span<const double> train_scores,
                                                  std::span<const double> test_scores, double percentile) {
    if (test_scores.empty()) throw ContractError("threshold: no test scores");
    const double thr = percentile_threshold(train_scores, test_scores, percentile);
    std::vector<std::uint8_t> out(test_scores.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = test_scores[i] >= thr ? 1 : 0;
    return out;
}

std::vector<std::uint8_t> point_adjust(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels) {
    if (preds.size() != labels.size()) throw ShapeError("point_adjust: predictions and labels differ in length");
    std::vector<std::uint8_t> out(preds.begin(), preds.end());
    std::size_t i = 0;
    while (i < labels.size()) {
        if (!labels[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        bool hit = false;
        while (j < labels.size() && labels[j]) hit |= preds[j++] != 0;
        if (hit) std::fill(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(j), 1);
        i = j;
    }
    return out;
}

F1Scores f1_score(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels) {
    if (preds.size() != labels.size()) throw ShapeError("f1_score: predictions and labels differ in length");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] != 0, l = labels[i] != 0;
        tp += p && l;
        fp += p && !l;
        fn += !p && l;
    }
    F1Scores s;
    if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

Tensor pooled_latents(const EncoderWeights& w, const BackboneConfig& cfg, const SeriesBatch& series) {
    window_length(series, "series");
    NoGradGuard guard;
    return task_features(w, cfg, TaskKind::classify, series).detach();
}

void export_embeddings(const BackboneCheckpoint& ckpt, const SeriesBatch& series, std::span<const std::size_t> labels,
                       const std::filesystem::path& stem) {
    if (!labels.empty() && labels.size() != series.size())
        throw ContractError("export_embeddings: one label per series required");
    const Tensor z = pooled_latents(ckpt.weights, ckpt.config, series);
    const std::size_t N = z.dim(0), D = z.dim(1);
    auto tsb = stem;
    tsb += ".tsb";
    save_tsb(tsb, z);
    auto csv = stem;
    csv += ".csv";
    std::ofstream os(csv, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("export_embeddings: cannot open " + csv.string());
    os << "index,label";
    for (std::size_t j = 0; j < D; ++j) os << ",e" << j;
    os << '\n';
    char buf[32];
    for (std::size_t i = 0; i < N; ++i) {
        os << i << ',';
        if (!labels.empty()) os << labels[i];
        for (std::size_t j = 0; j < D; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(z[i * D + j]));
            os << ',' << buf;
        }
        os << '\n';
    }
    if (!os) throw IoError("export_embeddings: write failed for " + csv.string());
}

std::string MetricRecord::key() const {
    return run_id + '|' + task + '|' + dataset + '|' + protocol + '|' + metric + '|' + seed;
}

std::string metric_csv_header() { return "run_id,objective,data_source,layers,task,dataset,protocol,metric,value,seed"; }

std::string to_csv_row(const MetricRecord& r) {
    for (const std::string* f : {&r.run_id, &r.objective, &r.data_source, &r.task, &r.dataset, &r.protocol, &r.metric, &r.seed})
        if (f->find_first_of(",\n\r") != std::string::npos)
            throw ContractError("metric field '" + *f + "' contains a separator");
    char value[40];
    std::snprintf(value, sizeof value, "%.17g", r.value);
    std::ostringstream os;
    os << r.run_id << ',' << r.objective << ',' << r.data_source << ',' << r.layers << ',' << r.task << ','
       << r.dataset << ',' << r.protocol << ',' << r.metric << ',' << value << ',' << r.seed;
    return os.str();
}

MetricRecord parse_csv_row(const std::string& line) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            f.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    f.push_back(std::move(cur));
    if (f.size() != 10) throw ParseError("metric row has " + std::to_string(f.size()) + " fields, expected 10");
    MetricRecord r;
    r.run_id = f[0];
    r.objective = f[1];
    r.data_source = f[2];
    try {
        std::size_t used = 0;
        r.layers = std::stoul(f[3], &used);
        if (used != f[3].size()) throw std::invalid_argument("trailing");
        r.value = std::stod(f[8], &used);
        if (used != f[8].size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
        throw ParseError("metric row has a non-numeric layers or value field");
    }
    r.task = f[4];
    r.dataset = f[5];
    r.protocol = f[6];
    r.metric = f[7];
    r.seed = f[9];
    return r;
}

namespace {

TaskData anomaly_task_data(const AnomalySet& set) {
    TaskData d;
    d.task = TaskKind::anomaly;
    if (set.train.empty() || set.test.size() != set.train.size())
        throw ShapeError("anomaly set '" + set.name + "': train and test need the same non-zero channel count");
    // The chronologically last fifth of every channel validates.
    for (const auto& ch : set.train) {
        SeriesBatch windows;
        for (std::size_t s = 0; s + set.window_len <= ch.size(); s += set.window_len)
            windows.emplace_back(ch.begin() + static_cast<std::ptrdiff_t>(s),
                                 ch.begin() + static_cast<std::ptrdiff_t>(s + set.window_len));
        if (windows.size() < 2) throw ContractError("anomaly set '" + set.name + "': train series needs at least 2 windows");
        const std::size_t n_val = std::max<std::size_t>(1, windows.size() / 5);
        d.train_inputs.insert(d.train_inputs.end(), windows.begin(), windows.end() - static_cast<std::ptrdiff_t>(n_val));
        d.val_inputs.insert(d.val_inputs.end(), windows.end() - static_cast<std::ptrdiff_t>(n_val), windows.end());
    }
    return d;
}

std::vector<double> channel_mean_scores(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                                        const SeriesBatch& channels, std::size_t window_len) {
    std::vector<double> total;
    for (const auto& ch : channels) {
        const auto s = anomaly_scores(w, cfg, head, ch, window_len);
        if (total.empty()) total.assign(s.size(), 0.0);
        if (s.size() != total.size()) throw ShapeError("anomaly channels differ in length");
        for (std::size_t i = 0; i < s.size(); ++i) total[i] += s[i];
    }
    for (auto& v : total) v /= static_cast<double>(channels.size());
    return total;
}

}  // namespace

EvalReport evaluate_checkpoint(const BackboneCheckpoint& ckpt, const EvalSuite& suite, ProbeMode mode,
                               const RunLabels& labels, std::size_t probe_epochs) {
    EvalReport report;
    const std::string protocol = to_string(mode);
    auto row = [&](TaskKind task, const std::string& dataset, const std::string& metric, double value) {
        MetricRecord r;
        r.run_id = labels.run_id;
        r.objective = labels.objective;
        r.data_source = labels.data_source;
        r.layers = ckpt.config.n_layers;
        r.task = to_string(task);
        r.dataset = dataset;
        r.protocol = protocol;
        r.metric = metric;
        r.value = value;
        r.seed = std::to_string(labels.seed);
        report.rows.push_back(std::move(r));
    };
    auto spec_for = [&](TaskKind task) {
        ProbeSpec s = ProbeSpec::for_task(task, mode);
        s.seed = labels.seed;
        if (probe_epochs > 0) s.epochs = probe_epochs;
        return s;
    };
    const std::uint64_t digest = weights_digest(ckpt.weights.named_parameters());
    report.trace.push_back("evaluate:" + protocol);

    for (const auto& set : suite.forecast) {
        const std::string name = set.name + "-h" + std::to_string(set.horizon);
        report.trace.push_back("forecast:" + name + ":probe");
        const ProbeResult probe = probe_train(ckpt, spec_for(TaskKind::forecast), set.data);
        report.trace.push_back("forecast:" + name + ":predict");
        const SeriesBatch preds = forecast_predict(probe_encoder(ckpt, probe), ckpt.config, probe.head, set.test_contexts);
        std::vector<float> p, t;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            p.insert(p.end(), preds[i].begin(), preds[i].end());
            t.insert(t.end(), set.test_targets[i].begin(), set.test_targets[i].end());
        }
        const ForecastScores m = forecast_metrics(p, t);
        row(TaskKind::forecast, name, "mse", m.mse);
        row(TaskKind::forecast, name, "mae", m.mae);
    }
    for (const auto& set : suite.classify) {
        report.trace.push_back("classify:" + set.name + ":probe");
        const ProbeResult probe = probe_train(ckpt, spec_for(TaskKind::classify), set.data);
        report.trace.push_back("classify:" + set.name + ":score");
        row(TaskKind::classify, set.name, "accuracy",
            classify_head_eval(probe_encoder(ckpt, probe), ckpt.config, probe.head, set.test_series, set.test_labels,
                               set.data.n_classes));
    }
    for (const auto& set : suite.anomaly) {
        report.trace.push_back("anomaly:" + set.name + ":probe");
        const ProbeResult probe = probe_train(ckpt, spec_for(TaskKind::anomaly), anomaly_task_data(set));
        report.trace.push_back("anomaly:" + set.name + ":score");
        const EncoderWeights& enc = probe_encoder(ckpt, probe);
        const auto train_scores = channel_mean_scores(enc, ckpt.config, probe.head, set.train, set.window_len);
        const auto test_scores = channel_mean_scores(enc, ckpt.config, probe.head, set.test, set.window_len);
        if (test_scores.size() != set.test_labels.size())
            throw ShapeError("anomaly set '" + set.name + "': one label per test time point required");
        const auto raw = threshold_by_percentile(train_scores, test_scores, set.percentile);
        const auto adjusted = point_adjust(raw, set.test_labels);
        const F1Scores pa = f1_score(adjusted, set.test_labels);
        row(TaskKind::anomaly, set.name, "f1", pa.f1);
        row(TaskKind::anomaly, set.name, "precision", pa.precision);
        row(TaskKind::anomaly, set.name, "recall", pa.recall);
        row(TaskKind::anomaly, set.name, "f1_unadjusted", f1_score(raw, set.test_labels).f1);
    }
    if (mode != ProbeMode::finetune && weights_digest(ckpt.weights.named_parameters()) != digest)
        throw ContractError("evaluate_checkpoint: frozen backbone changed during evaluation");
    report.trace.push_back("done");
    return report;
}

std::pair<SeriesBatch, SeriesBatch> forecast_windows(std::span<const float> series, std::size_t context,
                                                     std::size_t horizon, std::size_t stride) {
    if (context == 0 || horizon == 0 || stride == 0) throw ContractError("forecast_windows: lengths must be positive");
    std::pair<SeriesBatch, SeriesBatch> out;
    for (std::size_t s = 0; s + context + horizon <= series.size(); s += stride) {
        out.first.emplace_back(series.begin() + static_cast<std::ptrdiff_t>(s),
                               series.begin() + static_cast<std::ptrdiff_t>(s + context));
        out.second.emplace_back(series.begin() + static_cast<std::ptrdiff_t>(s + context),
                                series.begin() + static_cast<std::ptrdiff_t>(s + context + horizon));
    }
    return out;
}

ForecastSet make_forecast_set(std::string name, std::span<const float> series, std::size_t context,
                              std::size_t horizon, std::size_t stride, double train_frac, double val_frac) {
    if (!(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0))
        throw ContractError("make_forecast_set: split fractions must leave a test segment");
    const std::size_t n = series.size();
    const auto train_end = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n)));
    const auto val_end = static_cast<std::size_t>(std::floor((train_frac + val_frac) * static_cast<double>(n)));
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < train_end; ++i) mean += series[i];
    mean /= static_cast<double>(train_end);
    for (std::size_t i = 0; i < train_end; ++i) var += (series[i] - mean) * (series[i] - mean);
    const double sd = std::sqrt(var / static_cast<double>(train_end)) + 1e-12;
    std::vector<float> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = static_cast<float>((series[i] - mean) / sd);

    return make_forecast_set(std::move(name), SeriesBatch{std::move(z)}, train_end, val_end, context, horizon, stride);
}

ForecastSet make_forecast_set(std::string name, const SeriesBatch& channels, std::size_t train_end,
                              std::size_t val_end, std::size_t context, std::size_t horizon, std::size_t stride) {
    ForecastSet set;
    set.name = std::move(name);
    set.horizon = horizon;
    set.data.task = TaskKind::forecast;
    auto append = [](std::pair<SeriesBatch, SeriesBatch>&& w, SeriesBatch& in, SeriesBatch& out) {
        in.insert(in.end(), std::make_move_iterator(w.first.begin()), std::make_move_iterator(w.first.end()));
        out.insert(out.end(), std::make_move_iterator(w.second.begin()), std::make_move_iterator(w.second.end()));
    };
    for (const auto& ch : channels) {
        if (!(train_end <= val_end && val_end <= ch.size())) throw ContractError("make_forecast_set: split boundaries outside the series");
        const std::span<const float> all(ch);
        append(forecast_windows(all.subspan(0, train_end), context, horizon, stride), set.data.train_inputs, set.data.train_targets);
        append(forecast_windows(all.subspan(train_end, val_end - train_end), context, horizon, stride), set.data.val_inputs,
               set.data.val_targets);
        append(forecast_windows(all.subspan(val_end), context, horizon, stride), set.test_contexts, set.test_targets);
    }
    if (set.data.train_inputs.empty() || set.test_contexts.empty())
        throw ContractError("make_forecast_set: series too short for the requested context and horizon");
    return set;
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void add_sine(std::vector<float>& s, double cycles_per_window, double window, double phase, double amp) {
    for (std::size_t t = 0; t < s.size(); ++t)
        s[t] += static_cast<float>(amp * std::sin(kTwoPi * cycles_per_window * static_cast<double>(t) / window + phase));
}

void add_noise(std::vector<float>& s, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, sd);
    for (auto& v : s) v += static_cast<float>(n(rng));
}

}  // namespace

SeriesBatch toy_pretrain_corpus(const ToySuiteConfig& cfg, std::uint64_t seed) {
    auto rng = make_rng(seed, 0xc0);
    std::uniform_real_distribution<double> freq(1.0, 6.0), phase(0.0, kTwoPi), amp(0.5, 2.0);
    std::uniform_int_distribution<int> components(1, 3);
    const double W = static_cast<double>(cfg.window);
    SeriesBatch out;
    for (std::size_t i = 0; i < cfg.corpus_series; ++i) {
        std::vector<float> s(cfg.corpus_len, 0.0f);
        const int k = components(rng);
        for (int c = 0; c < k; ++c) add_sine(s, freq(rng), W, phase(rng), amp(rng));
        add_noise(s, cfg.noise, rng);
        for (std::size_t st = 0; st + cfg.window <= cfg.corpus_len; st += cfg.corpus_stride)
            out.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(st), s.begin() + static_cast<std::ptrdiff_t>(st + cfg.window));
    }
    return out;
}

ClassifySet toy_classification(const ToySuiteConfig& cfg, std::uint64_t seed) {
    auto rng = make_rng(seed, 0xc1a5);
    std::uniform_real_distribution<double> jitter(-0.25, 0.25), phase(0.0, kTwoPi), amp(0.5, 2.0), distract(1.0, 6.0);
    const double W = static_cast<double>(cfg.window);
    auto sample = [&](std::size_t k) {
        std::vector<float> s(cfg.window, 0.0f);
        add_sine(s, 1.5 + 1.25 * static_cast<double>(k) + jitter(rng), W, phase(rng), amp(rng));
        add_sine(s, distract(rng), W, phase(rng), 0.5 * amp(rng));
        add_noise(s, std::max(cfg.noise, 0.1), rng);
        return s;
    };
    ClassifySet set;
    set.name = "toy-sines";
    set.data.task = TaskKind::classify;
    set.data.n_classes = cfg.n_classes;
    for (std::size_t i = 0; i < cfg.per_class_train + cfg.per_class_val + cfg.per_class_test; ++i)
        for (std::size_t k = 0; k < cfg.n_classes; ++k) {
            auto s = sample(k);
            if (i < cfg.per_class_train) {
                set.data.train_inputs.push_back(std::move(s));
                set.data.train_labels.push_back(k);
            } else if (i < cfg.per_class_train + cfg.per_class_val) {
                set.data.val_inputs.push_back(std::move(s));
                set.data.val_labels.push_back(k);
            } else {
                set.test_series.push_back(std::move(s));
                set.test_labels.push_back(k);
            }
        }
    return set;
}

AnomalySet toy_anomaly(const ToySuiteConfig& cfg, std::uint64_t seed) {
    auto rng = make_rng(seed, 0xa70);
    std::uniform_real_distribution<double> phase(0.0, kTwoPi);
    const double W = static_cast<double>(cfg.window);
    const double f1 = 2.0 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double f2 = 5.0 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto base = [&](std::size_t n) {
        std::vector<float> s(n, 0.0f);
        add_sine(s, f1, W, phase(rng), 1.0);
        add_sine(s, f2, W, phase(rng), 0.5);
        add_noise(s, cfg.noise, rng);
        return s;
    };
    AnomalySet set;
    set.name = "toy-spikes";
    set.window_len = cfg.window;
    set.percentile = cfg.anomaly_percentile;
    set.train = {base(cfg.anomaly_train_len)};
    set.test = {base(cfg.anomaly_test_len)};
    set.test_labels.assign(cfg.anomaly_test_len, 0);
    const std::size_t slot = cfg.anomaly_test_len / std::max<std::size_t>(1, cfg.n_anomalies);
    std::uniform_int_distribution<std::size_t> len(1, 4);
    std::uniform_real_distribution<double> mag(1.5, 3.0);
    std::bernoulli_distribution sign(0.5);
    for (std::size_t a = 0; a < cfg.n_anomalies && slot > 8; ++a) {
        const std::size_t L = len(rng);
        const std::size_t at = a * slot + std::uniform_int_distribution<std::size_t>(2, slot - L - 2)(rng);
        const double m = (sign(rng) ? 1.0 : -1.0) * mag(rng);
        for (std::size_t i = at; i < at + L; ++i) {
            set.test[0][i] += static_cast<float>(m);
            set.test_labels[i] = 1;
        }
    }
    return set;
}

ForecastSet toy_forecast(const ToySuiteConfig& cfg, std::uint64_t seed) {
    auto rng = make_rng(seed, 0xf0);
    std::normal_distribution<double> eps(0.0, 1.0);
    std::vector<float> s(cfg.forecast_len + 100);
    double x1 = 0.0, x2 = 0.0;
    for (auto& v : s) {
        const double x = 1.6 * x1 - 0.8 * x2 + eps(rng);
        x2 = x1;
        x1 = x;
        v = static_cast<float>(x);
    }
    s.erase(s.begin(), s.begin() + 100);  // burn-in
    return make_forecast_set("toy-ar2", s, cfg.window, cfg.forecast_horizon, cfg.forecast_stride);
}

EvalSuite toy_suite(const ToySuiteConfig& cfg, std::uint64_t seed) {
    EvalSuite suite;
    suite.forecast.push_back(toy_forecast(cfg, seed));
    suite.classify.push_back(toy_classification(cfg, seed));
    suite.anomaly.push_back(toy_anomaly(cfg, seed));
    return suite;
}

}  // namespace tsrep
