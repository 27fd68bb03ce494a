#pragma once

// Downstream evaluation: probe heads on a frozen (or fine-tuned) encoder,
// task metrics, and the toy task suite used for desk-scale comparisons.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsrep/backbone.hpp"
#include "tsrep/objectives.hpp"
#include "tsrep/tensor.hpp"

namespace tsrep {

enum class ProbeMode { linear, mlp, finetune };
enum class TaskKind { forecast, classify, anomaly };

std::string to_string(ProbeMode mode);
std::string to_string(TaskKind task);
ProbeMode parse_probe_mode(const std::string& name);
TaskKind parse_task(const std::string& name);

// Learning rate used when ProbeSpec::lr is 0.
double default_probe_lr(TaskKind task);

struct ProbeSpec {
    ProbeMode mode = ProbeMode::linear;
    TaskKind task = TaskKind::classify;
    std::size_t epochs = 20;
    std::size_t hidden = 512;  // mlp head
    float dropout = 0.2f;      // mlp head
    std::size_t batch_size = 32;
    double lr = 0.0;           // 0: default_probe_lr(task)
    double weight_decay = 0.0;
    std::size_t patience = 0;  // 0: never stop early
    std::uint64_t seed = 2003;

    bool freeze_backbone() const { return mode != ProbeMode::finetune; }
    void validate() const;
    // Task defaults: anomaly runs 10 epochs with patience 3.
    static ProbeSpec for_task(TaskKind task, ProbeMode mode = ProbeMode::linear);
};

struct ProbeHead {
    ProbeMode mode = ProbeMode::linear;
    Linear linear;  // linear and finetune
    Mlp mlp;        // mlp
    float dropout = 0.0f;

    NamedTensors parameters() const;
    ProbeHead clone() const;
    // x is [S, F]; dropout only when an rng is supplied.
    Tensor apply(const Tensor& x, std::mt19937_64* rng = nullptr) const;
};

// Raw, un-normalized windows of one length. forecast: targets are the
// following horizon; classify: labels; anomaly: the windows reconstruct
// themselves and carry no targets.
struct TaskData {
    TaskKind task = TaskKind::classify;
    SeriesBatch train_inputs, val_inputs;
    SeriesBatch train_targets, val_targets;
    std::vector<std::size_t> train_labels, val_labels;
    std::size_t n_classes = 0;

    void validate(std::size_t patch_len) const;
};

// Head input features of instance-normalized windows: flattened patch
// latents (forecast), patch-mean latents (classify), or one row per patch
// (anomaly). Returns [S, F].
Tensor task_features(const EncoderWeights& w, const BackboneConfig& cfg, TaskKind task, const SeriesBatch& windows);

// Regression targets in the same normalized space the head predicts in.
Tensor task_targets(TaskKind task, const SeriesBatch& inputs, const SeriesBatch& targets, std::size_t patch_len);

struct ProbeResult {
    ProbeHead head;
    std::optional<EncoderWeights> tuned;  // finetune only
    std::vector<double> train_loss, val_loss;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    std::uint64_t digest_before = 0;
    std::uint64_t digest_after = 0;
};

// With a frozen backbone the encoder digest is compared before and after
// training and a mismatch raises; the best-validation head is returned.
ProbeResult probe_train(const BackboneCheckpoint& ckpt, const ProbeSpec& spec, const TaskData& data);

// Encoder a probe result evaluates with: the fine-tuned copy when present.
const EncoderWeights& probe_encoder(const BackboneCheckpoint& ckpt, const ProbeResult& result);

struct ForecastScores {
    double mse = 0.0;
    double mae = 0.0;
};
ForecastScores forecast_metrics(std::span<const float> preds, std::span<const float> targets);

// Forecasts in the original scale, one row per context window.
SeriesBatch forecast_predict(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                             const SeriesBatch& contexts);

double accuracy(const Tensor& logits, std::span<const std::size_t> labels);
double classify_head_eval(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                          const SeriesBatch& series, std::span<const std::size_t> labels, std::size_t n_classes);

// Squared reconstruction error per time point. The series is cut into
// windows of window_len; a trailing remainder is scored by one extra window
// aligned to the end.
std::vector<double> anomaly_scores(const EncoderWeights& w, const BackboneConfig& cfg, const ProbeHead& head,
                                   std::span<const float> series, std::size_t window_len);

// Flags test scores >= the (100 - percentile) quantile of train ++ test
// (linear interpolation between order statistics).
std::vector<std::uint8_t> threshold_by_percentile(std::span<const double> train_scores,
                                                  std::span<const double> test_scores, double percentile);
double percentile_threshold(std::span<const double> train_scores, std::span<const double> test_scores,
                            double percentile);

std::vector<std::uint8_t> point_adjust(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels);

struct F1Scores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};
F1Scores f1_score(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> labels);

// Mean-pooled encoder latents [N, D] and labels, as <stem>.tsb and <stem>.csv.
Tensor pooled_latents(const EncoderWeights& w, const BackboneConfig& cfg, const SeriesBatch& series);
void export_embeddings(const BackboneCheckpoint& ckpt, const SeriesBatch& series, std::span<const std::size_t> labels,
                       const std::filesystem::path& stem);

// One evaluation result row.
struct MetricRecord {
    std::string run_id;
    std::string objective;
    std::string data_source;
    std::size_t layers = 0;
    std::string task;
    std::string dataset;
    std::string protocol;
    std::string metric;
    double value = 0.0;
    std::string seed;  // numeric seed, or "mean" / "std" for aggregates

    std::string key() const;  // run_id|task|dataset|protocol|metric|seed
    bool operator==(const MetricRecord&) const = default;
};

std::string metric_csv_header();
std::string to_csv_row(const MetricRecord& r);
MetricRecord parse_csv_row(const std::string& line);

struct ForecastSet {
    std::string name;
    std::size_t horizon = 0;
    TaskData data;  // train/val windows
    SeriesBatch test_contexts, test_targets;
};

struct ClassifySet {
    std::string name;
    TaskData data;
    SeriesBatch test_series;
    std::vector<std::size_t> test_labels;
};

struct AnomalySet {
    std::string name;
    std::size_t window_len = 0;
    double percentile = 1.0;
    // One row per channel; a time point's score is the channel mean.
    SeriesBatch train;  // anomaly-free
    SeriesBatch test;
    std::vector<std::uint8_t> test_labels;
};

struct EvalSuite {
    std::vector<ForecastSet> forecast;
    std::vector<ClassifySet> classify;
    std::vector<AnomalySet> anomaly;
};

// Labels attached to every record an evaluation emits.
struct RunLabels {
    std::string run_id;
    std::string objective = "none";
    std::string data_source = "none";
    std::uint64_t seed = 0;
};

struct EvalReport {
    std::vector<MetricRecord> rows;
    // Stage names in execution order; identical for any checkpoint given
    // the same suite and protocol.
    std::vector<std::string> trace;
};

// The single evaluation path shared by baseline and pre-trained
// checkpoints.
EvalReport evaluate_checkpoint(const BackboneCheckpoint& ckpt, const EvalSuite& suite, ProbeMode mode,
                               const RunLabels& labels, std::size_t probe_epochs = 0);

// Windows of length context + horizon taken at `stride` inside one split.
std::pair<SeriesBatch, SeriesBatch> forecast_windows(std::span<const float> series, std::size_t context,
                                                     std::size_t horizon, std::size_t stride);

// Chronological train / val / test split of one series for forecasting.
ForecastSet make_forecast_set(std::string name, std::span<const float> series, std::size_t context,
                              std::size_t horizon, std::size_t stride, double train_frac = 0.7,
                              double val_frac = 0.1);
// Channel-pooled windows over already standardized channels with explicit
// split boundaries.
ForecastSet make_forecast_set(std::string name, const SeriesBatch& channels, std::size_t train_end,
                              std::size_t val_end, std::size_t context, std::size_t horizon, std::size_t stride);

struct ToySuiteConfig {
    std::size_t window = 128;
    // classification
    std::size_t n_classes = 4;
    std::size_t per_class_train = 64;
    std::size_t per_class_val = 16;
    std::size_t per_class_test = 64;
    // anomaly
    std::size_t anomaly_train_len = 4096;
    std::size_t anomaly_test_len = 4096;
    std::size_t n_anomalies = 12;
    double anomaly_percentile = 1.0;
    // forecasting
    std::size_t forecast_len = 3000;
    std::size_t forecast_horizon = 32;
    std::size_t forecast_stride = 16;
    // pre-training corpus
    std::size_t corpus_series = 500;
    std::size_t corpus_len = 512;
    std::size_t corpus_stride = 32;
    double noise = 0.05;
};

// Sine-mixture pre-training windows with 1..3 components per series.
SeriesBatch toy_pretrain_corpus(const ToySuiteConfig& cfg, std::uint64_t seed);
ClassifySet toy_classification(const ToySuiteConfig& cfg, std::uint64_t seed);
AnomalySet toy_anomaly(const ToySuiteConfig& cfg, std::uint64_t seed);
ForecastSet toy_forecast(const ToySuiteConfig& cfg, std::uint64_t seed);
EvalSuite toy_suite(const ToySuiteConfig& cfg, std::uint64_t seed);

}  // namespace tsrep
