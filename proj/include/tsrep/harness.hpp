#pragma once

// Run configuration, dataset ingestion, and experiment orchestration with
// resumable, append-via-rename outputs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tsrep/backbone.hpp"
#include "tsrep/eval.hpp"
#include "tsrep/objectives.hpp"
#include "tsrep/synthgen.hpp"

namespace tsrep {

enum class DataSource { real, synthetic, hybrid };
std::string to_string(DataSource source);
DataSource parse_data_source(const std::string& name);

struct DataConfig {
    std::filesystem::path root = "data";  // TSB_DATA_ROOT wins when set
    std::string synthetic = "toy";        // "toy" or a corpus manifest under root
    std::string real;                     // dataset or corpus manifest under root
    std::string hybrid_mix = "proportional";
    std::size_t window = 128;
    std::size_t stride = 32;
    std::size_t toy_series = 500;
    std::size_t toy_length = 512;
    std::uint64_t corpus_seed = 7;
};

struct EvalConfig {
    std::string suite = "toy";  // toy | none
    std::vector<TaskKind> tasks = {TaskKind::forecast, TaskKind::classify, TaskKind::anomaly};
    ProbeMode protocol = ProbeMode::linear;
    std::size_t probe_epochs = 0;  // 0: task defaults
    std::string forecast_data;    // ingested dataset manifest under the data root
    std::size_t context_len = 336;
    std::vector<std::size_t> horizons = {96, 192, 336, 720};
    std::size_t forecast_stride = 1;
    std::string anomaly_data;  // ingested dataset with a label column
    double anomaly_percentile = 1.0;
    std::size_t anomaly_window = 128;
};

// Optimizer overrides; unset fields keep default_optim(objective).
struct OptimOverrides {
    std::optional<OptimizerKind> kind;
    std::optional<float> lr, weight_decay, momentum, warmup_fraction, clip_norm;
    OptimConfig resolve(Objective objective) const;
};

struct RunConfig {
    std::string run_id = "run";
    Objective objective = Objective::none;
    DataSource data_source = DataSource::synthetic;
    std::vector<std::uint64_t> seeds = {2003, 123, 456, 789, 1337};
    std::filesystem::path output_root = "runs";
    std::size_t workers = 1;  // sweep children in parallel
    BackboneConfig backbone;
    ObjectiveConfig objective_cfg;
    PretrainConfig pretrain;  // seed and out_dir are set per run
    OptimOverrides optim;
    DataConfig data;
    EvalConfig eval;

    // Sections [run] [backbone] [pretrain] [objective] [sigreg] [augment]
    // [data] [eval]; every key is optional, unknown keys raise ConfigError.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
    std::string serialize() const;
    // One "section.key=value" assignment with the parser's rules.
    void set(const std::string& assignment);
    void validate() const;
    std::filesystem::path data_root() const;
};

// Keys accepted in each section, in serialization order.
std::vector<std::pair<std::string, std::vector<std::string>>> config_schema();

struct CsvSchema {
    std::optional<std::string> timestamp_column;  // dropped
    std::optional<std::string> label_column;      // kept as per-row labels
    bool header = true;
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    std::size_t shard_rows = 65536;
};

struct DatasetShard {
    std::string path;
    std::size_t rows = 0;
};

struct DatasetManifest {
    std::string name;
    std::vector<std::string> columns;
    std::vector<DatasetShard> shards;  // [rows, channels] standardized values
    std::string labels_path;           // empty without a label column
    std::size_t rows = 0;
    std::size_t channels = 0;
    std::size_t train_end = 0;  // rows [0, train_end) train, [train_end, val_end) val, rest test
    std::size_t val_end = 0;
    std::vector<double> mean, stddev;  // train-split statistics per channel
    std::string checksum;              // over shard and label bytes

    std::string serialize() const;
    static DatasetManifest parse(const std::string& text);
};

inline constexpr const char* kDatasetManifestName = "dataset.txt";

// Parses, standardizes with train-split statistics, writes shards and
// <out>/dataset.txt. ParseError messages carry the 1-based line number.
DatasetManifest ingest_csv(const std::filesystem::path& csv, const CsvSchema& schema, const std::filesystem::path& out);

struct Dataset {
    DatasetManifest manifest;
    SeriesBatch channels;  // standardized, full length
    std::vector<std::uint8_t> labels;
};

// Verifies the checksum before returning.
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Pre-training windows for a config's data source.
SeriesBatch load_pretrain_corpus(const RunConfig& cfg);

// Evaluation suite for one seed, restricted to `tasks`.
EvalSuite build_suite(const RunConfig& cfg, std::uint64_t seed, const std::vector<TaskKind>& tasks);

struct RunResult {
    std::filesystem::path dir;
    std::filesystem::path metrics_csv;
    std::vector<MetricRecord> rows;  // file contents after the run
    std::size_t evaluated = 0;       // (seed, task) pairs computed now
    std::size_t skipped = 0;         // pairs already complete
    std::vector<std::string> eval_trace;
};

// For each seed: pre-train (or take the random-init baseline for
// objective none), then evaluate each task on the best checkpoint. Per-seed
// rows plus mean/std rows land in <output_root>/<run_id>/metrics.csv.
RunResult run_experiment(const RunConfig& cfg);

enum class SweepDimension { layers, data_source, objective };
std::string to_string(SweepDimension dim);
SweepDimension parse_sweep_dimension(const std::string& name);

struct SweepFailure {
    std::string value;
    std::string message;
};

struct SweepResult {
    std::vector<std::string> run_ids;
    std::size_t child_runs = 0;  // values x seeds
    std::vector<MetricRecord> rows;
    std::filesystem::path combined_csv;
    std::vector<SweepFailure> failures;
};

RunConfig sweep_child(const RunConfig& base, SweepDimension dim, const std::string& value);
SweepResult sweep(SweepDimension dim, const std::vector<std::string>& values, const RunConfig& base);

// Mean and sample standard deviation over numeric-seed rows, grouped by
// everything except seed and value.
std::vector<MetricRecord> aggregate_rows(const std::vector<MetricRecord>& rows);

std::vector<MetricRecord> read_metrics_csv(const std::filesystem::path& path);
// Writes header plus rows to a temporary file and renames it into place.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRecord>& rows);

// Process exit code for an exception escaping a command: 2 configuration,
// 3 data, 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace tsrep
