#pragma once

// Gaussian-process synthetic corpus: random kernel compositions over a fixed
// atom bank, Cholesky sampling, and linear-coregionalization mixing.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace tsrep {

enum class KernelFamily { exp_sine_squared, rbf, rational_quadratic, dot_product, white_noise, constant };

std::string to_string(KernelFamily family);

// Periodicity is in samples and is rescaled by the grid spacing at
// evaluation; length scales act on the grid normalized to [0, 1].
struct KernelAtom {
    KernelFamily family = KernelFamily::rbf;
    double length_scale = 1.0;  // rbf, rational_quadratic, exp_sine_squared
    double periodicity = 1.0;   // exp_sine_squared, samples
    double alpha = 1.0;         // rational_quadratic
    double sigma0 = 0.0;        // dot_product (may be 0)
    double noise_level = 0.1;   // white_noise
    double value = 1.0;         // constant

    void validate() const;
    std::string describe() const;
    // k(x, y) at normalized positions; `same` marks the diagonal.
    double operator()(double x, double y, bool same, std::size_t grid_len) const;
};

enum class KernelOp { add, multiply };

struct KernelComposition {
    std::vector<KernelAtom> atoms;
    std::vector<KernelOp> ops;  // atoms.size() - 1 entries, folded left to right

    void validate() const;
    std::string describe() const;
};

const std::vector<KernelAtom>& default_kernel_bank();  // 33 atoms

// K ~ U{1..max_kernels}, atoms with replacement, Bernoulli(1/2) operators.
KernelComposition sample_kernel_composition(std::mt19937_64& rng, const std::vector<KernelAtom>& bank,
                                            std::size_t max_kernels = 5);
KernelComposition sample_kernel_composition(std::mt19937_64& rng);

// t_i = i / (T - 1); no jitter added.
Eigen::MatrixXd gram_matrix(const KernelComposition& comp, std::size_t grid_len);

// x = L xi, L lower Cholesky of gram + jitter I; jitter escalates 1e-6 -> 1e-4.
std::vector<double> sample_gp(const Eigen::MatrixXd& gram, std::mt19937_64& rng);

struct LcmConfig {
    std::size_t n_channels = 160;
    double weibull_shape = 1.5;
    double weibull_scale = 4.0;
    std::size_t latent_min = 1;
    std::size_t latent_max = 10;
    double alpha_lo = 0.1;
    double alpha_hi = 1.0;
    std::size_t length = 2500;
    std::size_t n_series = 4000;
    std::size_t max_kernels = 5;
    std::size_t shard_size = 128;  // series per shard file

    void validate() const;
    std::string serialize() const;  // stable key=value text, hashed into the manifest
};

struct LcmSample {
    std::vector<std::vector<double>> channels;  // [C][T]
    std::vector<std::vector<double>> weights;   // [C][J], rows on the simplex
    std::size_t latent_count = 0;
    double alpha = 0.0;
};

std::size_t sample_latent_count(const LcmConfig& cfg, std::mt19937_64& rng);
std::vector<double> sample_dirichlet(double alpha, std::size_t k, std::mt19937_64& rng);
LcmSample sample_multivariate_lcm(const LcmConfig& cfg, std::mt19937_64& rng);

// One standardized univariate GP series of cfg.length samples.
std::vector<double> sample_univariate(const LcmConfig& cfg, std::mt19937_64& rng);

struct ShardEntry {
    std::string path;  // relative to the manifest directory
    std::size_t count = 0;
};

struct CorpusManifest {
    std::size_t n_series = 0;
    std::size_t length = 0;
    std::size_t channels = 0;
    bool univariate = true;
    std::uint64_t seed = 0;
    std::string config_digest;
    std::vector<ShardEntry> shards;

    std::string serialize() const;
    static CorpusManifest parse(const std::string& text);
};

// Series i uses the RNG stream derive_seed(seed, i); shards hold
// [count, channels, length] float tensors. The manifest is written last.
CorpusManifest generate_corpus(const LcmConfig& cfg, bool univariate, const std::filesystem::path& out,
                               std::size_t n_workers, std::uint64_t seed);

CorpusManifest read_manifest(const std::filesystem::path& manifest_path);

// Every channel of every series as one univariate series, in shard order.
std::vector<std::vector<float>> load_corpus_series(const std::filesystem::path& manifest_path);

inline constexpr const char* kManifestName = "manifest.txt";

}  // namespace tsrep
