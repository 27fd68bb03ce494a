#pragma once

// View construction for the latent-alignment objectives: DWT teacher/student
// pairs, the auxiliary stochastic transforms, and the physics/geometry
// ablation families. All operate on batches of univariate series.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsrep/dwt.hpp"

namespace tsrep {

using SeriesBatch = std::vector<std::vector<float>>;

enum class TransformFamily {
    jitter,
    amp_scale,
    channel_dropout,
    fft_mask,
    galilean,
    drift,
    rotation,
    lorentz,
    polar,
    tanh_compress,
    moebius,
};

std::string to_string(TransformFamily family);
TransformFamily parse_transform_family(const std::string& name);
bool is_stochastic(TransformFamily family);

struct MagnitudeRange {
    float lo;
    float hi;
    bool open;  // bounds excluded
};

MagnitudeRange legal_range(TransformFamily family);

struct TransformSpec {
    TransformFamily family = TransformFamily::jitter;
    float magnitude = 0.0f;
    void validate() const;
};

// Defaults applied on top of the clean view for Le-JEPA's global view.
std::vector<TransformSpec> default_stochastic_suite();

struct ViewProvenance {
    std::vector<float> teacher_threshold;
    std::vector<float> student_noise;
    std::vector<std::size_t> student_zeroed;
    std::vector<TransformSpec> extra;
};

struct ViewPair {
    SeriesBatch teacher;
    SeriesBatch student;
    ViewProvenance provenance;
};

// Per-element randomness comes from streams derived from (seed, index).
ViewPair make_dwt_views(const SeriesBatch& batch, const DwtConfig& cfg, std::uint64_t seed);

// jitter: + N(0, m^2); amp_scale: x * U[1-m, 1+m] per series; channel_dropout:
// each series zeroed with probability m; fft_mask: round(m * bins) rFFT bins
// zeroed then inverse-transformed.
SeriesBatch stochastic_suite(const SeriesBatch& batch, const TransformSpec& spec, std::mt19937_64& rng);

// Deterministic warp of one series; t_norm = i / (T - 1).
std::vector<float> physics_suite(std::span<const float> series, const TransformSpec& spec);

// Dispatches to the stochastic or physics family.
SeriesBatch apply_transform(const SeriesBatch& batch, const TransformSpec& spec, std::mt19937_64& rng);

// Linear interpolation of (xs, ys) at `at`, xs ascending, clamped at the ends.
double interpolate(std::span<const double> xs, std::span<const double> ys, double at);

// Exposed for tests.
std::vector<float> fft_mask(std::span<const float> series, std::span<const std::size_t> zero_bins);

}  // namespace tsrep
