#pragma once

// Sketched isotropic Gaussian regularizer: random unit projections of an
// embedding batch, each tested against N(0, 1) through the weighted
// Epps-Pulley distance between characteristic functions.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tsrep/tensor.hpp"

namespace tsrep {

struct EppsPulleyConfig {
    std::size_t n_projections = 1024;
    std::size_t grid_points = 17;  // evenly spaced on [-grid_max, grid_max]
    double grid_max = 5.0;
    // Per-dimension batch standardization (eps 1e-5) before projecting.
    bool standardize = false;
    std::uint64_t seed = 0x5164;  // combined with the training step

    void validate() const;
    std::vector<double> grid() const;
};

struct ProjectionSet {
    std::size_t dim = 0;
    std::vector<float> directions;  // [count, dim], unit rows

    std::size_t count() const { return dim ? directions.size() / dim : 0; }
    std::span<const float> row(std::size_t i) const { return {directions.data() + i * dim, dim}; }
};

ProjectionSet sample_projections(std::size_t d_model, const EppsPulleyConfig& cfg, std::uint64_t step);

// (1/N) sum (cos(t x), sin(t x))
std::pair<double, double> empirical_cf(std::span<const float> projected, double t);

// Trapezoid weights of the configured grid.
std::vector<double> trapezoid_weights(const EppsPulleyConfig& cfg);

// N times the weighted squared CF distance of one projected sample.
double epps_pulley_residual(std::span<const double> projected, const EppsPulleyConfig& cfg);

// Differentiable statistic on embeddings [N, D]: mean residual over the
// projections drawn for `step`.
Tensor epps_pulley_statistic(const Tensor& embeddings, const EppsPulleyConfig& cfg, std::uint64_t step);

// Same value without recording, plus the per-projection residuals.
std::vector<double> epps_pulley_residuals(const Tensor& embeddings, const EppsPulleyConfig& cfg, std::uint64_t step);

struct SpectrumDiagnostics {
    std::vector<double> eigenvalues;  // covariance spectrum, descending
    double effective_rank = 0.0;      // exp(entropy of normalized spectrum)
    double mean_std = 0.0;            // mean per-dimension standard deviation
};

SpectrumDiagnostics covariance_spectrum(const Tensor& embeddings);

}  // namespace tsrep
