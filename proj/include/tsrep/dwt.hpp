#pragma once

// Multi-level Daubechies DWT with half-sample symmetric extension and the
// teacher/student view construction built on it.

#include <random>
#include <span>
#include <string>
#include <vector>

namespace tsrep {

struct Wavelet {
    int order = 0;  // dbN has 2N taps
    std::vector<double> dec_lo, dec_hi, rec_lo, rec_hi;
    std::size_t length() const { return dec_lo.size(); }
};

// db1 (Haar) through db8.
const Wavelet& daubechies(int order);

struct DwtConfig {
    int order = 4;
    int level = 3;
    float teacher_sigma = 0.3f;
    float noise_lo = 0.1f;
    float noise_hi = 0.3f;
    float zero_out_fraction = 0.0f;
    // Also soft-threshold the noised student details.
    bool student_threshold = false;

    void validate() const;
    void validate_for(std::size_t length) const;
};

// details[0] is the finest band (level 1); details.back() pairs with approx.
struct Pyramid {
    int order = 0;
    std::vector<double> approx;
    std::vector<std::vector<double>> details;
    std::vector<std::size_t> lengths;  // input length at each level; lengths[0] = T

    std::size_t levels() const { return details.size(); }
    std::size_t coefficient_count() const;
};

Pyramid dwt_forward(std::span<const float> signal, int order, int level);
Pyramid dwt_forward(std::span<const float> signal, const DwtConfig& cfg);
std::vector<float> dwt_inverse(const Pyramid& pyramid);

// Single-level analysis and synthesis; out length floor((n + F - 1) / 2).
void dwt_step(std::span<const double> x, const Wavelet& w, std::vector<double>& approx, std::vector<double>& detail);
std::vector<double> idwt_step(std::span<const double> approx, std::span<const double> detail, const Wavelet& w,
                              std::size_t out_len);

float soft_threshold(float x, float tau);
double soft_threshold(double x, double tau);

double median_abs(std::span<const double> values);

// tau = teacher_sigma * median(|finest detail|) / 0.6745
double universal_threshold(const Pyramid& pyramid, float sigma);

struct StudentDraw {
    float noise_amplitude = 0.0f;
    std::size_t zeroed = 0;
};

std::vector<float> teacher_view(std::span<const float> signal, const DwtConfig& cfg);
std::vector<float> student_view(std::span<const float> signal, const DwtConfig& cfg, std::mt19937_64& rng,
                                StudentDraw* draw = nullptr);

}  // namespace tsrep
