#pragma once

// Numeric kernels shared by the probes.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ia::stats {

inline constexpr double kDefaultKlFloor = 1e-12;
inline constexpr double kCosineNormEpsilon = 1e-30;

// Natural-log KL(p_tilde || p) with p floored at `floor`; terms where
// p_tilde is 0 contribute nothing.
double kl_divergence(std::span<const double> p_tilde, std::span<const double> p, double floor = kDefaultKlFloor);

// Empty when either norm is below kCosineNormEpsilon.
std::optional<double> cosine_similarity_checked(std::span<const float> u, std::span<const float> v);
std::optional<double> cosine_similarity_checked(std::span<const double> u, std::span<const double> v);

// Zero for degenerate (near-zero norm) inputs.
double cosine_similarity(std::span<const float> u, std::span<const float> v);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

// Arithmetic mean and population standard deviation (divisor n).
MeanStd mean_std(std::span<const double> values);

struct F1Normalizer {
    bool lowercase = true;
    bool strip_punctuation = true;
};

// Lowercase, split on whitespace, strip leading/trailing punctuation from each
// token; tokens that become empty are dropped. Articles are kept.
std::vector<std::string> normalize_answer(std::string_view text, const F1Normalizer &norm = {});

// Multiset token-overlap F1 in [0, 1]; 0 when either side has no tokens.
double token_f1(std::string_view predicted, std::string_view gold, const F1Normalizer &norm = {});

// Lowercases ASCII, Latin-1, Latin Extended-A, Greek and Cyrillic letters in
// UTF-8 text; other bytes pass through unchanged.
std::string utf8_lowercase(std::string_view text);

enum class Direction { greater, less };

std::string to_string(Direction d);

struct WelchResult {
    double t_statistic = 0.0;
    double degrees_of_freedom = 0.0;
    double p_value_one_sided = 0.5;
    Direction direction = Direction::greater;
    double mean_a = 0.0;
    double mean_b = 0.0;
    // Both samples had zero variance; t is 0 or infinite and dof is n_a + n_b - 2.
    bool degenerate = false;

    bool rejects_null(double alpha) const { return p_value_one_sided < alpha; }
};

// One-sided Welch's t-test. `greater` tests mean(a) > mean(b).
WelchResult welch_one_sided(std::span<const double> a, std::span<const double> b,
                            Direction direction = Direction::greater);

// Regularised incomplete beta I_x(a, b) by continued fraction (modified
// Lentz). `y` must equal 1 - x; passing it separately avoids cancellation
// when x is close to 1.
double regularized_incomplete_beta(double a, double b, double x, double y);
inline double regularized_incomplete_beta(double a, double b, double x) {
    return regularized_incomplete_beta(a, b, x, 1.0 - x);
}

// Student's t survival function P(T > t) and CDF P(T <= t) for dof > 0.
double student_t_sf(double t, double dof);
double student_t_cdf(double t, double dof);

} // namespace ia::stats
