#include "ia/stats.hpp"

#include "ia/error.hpp"

#include <cmath>
#include <limits>
#include <map>

namespace ia::stats {

double kl_divergence(std::span<const double> p_tilde, std::span<const double> p, double floor) {
    if (p_tilde.size() != p.size()) {
        throw ShapeError("kl_divergence: lengths " + std::to_string(p_tilde.size()) + " and " +
                         std::to_string(p.size()));
    }
    if (!(floor > 0.0)) throw ShapeError("kl_divergence: floor must be positive");
    double d = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p_tilde[k] <= 0.0) continue;
        // when the inputs are identical every term is log(1) = 0 exactly
        d += p_tilde[k] * std::log(p_tilde[k] / std::max(p[k], floor));
    }
    return std::max(d, 0.0);
}

namespace {

template <typename T> std::optional<double> cosine_impl(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double a = u[i];
        const double b = v[i];
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    const double norm_u = std::sqrt(nu);
    const double norm_v = std::sqrt(nv);
    if (norm_u < kCosineNormEpsilon || norm_v < kCosineNormEpsilon) return std::nullopt;
    return std::clamp(dot / (norm_u * norm_v), -1.0, 1.0);
}

} // namespace

std::optional<double> cosine_similarity_checked(std::span<const float> u, std::span<const float> v) {
    return cosine_impl(u, v);
}
std::optional<double> cosine_similarity_checked(std::span<const double> u, std::span<const double> v) {
    return cosine_impl(u, v);
}
double cosine_similarity(std::span<const float> u, std::span<const float> v) {
    return cosine_impl(u, v).value_or(0.0);
}
double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    return cosine_impl(u, v).value_or(0.0);
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) throw ShapeError("mean_std of an empty list");
    const double n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double x : values) sum += x;
    MeanStd r;
    r.mean = sum / n;
    double ss = 0.0;
    for (double x : values) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / n);
    return r;
}

namespace {

// Decodes one UTF-8 code point; malformed bytes decode as themselves.
char32_t decode(std::string_view s, std::size_t &i) {
    const auto c = static_cast<unsigned char>(s[i]);
    auto cont = [&](std::size_t k) -> int {
        if (i + k >= s.size()) return -1;
        const auto b = static_cast<unsigned char>(s[i + k]);
        return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
    };
    if (c < 0x80) {
        ++i;
        return c;
    }
    if ((c & 0xE0) == 0xC0) {
        const int b1 = cont(1);
        if (b1 >= 0) {
            i += 2;
            return static_cast<char32_t>(((c & 0x1F) << 6) | b1);
        }
    } else if ((c & 0xF0) == 0xE0) {
        const int b1 = cont(1), b2 = cont(2);
        if (b1 >= 0 && b2 >= 0) {
            i += 3;
            return static_cast<char32_t>(((c & 0x0F) << 12) | (b1 << 6) | b2);
        }
    } else if ((c & 0xF8) == 0xF0) {
        const int b1 = cont(1), b2 = cont(2), b3 = cont(3);
        if (b1 >= 0 && b2 >= 0 && b3 >= 0) {
            i += 4;
            return static_cast<char32_t>(((c & 0x07) << 18) | (b1 << 12) | (b2 << 6) | b3);
        }
    }
    ++i;
    return c;
}

void encode(char32_t cp, std::string &out) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

char32_t to_lower(char32_t c) {
    if (c >= 'A' && c <= 'Z') return c + 32;
    if (c < 0x80) return c;
    if (c >= 0x00C0 && c <= 0x00DE && c != 0x00D7) return c + 32;
    if (c >= 0x0100 && c <= 0x017F) {
        if (c == 0x0130) return 'i';
        if (c == 0x0178) return 0x00FF;
        const bool even = (c % 2) == 0;
        if ((c <= 0x012F || (c >= 0x0132 && c <= 0x0137) || (c >= 0x014A && c <= 0x0177)) && even) return c + 1;
        if (((c >= 0x0139 && c <= 0x0148) || (c >= 0x0179 && c <= 0x017E)) && !even) return c + 1;
        return c;
    }
    if (c >= 0x0391 && c <= 0x03A9 && c != 0x03A2) return c + 32;
    if (c == 0x0386) return 0x03AC;
    if (c >= 0x0388 && c <= 0x038A) return c + 37;
    if (c == 0x038C) return 0x03CC;
    if (c == 0x038E || c == 0x038F) return c + 63;
    if (c >= 0x0410 && c <= 0x042F) return c + 32;
    if (c >= 0x0400 && c <= 0x040F) return c + 80;
    return c;
}

bool is_punct(char32_t c) {
    if (c < 0x80) {
        return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
               (c >= 0x7B && c <= 0x7E);
    }
    return c == 0x00A1 || c == 0x00AB || c == 0x00BB || c == 0x00BF || (c >= 0x2010 && c <= 0x205E) ||
           (c >= 0x3000 && c <= 0x3003);
}

bool is_space(char32_t c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v' || c == 0x00A0;
}

} // namespace

std::string utf8_lowercase(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) encode(to_lower(decode(text, i)), out);
    return out;
}

std::vector<std::string> normalize_answer(std::string_view text, const F1Normalizer &norm) {
    std::vector<std::u32string> words(1);
    std::size_t i = 0;
    while (i < text.size()) {
        char32_t c = decode(text, i);
        if (is_space(c)) {
            if (!words.back().empty()) words.emplace_back();
            continue;
        }
        if (norm.lowercase) c = to_lower(c);
        words.back().push_back(c);
    }
    std::vector<std::string> out;
    for (auto &w : words) {
        std::size_t b = 0, e = w.size();
        if (norm.strip_punctuation) {
            while (b < e && is_punct(w[b])) ++b;
            while (e > b && is_punct(w[e - 1])) --e;
        }
        if (b == e) continue;
        std::string s;
        for (std::size_t k = b; k < e; ++k) encode(w[k], s);
        out.push_back(std::move(s));
    }
    return out;
}

double token_f1(std::string_view predicted, std::string_view gold, const F1Normalizer &norm) {
    const auto pred = normalize_answer(predicted, norm);
    const auto ref = normalize_answer(gold, norm);
    if (pred.empty() || ref.empty()) return 0.0;
    std::map<std::string, long> counts;
    for (const auto &t : ref) ++counts[t];
    long overlap = 0;
    for (const auto &t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
    return 2.0 * precision * recall / (precision + recall);
}

std::string to_string(Direction d) { return d == Direction::greater ? "greater" : "less"; }

namespace {

// Continued fraction for I_x(a, b), valid for x < (a + 1) / (a + b + 2).
double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < kEps) return h;
    }
    return h;
}

} // namespace

double regularized_incomplete_beta(double a, double b, double x, double y) {
    if (!(a > 0.0) || !(b > 0.0)) throw ShapeError("incomplete beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (y <= 0.0) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(y);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_continued_fraction(a, b, x) / a;
    }
    return 1.0 - front * beta_continued_fraction(b, a, y) / b;
}

double student_t_sf(double t, double dof) {
    if (!(dof > 0.0)) throw ShapeError("t distribution needs dof > 0");
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
    const double t2 = t * t;
    const double x = dof / (dof + t2);
    const double y = t2 / (dof + t2);
    const double tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x, y);
    return t > 0.0 ? tail : 1.0 - tail;
}

double student_t_cdf(double t, double dof) { return student_t_sf(-t, dof); }

WelchResult welch_one_sided(std::span<const double> a, std::span<const double> b, Direction direction) {
    if (a.size() < 2 || b.size() < 2) throw ShapeError("welch_one_sided needs at least 2 values per sample");
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const MeanStd sa = mean_std(a);
    const MeanStd sb = mean_std(b);
    // sample variances (divisor n - 1) from the population ones
    const double va = sa.std * sa.std * na / (na - 1.0);
    const double vb = sb.std * sb.std * nb / (nb - 1.0);

    WelchResult r;
    r.direction = direction;
    r.mean_a = sa.mean;
    r.mean_b = sb.mean;
    const double diff = sa.mean - sb.mean;
    const double ea = va / na;
    const double eb = vb / nb;
    const double se2 = ea + eb;

    if (se2 == 0.0) {
        r.degenerate = true;
        r.degrees_of_freedom = na + nb - 2.0;
        if (diff == 0.0) {
            r.t_statistic = 0.0;
            r.p_value_one_sided = 0.5;
        } else {
            r.t_statistic = diff > 0 ? std::numeric_limits<double>::infinity()
                                     : -std::numeric_limits<double>::infinity();
            const bool favours = (diff > 0) == (direction == Direction::greater);
            r.p_value_one_sided = favours ? 0.0 : 1.0;
        }
        return r;
    }

    r.t_statistic = diff / std::sqrt(se2);
    r.degrees_of_freedom = se2 * se2 / (ea * ea / (na - 1.0) + eb * eb / (nb - 1.0));
    r.p_value_one_sided = direction == Direction::greater ? student_t_sf(r.t_statistic, r.degrees_of_freedom)
                                                          : student_t_cdf(r.t_statistic, r.degrees_of_freedom);
    return r;
}

} // namespace ia::stats
