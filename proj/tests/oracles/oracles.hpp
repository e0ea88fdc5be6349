#pragma once

// Independent reference implementations used by the unit and acceptance
// suites. They share only plain data types with the library and are written
// directly from the formulas, favouring clarity over speed.

#include "ia/model.hpp"
#include "ia/trace.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline double silu(double y) { return y / (1.0 + std::exp(-y)); }

inline Mat from(const ia::Matrix &m) {
    Mat out(m.rows, std::vector<double>(m.cols));
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out[r][c] = m.data[r * m.cols + c];
    return out;
}

inline Mat mul(const Mat &a, const Mat &b) {
    const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
    Mat out(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            long double s = 0;
            for (std::size_t t = 0; t < k; ++t) s += static_cast<long double>(a[i][t]) * b[t][j];
            out[i][j] = static_cast<double>(s);
        }
    return out;
}

struct LayerCapture {
    std::vector<double> hidden;
    std::vector<std::vector<double>> attention; // [head][key]
    std::vector<double> up;
};

struct Capture {
    std::vector<double> h0;
    std::vector<LayerCapture> layers;
};

// Straight-line decoder: embedding lookup, then per layer causal attention
// (no output projection) and the gated SiLU FFN, each with an optional
// residual add. Records the probe row of every quantity.
inline Capture decoder(const std::vector<std::uint32_t> &tokens, const ia::DecoderWeights &w, bool residual,
                       std::size_t probe) {
    const auto &cfg = w.config;
    const std::size_t n = tokens.size(), d = cfg.d_model, H = cfg.num_heads, dh = cfg.d_mid / cfg.num_heads;
    const Mat E = from(w.embedding);
    Mat h(n);
    for (std::size_t t = 0; t < n; ++t) h[t] = E[tokens[t]];

    Capture cap;
    cap.h0 = h[probe];
    for (const auto &lw : w.layers) {
        const Mat Q = mul(h, from(lw.w_q)), K = mul(h, from(lw.w_k)), V = mul(h, from(lw.w_v));
        Mat att_out(n, std::vector<double>(cfg.d_mid, 0.0));
        LayerCapture lc;
        for (std::size_t head = 0; head < H; ++head) {
            for (std::size_t t = 0; t < n; ++t) {
                std::vector<double> score(t + 1);
                for (std::size_t u = 0; u <= t; ++u) {
                    double s = 0;
                    for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) s += Q[t][c] * K[u][c];
                    score[u] = s / std::sqrt(static_cast<double>(dh));
                }
                const double mx = *std::max_element(score.begin(), score.end());
                double z = 0;
                for (double &s : score) z += (s = std::exp(s - mx));
                std::vector<double> row(n, 0.0);
                for (std::size_t u = 0; u <= t; ++u) row[u] = score[u] / z;
                for (std::size_t c = head * dh; c < (head + 1) * dh; ++c)
                    for (std::size_t u = 0; u <= t; ++u) att_out[t][c] += row[u] * V[u][c];
                if (t == probe) lc.attention.push_back(row);
            }
        }
        Mat a(n, std::vector<double>(d));
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t c = 0; c < d; ++c) a[t][c] = (residual ? h[t][c] : 0.0) + att_out[t][c];
        const Mat G = mul(a, from(lw.w_gate)), U = mul(a, from(lw.w_up));
        Mat f(n, std::vector<double>(cfg.d_inter));
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < cfg.d_inter; ++j) f[t][j] = silu(G[t][j]) * U[t][j];
        const Mat Y = mul(f, from(lw.w_down));
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t c = 0; c < d; ++c) h[t][c] = (residual ? a[t][c] : 0.0) + Y[t][c];
        lc.hidden = h[probe];
        lc.up = U[probe];
        cap.layers.push_back(std::move(lc));
    }
    return cap;
}

inline double kl(const std::vector<double> &pt, const std::vector<double> &p, double floor) {
    long double s = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (pt[k] == 0) continue;
        s += static_cast<long double>(pt[k]) * std::log(static_cast<long double>(pt[k]) / std::max(p[k], floor));
    }
    return static_cast<double>(s);
}

template <typename T> double cosine(const std::vector<T> &u, const std::vector<T> &v) {
    long double dot = 0, nu = 0, nv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<long double>(u[i]) * v[i];
        nu += static_cast<long double>(u[i]) * u[i];
        nv += static_cast<long double>(v[i]) * v[i];
    }
    if (std::sqrt(nu) < 1e-30L || std::sqrt(nv) < 1e-30L) return 0.0;
    return static_cast<double>(dot / (std::sqrt(nu) * std::sqrt(nv)));
}

inline std::pair<double, double> mean_std(const std::vector<double> &x) {
    long double m = 0;
    for (double v : x) m += v;
    m /= x.size();
    long double s = 0;
    for (double v : x) s += (v - m) * (v - m);
    return {static_cast<double>(m), static_cast<double>(std::sqrt(s / x.size()))};
}

// ASCII-only normaliser: lowercase, whitespace split, trim punctuation.
inline std::vector<std::string> words(const std::string &text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) {
        std::size_t b = 0, e = w.size();
        while (b < e && std::ispunct(static_cast<unsigned char>(w[b]))) ++b;
        while (e > b && std::ispunct(static_cast<unsigned char>(w[e - 1]))) --e;
        std::string t;
        for (std::size_t i = b; i < e; ++i) t += static_cast<char>(std::tolower(static_cast<unsigned char>(w[i])));
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

inline double f1(const std::string &pred, const std::string &gold) {
    const auto p = words(pred), g = words(gold);
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> cp, cg;
    for (const auto &w : p) ++cp[w];
    for (const auto &w : g) ++cg[w];
    int overlap = 0;
    for (const auto &[w, c] : cp) overlap += std::min(c, cg.count(w) ? cg[w] : 0);
    if (overlap == 0) return 0.0;
    const double P = static_cast<double>(overlap) / p.size(), R = static_cast<double>(overlap) / g.size();
    return 2 * P * R / (P + R);
}

// Student t density integrated with composite Simpson in long double:
// P(T > t) = 1/2 - integral_0^t pdf.
inline double t_sf(double t, double dof) {
    const long double nu = dof;
    const long double c =
        std::exp(std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2)) / std::sqrt(nu * 3.14159265358979323846264338327950288L);
    auto pdf = [&](long double x) { return c * std::pow(1 + x * x / nu, -(nu + 1) / 2); };
    const long double a = std::fabs(static_cast<long double>(t));
    const int n = 20000;
    const long double h = a / n;
    long double s = pdf(0) + pdf(a);
    for (int i = 1; i < n; ++i) s += pdf(i * h) * (i % 2 ? 4 : 2);
    const long double area = s * h / 3;
    return static_cast<double>(t >= 0 ? 0.5L - area : 0.5L + area);
}

struct Welch {
    double t, dof, p_greater;
};

inline Welch welch(const std::vector<double> &a, const std::vector<double> &b) {
    auto moments = [](const std::vector<double> &x) {
        long double m = 0;
        for (double v : x) m += v;
        m /= x.size();
        long double s = 0;
        for (double v : x) s += (v - m) * (v - m);
        return std::pair<long double, long double>{m, s / (x.size() - 1)};
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    const long double qa = va / a.size(), qb = vb / b.size();
    const long double t = (ma - mb) / std::sqrt(qa + qb);
    const long double dof = (qa + qb) * (qa + qb) / (qa * qa / (a.size() - 1) + qb * qb / (b.size() - 1));
    return {static_cast<double>(t), static_cast<double>(dof), t_sf(static_cast<double>(t), static_cast<double>(dof))};
}

// Max over constraint tokens of the head-averaged weight.
inline double attention_score(const std::vector<std::vector<double>> &rows, const std::vector<std::uint32_t> &cons) {
    double best = -1;
    for (auto c : cons) {
        double s = 0;
        for (const auto &r : rows) s += r[c];
        best = std::max(best, s / rows.size());
    }
    return best;
}

// Mean pairwise cosine with self-pairs: sum over all ordered (j, k) divided by p^2.
template <typename T> double set_similarity(const std::vector<std::vector<T>> &v) {
    long double s = 0;
    for (const auto &a : v)
        for (const auto &b : v) s += cosine(a, b);
    return static_cast<double>(s / (v.size() * v.size()));
}

// Cosine sum over all m x m cross pairs divided by `divisor`.
template <typename T>
double cross_similarity(const std::vector<std::vector<T>> &x, const std::vector<std::vector<T>> &y, double divisor) {
    long double s = 0;
    for (const auto &a : x)
        for (const auto &b : y) s += cosine(a, b);
    return static_cast<double>(s / divisor);
}

inline std::vector<double> softmax(const std::vector<double> &v) {
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    long double z = 0;
    for (std::size_t i = 0; i < v.size(); ++i) z += (out[i] = std::exp(v[i] - mx));
    for (double &x : out) x = static_cast<double>(x / z);
    return out;
}

} // namespace oracle
