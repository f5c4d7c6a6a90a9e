// Test-only reference implementations. Everything here is deliberately
// naive (nested loops, direct definitions) and independent of the library's
// compute paths, so agreement is meaningful.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cgfr/common.hpp"
#include "cgfr/tensor.hpp"

namespace oracle {

// Triple-loop matrix product.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
                out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

// Direct-summation convolution, zero padding.
inline std::vector<double> conv2d(const std::vector<double>& x, int c, int h, int w,
                                  const std::vector<double>& wt, int f, int kh, int kw,
                                  const std::vector<double>& bias, int ph, int pw, int sh,
                                  int sw) {
    int oh = (h + 2 * ph - kh) / sh + 1;
    int ow = (w + 2 * pw - kw) / sw + 1;
    std::vector<double> out(static_cast<std::size_t>(f) * oh * ow, 0.0);
    for (int fi = 0; fi < f; ++fi) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias[fi];
                for (int ci = 0; ci < c; ++ci) {
                    for (int ki = 0; ki < kh; ++ki) {
                        for (int kj = 0; kj < kw; ++kj) {
                            int iy = oy * sh - ph + ki;
                            int ix = ox * sw - pw + kj;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += x[(ci * h + iy) * w + ix] *
                                   wt[((fi * c + ci) * kh + ki) * kw + kj];
                        }
                    }
                }
                out[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return out;
}

// Central finite-difference gradient check. Recomputes loss_fn around each
// selected entry of `param` and compares with the recorded analytic gradient.
// Returns the max relative error over checked entries.
//
// A finite difference only estimates the derivative where the loss is smooth
// across the probed interval; piecewise-linear activations (leaky-relu, max)
// make occasional probes straddle a kink. Such probes are detected purely
// from function values — the midpoint must agree with the secant to second
// order — and are resampled. The filter never sees the analytic gradient, so
// it cannot hide a wrong backward pass.
inline double grad_check(const std::function<cgfr::Tensor()>& loss_fn, cgfr::Tensor param,
                         double eps = 1e-3, int max_entries = -1,
                         cgfr::Rng* pick = nullptr) {
    param.zero_grad();
    cgfr::Tensor loss = loss_fn();
    double f0 = loss.item();
    cgfr::backward(loss);
    std::vector<double> analytic(param.grad().begin(), param.grad().end());

    std::vector<std::int64_t> entries;
    std::int64_t n = param.numel();
    int wanted;
    if (max_entries < 0 || max_entries >= n) {
        for (std::int64_t i = 0; i < n; ++i) entries.push_back(i);
        wanted = static_cast<int>(n);
    } else {
        wanted = max_entries;
        int budget = 3 * max_entries;  // allowance for resampled kink probes
        for (int i = 0; i < budget; ++i) {
            entries.push_back(pick ? pick->uniform_int(static_cast<int>(n))
                                   : (i % static_cast<int>(n)));
        }
    }

    double max_rel = 0.0;
    int measured = 0;
    auto data = param.data_mut();
    for (std::int64_t idx : entries) {
        if (measured >= wanted) break;
        double saved = data[idx];
        data[idx] = saved + eps;
        double fp = loss_fn().item();
        data[idx] = saved - eps;
        double fm = loss_fn().item();
        data[idx] = saved;
        // Smoothness gate: at a kink the midpoint breaks the secant relation.
        // The threshold matches the 1e-4 target so borderline probes resample.
        double curvature = std::abs(fp + fm - 2.0 * f0);
        double span = std::abs(fp - fm);
        if (curvature > 2e-4 * span + 1e-9 * (1.0 + std::abs(f0))) continue;
        double fd = (fp - fm) / (2.0 * eps);
        double rel = std::abs(fd - analytic[idx]) /
                     std::max({1.0, std::abs(fd), std::abs(analytic[idx])});
        max_rel = std::max(max_rel, rel);
        ++measured;
    }
    return max_rel;
}

// AUC as the Mann-Whitney U statistic: pairwise comparisons with half credit
// for ties.
inline double auc_mann_whitney(const std::vector<double>& genuine,
                               const std::vector<double>& impostor) {
    double u = 0.0;
    for (double g : genuine) {
        for (double i : impostor) {
            if (g > i) u += 1.0;
            else if (g == i) u += 0.5;
        }
    }
    return u / (static_cast<double>(genuine.size()) * static_cast<double>(impostor.size()));
}

// EER by exhaustive sweep over a fine threshold grid.
inline double eer_grid(const std::vector<double>& genuine, const std::vector<double>& impostor,
                       int cells = 100000) {
    double lo = 1e300, hi = -1e300;
    for (double v : genuine) { lo = std::min(lo, v); hi = std::max(hi, v); }
    for (double v : impostor) { lo = std::min(lo, v); hi = std::max(hi, v); }
    double pad = (hi - lo) * 1e-6 + 1e-12;
    lo -= pad;
    hi += pad;
    double best_gap = 1e300, best_eer = 0.5;
    for (int i = 0; i <= cells; ++i) {
        double t = lo + (hi - lo) * static_cast<double>(i) / cells;
        double fa = 0, fr = 0;
        for (double v : impostor)
            if (v >= t) fa += 1;
        for (double v : genuine)
            if (v < t) fr += 1;
        double fpr = fa / impostor.size();
        double fnr = fr / genuine.size();
        double gap = std::abs(fpr - fnr);
        if (gap < best_gap) {
            best_gap = gap;
            best_eer = 0.5 * (fpr + fnr);
        }
    }
    return best_eer;
}

// TPR at a FPR budget, straight from the definition: best genuine-acceptance
// rate over all thresholds whose impostor-acceptance rate fits the budget.
inline double tpr_at_fpr_scan(const std::vector<double>& genuine,
                              const std::vector<double>& impostor, double budget) {
    std::vector<double> thresholds = genuine;
    thresholds.insert(thresholds.end(), impostor.begin(), impostor.end());
    double best = 0.0;
    auto rate_at = [](const std::vector<double>& xs, double t) {
        double c = 0;
        for (double v : xs)
            if (v >= t) c += 1;
        return c / xs.size();
    };
    for (double t : thresholds) {
        if (rate_at(impostor, t) <= budget) best = std::max(best, rate_at(genuine, t));
    }
    return best;
}

inline double cosine_raw(const double* a, const double* b, int d) {
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < d; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12);
    return dot / denom;
}

// Plain-loop recomputation of the visual-semantic alignment loss (word-level
// attention similarity plus caption-level cosine, batch posteriors in both
// directions), independent of the tensor library.
struct DamsmOraclePair {
    std::vector<double> regions;   // n_regions x 64
    std::vector<double> words;     // n_words x 64
    std::vector<double> caption;   // 64
    std::vector<double> global64;  // 64
    int n_regions = 196;
    int n_words = 20;
};

inline double damsm_oracle(const std::vector<DamsmOraclePair>& batch, double g1, double g2,
                           double g3) {
    int n = static_cast<int>(batch.size());
    std::vector<double> s_word(n * n), s_cap(n * n);
    for (int i = 0; i < n; ++i) {
        const DamsmOraclePair& img = batch[i];
        for (int j = 0; j < n; ++j) {
            const DamsmOraclePair& cap = batch[j];
            int nw = cap.n_words, nr = img.n_regions;
            std::vector<double> sim(nw * nr);
            for (int w = 0; w < nw; ++w)
                for (int r = 0; r < nr; ++r) {
                    double d = 0;
                    for (int k = 0; k < 64; ++k)
                        d += cap.words[w * 64 + k] * img.regions[r * 64 + k];
                    sim[w * nr + r] = d;
                }
            std::vector<double> sbar(nw * nr);
            for (int r = 0; r < nr; ++r) {
                double z = 0;
                for (int w = 0; w < nw; ++w) z += std::exp(sim[w * nr + r]);
                for (int w = 0; w < nw; ++w) sbar[w * nr + r] = std::exp(sim[w * nr + r]) / z;
            }
            double lse = 0;
            for (int w = 0; w < nw; ++w) {
                double z = 0;
                for (int r = 0; r < nr; ++r) z += std::exp(g1 * sbar[w * nr + r]);
                std::vector<double> ctx(64, 0.0);
                for (int r = 0; r < nr; ++r) {
                    double a = std::exp(g1 * sbar[w * nr + r]) / z;
                    for (int k = 0; k < 64; ++k) ctx[k] += a * img.regions[r * 64 + k];
                }
                lse += std::exp(g2 * cosine_raw(ctx.data(), cap.words.data() + w * 64, 64));
            }
            s_word[i * n + j] = std::log(lse) / g2;
            s_cap[i * n + j] = cosine_raw(img.global64.data(), cap.caption.data(), 64);
        }
    }
    auto posterior = [&](const std::vector<double>& s) {
        double l_img = 0, l_cap = 0;
        for (int i = 0; i < n; ++i) {
            double zr = 0, zc = 0;
            for (int j = 0; j < n; ++j) {
                zr += std::exp(g3 * s[i * n + j]);
                zc += std::exp(g3 * s[j * n + i]);
            }
            l_img += -std::log(std::exp(g3 * s[i * n + i]) / zr);
            l_cap += -std::log(std::exp(g3 * s[i * n + i]) / zc);
        }
        return (l_img + l_cap) / n;
    };
    return posterior(s_word) + posterior(s_cap);
}

// Explicit projection and explicit softmax cross-entropy recomputation of the
// cross-modal projection classification loss (both halves summed).
inline double cmpc_oracle(const std::vector<double>& v, const std::vector<double>& c,
                          const std::vector<int>& labels, const std::vector<double>& w,
                          int n, int dim, int classes) {
    auto half = [&](const std::vector<double>& feats, const std::vector<double>& anchors) {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double norm = 0;
            for (int k = 0; k < dim; ++k) norm += anchors[i * dim + k] * anchors[i * dim + k];
            norm = std::max(std::sqrt(norm), 1e-12);
            double coef = 0;
            for (int k = 0; k < dim; ++k) coef += feats[i * dim + k] * anchors[i * dim + k] / norm;
            std::vector<double> logits(classes, 0.0);
            for (int j = 0; j < classes; ++j)
                for (int k = 0; k < dim; ++k) {
                    logits[j] += w[j * dim + k] * coef * anchors[i * dim + k] / norm;
                }
            double z = 0;
            for (double lg : logits) z += std::exp(lg);
            total += -std::log(std::exp(logits[labels[i]]) / z);
        }
        return total / n;
    };
    return half(v, c) + half(c, v);
}

// Dense single-head attention: softmax(q k^T / sqrt(dk)) v, all loops.
inline std::vector<double> attention(const std::vector<double>& q, int nq,
                                     const std::vector<double>& k, int nk, int dk,
                                     const std::vector<double>& v, int dv) {
    std::vector<double> out(static_cast<std::size_t>(nq) * dv, 0.0);
    for (int i = 0; i < nq; ++i) {
        std::vector<double> logits(nk, 0.0);
        for (int j = 0; j < nk; ++j) {
            for (int p = 0; p < dk; ++p) logits[j] += q[i * dk + p] * k[j * dk + p];
            logits[j] /= std::sqrt(static_cast<double>(dk));
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double& l : logits) {
            l = std::exp(l - mx);
            z += l;
        }
        for (int j = 0; j < nk; ++j) {
            for (int p = 0; p < dv; ++p) out[i * dv + p] += (logits[j] / z) * v[j * dv + p];
        }
    }
    return out;
}

}  // namespace oracle
