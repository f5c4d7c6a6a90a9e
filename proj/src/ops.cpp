#include "cgfr/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace cgfr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

bool wants(const Tensor& t) { return t.requires_grad() && !t.frozen(); }

double* gbuf(const Tensor& t) {
    t.impl()->ensure_grad();
    return t.impl()->grad.data();
}

void check_same_dims(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dims() != b.dims()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.dims()) +
                         " vs " + shape_str(b.dims()));
    }
}

void check_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) +
                         ", got " + shape_str(t.dims()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_dims(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
    return detail::make_node(a.dims(), std::move(out), {a, b},
                             [a, b](const detail::TensorImpl& self) {
                                 if (wants(a)) {
                                     double* ga = gbuf(a);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                                 }
                                 if (wants(b)) {
                                     double* gb = gbuf(b);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i];
                                 }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_dims(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
    return detail::make_node(a.dims(), std::move(out), {a, b},
                             [a, b](const detail::TensorImpl& self) {
                                 if (wants(a)) {
                                     double* ga = gbuf(a);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                                 }
                                 if (wants(b)) {
                                     double* gb = gbuf(b);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
                                 }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_dims(a, b, "mul");
    std::vector<double> out(a.data().begin(), a.data().end());
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
    return detail::make_node(a.dims(), std::move(out), {a, b},
                             [a, b](const detail::TensorImpl& self) {
                                 const double* pa = a.data().data();
                                 const double* pb2 = b.data().data();
                                 if (wants(a)) {
                                     double* ga = gbuf(a);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * pb2[i];
                                 }
                                 if (wants(b)) {
                                     double* gb = gbuf(b);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * pa[i];
                                 }
                             });
}

Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= s;
    return detail::make_node(x.dims(), std::move(out), {x},
                             [x, s](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += s * self.grad[i];
                             });
}

Tensor add_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v += s;
    return detail::make_node(x.dims(), std::move(out), {x},
                             [x](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                             });
}

Tensor emax(const Tensor& a, const Tensor& b) {
    check_same_dims(a, b, "emax");
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] >= pb[i] ? pa[i] : pb[i];
    return detail::make_node(a.dims(), std::move(out), {a, b},
                             [a, b](const detail::TensorImpl& self) {
                                 const double* pa2 = a.data().data();
                                 const double* pb2 = b.data().data();
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                     if (pa2[i] >= pb2[i]) {
                                         if (wants(a)) a.impl()->accumulate_at(static_cast<std::int64_t>(i), self.grad[i]);
                                     } else if (wants(b)) {
                                         b.impl()->accumulate_at(static_cast<std::int64_t>(i), self.grad[i]);
                                     }
                                 }
                             });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    const double* px = x.data().data();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] >= 0.0 ? px[i] : slope * px[i];
    return detail::make_node(x.dims(), std::move(out), {x},
                             [x, slope](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 const double* px2 = x.data().data();
                                 double* gx = gbuf(x);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                     gx[i] += self.grad[i] * (px2[i] >= 0.0 ? 1.0 : slope);
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Shaping
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape dims) {
    if (shape_numel(dims) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.dims()) + " as " + shape_str(dims));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return detail::make_node(std::move(dims), std::move(out), {x},
                             [x](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                             });
}

Tensor transpose2d(const Tensor& x) {
    check_rank(x, 2, "transpose2d");
    int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    CMapMat xm(x.data().data(), m, n);
    MapMat om(out.data(), n, m);
    om = xm.transpose();
    return detail::make_node({n, m}, std::move(out), {x},
                             [x, m, n](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 CMapMat gy(self.grad.data(), n, m);
                                 MapMat gx(gbuf(x), m, n);
                                 gx.noalias() += gy.transpose();
                             });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
    check_rank(x, 2, "slice_rows");
    int m = x.dim(0), n = x.dim(1);
    if (r0 < 0 || r1 > m || r0 >= r1) throw ShapeError("slice_rows: bad range");
    std::vector<double> out(x.data().begin() + static_cast<std::size_t>(r0) * n,
                            x.data().begin() + static_cast<std::size_t>(r1) * n);
    return detail::make_node({r1 - r0, n}, std::move(out), {x},
                             [x, r0, n](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x) + static_cast<std::size_t>(r0) * n;
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                             });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    check_rank(x, 2, "slice_cols");
    int m = x.dim(0), n = x.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad range");
    int w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(m) * w);
    const double* px = x.data().data();
    for (int i = 0; i < m; ++i) {
        std::memcpy(out.data() + static_cast<std::size_t>(i) * w,
                    px + static_cast<std::size_t>(i) * n + c0, sizeof(double) * w);
    }
    return detail::make_node({m, w}, std::move(out), {x},
                             [x, m, n, c0, w](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (int i = 0; i < m; ++i) {
                                     for (int j = 0; j < w; ++j) {
                                         gx[static_cast<std::size_t>(i) * n + c0 + j] +=
                                             self.grad[static_cast<std::size_t>(i) * w + j];
                                     }
                                 }
                             });
}

Tensor row(const Tensor& x, int i) {
    check_rank(x, 2, "row");
    return reshape(slice_rows(x, i, i + 1), {x.dim(1)});
}

Tensor concat_vec(const Tensor& a, const Tensor& b) {
    check_rank(a, 1, "concat_vec");
    check_rank(b, 1, "concat_vec");
    int na = a.dim(0), nb = b.dim(0);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(na + nb));
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return detail::make_node({na + nb}, std::move(out), {a, b},
                             [a, b, na](const detail::TensorImpl& self) {
                                 if (wants(a)) {
                                     double* ga = gbuf(a);
                                     for (int i = 0; i < na; ++i) ga[i] += self.grad[static_cast<std::size_t>(i)];
                                 }
                                 if (wants(b)) {
                                     double* gb = gbuf(b);
                                     for (std::size_t i = na; i < self.grad.size(); ++i) gb[i - na] += self.grad[i];
                                 }
                             });
}

Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty input");
    int n = rows[0].dim(0);
    for (const Tensor& r : rows) {
        check_rank(r, 1, "stack_rows");
        if (r.dim(0) != n) throw ShapeError("stack_rows: ragged rows");
    }
    int m = static_cast<int>(rows.size());
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m) * n);
    for (const Tensor& r : rows) out.insert(out.end(), r.data().begin(), r.data().end());
    std::vector<Tensor> parents(rows.begin(), rows.end());
    return detail::make_node({m, n}, std::move(out), parents,
                             [parents, n](const detail::TensorImpl& self) {
                                 for (std::size_t i = 0; i < parents.size(); ++i) {
                                     const Tensor& r = parents[i];
                                     if (!wants(r)) continue;
                                     double* gr = gbuf(r);
                                     const double* gy = self.grad.data() + i * static_cast<std::size_t>(n);
                                     for (int j = 0; j < n; ++j) gr[j] += gy[j];
                                 }
                             });
}

Tensor concat_cols(std::span<const Tensor> mats) {
    if (mats.empty()) throw ShapeError("concat_cols: empty input");
    int m = mats[0].dim(0);
    int total = 0;
    for (const Tensor& t : mats) {
        check_rank(t, 2, "concat_cols");
        if (t.dim(0) != m) throw ShapeError("concat_cols: row counts differ");
        total += t.dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(m) * total);
    int col = 0;
    for (const Tensor& t : mats) {
        int w = t.dim(1);
        const double* pt = t.data().data();
        for (int i = 0; i < m; ++i) {
            std::memcpy(out.data() + static_cast<std::size_t>(i) * total + col,
                        pt + static_cast<std::size_t>(i) * w, sizeof(double) * w);
        }
        col += w;
    }
    std::vector<Tensor> parents(mats.begin(), mats.end());
    return detail::make_node({m, total}, std::move(out), parents,
                             [parents, m, total](const detail::TensorImpl& self) {
                                 int col2 = 0;
                                 for (const Tensor& t : parents) {
                                     int w = t.dim(1);
                                     if (wants(t)) {
                                         double* gt = gbuf(t);
                                         for (int i = 0; i < m; ++i) {
                                             const double* gy = self.grad.data() +
                                                                static_cast<std::size_t>(i) * total + col2;
                                             double* gr = gt + static_cast<std::size_t>(i) * w;
                                             for (int j = 0; j < w; ++j) gr[j] += gy[j];
                                         }
                                     }
                                     col2 += w;
                                 }
                             });
}

Tensor assemble_matrix(int m, int n, std::span<const Tensor> cells) {
    if (static_cast<int>(cells.size()) != m * n) {
        throw ShapeError("assemble_matrix: need " + std::to_string(m * n) + " cells");
    }
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (cells[i].numel() != 1) throw ShapeError("assemble_matrix: cells must be scalar");
        out[i] = cells[i].data()[0];
    }
    std::vector<Tensor> parents(cells.begin(), cells.end());
    return detail::make_node({m, n}, std::move(out), parents,
                             [parents](const detail::TensorImpl& self) {
                                 for (std::size_t i = 0; i < parents.size(); ++i) {
                                     if (wants(parents[i])) parents[i].impl()->accumulate_at(0, self.grad[i]);
                                 }
                             });
}

Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right) {
    check_rank(x, 3, "pad2d");
    if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d: negative pad");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    int oh = h + top + bottom, ow = w + left + right;
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow, 0.0);
    const double* px = x.data().data();
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            std::memcpy(out.data() + (static_cast<std::size_t>(ci) * oh + y + top) * ow + left,
                        px + (static_cast<std::size_t>(ci) * h + y) * w, sizeof(double) * w);
        }
    }
    return detail::make_node({c, oh, ow}, std::move(out), {x},
                             [x, c, h, w, oh, ow, top, left](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (int ci = 0; ci < c; ++ci) {
                                     for (int y = 0; y < h; ++y) {
                                         const double* gy =
                                             self.grad.data() +
                                             (static_cast<std::size_t>(ci) * oh + y + top) * ow + left;
                                         double* gr = gx + (static_cast<std::size_t>(ci) * h + y) * w;
                                         for (int xw = 0; xw < w; ++xw) gr[xw] += gy[xw];
                                     }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_node({1}, {s}, {x},
                             [x](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double g = self.grad[0];
                                 double* gx = gbuf(x);
                                 for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
                             });
}

Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor row_sums(const Tensor& x) {
    check_rank(x, 2, "row_sums");
    int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m));
    CMapMat xm(x.data().data(), m, n);
    MapVec(out.data(), m) = xm.rowwise().sum();
    return detail::make_node({m}, std::move(out), {x},
                             [x, m, n](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (int i = 0; i < m; ++i) {
                                     double g = self.grad[static_cast<std::size_t>(i)];
                                     double* gr = gx + static_cast<std::size_t>(i) * n;
                                     for (int j = 0; j < n; ++j) gr[j] += g;
                                 }
                             });
}

Tensor max_over_rows(const Tensor& x) {
    check_rank(x, 2, "max_over_rows");
    int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(n));
    std::vector<int> argmax(static_cast<std::size_t>(n), 0);
    const double* px = x.data().data();
    for (int j = 0; j < n; ++j) {
        double best = px[j];
        int bi = 0;
        for (int i = 1; i < m; ++i) {
            double v = px[static_cast<std::size_t>(i) * n + j];
            if (v > best) {
                best = v;
                bi = i;
            }
        }
        out[static_cast<std::size_t>(j)] = best;
        argmax[static_cast<std::size_t>(j)] = bi;
    }
    return detail::make_node({n}, std::move(out), {x},
                             [x, n, argmax](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (int j = 0; j < n; ++j) {
                                     gx[static_cast<std::size_t>(argmax[static_cast<std::size_t>(j)]) * n + j] +=
                                         self.grad[static_cast<std::size_t>(j)];
                                 }
                             });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    check_rank(a, 1, "dot");
    check_same_dims(a, b, "dot");
    double s = CMapVec(a.data().data(), a.dim(0)).dot(CMapVec(b.data().data(), b.dim(0)));
    return detail::make_node({1}, {s}, {a, b},
                             [a, b](const detail::TensorImpl& self) {
                                 double g = self.grad[0];
                                 const double* pa = a.data().data();
                                 const double* pb = b.data().data();
                                 std::size_t n = a.data().size();
                                 if (wants(a)) {
                                     double* ga = gbuf(a);
                                     for (std::size_t i = 0; i < n; ++i) ga[i] += g * pb[i];
                                 }
                                 if (wants(b)) {
                                     double* gb = gbuf(b);
                                     for (std::size_t i = 0; i < n; ++i) gb[i] += g * pa[i];
                                 }
                             });
}

Tensor logsumexp_vec(const Tensor& x) {
    check_rank(x, 1, "logsumexp_vec");
    int n = x.dim(0);
    const double* px = x.data().data();
    double m = *std::max_element(px, px + n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(px[i] - m);
    double lse = m + std::log(s);
    return detail::make_node({1}, {lse}, {x},
                             [x, n, lse](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double g = self.grad[0];
                                 const double* px2 = x.data().data();
                                 double* gx = gbuf(x);
                                 for (int i = 0; i < n; ++i) gx[i] += g * std::exp(px2[i] - lse);
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra / NN primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "matmul");
    check_rank(b, 2, "matmul");
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a.dims()) + " x " +
                         shape_str(b.dims()));
    }
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    {
        CMapMat am(a.data().data(), m, k);
        CMapMat bm(b.data().data(), k, n);
        MapMat om(out.data(), m, n);
        om.noalias() = am * bm;
    }
    return detail::make_node({m, n}, std::move(out), {a, b},
                             [a, b, m, k, n](const detail::TensorImpl& self) {
                                 CMapMat gy(self.grad.data(), m, n);
                                 if (wants(a)) {
                                     CMapMat bm(b.data().data(), k, n);
                                     MapMat ga(gbuf(a), m, k);
                                     ga.noalias() += gy * bm.transpose();
                                 }
                                 if (wants(b)) {
                                     CMapMat am(a.data().data(), m, k);
                                     MapMat gb(gbuf(b), k, n);
                                     gb.noalias() += am.transpose() * gy;
                                 }
                             });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    check_rank(x, 2, "add_rowvec");
    check_rank(v, 1, "add_rowvec");
    int m = x.dim(0), n = x.dim(1);
    if (v.dim(0) != n) {
        throw ShapeError("add_rowvec: vector length " + shape_str(v.dims()) +
                         " does not match " + shape_str(x.dims()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const double* pv = v.data().data();
    for (int i = 0; i < m; ++i) {
        double* po = out.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) po[j] += pv[j];
    }
    return detail::make_node({m, n}, std::move(out), {x, v},
                             [x, v, m, n](const detail::TensorImpl& self) {
                                 if (wants(x)) {
                                     double* gx = gbuf(x);
                                     for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                                 }
                                 if (wants(v)) {
                                     double* gv = gbuf(v);
                                     for (int i = 0; i < m; ++i) {
                                         const double* gy = self.grad.data() + static_cast<std::size_t>(i) * n;
                                         for (int j = 0; j < n; ++j) gv[j] += gy[j];
                                     }
                                 }
                             });
}

Tensor mul_colvec(const Tensor& x, const Tensor& v) {
    check_rank(x, 2, "mul_colvec");
    check_rank(v, 1, "mul_colvec");
    int m = x.dim(0), n = x.dim(1);
    if (v.dim(0) != m) {
        throw ShapeError("mul_colvec: vector length " + shape_str(v.dims()) +
                         " does not match rows of " + shape_str(x.dims()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const double* pv = v.data().data();
    for (int i = 0; i < m; ++i) {
        double* po = out.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) po[j] *= pv[i];
    }
    return detail::make_node({m, n}, std::move(out), {x, v},
                             [x, v, m, n](const detail::TensorImpl& self) {
                                 const double* px = x.data().data();
                                 const double* pv2 = v.data().data();
                                 if (wants(x)) {
                                     double* gx = gbuf(x);
                                     for (int i = 0; i < m; ++i) {
                                         const double* gy = self.grad.data() + static_cast<std::size_t>(i) * n;
                                         double* gr = gx + static_cast<std::size_t>(i) * n;
                                         for (int j = 0; j < n; ++j) gr[j] += gy[j] * pv2[i];
                                     }
                                 }
                                 if (wants(v)) {
                                     double* gv = gbuf(v);
                                     for (int i = 0; i < m; ++i) {
                                         const double* gy = self.grad.data() + static_cast<std::size_t>(i) * n;
                                         const double* xr = px + static_cast<std::size_t>(i) * n;
                                         double s = 0.0;
                                         for (int j = 0; j < n; ++j) s += gy[j] * xr[j];
                                         gv[i] += s;
                                     }
                                 }
                             });
}

namespace {

// Gathers conv patches into a [C*kh*kw x OH*OW] row-major matrix.
std::vector<double> im2col(const double* x, int c, int h, int w, int kh, int kw,
                           int ph, int pw, int sh, int sw, int oh, int ow) {
    std::vector<double> cols(static_cast<std::size_t>(c) * kh * kw * oh * ow, 0.0);
    std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    for (int ci = 0; ci < c; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* dst = cols.data() + ((static_cast<std::size_t>(ci) * kh + ki) * kw + kj) * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * sh - ph + ki;
                    if (iy < 0 || iy >= h) continue;
                    const double* src = x + (static_cast<std::size_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * sw - pw + kj;
                        if (ix >= 0 && ix < w) dst[static_cast<std::size_t>(oy) * ow + ox] = src[ix];
                    }
                }
            }
        }
    }
    return cols;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv2dSpec& spec) {
    check_rank(x, 3, "conv2d");
    check_rank(weight, 4, "conv2d");
    check_rank(bias, 1, "conv2d");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    int f = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (wc != c) {
        throw ShapeError("conv2d: input channels " + shape_str(x.dims()) +
                         " do not match weight " + shape_str(weight.dims()));
    }
    if (bias.dim(0) != f) throw ShapeError("conv2d: bias length must equal filter count");
    int ph = spec.pad_h, pw = spec.pad_w, sh = spec.stride_h, sw = spec.stride_w;
    if (sh < 1 || sw < 1) throw ShapeError("conv2d: stride must be positive");
    if (kh > h + 2 * ph || kw > w + 2 * pw) {
        throw ShapeError("conv2d: kernel " + shape_str(weight.dims()) +
                         " larger than padded input " + shape_str(x.dims()));
    }
    int oh = (h + 2 * ph - kh) / sh + 1;
    int ow = (w + 2 * pw - kw) / sw + 1;
    int ckk = c * kh * kw;
    std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;

    std::vector<double> cols = im2col(x.data().data(), c, h, w, kh, kw, ph, pw, sh, sw, oh, ow);
    std::vector<double> out(static_cast<std::size_t>(f) * ohw);
    {
        CMapMat wm(weight.data().data(), f, ckk);
        CMapMat cm(cols.data(), ckk, ohw);
        MapMat om(out.data(), f, ohw);
        om.noalias() = wm * cm;
        const double* pb = bias.data().data();
        for (int fi = 0; fi < f; ++fi) om.row(fi).array() += pb[fi];
    }

    return detail::make_node(
        {f, oh, ow}, std::move(out), {x, weight, bias},
        [x, weight, bias, cols = std::move(cols), c, h, w, f, kh, kw, ph, pw, sh, sw, oh, ow,
         ckk, ohw](const detail::TensorImpl& self) {
            CMapMat gy(self.grad.data(), f, ohw);
            if (wants(bias)) {
                MapVec gb(gbuf(bias), f);
                gb.noalias() += gy.rowwise().sum();
            }
            if (wants(weight)) {
                CMapMat cm(cols.data(), ckk, ohw);
                MapMat gw(gbuf(weight), f, ckk);
                gw.noalias() += gy * cm.transpose();
            }
            if (wants(x)) {
                RowMat gcols(ckk, ohw);
                CMapMat wm(weight.data().data(), f, ckk);
                gcols.noalias() = wm.transpose() * gy;
                double* gx = gbuf(x);
                for (int ci = 0; ci < c; ++ci) {
                    for (int ki = 0; ki < kh; ++ki) {
                        for (int kj = 0; kj < kw; ++kj) {
                            const double* grow = gcols.data() +
                                                 ((static_cast<std::size_t>(ci) * kh + ki) * kw + kj) * ohw;
                            for (int oy = 0; oy < oh; ++oy) {
                                int iy = oy * sh - ph + ki;
                                if (iy < 0 || iy >= h) continue;
                                double* dst = gx + (static_cast<std::size_t>(ci) * h + iy) * w;
                                for (int ox = 0; ox < ow; ++ox) {
                                    int ix = ox * sw - pw + kj;
                                    if (ix >= 0 && ix < w) dst[ix] += grow[static_cast<std::size_t>(oy) * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor maxpool2d(const Tensor& x, int k, int stride) {
    check_rank(x, 3, "maxpool2d");
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (k < 1 || stride < 1) throw ShapeError("maxpool2d: k and stride must be positive");
    if (k > h || k > w) {
        throw ShapeError("maxpool2d: window " + std::to_string(k) + " exceeds input " +
                         shape_str(x.dims()));
    }
    int oh = (h - k) / stride + 1;
    int ow = (w - k) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
    std::vector<std::int64_t> argmax(out.size());
    const double* px = x.data().data();
    std::size_t oi = 0;
    for (int ci = 0; ci < c; ++ci) {
        const double* plane = px + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox, ++oi) {
                double best = -std::numeric_limits<double>::infinity();
                std::int64_t bi = -1;
                for (int ki = 0; ki < k; ++ki) {
                    for (int kj = 0; kj < k; ++kj) {
                        std::int64_t idx = static_cast<std::int64_t>(oy * stride + ki) * w +
                                           (ox * stride + kj);
                        double v = plane[idx];
                        if (v > best) {
                            best = v;
                            bi = idx;
                        }
                    }
                }
                out[oi] = best;
                argmax[oi] = static_cast<std::int64_t>(ci) * h * w + bi;
            }
        }
    }
    return detail::make_node({c, oh, ow}, std::move(out), {x},
                             [x, argmax = std::move(argmax)](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                     gx[argmax[i]] += self.grad[i];
                                 }
                             });
}

Tensor softmax_rows(const Tensor& x) {
    check_rank(x, 2, "softmax_rows");
    int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (int i = 0; i < m; ++i) {
        double* r = out.data() + static_cast<std::size_t>(i) * n;
        double mx = *std::max_element(r, r + n);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            r[j] = std::exp(r[j] - mx);
            s += r[j];
        }
        for (int j = 0; j < n; ++j) r[j] /= s;
    }
    std::vector<double> y = out;  // keep a copy for the backward pass
    return detail::make_node({m, n}, std::move(out), {x},
                             [x, y = std::move(y), m, n](const detail::TensorImpl& self) {
                                 if (!wants(x)) return;
                                 double* gx = gbuf(x);
                                 for (int i = 0; i < m; ++i) {
                                     const double* yr = y.data() + static_cast<std::size_t>(i) * n;
                                     const double* gr = self.grad.data() + static_cast<std::size_t>(i) * n;
                                     double dotv = 0.0;
                                     for (int j = 0; j < n; ++j) dotv += yr[j] * gr[j];
                                     double* gxr = gx + static_cast<std::size_t>(i) * n;
                                     for (int j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dotv);
                                 }
                             });
}

Tensor l2_normalize(const Tensor& x, double eps) {
    if (x.rank() < 1) throw ShapeError("l2_normalize: rank-0 input");
    int d = x.dims().back();
    std::int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().begin(), x.data().end());
    std::vector<double> denom(static_cast<std::size_t>(rows));
    for (std::int64_t i = 0; i < rows; ++i) {
        double* r = out.data() + static_cast<std::size_t>(i) * d;
        double sq = 0.0;
        for (int j = 0; j < d; ++j) sq += r[j] * r[j];
        double nrm = std::sqrt(sq);
        double dn = std::max(nrm, eps);
        denom[static_cast<std::size_t>(i)] = dn;
        for (int j = 0; j < d; ++j) r[j] /= dn;
    }
    std::vector<double> y = out;
    return detail::make_node(
        x.dims(), std::move(out), {x},
        [x, y = std::move(y), denom = std::move(denom), d, rows, eps](const detail::TensorImpl& self) {
            if (!wants(x)) return;
            double* gx = gbuf(x);
            const double* px = x.data().data();
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* yr = y.data() + static_cast<std::size_t>(i) * d;
                const double* gr = self.grad.data() + static_cast<std::size_t>(i) * d;
                double* gxr = gx + static_cast<std::size_t>(i) * d;
                double dn = denom[static_cast<std::size_t>(i)];
                double sq = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double* xr = px + static_cast<std::size_t>(i) * d;
                    sq += xr[j] * xr[j];
                }
                if (std::sqrt(sq) >= eps) {
                    double dotv = 0.0;
                    for (int j = 0; j < d; ++j) dotv += yr[j] * gr[j];
                    for (int j = 0; j < d; ++j) gxr[j] += (gr[j] - yr[j] * dotv) / dn;
                } else {
                    for (int j = 0; j < d; ++j) gxr[j] += gr[j] / dn;
                }
            }
        });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool train) {
    check_rank(x, 4, "batch_norm");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.dim(0) != c || beta.dim(0) != c) {
        throw ShapeError("batch_norm: affine parameters must have length C");
    }
    std::int64_t m = static_cast<std::int64_t>(n) * h * w;
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    std::int64_t chw = static_cast<std::int64_t>(c) * hw;

    std::vector<double> mean_c(static_cast<std::size_t>(c));
    std::vector<double> inv_std(static_cast<std::size_t>(c));
    const double* px = x.data().data();

    if (train) {
        if (m < 2) {
            throw DegenerateStatsError("batch_norm: train mode needs N*H*W >= 2, got " +
                                       std::to_string(m));
        }
        double* rm = state.running_mean.data_mut().data();
        double* rv = state.running_var.data_mut().data();
        for (int ci = 0; ci < c; ++ci) {
            double s = 0.0, sq = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const double* plane = px + ni * chw + ci * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    s += plane[i];
                    sq += plane[i] * plane[i];
                }
            }
            double mu = s / static_cast<double>(m);
            double var = sq / static_cast<double>(m) - mu * mu;
            if (var < 0.0) var = 0.0;  // numeric floor
            mean_c[ci] = mu;
            inv_std[ci] = 1.0 / std::sqrt(var + state.eps);
            rm[ci] = (1.0 - state.momentum) * rm[ci] + state.momentum * mu;
            rv[ci] = (1.0 - state.momentum) * rv[ci] + state.momentum * var;
        }
    } else {
        const double* rm = state.running_mean.data().data();
        const double* rv = state.running_var.data().data();
        for (int ci = 0; ci < c; ++ci) {
            mean_c[ci] = rm[ci];
            inv_std[ci] = 1.0 / std::sqrt(rv[ci] + state.eps);
        }
    }

    std::vector<double> xhat(x.data().size());
    std::vector<double> out(x.data().size());
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const double* src = px + ni * chw + ci * hw;
            double* xh = xhat.data() + ni * chw + ci * hw;
            double* po = out.data() + ni * chw + ci * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                xh[i] = (src[i] - mean_c[ci]) * inv_std[ci];
                po[i] = pg[ci] * xh[i] + pb[ci];
            }
        }
    }

    return detail::make_node(
        x.dims(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, chw, m,
         train](const detail::TensorImpl& self) {
            const double* pg2 = gamma.data().data();
            // Per-channel reductions of gy and gy*xhat are needed for both the
            // affine and the input gradients.
            std::vector<double> sum_gy(static_cast<std::size_t>(c), 0.0);
            std::vector<double> sum_gy_xh(static_cast<std::size_t>(c), 0.0);
            for (int ni = 0; ni < n; ++ni) {
                for (int ci = 0; ci < c; ++ci) {
                    const double* gy = self.grad.data() + ni * chw + ci * hw;
                    const double* xh = xhat.data() + ni * chw + ci * hw;
                    double a = 0.0, b2 = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        a += gy[i];
                        b2 += gy[i] * xh[i];
                    }
                    sum_gy[ci] += a;
                    sum_gy_xh[ci] += b2;
                }
            }
            if (wants(gamma)) {
                double* gg = gbuf(gamma);
                for (int ci = 0; ci < c; ++ci) gg[ci] += sum_gy_xh[ci];
            }
            if (wants(beta)) {
                double* gb = gbuf(beta);
                for (int ci = 0; ci < c; ++ci) gb[ci] += sum_gy[ci];
            }
            if (wants(x)) {
                double* gx = gbuf(x);
                double inv_m = 1.0 / static_cast<double>(m);
                for (int ni = 0; ni < n; ++ni) {
                    for (int ci = 0; ci < c; ++ci) {
                        const double* gy = self.grad.data() + ni * chw + ci * hw;
                        const double* xh = xhat.data() + ni * chw + ci * hw;
                        double* gxp = gx + ni * chw + ci * hw;
                        double k = pg2[ci] * inv_std[ci];
                        if (train) {
                            for (std::int64_t i = 0; i < hw; ++i) {
                                gxp[i] += k * (gy[i] - sum_gy[ci] * inv_m - xh[i] * sum_gy_xh[ci] * inv_m);
                            }
                        } else {
                            for (std::int64_t i = 0; i < hw; ++i) gxp[i] += k * gy[i];
                        }
                    }
                }
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    int d = x.dims().back();
    if (d < 2) {
        throw DegenerateStatsError("layer_norm: last axis must have >= 2 elements, got " +
                                   std::to_string(d));
    }
    if (gamma.dim(0) != d || beta.dim(0) != d) {
        throw ShapeError("layer_norm: affine parameters must have length d");
    }
    std::int64_t rows = x.numel() / d;
    std::vector<double> xhat(x.data().size());
    std::vector<double> out(x.data().size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::int64_t i = 0; i < rows; ++i) {
        const double* r = px + static_cast<std::size_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += r[j];
        double mu = s / d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        double* xh = xhat.data() + static_cast<std::size_t>(i) * d;
        double* po = out.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (r[j] - mu) * is;
            po[j] = pg[j] * xh[j] + pb[j];
        }
    }
    return detail::make_node(
        x.dims(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), d,
         rows](const detail::TensorImpl& self) {
            const double* pg2 = gamma.data().data();
            if (wants(gamma) || wants(beta)) {
                double* gg = wants(gamma) ? gbuf(gamma) : nullptr;
                double* gb = wants(beta) ? gbuf(beta) : nullptr;
                for (std::int64_t i = 0; i < rows; ++i) {
                    const double* gy = self.grad.data() + static_cast<std::size_t>(i) * d;
                    const double* xh = xhat.data() + static_cast<std::size_t>(i) * d;
                    for (int j = 0; j < d; ++j) {
                        if (gg) gg[j] += gy[j] * xh[j];
                        if (gb) gb[j] += gy[j];
                    }
                }
            }
            if (wants(x)) {
                double* gx = gbuf(x);
                for (std::int64_t i = 0; i < rows; ++i) {
                    const double* gy = self.grad.data() + static_cast<std::size_t>(i) * d;
                    const double* xh = xhat.data() + static_cast<std::size_t>(i) * d;
                    double* gxr = gx + static_cast<std::size_t>(i) * d;
                    double mg = 0.0, mgx = 0.0;
                    for (int j = 0; j < d; ++j) {
                        mg += gy[j] * pg2[j];
                        mgx += gy[j] * pg2[j] * xh[j];
                    }
                    mg /= d;
                    mgx /= d;
                    double is = inv_std[static_cast<std::size_t>(i)];
                    for (int j = 0; j < d; ++j) {
                        gxr[j] += is * (gy[j] * pg2[j] - mg - xh[j] * mgx);
                    }
                }
            }
        });
}

Tensor embed_rows(const Tensor& table, std::span<const int> ids) {
    check_rank(table, 2, "embed_rows");
    int v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw InputError("embed_rows: id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(v));
        }
    }
    int l = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(l) * d);
    const double* pt = table.data().data();
    for (int i = 0; i < l; ++i) {
        std::memcpy(out.data() + static_cast<std::size_t>(i) * d,
                    pt + static_cast<std::size_t>(ids[i]) * d, sizeof(double) * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return detail::make_node({l, d}, std::move(out), {table},
                             [table, idv = std::move(idv), d](const detail::TensorImpl& self) {
                                 if (!wants(table)) return;
                                 double* gt = gbuf(table);
                                 for (std::size_t i = 0; i < idv.size(); ++i) {
                                     const double* gy = self.grad.data() + i * static_cast<std::size_t>(d);
                                     double* gr = gt + static_cast<std::size_t>(idv[i]) * d;
                                     for (int j = 0; j < d; ++j) gr[j] += gy[j];
                                 }
                             });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
    check_rank(logits, 2, "cross_entropy_rows");
    int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw ShapeError("cross_entropy_rows: label count mismatch");
    }
    for (int y : labels) {
        if (y < 0 || y >= c) {
            throw InputError("cross_entropy_rows: label " + std::to_string(y) +
                             " outside [0, " + std::to_string(c) + ")");
        }
    }
    const double* pl = logits.data().data();
    std::vector<double> probs(logits.data().size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* r = pl + static_cast<std::size_t>(i) * c;
        double mx = *std::max_element(r, r + c);
        double s = 0.0;
        double* pr = probs.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            pr[j] = std::exp(r[j] - mx);
            s += pr[j];
        }
        for (int j = 0; j < c; ++j) pr[j] /= s;
        loss += mx + std::log(s) - r[labels[i]];
    }
    loss /= n;
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::make_node({1}, {loss}, {logits},
                             [logits, probs = std::move(probs), lab = std::move(lab), n,
                              c](const detail::TensorImpl& self) {
                                 if (!wants(logits)) return;
                                 double g = self.grad[0] / n;
                                 double* gl = gbuf(logits);
                                 for (int i = 0; i < n; ++i) {
                                     const double* pr = probs.data() + static_cast<std::size_t>(i) * c;
                                     double* gr = gl + static_cast<std::size_t>(i) * c;
                                     for (int j = 0; j < c; ++j) {
                                         gr[j] += g * (pr[j] - (j == lab[i] ? 1.0 : 0.0));
                                     }
                                 }
                             });
}

Tensor affine_vec(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_rank(x, 1, "affine_vec");
    check_rank(w, 2, "affine_vec");
    check_rank(b, 1, "affine_vec");
    int k = x.dim(0), n = w.dim(1);
    if (w.dim(0) != k || b.dim(0) != n) {
        throw ShapeError("affine_vec: incompatible shapes " + shape_str(x.dims()) + ", " +
                         shape_str(w.dims()) + ", " + shape_str(b.dims()));
    }
    std::vector<double> out(static_cast<std::size_t>(n));
    {
        CMapMat wm(w.data().data(), k, n);
        CMapVec xv(x.data().data(), k);
        CMapVec bv(b.data().data(), n);
        MapVec(out.data(), n) = wm.transpose() * xv + bv;
    }
    return detail::make_node({n}, std::move(out), {x, w, b},
                             [x, w, b, k, n](const detail::TensorImpl& self) {
                                 CMapVec gy(self.grad.data(), n);
                                 if (wants(x)) {
                                     CMapMat wm(w.data().data(), k, n);
                                     MapVec gx(gbuf(x), k);
                                     gx.noalias() += wm * gy;
                                 }
                                 if (wants(w)) {
                                     CMapVec xv(x.data().data(), k);
                                     MapMat gw(gbuf(w), k, n);
                                     gw.noalias() += xv * gy.transpose();
                                 }
                                 if (wants(b)) {
                                     MapVec gb(gbuf(b), n);
                                     gb.noalias() += gy;
                                 }
                             });
}

}  // namespace cgfr
