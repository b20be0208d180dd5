#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cka/tensor.hpp"

namespace cka {

enum class DistanceMetric { Euclidean, Cosine, MmdSpatial };
enum class Reduction { Mean, Sum };
enum class KlDirection { StudentFirst, TargetFirst };

inline const char* to_string(DistanceMetric m) {
    switch (m) {
        case DistanceMetric::Euclidean: return "euclidean";
        case DistanceMetric::Cosine: return "cosine";
        case DistanceMetric::MmdSpatial: return "mmd-spatial";
    }
    return "?";
}

// Declared factorization of a flat feature vector into `positions` vectors of
// `channels` entries each (position-major layout). Required by the
// mmd-spatial instance distance, which compares instances as point sets.
struct SpatialShape {
    std::size_t channels = 0;

    std::size_t positions_for(std::size_t feature_dim) const {
        if (channels == 0 || feature_dim % channels != 0)
            throw std::invalid_argument(
                "mmd-spatial: feature dim " + std::to_string(feature_dim) +
                " has no declared spatial factorization into channels=" + std::to_string(channels));
        return feature_dim / channels;
    }
};

// Row-stochastic within-model affinity map over a batch.
struct TransportMap {
    Tensor pi;  // {B, B}
    DistanceMetric metric = DistanceMetric::Euclidean;
    std::string source;

    std::size_t batch_size() const { return pi.shape()[0]; }
};

// Bandwidths and convex coefficients of a Gaussian multi-kernel.
struct KernelBank {
    std::vector<double> bandwidths;
    std::vector<double> coefficients;

    void validate() const {
        if (bandwidths.empty() || bandwidths.size() != coefficients.size())
            throw std::invalid_argument("kernel bank: bandwidth/coefficient size mismatch");
        double sum = 0.0;
        for (double c : coefficients) {
            if (c < 0.0) throw std::invalid_argument("kernel bank: negative coefficient");
            sum += c;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw std::invalid_argument("kernel bank: coefficients must sum to 1");
        for (double b : bandwidths)
            if (!(b > 0.0)) throw std::invalid_argument("kernel bank: bandwidths must be positive");
    }

    static KernelBank single(double bandwidth) { return {{bandwidth}, {1.0}}; }

    // Five Gaussians at {0.25, 0.5, 1, 2, 4} x the median pairwise distance of
    // the given feature rows, equal coefficients. The median is treated as a
    // constant of the batch; no gradient flows through it.
    static KernelBank median_heuristic(const std::vector<Tensor>& feature_sets);
};

struct LossWeights {
    double lambda_intra = 1.0;
    double lambda_inter = 1.0;
    double lambda_align = 10.0;
    double lambda_distill = 1.0;
    double margin = 0.4;              // alpha in the intra-model hinge
    double tau = 0.5;                 // InfoNCE temperature
    double distill_temperature = 1.0;
    double gw_exponent = 2.0;

    void validate() const {
        for (double l : {lambda_intra, lambda_inter, lambda_align, lambda_distill})
            if (!(std::isfinite(l) && l >= 0.0))
                throw std::invalid_argument("loss weights must be finite and non-negative");
        if (!(margin >= -1.0 && margin <= 1.0))
            throw std::invalid_argument("margin must lie in [-1, 1]");
        if (!(tau > 0.0)) throw std::invalid_argument("infonce temperature must be positive");
        if (!(distill_temperature > 0.0))
            throw std::invalid_argument("distill temperature must be positive");
        if (!(gw_exponent > 0.0)) throw std::invalid_argument("gw exponent must be positive");
    }
};

struct LossBreakdown {
    double intra = 0.0;
    double inter = 0.0;
    double align = 0.0;
    double distill = 0.0;
    double total = 0.0;
};

namespace detail {

inline Tensor identity_mask(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(v));
}

inline Tensor offdiag_mask(std::size_t n) {
    std::vector<double> v(n * n, 1.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 0.0;
    return Tensor({n, n}, std::move(v));
}

inline Tensor diag_of(const Tensor& square) {
    return sum_axis(mul(square, identity_mask(square.shape()[0])), 1);
}

inline Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

// ||a_i - b_j||^2 for all row pairs, kept differentiable through both inputs.
inline Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
    const std::size_t ra = a.shape()[0], rb = b.shape()[0];
    Tensor sqa = reshape(sum_axis(mul(a, a), 1), {ra, 1});
    Tensor sqb = reshape(sum_axis(mul(b, b), 1), {1, rb});
    Tensor cross = matmul(a, transpose(b));
    return sub(add(matmul(sqa, ones({1, rb})), matmul(ones({ra, 1}), sqb)), scalar_mul(cross, 2.0));
}

inline Tensor kernel_matrix(const Tensor& sqdist, const KernelBank& bank) {
    Tensor k;
    for (std::size_t u = 0; u < bank.bandwidths.size(); ++u) {
        const double bw = bank.bandwidths[u];
        Tensor term = scalar_mul(cka::exp(scalar_mul(sqdist, -1.0 / (2.0 * bw * bw))),
                                 bank.coefficients[u]);
        k = k.valid() ? add(k, term) : term;
    }
    return k;
}

inline double median_positive_distance(const std::vector<double>& rows, std::size_t n,
                                       std::size_t dim) {
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = rows[i * dim + k] - rows[j * dim + k];
                s += d * d;
            }
            if (s > 0.0) dists.push_back(std::sqrt(s));
        }
    if (dists.empty()) return 1.0;
    std::sort(dists.begin(), dists.end());
    return dists[dists.size() / 2];
}

}  // namespace detail

inline KernelBank KernelBank::median_heuristic(const std::vector<Tensor>& feature_sets) {
    if (feature_sets.empty()) throw std::invalid_argument("median_heuristic: no feature sets");
    const std::size_t dim = feature_sets.front().shape()[1];
    std::vector<double> rows;
    std::size_t n = 0;
    for (const Tensor& f : feature_sets) {
        if (f.rank() != 2 || f.shape()[1] != dim)
            throw std::invalid_argument("median_heuristic: feature dim mismatch");
        rows.insert(rows.end(), f.values().begin(), f.values().end());
        n += f.shape()[0];
    }
    const double med = detail::median_positive_distance(rows, n, dim);
    KernelBank bank;
    for (double scale : {0.25, 0.5, 1.0, 2.0, 4.0}) {
        bank.bandwidths.push_back(med * scale);
        bank.coefficients.push_back(0.2);
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Contrastive family
// ---------------------------------------------------------------------------

// a . b / (||a|| ||b||), differentiable in both arguments.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("cosine_similarity: length mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    Tensor ra = row_normalize(reshape(a, {1, a.size()}));
    Tensor rb = row_normalize(reshape(b, {1, b.size()}));
    return reshape(matmul(ra, transpose(rb)), {});
}

// Standard in-batch InfoNCE: positives are matching rows, negatives the other
// rows of the second view. Mean over rows.
inline Tensor info_nce_loss(const Tensor& z_a, const Tensor& z_b, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("info_nce_loss: tau must be positive");
    detail::require_same_shape(z_a, z_b, "info_nce_loss");
    Tensor sims = matmul(row_normalize(z_a), transpose(row_normalize(z_b)));
    Tensor probs = row_softmax(scalar_mul(sims, 1.0 / tau));
    Tensor positives = detail::diag_of(probs);  // {B}
    return scalar_mul(mean_all(cka::log(positives)), -1.0);
}

// Margin-hinged two-view contrast: (1 - s(pos)) plus hinged negative
// similarities above the margin. Negatives below the margin contribute
// nothing and carry zero gradient.
inline Tensor intra_margin_loss(const Tensor& z_view1, const Tensor& z_view2, double alpha,
                                Reduction reduction = Reduction::Mean) {
    detail::require_same_shape(z_view1, z_view2, "intra_margin_loss");
    const std::size_t b = z_view1.shape()[0];
    Tensor sims = matmul(row_normalize(z_view1), transpose(row_normalize(z_view2)));
    Tensor pos = add_scalar(scalar_mul(detail::diag_of(sims), -1.0), 1.0);  // {B}
    Tensor per_row = pos;
    if (b > 1) {
        Tensor hinge = mul(detail::offdiag_mask(b), relu(add_scalar(sims, -alpha)));
        Tensor neg = sum_axis(hinge, 1);
        if (reduction == Reduction::Mean) neg = scalar_mul(neg, 1.0 / static_cast<double>(b - 1));
        per_row = add(pos, neg);
    }
    return reduction == Reduction::Mean ? mean_all(per_row) : sum_all(per_row);
}

// ---------------------------------------------------------------------------
// Transport-map contrast
// ---------------------------------------------------------------------------

// Pairwise instance distances among the rows of F under the chosen metric.
// The mmd-spatial metric needs a declared factorization of the feature dim.
inline Tensor pairwise_distance_matrix(const Tensor& features, DistanceMetric metric,
                                       const std::optional<SpatialShape>& spatial = std::nullopt,
                                       double spatial_bandwidth = 0.0) {
    detail::require_rank2(features, "pairwise_distance_matrix");
    const std::size_t b = features.shape()[0];
    switch (metric) {
        case DistanceMetric::Euclidean:
            return pairwise_euclidean(features);
        case DistanceMetric::Cosine: {
            Tensor r = row_normalize(features);
            Tensor sims = matmul(r, transpose(r));
            return mul(detail::offdiag_mask(b), relu(add_scalar(scalar_mul(sims, -1.0), 1.0)));
        }
        case DistanceMetric::MmdSpatial: {
            if (!spatial.has_value())
                throw std::invalid_argument(
                    "pairwise_distance_matrix: mmd-spatial requested without a declared "
                    "spatial factorization");
            const std::size_t m = features.shape()[1];
            const std::size_t s = spatial->positions_for(m);
            const std::size_t c = spatial->channels;
            // bandwidth defaults to the batch median over instance vectors,
            // held constant like the alignment kernel bandwidths
            const KernelBank bank = KernelBank::single(
                spatial_bandwidth > 0.0
                    ? spatial_bandwidth
                    : detail::median_positive_distance(features.values(), b * s, c));
            // per-instance point sets
            std::vector<Tensor> sets;
            sets.reserve(b);
            for (std::size_t i = 0; i < b; ++i)
                sets.push_back(reshape(gather_rows(features, {i}), {s, c}));
            Tensor zero = Tensor({1}, 0.0);
            std::vector<std::vector<Tensor>> cells(b, std::vector<Tensor>(b, zero));
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = i + 1; j < b; ++j) {
                    Tensor kxx = mean_all(detail::kernel_matrix(detail::pairwise_sqdist(sets[i], sets[i]), bank));
                    Tensor kyy = mean_all(detail::kernel_matrix(detail::pairwise_sqdist(sets[j], sets[j]), bank));
                    Tensor kxy = mean_all(detail::kernel_matrix(detail::pairwise_sqdist(sets[i], sets[j]), bank));
                    Tensor mmd = sub(add(kxx, kyy), scalar_mul(kxy, 2.0));
                    cells[i][j] = cells[j][i] = reshape(mmd, {1});  // shared node keeps D symmetric
                }
            std::vector<Tensor> rows;
            rows.reserve(b);
            for (std::size_t i = 0; i < b; ++i) rows.push_back(reshape(concat(cells[i], 0), {1, b}));
            return concat(rows, 0);
        }
    }
    throw std::logic_error("pairwise_distance_matrix: unknown metric");
}

// Row-softmax of negated distances: pi[i][j] = exp(-D[i][j]) / sum_j exp(-D[i][j]).
inline TransportMap transport_map(const Tensor& distances, DistanceMetric metric = DistanceMetric::Euclidean,
                                  std::string source = {}) {
    detail::require_rank2(distances, "transport_map");
    if (distances.shape()[0] != distances.shape()[1])
        throw std::invalid_argument("transport_map: distances must be square, got " +
                                    shape_str(distances.shape()));
    return TransportMap{row_softmax(scalar_mul(distances, -1.0)), metric, std::move(source)};
}

// Matching-row transport profiles are positives, other rows of the same
// teacher's map are negatives; summed over teachers.
inline Tensor inter_contrast_loss(const TransportMap& student,
                                  const std::vector<TransportMap>& teachers,
                                  Reduction reduction = Reduction::Mean) {
    if (teachers.empty()) throw std::invalid_argument("inter_contrast_loss: no teacher maps");
    const std::size_t b = student.batch_size();
    Tensor rp = row_normalize(student.pi);
    Tensor loss;
    for (const TransportMap& t : teachers) {
        if (t.batch_size() != b)
            throw std::invalid_argument("inter_contrast_loss: batch size mismatch " +
                                        std::to_string(b) + " vs " + std::to_string(t.batch_size()));
        Tensor sims = matmul(rp, transpose(row_normalize(t.pi)));
        Tensor pos = add_scalar(scalar_mul(detail::diag_of(sims), -1.0), 1.0);
        Tensor per_row = pos;
        if (b > 1) {
            Tensor neg = sum_axis(mul(detail::offdiag_mask(b), sims), 1);
            if (reduction == Reduction::Mean) neg = scalar_mul(neg, 1.0 / static_cast<double>(b - 1));
            per_row = add(pos, neg);
        }
        Tensor term = reduction == Reduction::Mean ? mean_all(per_row) : sum_all(per_row);
        loss = loss.valid() ? add(loss, term) : term;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Distance-structure diagnostic
// ---------------------------------------------------------------------------

// sum_{i,j,k,l} |Dx[i][k] - Dy[j][l]|^q pi[i][j] pi[k][l]. Diagnostic only;
// not differentiated. Uses the algebraic expansion for q = 2 and direct
// summation otherwise.
inline double gw_discrepancy(const Tensor& dx, const Tensor& dy, const Tensor& pi, double q) {
    detail::require_rank2(dx, "gw_discrepancy");
    detail::require_rank2(dy, "gw_discrepancy");
    detail::require_rank2(pi, "gw_discrepancy");
    const std::size_t b = dx.shape()[0];
    if (dx.shape() != Shape{b, b} || dy.shape() != Shape{b, b} || pi.shape() != Shape{b, b})
        throw std::invalid_argument("gw_discrepancy: all inputs must be BxB");
    if (b > 64) throw std::invalid_argument("gw_discrepancy: diagnostic limited to B <= 64");
    for (double v : pi.values())
        if (v < 0.0) throw std::invalid_argument("gw_discrepancy: coupling entries must be non-negative");

    const std::vector<double>& X = dx.values();
    const std::vector<double>& Y = dy.values();
    const std::vector<double>& P = pi.values();

    if (q == 2.0) {
        std::vector<double> row_sum(b, 0.0), col_sum(b, 0.0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < b; ++j) {
                row_sum[i] += P[i * b + j];
                col_sum[j] += P[i * b + j];
            }
        double term1 = 0.0, term3 = 0.0;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t k = 0; k < b; ++k)
                term1 += X[i * b + k] * X[i * b + k] * row_sum[i] * row_sum[k];
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t l = 0; l < b; ++l)
                term3 += Y[j * b + l] * Y[j * b + l] * col_sum[j] * col_sum[l];
        // cross term via M = P Y P^T
        std::vector<double> py(b * b, 0.0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < b; ++j) {
                const double pij = P[i * b + j];
                if (pij == 0.0) continue;
                for (std::size_t l = 0; l < b; ++l) py[i * b + l] += pij * Y[j * b + l];
            }
        double term2 = 0.0;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t k = 0; k < b; ++k) {
                double m = 0.0;
                for (std::size_t l = 0; l < b; ++l) m += py[i * b + l] * P[k * b + l];
                term2 += X[i * b + k] * m;
            }
        // the expansion can round below zero where the direct sum cannot
        return std::max(0.0, term1 - 2.0 * term2 + term3);
    }

    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            const double pij = P[i * b + j];
            if (pij == 0.0) continue;
            for (std::size_t k = 0; k < b; ++k)
                for (std::size_t l = 0; l < b; ++l)
                    total += std::pow(std::abs(X[i * b + k] - Y[j * b + l]), q) * pij * P[k * b + l];
        }
    return total;
}

// ---------------------------------------------------------------------------
// Multi-kernel MMD alignment
// ---------------------------------------------------------------------------

// Biased V-statistic estimator of the squared multi-kernel MMD, diagonal
// terms included.
inline Tensor mmd_sq(const Tensor& f_s, const Tensor& f_t, const KernelBank& bank) {
    detail::require_rank2(f_s, "mmd_sq");
    detail::require_rank2(f_t, "mmd_sq");
    if (f_s.shape()[1] != f_t.shape()[1])
        throw std::invalid_argument("mmd_sq: feature dim mismatch " + shape_str(f_s.shape()) +
                                    " vs " + shape_str(f_t.shape()));
    bank.validate();
    Tensor kss = mean_all(detail::kernel_matrix(detail::pairwise_sqdist(f_s, f_s), bank));
    Tensor kst = mean_all(detail::kernel_matrix(detail::pairwise_sqdist(f_s, f_t), bank));
    Tensor ktt = mean_all(detail::kernel_matrix(detail::pairwise_sqdist(f_t, f_t), bank));
    return sub(add(kss, ktt), scalar_mul(kst, 2.0));
}

inline Tensor alignment_loss(const Tensor& f_s, const std::vector<Tensor>& f_teachers,
                             const KernelBank& bank) {
    if (f_teachers.empty()) throw std::invalid_argument("alignment_loss: no teacher features");
    Tensor loss;
    for (const Tensor& f_t : f_teachers) {
        Tensor term = mmd_sq(f_s, f_t, bank);
        loss = loss.valid() ? add(loss, term) : term;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Soft-target distillation
// ---------------------------------------------------------------------------

struct TeacherProbBlock {
    Tensor probs;            // {B, C_t} rows summing to 1
    std::size_t slot_begin;  // placement in the union label space
};

// Concatenated per-teacher softmax blocks placed into their slots and scaled
// by 1/N so the union target sums to 1. Slot ranges must tile [0, C).
inline Tensor build_soft_target(const std::vector<TeacherProbBlock>& blocks,
                                std::size_t class_count) {
    if (blocks.empty()) throw std::invalid_argument("build_soft_target: no teacher blocks");
    std::vector<const TeacherProbBlock*> ordered;
    for (const TeacherProbBlock& blk : blocks) ordered.push_back(&blk);
    std::sort(ordered.begin(), ordered.end(),
              [](const TeacherProbBlock* a, const TeacherProbBlock* b) {
                  return a->slot_begin < b->slot_begin;
              });
    std::size_t cursor = 0;
    const std::size_t batch = ordered.front()->probs.shape()[0];
    for (const TeacherProbBlock* blk : ordered) {
        detail::require_rank2(blk->probs, "build_soft_target");
        if (blk->probs.shape()[0] != batch)
            throw std::invalid_argument("build_soft_target: batch size mismatch across blocks");
        if (blk->slot_begin != cursor)
            throw std::invalid_argument("build_soft_target: slot ranges overlap or leave gaps at slot " +
                                        std::to_string(cursor));
        cursor += blk->probs.shape()[1];
        const std::size_t ct = blk->probs.shape()[1];
        for (std::size_t i = 0; i < batch; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < ct; ++j) s += blk->probs.values()[i * ct + j];
            if (std::abs(s - 1.0) > 1e-6)
                throw std::invalid_argument("build_soft_target: teacher block row " + std::to_string(i) +
                                            " sums to " + std::to_string(s) + ", expected 1");
        }
    }
    if (cursor != class_count)
        throw std::invalid_argument("build_soft_target: slot ranges cover " + std::to_string(cursor) +
                                    " of " + std::to_string(class_count) + " classes");
    std::vector<Tensor> parts;
    for (const TeacherProbBlock* blk : ordered) parts.push_back(blk->probs);
    return scalar_mul(concat(parts, 1), 1.0 / static_cast<double>(blocks.size()));
}

// Mean KL between the student softmax and the renormalized teacher target,
// student distribution first.
inline Tensor soft_target_loss(const Tensor& student_logits,
                               const std::vector<TeacherProbBlock>& teacher_blocks,
                               double distill_temperature = 1.0,
                               KlDirection direction = KlDirection::StudentFirst) {
    detail::require_rank2(student_logits, "soft_target_loss");
    if (!(distill_temperature > 0.0))
        throw std::invalid_argument("soft_target_loss: temperature must be positive");
    const std::size_t classes = student_logits.shape()[1];
    Tensor target = build_soft_target(teacher_blocks, classes);
    Tensor student = row_softmax(scalar_mul(student_logits, 1.0 / distill_temperature));
    Tensor row_kl =
        direction == KlDirection::StudentFirst
            ? sum_axis(mul(student, sub(cka::log(student), cka::log(target))), 1)
            : sum_axis(mul(target, sub(cka::log(target), cka::log(student))), 1);
    return mean_all(row_kl);
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

struct TotalLoss {
    Tensor value;  // differentiable scalar
    LossBreakdown breakdown;
};

// Weighted sum of the four components. Absent components (or zero weights)
// are skipped entirely so that disabling a term is the same as never
// computing it; they are recorded as zero in the breakdown.
inline TotalLoss total_loss(const std::optional<Tensor>& intra, const std::optional<Tensor>& inter,
                            const std::optional<Tensor>& align, const std::optional<Tensor>& distill,
                            const LossWeights& w) {
    w.validate();
    LossBreakdown bd;
    Tensor total;
    auto fold = [&total](const std::optional<Tensor>& comp, double lambda, double& slot) {
        if (!comp.has_value()) return;
        const double v = comp->item();
        if (!std::isfinite(v)) throw std::runtime_error("total_loss: non-finite component");
        slot = v;
        if (lambda == 0.0) return;
        Tensor term = scalar_mul(*comp, lambda);
        total = total.valid() ? add(total, term) : term;
    };
    fold(intra, w.lambda_intra, bd.intra);
    fold(inter, w.lambda_inter, bd.inter);
    fold(align, w.lambda_align, bd.align);
    fold(distill, w.lambda_distill, bd.distill);
    if (!total.valid()) total = Tensor::scalar(0.0);
    bd.total = total.item();
    return {total, bd};
}

}  // namespace cka
