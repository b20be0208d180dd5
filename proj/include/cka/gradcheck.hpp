#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cka/losses.hpp"
#include "cka/rng.hpp"
#include "cka/tensor.hpp"

namespace cka {

struct GradCheckReport {
    std::string op;
    double max_error = 0.0;
    bool pass = false;
};

namespace detail {

inline Tensor random_features(std::size_t r, std::size_t c, Rng& rng) {
    std::vector<double> v(r * c);
    for (double& x : v) x = rng.normal();
    return Tensor({r, c}, std::move(v));
}

}  // namespace detail

// Finite-difference verification of every loss kernel: 10 random
// configurations per operation, central differences at eps = 1e-5.
inline std::vector<GradCheckReport> run_gradcheck(const std::vector<std::string>& requested,
                                                  double tolerance = 1e-4,
                                                  std::uint64_t seed = 0x9dc5) {
    constexpr double kEps = 1e-5;
    const std::vector<std::string> all = {"info-nce",  "intra-margin", "inter-contrast", "mmd",
                                          "alignment", "soft-target",  "total"};
    std::vector<std::string> ops = requested;
    if (ops.empty() || (ops.size() == 1 && ops[0] == "all")) ops = all;

    std::vector<GradCheckReport> reports;
    for (const std::string& op : ops) {
        bool known = false;
        for (const std::string& name : all) known = known || name == op;
        if (!known) throw std::invalid_argument("gradcheck: unknown op '" + op + "'");

        Rng rng(mix_seed(seed, std::hash<std::string>{}(op)));
        double worst = 0.0;
        for (int rep = 0; rep < 10; ++rep) {
            const std::size_t b = 2 + rng.index(4);
            const std::size_t d = 3 + rng.index(4);
            const double tau = 0.3 + rng.uniform();
            const double alpha = rng.uniform(-0.2, 0.6);
            KernelBank bank{{0.6 + rng.uniform(), 1.5 + rng.uniform()}, {0.4, 0.6}};

            auto rows_of = [b](const Tensor& packed, std::size_t part) {
                std::vector<std::size_t> rows(b);
                for (std::size_t i = 0; i < b; ++i) rows[i] = part * b + i;
                return gather_rows(packed, rows);
            };
            Tensor packed = detail::random_features(2 * b, d, rng);

            std::function<Tensor(const Tensor&)> f;
            Tensor point = packed;
            if (op == "info-nce") {
                f = [&, tau](const Tensor& p) { return info_nce_loss(rows_of(p, 0), rows_of(p, 1), tau); };
            } else if (op == "intra-margin") {
                f = [&, alpha](const Tensor& p) {
                    return intra_margin_loss(rows_of(p, 0), rows_of(p, 1), alpha);
                };
            } else if (op == "inter-contrast") {
                f = [&](const Tensor& p) {
                    TransportMap s = transport_map(
                        pairwise_distance_matrix(rows_of(p, 0), DistanceMetric::Euclidean));
                    TransportMap t = transport_map(
                        pairwise_distance_matrix(rows_of(p, 1), DistanceMetric::Euclidean));
                    return inter_contrast_loss(s, {t});
                };
            } else if (op == "mmd") {
                f = [&, bank](const Tensor& p) { return mmd_sq(rows_of(p, 0), rows_of(p, 1), bank); };
            } else if (op == "alignment") {
                Tensor fixed = detail::random_features(b, d, rng);
                f = [&, bank, fixed](const Tensor& p) {
                    return alignment_loss(rows_of(p, 0), {rows_of(p, 1), fixed}, bank);
                };
            } else if (op == "soft-target") {
                Tensor blk1 = row_softmax(detail::random_features(b, 2, rng));
                Tensor blk2 = row_softmax(detail::random_features(b, 3, rng));
                std::vector<TeacherProbBlock> blocks{{blk1, 0}, {blk2, 2}};
                point = detail::random_features(b, 5, rng);
                f = [blocks](const Tensor& p) { return soft_target_loss(p, blocks, 2.0); };
            } else {  // total: every branch live
                Tensor fixed = detail::random_features(b, d, rng);
                Tensor head = detail::random_features(4, d, rng);  // 4-class union
                Tensor blk1 = row_softmax(detail::random_features(b, 2, rng));
                Tensor blk2 = row_softmax(detail::random_features(b, 2, rng));
                std::vector<TeacherProbBlock> blocks{{blk1, 0}, {blk2, 2}};
                LossWeights w;
                w.margin = alpha;
                w.tau = tau;
                f = [&, bank, fixed, head, blocks, w](const Tensor& p) {
                    Tensor v1 = rows_of(p, 0), v2 = rows_of(p, 1);
                    Tensor intra = intra_margin_loss(v1, v2, w.margin);
                    TransportMap s =
                        transport_map(pairwise_distance_matrix(v1, DistanceMetric::Euclidean));
                    TransportMap t =
                        transport_map(pairwise_distance_matrix(fixed, DistanceMetric::Euclidean));
                    Tensor inter = inter_contrast_loss(s, {t});
                    Tensor align = alignment_loss(v1, {fixed}, bank);
                    Tensor distill = soft_target_loss(matmul(v1, transpose(head)), blocks);
                    return total_loss(intra, inter, align, distill, w).value;
                };
            }
            worst = std::max(worst, grad_check(f, point, kEps));
        }
        reports.push_back({op, worst, worst <= tolerance});
    }
    return reports;
}

}  // namespace cka
