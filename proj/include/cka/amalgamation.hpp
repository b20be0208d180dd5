#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cka/data.hpp"
#include "cka/losses.hpp"
#include "cka/models.hpp"
#include "cka/rng.hpp"
#include "cka/tensor.hpp"

namespace cka {

enum class TeacherView { Clean, View1 };
enum class SoftTargetMode { SoftBlocks, ConcatLogits };

struct TrainSettings {
    AdamConfig adam;  // lr 5e-4, decoupled wd 5e-4
    std::size_t batch_size = 64;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    LossWeights weights;
    DistanceMetric inter_metric = DistanceMetric::Euclidean;
    std::optional<SpatialShape> spatial;
    Reduction reduction = Reduction::Mean;
    KlDirection kl_direction = KlDirection::StudentFirst;
    TeacherView teacher_view = TeacherView::Clean;
    SoftTargetMode soft_target_mode = SoftTargetMode::SoftBlocks;
    bool freeze_teacher_adapters = false;
    bool clip_gradients = false;
    double clip_norm = 5.0;
    AugmentationPolicy augment;
};

struct CommonSpaceSpec {
    std::size_t adapter_dim = 256;
    std::size_t common_dim = 128;
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown losses;
    double lr = 0.0;
    double union_accuracy = 0.0;
    std::vector<double> task_accuracy;
    double seconds = 0.0;
};

struct RunMetrics {
    std::vector<EpochRecord> epochs;
    double final_union_accuracy = 0.0;
    std::vector<double> final_task_accuracy;
};

struct EvalResult {
    double union_accuracy = 0.0;
    std::vector<double> task_accuracy;
};

// ---------------------------------------------------------------------------
// Union-label evaluation
// ---------------------------------------------------------------------------

using Predictor = std::function<Tensor(const Tensor&)>;  // {B, dim} -> {B, C} union scores

inline EvalResult evaluate_union(const Predictor& predict, const Dataset& test,
                                 const TaskSplit& split) {
    if (!test.labeled()) throw std::invalid_argument("evaluate_union: test set has no labels");
    EvalResult result;
    result.task_accuracy.assign(split.tasks.size(), 0.0);
    std::vector<std::size_t> task_totals(split.tasks.size(), 0);
    std::size_t hits = 0;

    const std::size_t chunk = 512;
    for (std::size_t start = 0; start < test.size(); start += chunk) {
        const std::size_t end = std::min(test.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Tensor scores = predict(test.batch(idx));
        const std::size_t c = scores.shape()[1];
        if (c != split.class_count)
            throw std::invalid_argument("evaluate_union: predictor emits " + std::to_string(c) +
                                        " slots, union has " + std::to_string(split.class_count));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::size_t arg = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (scores.at(i, j) > scores.at(i, arg)) arg = j;
            const int true_slot = split.slot_of(test.labels[idx[i]]);
            const std::size_t task = split.task_of_slot(static_cast<std::size_t>(true_slot));
            ++task_totals[task];
            if (arg == static_cast<std::size_t>(true_slot)) {
                ++hits;
                result.task_accuracy[task] += 1.0;
            }
        }
    }
    for (std::size_t t = 0; t < result.task_accuracy.size(); ++t)
        if (task_totals[t] > 0) result.task_accuracy[t] /= static_cast<double>(task_totals[t]);
    result.union_accuracy = static_cast<double>(hits) / static_cast<double>(test.size());
    return result;
}

// Rebuild the union layout from teacher metadata; validates that slot ranges
// tile the union exactly.
inline TaskSplit union_map_from_teachers(const std::vector<TeacherModel>& teachers) {
    if (teachers.empty()) throw std::invalid_argument("union map: no teachers");
    std::size_t classes = 0;
    for (const TeacherModel& t : teachers) classes += t.class_ids.size();
    std::vector<TaskSpec> tasks;
    for (std::size_t i = 0; i < teachers.size(); ++i)
        tasks.push_back({i, teachers[i].class_ids, teachers[i].head.slot_begin});
    return detail::finalize_split(std::move(tasks), classes);
}

inline Predictor student_predictor(const StudentModel& student) {
    return [&student](const Tensor& x) { return student.classify(student.encode(x)); };
}

// Zero-padding rule: a lone teacher's probabilities outside its specialty are
// zero before the union argmax.
inline Predictor padded_teacher_predictor(const TeacherModel& teacher, std::size_t class_count) {
    return [&teacher, class_count](const Tensor& x) {
        Tensor local = row_softmax(teacher.classify(teacher.encode(x)));
        const std::size_t b = local.shape()[0], k = local.shape()[1];
        std::vector<double> padded(b * class_count, 0.0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < k; ++j)
                padded[i * class_count + teacher.head.slot_begin + j] = local.at(i, j);
        return Tensor({b, class_count}, std::move(padded));
    };
}

// Raw teacher logits concatenated into their union slots.
inline Tensor ensemble_predict(const std::vector<TeacherModel>& teachers, const Tensor& x) {
    const TaskSplit layout = union_map_from_teachers(teachers);  // rejects slot overlap
    const std::size_t b = x.shape()[0];
    std::vector<Tensor> logits;
    logits.reserve(teachers.size());
    for (const TeacherModel& t : teachers) logits.push_back(t.classify(t.encode(x)));
    std::vector<double> out(b * layout.class_count, 0.0);
    for (std::size_t ti = 0; ti < teachers.size(); ++ti) {
        const std::size_t begin = teachers[ti].head.slot_begin;
        const std::size_t k = teachers[ti].head.slot_count();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < k; ++j)
                out[i * layout.class_count + begin + j] = logits[ti].at(i, j);
    }
    return Tensor({b, layout.class_count}, std::move(out));
}

inline Predictor ensemble_predictor(const std::vector<TeacherModel>& teachers) {
    return [&teachers](const Tensor& x) { return ensemble_predict(teachers, x); };
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

struct PretrainResult {
    TeacherModel teacher;
    std::vector<double> epoch_loss;
    double task_accuracy = 0.0;  // on the teacher's own classes
};

namespace detail {

inline Dataset restrict_to_task(const Dataset& data, const TaskSpec& task) {
    Dataset out;
    out.dim = data.dim;
    out.class_count = task.class_ids.size();
    out.split = data.split;
    std::vector<int> local(data.class_count, -1);
    for (std::size_t i = 0; i < task.class_ids.size(); ++i) local[task.class_ids[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int l = local[data.labels[i]];
        if (l < 0) continue;
        out.samples.insert(out.samples.end(), data.samples.begin() + i * data.dim,
                           data.samples.begin() + (i + 1) * data.dim);
        out.labels.push_back(l);
    }
    return out;
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
    std::vector<double> v(labels.size() * classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) v[i * classes + labels[i]] = 1.0;
    return Tensor({labels.size(), classes}, std::move(v));
}

inline Tensor cross_entropy(const Tensor& logits, const Tensor& one_hot_targets) {
    Tensor log_probs = cka::log(row_softmax(logits));
    return scalar_mul(mean_all(sum_axis(mul(one_hot_targets, log_probs), 1)), -1.0);
}

inline void clip_global_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor& p : params)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (const Tensor& p : params)
        if (p.has_grad())
            for (double& g : p.node()->grad_buffer()) g *= scale;
}

}  // namespace detail

// Supervised cross-entropy on the task's own classes only; the returned model
// is frozen.
inline PretrainResult pretrain_teacher(const TaskSpec& task, const Dataset& train,
                                       const Dataset& test, const MlpSpec& encoder_spec,
                                       const TrainSettings& settings) {
    if (task.class_ids.empty()) throw std::invalid_argument("pretrain_teacher: empty task subset");
    Dataset task_train = detail::restrict_to_task(train, task);
    Dataset task_test = detail::restrict_to_task(test, task);
    if (task_train.size() == 0) throw std::invalid_argument("pretrain_teacher: no samples in task");

    TeacherModel teacher =
        make_teacher("teacher" + std::to_string(task.teacher_index), encoder_spec, task.class_ids,
                     task.slot_begin, mix_seed(settings.seed, 0x7e00 + task.teacher_index));
    AdamOptimizer opt(teacher.parameters(), settings.adam);

    PretrainResult result{std::move(teacher), {}, 0.0};
    const std::size_t batch =
        std::min<std::size_t>(settings.batch_size, std::max<std::size_t>(2, task_train.size()));
    for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
        opt.set_lr(cosine_lr(settings.adam.lr, epoch, settings.epochs));
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (const auto& idx :
             make_batches(task_train.size(), batch, mix_seed(settings.seed, 0xba7c, task.teacher_index),
                          epoch, true)) {
            Tensor x = task_train.batch(idx);
            std::vector<int> yb(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = task_train.labels[idx[i]];
            Tensor loss = detail::cross_entropy(result.teacher.classify(result.teacher.encode(x)),
                                                detail::one_hot(yb, task.class_ids.size()));
            if (!std::isfinite(loss.item()))
                throw std::runtime_error("pretrain_teacher: non-finite loss at epoch " +
                                         std::to_string(epoch));
            loss.backward();
            opt.step();
            opt.zero_grad();
            loss_sum += loss.item();
            ++steps;
        }
        result.epoch_loss.push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
    }
    result.teacher.set_frozen(true);

    // accuracy on the teacher's own classes, local label space
    if (task_test.size() > 0) {
        Tensor logits = result.teacher.classify(result.teacher.encode(task_test.all()));
        std::size_t hits = 0;
        for (std::size_t i = 0; i < task_test.size(); ++i) {
            std::size_t arg = 0;
            for (std::size_t j = 1; j < task.class_ids.size(); ++j)
                if (logits.at(i, j) > logits.at(i, arg)) arg = j;
            if (arg == static_cast<std::size_t>(task_test.labels[i])) ++hits;
        }
        result.task_accuracy = static_cast<double>(hits) / static_cast<double>(task_test.size());
    }
    return result;
}

// ---------------------------------------------------------------------------
// Contrastive amalgamation
// ---------------------------------------------------------------------------

struct AmalgamationResult {
    StudentModel student;
    CommonSpaceStack stack;
    RunMetrics metrics;
};

// One student training run against frozen teachers over the unlabeled pool.
// Per batch: two augmented student views feed the intra contrast; transport
// maps of the student's view-1 features against each teacher's features feed
// the inter contrast; adapters plus the shared MLP feed the alignment loss;
// concatenated teacher targets feed the distillation term. Adam walks the
// student, every adapter and the shared MLP under a cosine schedule; teacher
// backbones stay untouched.
inline AmalgamationResult amalgamate_student(const std::vector<TeacherModel>& teachers,
                                             const Dataset& pool, const Dataset& test,
                                             const MlpSpec& student_encoder,
                                             std::size_t proj_hidden, std::size_t proj_dim,
                                             const CommonSpaceSpec& common,
                                             const TrainSettings& settings) {
    if (teachers.empty()) throw std::invalid_argument("amalgamate_student: need at least one teacher");
    for (const TeacherModel& t : teachers)
        if (!t.frozen)
            throw std::invalid_argument("amalgamate_student: teacher '" + t.id + "' is not frozen");
    settings.weights.validate();
    const TaskSplit split = union_map_from_teachers(teachers);
    if (pool.size() < settings.batch_size)
        throw std::invalid_argument("amalgamate_student: pool smaller than one batch");

    AmalgamationResult result{
        make_student(student_encoder, proj_hidden, proj_dim, split.slot_class_ids,
                     mix_seed(settings.seed, 0x57d0)),
        {},
        {}};
    std::vector<std::pair<std::string, std::size_t>> model_dims{
        {"student", result.student.encoder.output_dim()}};
    for (const TeacherModel& t : teachers) model_dims.emplace_back(t.id, t.encoder.output_dim());
    result.stack = make_common_stack(model_dims, common.adapter_dim, common.common_dim,
                                     mix_seed(settings.seed, 0xc0a7));

    const LossWeights& w = settings.weights;
    const bool need_intra = w.lambda_intra > 0.0;
    const bool need_inter = w.lambda_inter > 0.0;
    const bool need_align = w.lambda_align > 0.0;
    const bool need_distill = w.lambda_distill > 0.0;
    const bool need_teacher_feats = need_inter || need_align || need_distill;

    std::vector<Tensor> trainable = result.student.parameters();
    if (settings.freeze_teacher_adapters) {
        auto it = result.stack.adapters.find("student");
        trainable.push_back(it->second.weight);
        trainable.push_back(it->second.bias);
    } else {
        for (const Tensor& t : result.stack.adapter_parameters()) trainable.push_back(t);
    }
    for (const Tensor& t : result.stack.shared.parameters()) trainable.push_back(t);
    AdamOptimizer opt(trainable, settings.adam);

    for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const double lr = cosine_lr(settings.adam.lr, epoch, settings.epochs);
        opt.set_lr(lr);
        LossBreakdown sums;
        std::size_t steps = 0;
        const auto batches =
            make_batches(pool.size(), settings.batch_size, mix_seed(settings.seed, 0xba7c), epoch, true);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Tensor x = pool.batch(batches[bi]);
            auto [view1, view2] = two_views(settings.augment, x, epoch, bi);
            Tensor h1 = result.student.encode(view1);

            std::optional<Tensor> intra, inter, align, distill;
            if (need_intra) {
                Tensor z1 = result.student.project(h1);
                Tensor z2 = result.student.project(result.student.encode(view2));
                intra = intra_margin_loss(z1, z2, w.margin, settings.reduction);
            }

            std::vector<Tensor> teacher_feats;
            if (need_teacher_feats) {
                const Tensor& teacher_in = settings.teacher_view == TeacherView::Clean ? x : view1;
                teacher_feats.reserve(teachers.size());
                for (const TeacherModel& t : teachers) teacher_feats.push_back(t.encode(teacher_in));
            }

            if (need_inter) {
                TransportMap pi_s = transport_map(
                    pairwise_distance_matrix(h1, settings.inter_metric, settings.spatial),
                    settings.inter_metric, "student");
                std::vector<TransportMap> pi_t;
                pi_t.reserve(teachers.size());
                for (std::size_t ti = 0; ti < teachers.size(); ++ti)
                    pi_t.push_back(transport_map(
                        pairwise_distance_matrix(teacher_feats[ti], settings.inter_metric,
                                                 settings.spatial),
                        settings.inter_metric, teachers[ti].id));
                inter = inter_contrast_loss(pi_s, pi_t, settings.reduction);
            }

            if (need_align) {
                Tensor f_s = result.stack.to_common("student", h1);
                std::vector<Tensor> f_t;
                f_t.reserve(teachers.size());
                for (std::size_t ti = 0; ti < teachers.size(); ++ti)
                    f_t.push_back(result.stack.to_common(teachers[ti].id, teacher_feats[ti]));
                std::vector<Tensor> bank_feats{f_s};
                for (const Tensor& f : f_t) bank_feats.push_back(f);
                align = alignment_loss(f_s, f_t, KernelBank::median_heuristic(bank_feats));
            }

            if (need_distill) {
                Tensor logits = result.student.classify(h1);
                std::vector<TeacherProbBlock> blocks;
                if (settings.soft_target_mode == SoftTargetMode::SoftBlocks) {
                    for (std::size_t ti = 0; ti < teachers.size(); ++ti)
                        blocks.push_back({row_softmax(teachers[ti].classify(teacher_feats[ti])),
                                          teachers[ti].head.slot_begin});
                } else {
                    // one softmax over the concatenated raw logits
                    std::vector<Tensor> slots(teachers.size());
                    std::vector<std::size_t> order(teachers.size());
                    for (std::size_t ti = 0; ti < teachers.size(); ++ti) order[ti] = ti;
                    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                        return teachers[a].head.slot_begin < teachers[b].head.slot_begin;
                    });
                    std::vector<Tensor> parts;
                    for (std::size_t ti : order)
                        parts.push_back(teachers[ti].classify(teacher_feats[ti]));
                    Tensor target = row_softmax(
                        scalar_mul(concat(parts, 1), 1.0 / w.distill_temperature));
                    blocks.push_back({target, 0});
                }
                distill = soft_target_loss(logits, blocks, w.distill_temperature,
                                           settings.kl_direction);
            }

            TotalLoss total = total_loss(intra, inter, align, distill, w);
            const LossBreakdown& bd = total.breakdown;
            const std::pair<const char*, double> components[] = {
                {"intra", bd.intra}, {"inter", bd.inter}, {"align", bd.align},
                {"std", bd.distill}, {"total", bd.total}};
            for (const auto& [name, value] : components)
                if (!std::isfinite(value))
                    throw std::runtime_error("amalgamate_student: loss component '" +
                                             std::string(name) + "' is non-finite at epoch " +
                                             std::to_string(epoch) + " batch " + std::to_string(bi));

            total.value.backward();
            if (settings.clip_gradients) detail::clip_global_norm(trainable, settings.clip_norm);
            opt.step();
            opt.zero_grad();

            sums.intra += bd.intra;
            sums.inter += bd.inter;
            sums.align += bd.align;
            sums.distill += bd.distill;
            ++steps;
        }

        EpochRecord record;
        record.epoch = epoch;
        const double inv = steps ? 1.0 / static_cast<double>(steps) : 0.0;
        record.losses.intra = sums.intra * inv;
        record.losses.inter = sums.inter * inv;
        record.losses.align = sums.align * inv;
        record.losses.distill = sums.distill * inv;
        record.losses.total = w.lambda_intra * record.losses.intra +
                              w.lambda_inter * record.losses.inter +
                              w.lambda_align * record.losses.align +
                              w.lambda_distill * record.losses.distill;
        record.lr = lr;
        EvalResult eval = evaluate_union(student_predictor(result.student), test, split);
        record.union_accuracy = eval.union_accuracy;
        record.task_accuracy = eval.task_accuracy;
        record.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        result.metrics.epochs.push_back(std::move(record));
    }

    if (!result.metrics.epochs.empty()) {
        result.metrics.final_union_accuracy = result.metrics.epochs.back().union_accuracy;
        result.metrics.final_task_accuracy = result.metrics.epochs.back().task_accuracy;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Baselines: presets over the same training loop
// ---------------------------------------------------------------------------

// KL against one softmax over the concatenated teacher logits; no contrast,
// no alignment.
inline AmalgamationResult vanilla_kd_baseline(const std::vector<TeacherModel>& teachers,
                                              const Dataset& pool, const Dataset& test,
                                              const MlpSpec& student_encoder,
                                              std::size_t proj_hidden, std::size_t proj_dim,
                                              const CommonSpaceSpec& common, TrainSettings settings) {
    settings.weights.lambda_intra = 0.0;
    settings.weights.lambda_inter = 0.0;
    settings.weights.lambda_align = 0.0;
    settings.soft_target_mode = SoftTargetMode::ConcatLogits;
    return amalgamate_student(teachers, pool, test, student_encoder, proj_hidden, proj_dim, common,
                              settings);
}

// Common-space alignment plus soft targets; both contrasts off.
inline AmalgamationResult cfl_baseline(const std::vector<TeacherModel>& teachers, const Dataset& pool,
                                       const Dataset& test, const MlpSpec& student_encoder,
                                       std::size_t proj_hidden, std::size_t proj_dim,
                                       const CommonSpaceSpec& common, TrainSettings settings) {
    settings.weights.lambda_intra = 0.0;
    settings.weights.lambda_inter = 0.0;
    return amalgamate_student(teachers, pool, test, student_encoder, proj_hidden, proj_dim, common,
                              settings);
}

}  // namespace cka
