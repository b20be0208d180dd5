#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cka/rng.hpp"
#include "cka/tensor.hpp"

namespace cka {

// Flat row-major samples with union-space labels. Labels may be absent: the
// amalgamation pool is built that way so no code path can touch annotations.
struct Dataset {
    std::size_t dim = 0;
    std::size_t class_count = 0;
    std::vector<double> samples;
    std::vector<int> labels;
    std::string split;

    std::size_t size() const { return dim == 0 ? 0 : samples.size() / dim; }
    bool labeled() const { return !labels.empty(); }

    Tensor batch(const std::vector<std::size_t>& indices) const {
        std::vector<double> out;
        out.reserve(indices.size() * dim);
        for (std::size_t i : indices) {
            if (i >= size()) throw std::out_of_range("dataset batch: index out of range");
            out.insert(out.end(), samples.begin() + i * dim, samples.begin() + (i + 1) * dim);
        }
        return Tensor({indices.size(), dim}, std::move(out));
    }

    Tensor all() const {
        std::vector<double> copy = samples;
        return Tensor({size(), dim}, std::move(copy));
    }

    // the unlabeled amalgamation pool: annotations dropped at construction
    Dataset unlabeled() const {
        Dataset d = *this;
        d.labels.clear();
        return d;
    }
};

// ---------------------------------------------------------------------------
// Synthetic clusters
// ---------------------------------------------------------------------------

// Isotropic unit-variance Gaussian clusters at seeded random centers with
// pairwise center distances >= separation (so separation is in noise-sigma
// units). 80/20 train/test split with equal per-class train counts.
inline std::pair<Dataset, Dataset> gen_blobs(std::size_t classes, std::size_t dim,
                                             std::size_t per_class, double separation,
                                             std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("gen_blobs: need at least 2 classes");
    if (per_class < 2) throw std::invalid_argument("gen_blobs: need at least 2 samples per class");
    if (dim == 0) throw std::invalid_argument("gen_blobs: dim must be positive");

    Rng rng(seed);
    const double spread = 1.4 * separation *
                          std::pow(static_cast<double>(classes), 1.0 / static_cast<double>(dim)) /
                          std::sqrt(2.0 * static_cast<double>(dim));
    std::vector<double> centers;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        centers.assign(classes * dim, 0.0);
        for (double& v : centers) v = spread * rng.normal();
        placed = true;
        for (std::size_t a = 0; a < classes && placed; ++a)
            for (std::size_t b = a + 1; b < classes && placed; ++b) {
                double s = 0.0;
                for (std::size_t k = 0; k < dim; ++k) {
                    const double d = centers[a * dim + k] - centers[b * dim + k];
                    s += d * d;
                }
                if (s < separation * separation) placed = false;
            }
    }
    if (!placed)
        throw std::runtime_error("gen_blobs: could not place " + std::to_string(classes) +
                                 " centers at separation " + std::to_string(separation) + " in dim " +
                                 std::to_string(dim));

    const std::size_t train_per_class = per_class * 4 / 5;
    Dataset train, test;
    train.dim = test.dim = dim;
    train.class_count = test.class_count = classes;
    train.split = "train";
    test.split = "test";
    std::vector<double> row(dim);
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t k = 0; k < dim; ++k) row[k] = centers[c * dim + k] + rng.normal();
            Dataset& target = i < train_per_class ? train : test;
            target.samples.insert(target.samples.end(), row.begin(), row.end());
            target.labels.push_back(static_cast<int>(c));
        }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("idx: cannot open " + path.string());
    const std::streamsize n = in.tellg();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(bytes.data()), n);
    return bytes;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
    if (off + 4 > b.size()) throw std::runtime_error("idx: truncated header");
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

// u8 image tensor file: magic 0x00000803, big-endian dims, pixels scaled to
// [0,1] and flattened row-major. Returns (count, flattened dim, values).
inline std::tuple<std::size_t, std::size_t, std::vector<double>> load_idx_images(
    const std::filesystem::path& path) {
    const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
    if (detail::be32(bytes, 0) != 0x00000803u)
        throw std::runtime_error("idx: bad image magic in " + path.string());
    const std::uint64_t count = detail::be32(bytes, 4);
    const std::uint64_t rows = detail::be32(bytes, 8);
    const std::uint64_t cols = detail::be32(bytes, 12);
    const std::uint64_t total = count * rows * cols;
    if (rows != 0 && cols != 0 && total / rows / cols != count)
        throw std::runtime_error("idx: dimension overflow in " + path.string());
    if (bytes.size() != 16 + total)
        throw std::runtime_error("idx: truncated image payload in " + path.string());
    std::vector<double> values(total);
    for (std::size_t i = 0; i < total; ++i) values[i] = bytes[16 + i] / 255.0;
    return {count, rows * cols, std::move(values)};
}

// u8 label file: magic 0x00000801.
inline std::vector<int> load_idx_labels(const std::filesystem::path& path) {
    const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
    if (detail::be32(bytes, 0) != 0x00000801u)
        throw std::runtime_error("idx: bad label magic in " + path.string());
    const std::uint64_t count = detail::be32(bytes, 4);
    if (bytes.size() != 8 + count)
        throw std::runtime_error("idx: truncated label payload in " + path.string());
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = bytes[8 + i];
    return labels;
}

inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, std::size_t class_count,
                        std::string split = "train") {
    auto [count, dim, values] = load_idx_images(images_path);
    std::vector<int> labels = load_idx_labels(labels_path);
    if (labels.size() != count)
        throw std::runtime_error("idx: image/label count mismatch: " + std::to_string(count) +
                                 " vs " + std::to_string(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count)
            throw std::runtime_error("idx: label " + std::to_string(labels[i]) + " at row " +
                                     std::to_string(i) + " outside the declared " +
                                     std::to_string(class_count) + " classes");
    Dataset d;
    d.dim = dim;
    d.class_count = class_count;
    d.samples = std::move(values);
    d.labels = std::move(labels);
    d.split = std::move(split);
    return d;
}

// ---------------------------------------------------------------------------
// Disjoint task partitioning
// ---------------------------------------------------------------------------

struct TaskSpec {
    std::size_t teacher_index = 0;
    std::vector<int> class_ids;  // specialty classes, in slot order
    std::size_t slot_begin = 0;

    std::size_t slot_count() const { return class_ids.size(); }
};

struct TaskSplit {
    std::vector<TaskSpec> tasks;
    std::size_t class_count = 0;
    std::vector<int> slot_class_ids;  // union slot -> original class id
    std::vector<int> class_to_slot;   // original class id -> union slot

    int slot_of(int label) const {
        if (label < 0 || static_cast<std::size_t>(label) >= class_to_slot.size())
            throw std::out_of_range("task split: label " + std::to_string(label) +
                                    " outside the union label space");
        return class_to_slot[label];
    }

    std::size_t task_of_slot(std::size_t slot) const {
        for (const TaskSpec& t : tasks)
            if (slot >= t.slot_begin && slot < t.slot_begin + t.slot_count()) return t.teacher_index;
        throw std::out_of_range("task split: slot out of range");
    }
};

namespace detail {

inline TaskSplit finalize_split(std::vector<TaskSpec> tasks, std::size_t classes) {
    TaskSplit split;
    split.tasks = std::move(tasks);
    split.class_count = classes;
    split.slot_class_ids.assign(classes, -1);
    split.class_to_slot.assign(classes, -1);
    for (const TaskSpec& t : split.tasks)
        for (std::size_t i = 0; i < t.class_ids.size(); ++i) {
            const int cls = t.class_ids[i];
            const std::size_t slot = t.slot_begin + i;
            if (cls < 0 || static_cast<std::size_t>(cls) >= classes)
                throw std::invalid_argument("task split: class id " + std::to_string(cls) +
                                            " out of range");
            if (slot >= classes || split.slot_class_ids[slot] != -1)
                throw std::invalid_argument("task split: overlapping slot ranges at slot " +
                                            std::to_string(slot));
            if (split.class_to_slot[cls] != -1)
                throw std::invalid_argument("task split: class " + std::to_string(cls) +
                                            " assigned to two teachers");
            split.slot_class_ids[slot] = cls;
            split.class_to_slot[cls] = static_cast<int>(slot);
        }
    for (std::size_t c = 0; c < classes; ++c)
        if (split.class_to_slot[c] == -1)
            throw std::invalid_argument("task split: class " + std::to_string(c) +
                                        " not covered by any teacher");
    return split;
}

}  // namespace detail

// Equal-size disjoint covering partition; slot ranges contiguous in union
// order. teacher_count must divide the class count.
inline TaskSplit split_tasks(std::size_t classes, std::size_t teacher_count, std::uint64_t seed) {
    if (teacher_count == 0 || classes == 0)
        throw std::invalid_argument("split_tasks: counts must be positive");
    if (classes % teacher_count != 0)
        throw std::invalid_argument("split_tasks: " + std::to_string(teacher_count) +
                                    " teachers do not divide " + std::to_string(classes) + " classes");
    std::vector<int> ids(classes);
    for (std::size_t i = 0; i < classes; ++i) ids[i] = static_cast<int>(i);
    Rng rng(seed);
    for (std::size_t i = classes; i > 1; --i) std::swap(ids[i - 1], ids[rng.index(i)]);

    const std::size_t per = classes / teacher_count;
    std::vector<TaskSpec> tasks;
    for (std::size_t t = 0; t < teacher_count; ++t) {
        TaskSpec spec;
        spec.teacher_index = t;
        spec.slot_begin = t * per;
        spec.class_ids.assign(ids.begin() + t * per, ids.begin() + (t + 1) * per);
        tasks.push_back(std::move(spec));
    }
    return detail::finalize_split(std::move(tasks), classes);
}

// Explicit subsets (cross-dataset merging); must be disjoint and covering.
inline TaskSplit split_from_subsets(const std::vector<std::vector<int>>& subsets,
                                    std::size_t classes) {
    std::vector<TaskSpec> tasks;
    std::size_t slot = 0;
    for (std::size_t t = 0; t < subsets.size(); ++t) {
        TaskSpec spec;
        spec.teacher_index = t;
        spec.slot_begin = slot;
        spec.class_ids = subsets[t];
        slot += subsets[t].size();
        tasks.push_back(std::move(spec));
    }
    return detail::finalize_split(std::move(tasks), classes);
}

// ---------------------------------------------------------------------------
// Stochastic two-view augmentation
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
    double noise_sigma = 0.0;
    double mask_prob = 0.0;
    double scale_jitter = 0.0;  // per-sample scale drawn from [1-j, 1+j]
    std::uint64_t seed = 0;
};

namespace detail {

inline Tensor augment_once(const AugmentationPolicy& policy, const Tensor& batch, Rng& rng) {
    const std::size_t rows = batch.shape()[0], dim = batch.shape()[1];
    std::vector<double> out = batch.values();
    for (std::size_t i = 0; i < rows; ++i) {
        const double scale =
            policy.scale_jitter > 0.0
                ? rng.uniform(1.0 - policy.scale_jitter, 1.0 + policy.scale_jitter)
                : 1.0;
        for (std::size_t k = 0; k < dim; ++k) {
            double& v = out[i * dim + k];
            if (policy.noise_sigma > 0.0) v += policy.noise_sigma * rng.normal();
            if (policy.mask_prob > 0.0 && rng.bernoulli(policy.mask_prob)) v = 0.0;
            if (policy.scale_jitter > 0.0) v *= scale;
        }
    }
    return Tensor({rows, dim}, std::move(out));
}

}  // namespace detail

// Two independent stochastic views of the same rows, deterministic in
// (policy seed, epoch, batch index). The identity policy returns the batch
// values untouched.
inline std::pair<Tensor, Tensor> two_views(const AugmentationPolicy& policy, const Tensor& batch,
                                           std::size_t epoch, std::size_t batch_index) {
    if (policy.noise_sigma < 0.0 || policy.mask_prob < 0.0 || policy.scale_jitter < 0.0)
        throw std::invalid_argument("two_views: augmentation parameters must be non-negative");
    Rng rng1(mix_seed(policy.seed, epoch, batch_index, 1));
    Rng rng2(mix_seed(policy.seed, epoch, batch_index, 2));
    return {detail::augment_once(policy, batch, rng1), detail::augment_once(policy, batch, rng2)};
}

// ---------------------------------------------------------------------------
// Mini-batching
// ---------------------------------------------------------------------------

// Seeded shuffle per (seed, epoch); with drop_last every batch has exactly
// batch_size rows.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::uint64_t seed, std::size_t epoch,
                                                          bool drop_last = true) {
    if (batch_size < 2)
        throw std::invalid_argument("make_batches: batch_size must be at least 2");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start + batch_size <= n; start += batch_size)
        batches.emplace_back(perm.begin() + start, perm.begin() + start + batch_size);
    const std::size_t consumed = (n / batch_size) * batch_size;
    if (!drop_last && consumed < n) batches.emplace_back(perm.begin() + consumed, perm.end());
    return batches;
}

// ---------------------------------------------------------------------------
// Persistence: data.bin (LE float64) + meta.json
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const Dataset& train,
                         const Dataset& test, const nlohmann::json& extra = {}) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["dim"] = train.dim;
    meta["class_count"] = train.class_count;
    meta["train_count"] = train.size();
    meta["test_count"] = test.size();
    meta["train_labels"] = train.labels;
    meta["test_labels"] = test.labels;
    if (!extra.is_null()) meta["generator"] = extra;
    std::ofstream mf(dir / "meta.json");
    mf << meta.dump(2) << '\n';
    std::ofstream blob(dir / "data.bin", std::ios::binary);
    blob.write(reinterpret_cast<const char*>(train.samples.data()),
               static_cast<std::streamsize>(train.samples.size() * sizeof(double)));
    blob.write(reinterpret_cast<const char*>(test.samples.data()),
               static_cast<std::streamsize>(test.samples.size() * sizeof(double)));
}

inline std::pair<Dataset, Dataset> load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "meta.json");
    if (!mf) throw std::runtime_error("dataset: missing meta " + (dir / "meta.json").string());
    nlohmann::json meta = nlohmann::json::parse(mf);
    Dataset train, test;
    train.dim = test.dim = meta.at("dim").get<std::size_t>();
    train.class_count = test.class_count = meta.at("class_count").get<std::size_t>();
    train.labels = meta.at("train_labels").get<std::vector<int>>();
    test.labels = meta.at("test_labels").get<std::vector<int>>();
    train.split = "train";
    test.split = "test";
    const std::size_t train_count = meta.at("train_count").get<std::size_t>();
    const std::size_t test_count = meta.at("test_count").get<std::size_t>();
    std::ifstream blob(dir / "data.bin", std::ios::binary | std::ios::ate);
    if (!blob) throw std::runtime_error("dataset: missing blob " + (dir / "data.bin").string());
    const std::size_t expected = (train_count + test_count) * train.dim * sizeof(double);
    if (static_cast<std::size_t>(blob.tellg()) != expected)
        throw std::runtime_error("dataset: data.bin size mismatch");
    blob.seekg(0);
    train.samples.resize(train_count * train.dim);
    test.samples.resize(test_count * test.dim);
    blob.read(reinterpret_cast<char*>(train.samples.data()),
              static_cast<std::streamsize>(train.samples.size() * sizeof(double)));
    blob.read(reinterpret_cast<char*>(test.samples.data()),
              static_cast<std::streamsize>(test.samples.size() * sizeof(double)));
    return {std::move(train), std::move(test)};
}

}  // namespace cka
