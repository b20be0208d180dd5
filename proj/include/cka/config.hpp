#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cka/amalgamation.hpp"
#include "cka/data.hpp"
#include "cka/losses.hpp"
#include "cka/models.hpp"

namespace cka {

// Config schema violation; `path` names the offending key.
struct ConfigError : std::runtime_error {
    std::string path;
    ConfigError(std::string key_path, const std::string& what)
        : std::runtime_error(what), path(std::move(key_path)) {}
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       const std::set<std::string>& allowed) {
    if (!j.is_object())
        throw ConfigError(section, "config section '" + section + "' must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ConfigError(section.empty() ? key : section + "." + key,
                              "unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& section, const char* key, T& out) {
    if (!j.contains(key)) return;
    const std::string path = section.empty() ? key : section + "." + std::string(key);
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path, "config key '" + path + "': " + e.what());
    }
}

}  // namespace detail

struct SecondBlobConfig {
    std::size_t classes = 0;
    std::size_t per_class = 0;
    double separation = 10.0;
    std::uint64_t seed = 2;
};

struct DataConfig {
    std::string source = "blobs";  // blobs | idx
    std::size_t classes = 8;
    std::size_t dim = 32;
    std::size_t per_class = 500;
    double separation = 10.0;
    std::uint64_t seed = 1;
    std::string train_images, train_labels, test_images, test_labels;
    std::optional<SecondBlobConfig> second;  // cross-dataset merging
};

struct TasksConfig {
    std::size_t teacher_count = 2;
    std::uint64_t seed = 7;
    std::vector<std::vector<int>> subsets;  // explicit specialties; empty = equal split
};

struct ModelConfig {
    std::vector<std::vector<std::size_t>> teacher_widths = {{64, 64}, {128, 128}};
    std::vector<std::size_t> student_widths = {128, 128};
    std::size_t adapter_dim = 256;
    std::size_t common_dim = 128;
    std::size_t proj_hidden = 128;
    std::size_t proj_dim = 64;
    std::size_t spatial_channels = 0;  // 0 = no declared factorization
};

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 5e-4;
    std::size_t batch = 64;
    std::size_t epochs = 100;
    std::size_t pretrain_epochs = 30;
    double alpha = 0.4;
    double lambda_intra = 1.0;
    double lambda_inter = 1.0;
    double lambda_align = 10.0;
    double lambda_std = 1.0;
    double tau = 0.5;
    double distill_temperature = 1.0;
    std::string inter_metric = "euclidean";     // euclidean | cosine | mmd-spatial
    std::string reduction = "mean";             // mean | sum
    std::string kl_direction = "student-first"; // student-first | target-first
    std::string teacher_view = "clean";         // clean | view1
    std::string soft_target = "soft-blocks";    // soft-blocks | concat-logits
    bool freeze_teacher_adapters = false;
    bool clip_gradients = false;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
    double noise_sigma = 0.5;
    double mask_prob = 0.1;
    double scale_jitter = 0.1;
};

struct AblateConfig {
    std::vector<std::uint64_t> seeds;  // empty = {train.seed}
};

struct RunConfig {
    DataConfig data;
    TasksConfig tasks;
    ModelConfig model;
    TrainConfig train;
    AblateConfig ablate;
    std::string output_dir = "runs/out";

    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("config: cannot open " + path.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string(), std::string("config parse error: ") + e.what());
        }
        return from_json(j);
    }

    // ---- materialized domain objects -------------------------------------

    DistanceMetric metric() const {
        if (train.inter_metric == "euclidean") return DistanceMetric::Euclidean;
        if (train.inter_metric == "cosine") return DistanceMetric::Cosine;
        if (train.inter_metric == "mmd-spatial") return DistanceMetric::MmdSpatial;
        throw ConfigError("train.inter_metric", "unknown metric '" + train.inter_metric + "'");
    }

    LossWeights weights() const {
        LossWeights w;
        w.lambda_intra = train.lambda_intra;
        w.lambda_inter = train.lambda_inter;
        w.lambda_align = train.lambda_align;
        w.lambda_distill = train.lambda_std;
        w.margin = train.alpha;
        w.tau = train.tau;
        w.distill_temperature = train.distill_temperature;
        w.validate();
        return w;
    }

    TrainSettings settings() const {
        TrainSettings s;
        s.adam.lr = train.lr;
        s.adam.weight_decay = train.weight_decay;
        s.batch_size = train.batch;
        s.epochs = train.epochs;
        s.seed = train.seed;
        s.weights = weights();
        s.inter_metric = metric();
        if (model.spatial_channels > 0) s.spatial = SpatialShape{model.spatial_channels};
        else if (s.inter_metric == DistanceMetric::MmdSpatial)
            throw ConfigError("model.spatial_channels",
                              "mmd-spatial metric needs model.spatial_channels > 0");
        if (train.reduction == "mean") s.reduction = Reduction::Mean;
        else if (train.reduction == "sum") s.reduction = Reduction::Sum;
        else throw ConfigError("train.reduction", "unknown reduction '" + train.reduction + "'");
        if (train.kl_direction == "student-first") s.kl_direction = KlDirection::StudentFirst;
        else if (train.kl_direction == "target-first") s.kl_direction = KlDirection::TargetFirst;
        else throw ConfigError("train.kl_direction", "unknown direction '" + train.kl_direction + "'");
        if (train.teacher_view == "clean") s.teacher_view = TeacherView::Clean;
        else if (train.teacher_view == "view1") s.teacher_view = TeacherView::View1;
        else throw ConfigError("train.teacher_view", "unknown view '" + train.teacher_view + "'");
        if (train.soft_target == "soft-blocks") s.soft_target_mode = SoftTargetMode::SoftBlocks;
        else if (train.soft_target == "concat-logits") s.soft_target_mode = SoftTargetMode::ConcatLogits;
        else throw ConfigError("train.soft_target", "unknown mode '" + train.soft_target + "'");
        s.freeze_teacher_adapters = train.freeze_teacher_adapters;
        s.clip_gradients = train.clip_gradients;
        s.clip_norm = train.clip_norm;
        s.augment = {train.noise_sigma, train.mask_prob, train.scale_jitter, mix_seed(train.seed, 0xa06)};
        return s;
    }

    std::size_t union_classes() const {
        return data.second ? data.classes + data.second->classes : data.classes;
    }

    MlpSpec teacher_encoder_spec(std::size_t teacher_index) const {
        const auto& widths = model.teacher_widths[teacher_index % model.teacher_widths.size()];
        return {data.dim, widths};
    }

    MlpSpec student_encoder_spec() const { return {data.dim, model.student_widths}; }

    std::vector<std::uint64_t> ablate_seeds() const {
        return ablate.seeds.empty() ? std::vector<std::uint64_t>{train.seed} : ablate.seeds;
    }
};

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
    detail::check_keys(j, "", {"data", "tasks", "model", "train", "ablate", "output_dir"});
    RunConfig cfg;
    if (j.contains("data")) {
        const nlohmann::json& d = j.at("data");
        detail::check_keys(d, "data",
                           {"source", "classes", "dim", "per_class", "separation", "seed",
                            "train_images", "train_labels", "test_images", "test_labels", "second"});
        detail::read_field(d, "data", "source", cfg.data.source);
        detail::read_field(d, "data", "classes", cfg.data.classes);
        detail::read_field(d, "data", "dim", cfg.data.dim);
        detail::read_field(d, "data", "per_class", cfg.data.per_class);
        detail::read_field(d, "data", "separation", cfg.data.separation);
        detail::read_field(d, "data", "seed", cfg.data.seed);
        detail::read_field(d, "data", "train_images", cfg.data.train_images);
        detail::read_field(d, "data", "train_labels", cfg.data.train_labels);
        detail::read_field(d, "data", "test_images", cfg.data.test_images);
        detail::read_field(d, "data", "test_labels", cfg.data.test_labels);
        if (d.contains("second") && !d.at("second").is_null()) {
            const nlohmann::json& s = d.at("second");
            detail::check_keys(s, "data.second", {"classes", "per_class", "separation", "seed"});
            SecondBlobConfig second;
            detail::read_field(s, "data.second", "classes", second.classes);
            detail::read_field(s, "data.second", "per_class", second.per_class);
            detail::read_field(s, "data.second", "separation", second.separation);
            detail::read_field(s, "data.second", "seed", second.seed);
            cfg.data.second = second;
        }
        if (cfg.data.source != "blobs" && cfg.data.source != "idx")
            throw ConfigError("data.source", "unknown data source '" + cfg.data.source + "'");
    }
    if (j.contains("tasks")) {
        const nlohmann::json& t = j.at("tasks");
        detail::check_keys(t, "tasks", {"teacher_count", "seed", "subsets"});
        detail::read_field(t, "tasks", "teacher_count", cfg.tasks.teacher_count);
        detail::read_field(t, "tasks", "seed", cfg.tasks.seed);
        detail::read_field(t, "tasks", "subsets", cfg.tasks.subsets);
    }
    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        detail::check_keys(m, "model",
                           {"teacher_widths", "student_widths", "adapter_dim", "common_dim",
                            "proj_hidden", "proj_dim", "spatial_channels"});
        detail::read_field(m, "model", "teacher_widths", cfg.model.teacher_widths);
        detail::read_field(m, "model", "student_widths", cfg.model.student_widths);
        detail::read_field(m, "model", "adapter_dim", cfg.model.adapter_dim);
        detail::read_field(m, "model", "common_dim", cfg.model.common_dim);
        detail::read_field(m, "model", "proj_hidden", cfg.model.proj_hidden);
        detail::read_field(m, "model", "proj_dim", cfg.model.proj_dim);
        detail::read_field(m, "model", "spatial_channels", cfg.model.spatial_channels);
    }
    if (j.contains("train")) {
        const nlohmann::json& t = j.at("train");
        detail::check_keys(
            t, "train",
            {"lr", "weight_decay", "batch", "epochs", "pretrain_epochs", "alpha", "lambda_intra",
             "lambda_inter", "lambda_align", "lambda_std", "tau", "distill_temperature",
             "inter_metric", "reduction", "kl_direction", "teacher_view", "soft_target",
             "freeze_teacher_adapters", "clip_gradients", "clip_norm", "seed", "noise_sigma",
             "mask_prob", "scale_jitter"});
        detail::read_field(t, "train", "lr", cfg.train.lr);
        detail::read_field(t, "train", "weight_decay", cfg.train.weight_decay);
        detail::read_field(t, "train", "batch", cfg.train.batch);
        detail::read_field(t, "train", "epochs", cfg.train.epochs);
        detail::read_field(t, "train", "pretrain_epochs", cfg.train.pretrain_epochs);
        detail::read_field(t, "train", "alpha", cfg.train.alpha);
        detail::read_field(t, "train", "lambda_intra", cfg.train.lambda_intra);
        detail::read_field(t, "train", "lambda_inter", cfg.train.lambda_inter);
        detail::read_field(t, "train", "lambda_align", cfg.train.lambda_align);
        detail::read_field(t, "train", "lambda_std", cfg.train.lambda_std);
        detail::read_field(t, "train", "tau", cfg.train.tau);
        detail::read_field(t, "train", "distill_temperature", cfg.train.distill_temperature);
        detail::read_field(t, "train", "inter_metric", cfg.train.inter_metric);
        detail::read_field(t, "train", "reduction", cfg.train.reduction);
        detail::read_field(t, "train", "kl_direction", cfg.train.kl_direction);
        detail::read_field(t, "train", "teacher_view", cfg.train.teacher_view);
        detail::read_field(t, "train", "soft_target", cfg.train.soft_target);
        detail::read_field(t, "train", "freeze_teacher_adapters", cfg.train.freeze_teacher_adapters);
        detail::read_field(t, "train", "clip_gradients", cfg.train.clip_gradients);
        detail::read_field(t, "train", "clip_norm", cfg.train.clip_norm);
        detail::read_field(t, "train", "seed", cfg.train.seed);
        detail::read_field(t, "train", "noise_sigma", cfg.train.noise_sigma);
        detail::read_field(t, "train", "mask_prob", cfg.train.mask_prob);
        detail::read_field(t, "train", "scale_jitter", cfg.train.scale_jitter);
    }
    if (j.contains("ablate")) {
        const nlohmann::json& a = j.at("ablate");
        detail::check_keys(a, "ablate", {"seeds"});
        detail::read_field(a, "ablate", "seeds", cfg.ablate.seeds);
    }
    detail::read_field(j, "", "output_dir", cfg.output_dir);

    // fail fast on the enumerated fields
    cfg.weights();
    cfg.settings();
    return cfg;
}

inline nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["data"]["source"] = data.source;
    j["data"]["classes"] = data.classes;
    j["data"]["dim"] = data.dim;
    j["data"]["per_class"] = data.per_class;
    j["data"]["separation"] = data.separation;
    j["data"]["seed"] = data.seed;
    j["data"]["train_images"] = data.train_images;
    j["data"]["train_labels"] = data.train_labels;
    j["data"]["test_images"] = data.test_images;
    j["data"]["test_labels"] = data.test_labels;
    if (data.second) {
        j["data"]["second"]["classes"] = data.second->classes;
        j["data"]["second"]["per_class"] = data.second->per_class;
        j["data"]["second"]["separation"] = data.second->separation;
        j["data"]["second"]["seed"] = data.second->seed;
    }
    j["tasks"]["teacher_count"] = tasks.teacher_count;
    j["tasks"]["seed"] = tasks.seed;
    j["tasks"]["subsets"] = tasks.subsets;
    j["model"]["teacher_widths"] = model.teacher_widths;
    j["model"]["student_widths"] = model.student_widths;
    j["model"]["adapter_dim"] = model.adapter_dim;
    j["model"]["common_dim"] = model.common_dim;
    j["model"]["proj_hidden"] = model.proj_hidden;
    j["model"]["proj_dim"] = model.proj_dim;
    j["model"]["spatial_channels"] = model.spatial_channels;
    j["train"]["lr"] = train.lr;
    j["train"]["weight_decay"] = train.weight_decay;
    j["train"]["batch"] = train.batch;
    j["train"]["epochs"] = train.epochs;
    j["train"]["pretrain_epochs"] = train.pretrain_epochs;
    j["train"]["alpha"] = train.alpha;
    j["train"]["lambda_intra"] = train.lambda_intra;
    j["train"]["lambda_inter"] = train.lambda_inter;
    j["train"]["lambda_align"] = train.lambda_align;
    j["train"]["lambda_std"] = train.lambda_std;
    j["train"]["tau"] = train.tau;
    j["train"]["distill_temperature"] = train.distill_temperature;
    j["train"]["inter_metric"] = train.inter_metric;
    j["train"]["reduction"] = train.reduction;
    j["train"]["kl_direction"] = train.kl_direction;
    j["train"]["teacher_view"] = train.teacher_view;
    j["train"]["soft_target"] = train.soft_target;
    j["train"]["freeze_teacher_adapters"] = train.freeze_teacher_adapters;
    j["train"]["clip_gradients"] = train.clip_gradients;
    j["train"]["clip_norm"] = train.clip_norm;
    j["train"]["seed"] = train.seed;
    j["train"]["noise_sigma"] = train.noise_sigma;
    j["train"]["mask_prob"] = train.mask_prob;
    j["train"]["scale_jitter"] = train.scale_jitter;
    j["ablate"]["seeds"] = ablate.seeds;
    j["output_dir"] = output_dir;
    return j;
}

// Apply a `--set section.key=value` override onto the raw config json.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError(assignment, "override must look like section.key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;  // unquoted strings pass through
    }
    nlohmann::json* cursor = &j;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError(path, "override path has an empty segment");
        if (dot == std::string::npos) {
            (*cursor)[key] = value;
            return;
        }
        cursor = &(*cursor)[key];
        start = dot + 1;
    }
}

// ---------------------------------------------------------------------------
// Dataset assembly from config
// ---------------------------------------------------------------------------

// Generate (or load from idx files) the train/test pair described by the
// config. In cross-dataset mode the second blob set's labels are offset past
// the first set's classes and the pools are concatenated.
inline std::pair<Dataset, Dataset> build_datasets(const RunConfig& cfg) {
    if (cfg.data.source == "idx") {
        Dataset train = load_idx(cfg.data.train_images, cfg.data.train_labels, cfg.data.classes,
                                 "train");
        Dataset test = load_idx(cfg.data.test_images, cfg.data.test_labels, cfg.data.classes, "test");
        return {std::move(train), std::move(test)};
    }
    auto [train, test] =
        gen_blobs(cfg.data.classes, cfg.data.dim, cfg.data.per_class, cfg.data.separation,
                  cfg.data.seed);
    if (cfg.data.second) {
        const SecondBlobConfig& s = *cfg.data.second;
        auto [train2, test2] = gen_blobs(s.classes, cfg.data.dim, s.per_class, s.separation, s.seed);
        const int offset = static_cast<int>(cfg.data.classes);
        auto merge = [offset](Dataset& a, Dataset& b) {
            a.samples.insert(a.samples.end(), b.samples.begin(), b.samples.end());
            for (int y : b.labels) a.labels.push_back(y + offset);
            a.class_count += b.class_count;
        };
        merge(train, train2);
        merge(test, test2);
    }
    return {std::move(train), std::move(test)};
}

// Equal split by default; explicit subsets when given; dataset boundaries in
// cross-dataset mode.
inline TaskSplit build_task_split(const RunConfig& cfg) {
    const std::size_t classes = cfg.union_classes();
    if (!cfg.tasks.subsets.empty()) return split_from_subsets(cfg.tasks.subsets, classes);
    if (cfg.data.second) {
        std::vector<std::vector<int>> subsets(2);
        for (std::size_t c = 0; c < cfg.data.classes; ++c)
            subsets[0].push_back(static_cast<int>(c));
        for (std::size_t c = cfg.data.classes; c < classes; ++c)
            subsets[1].push_back(static_cast<int>(c));
        if (cfg.tasks.teacher_count != 2)
            throw ConfigError("tasks.teacher_count",
                              "cross-dataset merging defines one teacher per dataset");
        return split_from_subsets(subsets, classes);
    }
    return split_tasks(classes, cfg.tasks.teacher_count, cfg.tasks.seed);
}

}  // namespace cka
