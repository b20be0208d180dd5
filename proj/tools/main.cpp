#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cka/amalgamation.hpp"
#include "cka/config.hpp"
#include "cka/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct MissingCheckpoint : std::runtime_error {
    std::string path;
    explicit MissingCheckpoint(std::string p)
        : std::runtime_error("missing checkpoint at " + p), path(std::move(p)) {}
};

cka::RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json raw = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw cka::ConfigError(path, "config: cannot open " + path);
        try {
            raw = json::parse(in);
        } catch (const json::exception& e) {
            throw cka::ConfigError(path, std::string("config parse error: ") + e.what());
        }
    }
    for (const std::string& o : overrides) cka::apply_override(raw, o);
    return cka::RunConfig::from_json(raw);
}

void write_resolved_config(const cka::RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream out(dir / "resolved_config.json");
    out << cfg.to_json().dump(2) << '\n';
}

std::pair<cka::Dataset, cka::Dataset> obtain_datasets(const cka::RunConfig& cfg, bool persist) {
    const fs::path data_dir = fs::path(cfg.output_dir) / "data";
    if (cfg.data.source == "blobs" && fs::exists(data_dir / "meta.json"))
        return cka::load_dataset(data_dir);
    auto pair = cka::build_datasets(cfg);
    if (persist && cfg.data.source == "blobs")
        cka::save_dataset(data_dir, pair.first, pair.second,
                          {{"kind", "blobs"}, {"seed", cfg.data.seed}});
    return pair;
}

fs::path teacher_dir(const cka::RunConfig& cfg, std::size_t index) {
    return fs::path(cfg.output_dir) / "teachers" / ("teacher" + std::to_string(index));
}

std::vector<cka::TeacherModel> load_all_teachers(const cka::RunConfig& cfg,
                                                 const cka::TaskSplit& split) {
    std::vector<cka::TeacherModel> teachers;
    for (std::size_t i = 0; i < split.tasks.size(); ++i) {
        const fs::path dir = teacher_dir(cfg, i);
        if (!fs::exists(dir / "manifest.json")) throw MissingCheckpoint(dir.string());
        teachers.push_back(cka::load_teacher(dir));
    }
    return teachers;
}

json epoch_json(const cka::EpochRecord& rec) {
    return json{{"epoch", rec.epoch},
                {"intra", rec.losses.intra},
                {"inter", rec.losses.inter},
                {"align", rec.losses.align},
                {"std", rec.losses.distill},
                {"total", rec.losses.total},
                {"lr", rec.lr},
                {"union_accuracy", rec.union_accuracy},
                {"task_accuracy", rec.task_accuracy},
                {"seconds", rec.seconds}};
}

json summary_json(const std::string& method, const cka::RunConfig& cfg,
                  const cka::RunMetrics& metrics) {
    json s;
    s["method"] = method;
    s["seed"] = cfg.train.seed;
    s["epochs"] = metrics.epochs.size();
    s["union_accuracy"] = metrics.final_union_accuracy;
    s["task_accuracy"] = metrics.final_task_accuracy;
    if (!metrics.epochs.empty()) {
        const cka::LossBreakdown& l = metrics.epochs.back().losses;
        s["final_losses"] = {{"intra", l.intra},
                             {"inter", l.inter},
                             {"align", l.align},
                             {"std", l.distill},
                             {"total", l.total}};
    }
    return s;
}

// one full training run (cka or a baseline preset) written under run_dir
cka::AmalgamationResult run_method(const std::string& method, const cka::RunConfig& cfg,
                                   const std::vector<cka::TeacherModel>& teachers,
                                   const cka::Dataset& pool, const cka::Dataset& test,
                                   const fs::path& run_dir) {
    const cka::MlpSpec student_spec = cfg.student_encoder_spec();
    const cka::CommonSpaceSpec common{cfg.model.adapter_dim, cfg.model.common_dim};
    cka::TrainSettings settings = cfg.settings();

    cka::AmalgamationResult result = [&] {
        if (method == "kd")
            return cka::vanilla_kd_baseline(teachers, pool, test, student_spec,
                                            cfg.model.proj_hidden, cfg.model.proj_dim, common,
                                            settings);
        if (method == "cfl")
            return cka::cfl_baseline(teachers, pool, test, student_spec, cfg.model.proj_hidden,
                                     cfg.model.proj_dim, common, settings);
        if (method == "cka-intra") settings.weights.lambda_inter = 0.0;
        if (method == "cka-inter") settings.weights.lambda_intra = 0.0;
        return cka::amalgamate_student(teachers, pool, test, student_spec, cfg.model.proj_hidden,
                                       cfg.model.proj_dim, common, settings);
    }();

    fs::create_directories(run_dir);
    cka::save_student(run_dir / "student", result.student);
    std::ofstream jsonl(run_dir / "metrics.jsonl");
    for (const cka::EpochRecord& rec : result.metrics.epochs) jsonl << epoch_json(rec).dump() << '\n';
    std::ofstream summary(run_dir / "summary.json");
    summary << summary_json(method, cfg, result.metrics).dump(2) << '\n';
    return result;
}

int cmd_gen_data(const cka::RunConfig& cfg) {
    auto [train, test] = cka::build_datasets(cfg);
    const fs::path data_dir = fs::path(cfg.output_dir) / "data";
    cka::save_dataset(data_dir, train, test, {{"kind", cfg.data.source}, {"seed", cfg.data.seed}});
    write_resolved_config(cfg, cfg.output_dir);
    std::cout << json{{"train", train.size()}, {"test", test.size()},
                      {"classes", train.class_count}, {"dim", train.dim},
                      {"dir", data_dir.string()}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_pretrain(const cka::RunConfig& cfg, int task_index) {
    auto [train, test] = obtain_datasets(cfg, true);
    const cka::TaskSplit split = cka::build_task_split(cfg);
    if (task_index < 0 || static_cast<std::size_t>(task_index) >= split.tasks.size())
        throw std::runtime_error("pretrain: task index " + std::to_string(task_index) +
                                 " out of range, have " + std::to_string(split.tasks.size()) +
                                 " tasks");
    cka::TrainSettings settings = cfg.settings();
    settings.epochs = cfg.train.pretrain_epochs;
    cka::PretrainResult result = cka::pretrain_teacher(
        split.tasks[task_index], train, test, cfg.teacher_encoder_spec(task_index), settings);

    const fs::path dir = teacher_dir(cfg, task_index);
    cka::save_teacher(dir, result.teacher);
    std::ofstream metrics(dir / "pretrain.json");
    metrics << json{{"task", task_index},
                    {"task_accuracy", result.task_accuracy},
                    {"epoch_loss", result.epoch_loss}}
                   .dump(2)
            << '\n';
    write_resolved_config(cfg, cfg.output_dir);
    std::cout << json{{"task", task_index}, {"task_accuracy", result.task_accuracy},
                      {"checkpoint", dir.string()}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_amalgamate(const cka::RunConfig& cfg) {
    auto [train, test] = obtain_datasets(cfg, true);
    const cka::TaskSplit split = cka::build_task_split(cfg);
    std::vector<cka::TeacherModel> teachers = load_all_teachers(cfg, split);
    cka::Dataset pool = train.unlabeled();
    cka::AmalgamationResult result =
        run_method("cka", cfg, teachers, pool, test, cfg.output_dir);
    write_resolved_config(cfg, cfg.output_dir);
    std::cout << summary_json("cka", cfg, result.metrics).dump() << '\n';
    return 0;
}

int cmd_baseline(const cka::RunConfig& cfg, const std::string& method) {
    auto [train, test] = obtain_datasets(cfg, true);
    const cka::TaskSplit split = cka::build_task_split(cfg);
    std::vector<cka::TeacherModel> teachers = load_all_teachers(cfg, split);
    const fs::path run_dir = fs::path(cfg.output_dir) / ("baseline-" + method);

    if (method == "ensemble") {
        cka::EvalResult eval =
            cka::evaluate_union(cka::ensemble_predictor(teachers), test, split);
        fs::create_directories(run_dir);
        json s{{"method", "ensemble"},
               {"seed", cfg.train.seed},
               {"union_accuracy", eval.union_accuracy},
               {"task_accuracy", eval.task_accuracy}};
        std::ofstream out(run_dir / "summary.json");
        out << s.dump(2) << '\n';
        write_resolved_config(cfg, run_dir);
        std::cout << s.dump() << '\n';
        return 0;
    }

    cka::Dataset pool = train.unlabeled();
    cka::AmalgamationResult result = run_method(method, cfg, teachers, pool, test, run_dir);
    write_resolved_config(cfg, run_dir);
    std::cout << summary_json(method, cfg, result.metrics).dump() << '\n';
    return 0;
}

int cmd_evaluate(const cka::RunConfig& cfg, const std::string& ckpt) {
    if (!fs::exists(fs::path(ckpt) / "manifest.json")) throw MissingCheckpoint(ckpt);
    auto [train, test] = obtain_datasets(cfg, false);
    const cka::TaskSplit split = cka::build_task_split(cfg);
    const std::string kind = cka::checkpoint_kind(ckpt);

    json out;
    if (kind == "teacher") {
        cka::TeacherModel teacher = cka::load_teacher(ckpt);
        cka::EvalResult eval = cka::evaluate_union(
            cka::padded_teacher_predictor(teacher, split.class_count), test, split);
        out = {{"kind", "teacher"}, {"id", teacher.id},
               {"union_accuracy", eval.union_accuracy}, {"task_accuracy", eval.task_accuracy}};
    } else if (kind == "student") {
        cka::StudentModel student = cka::load_student(ckpt);
        if (student.slot_class_ids != split.slot_class_ids)
            throw std::runtime_error(
                "evaluate: the checkpoint's union layout does not match this config's task split");
        cka::EvalResult eval = cka::evaluate_union(cka::student_predictor(student), test, split);
        out = {{"kind", "student"}, {"union_accuracy", eval.union_accuracy},
               {"task_accuracy", eval.task_accuracy}};
    } else {
        throw std::runtime_error("evaluate: unsupported checkpoint kind '" + kind + "'");
    }

    const fs::path eval_dir = fs::path(cfg.output_dir) / "eval";
    fs::create_directories(eval_dir);
    std::ofstream file(eval_dir / (fs::path(ckpt).filename().string() + ".json"));
    file << out.dump(2) << '\n';
    write_resolved_config(cfg, cfg.output_dir);
    std::cout << out.dump() << '\n';
    return 0;
}

int cmd_gradcheck(const std::string& op) {
    const std::vector<cka::GradCheckReport> reports = cka::run_gradcheck({op});
    bool all_pass = true;
    for (const cka::GradCheckReport& r : reports) {
        std::cout << r.op << " max_rel_err=" << r.max_error << (r.pass ? " PASS" : " FAIL") << '\n';
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

int cmd_ablate(const cka::RunConfig& cfg, const std::string& axis) {
    auto [train, test] = obtain_datasets(cfg, true);
    const cka::TaskSplit split = cka::build_task_split(cfg);
    cka::Dataset pool = train.unlabeled();

    std::vector<std::string> variants;
    if (axis == "losses") {
        variants = {"cka", "cka-intra", "cka-inter", "kd", "cfl"};
    } else if (axis == "inter-metric") {
        variants = {"euclidean", "cosine"};
        if (cfg.model.spatial_channels > 0) variants.push_back("mmd-spatial");
    } else {
        throw std::runtime_error("ablate: unknown axis '" + axis + "'");
    }

    const fs::path ablate_dir = fs::path(cfg.output_dir) / "ablate" / axis;
    fs::create_directories(ablate_dir);
    std::ofstream table(ablate_dir / "table.csv");
    table << "method,seed,acc_union";
    for (std::size_t t = 0; t < split.tasks.size(); ++t) table << ",acc_task" << (t + 1);
    table << '\n';

    for (std::uint64_t seed : cfg.ablate_seeds()) {
        cka::RunConfig seeded = cfg;
        seeded.train.seed = seed;
        cka::TrainSettings pre_settings = seeded.settings();
        pre_settings.epochs = seeded.train.pretrain_epochs;
        std::vector<cka::TeacherModel> teachers;
        for (std::size_t i = 0; i < split.tasks.size(); ++i)
            teachers.push_back(cka::pretrain_teacher(split.tasks[i], train, test,
                                                     seeded.teacher_encoder_spec(i), pre_settings)
                                   .teacher);
        for (const std::string& variant : variants) {
            cka::RunConfig run_cfg = seeded;
            std::string method = variant;
            if (axis == "inter-metric") {
                run_cfg.train.inter_metric = variant;
                method = "cka";
            }
            const fs::path run_dir = ablate_dir / (variant + "-s" + std::to_string(seed));
            cka::AmalgamationResult result =
                run_method(method, run_cfg, teachers, pool, test, run_dir);
            write_resolved_config(run_cfg, run_dir);
            table << variant << ',' << seed << ',' << result.metrics.final_union_accuracy;
            for (double acc : result.metrics.final_task_accuracy) table << ',' << acc;
            table << '\n';
            table.flush();
        }
    }
    write_resolved_config(cfg, cfg.output_dir);
    std::cout << json{{"axis", axis}, {"table", (ablate_dir / "table.csv").string()}}.dump() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive knowledge amalgamation toolkit"};
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--set", overrides, "config override, section.key=value")->take_all();

    CLI::App* gen = app.add_subcommand("gen-data", "generate and persist the configured dataset");
    CLI::App* pre = app.add_subcommand("pretrain", "supervised pretraining of one teacher");
    int task_index = -1;
    pre->add_option("--task", task_index, "task index")->required();
    CLI::App* ama = app.add_subcommand("amalgamate", "train the student from the frozen teachers");
    CLI::App* base = app.add_subcommand("baseline", "run a comparison method");
    std::string method;
    base->add_option("--method", method, "ensemble | kd | cfl")
        ->required()
        ->check(CLI::IsMember({"ensemble", "kd", "cfl"}));
    CLI::App* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on the union test set");
    std::string ckpt;
    eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference checks of the loss kernels");
    std::string op = "all";
    grad->add_option("--op", op, "loss name or 'all'");
    CLI::App* abl = app.add_subcommand("ablate", "sweep one configuration axis");
    std::string axis;
    abl->add_option("--axis", axis, "inter-metric | losses")
        ->required()
        ->check(CLI::IsMember({"inter-metric", "losses"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (grad->parsed()) return cmd_gradcheck(op);
        const cka::RunConfig cfg = load_config(config_path, overrides);
        if (gen->parsed()) return cmd_gen_data(cfg);
        if (pre->parsed()) return cmd_pretrain(cfg, task_index);
        if (ama->parsed()) return cmd_amalgamate(cfg);
        if (base->parsed()) return cmd_baseline(cfg, method);
        if (eval->parsed()) return cmd_evaluate(cfg, ckpt);
        if (abl->parsed()) return cmd_ablate(cfg, axis);
        return 1;
    } catch (const cka::ConfigError& e) {
        std::cerr << json{{"error", "config"}, {"path", e.path}, {"message", e.what()}}.dump()
                  << '\n';
        return 2;
    } catch (const MissingCheckpoint& e) {
        std::cerr << json{{"error", "missing_checkpoint"}, {"path", e.path}}.dump() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
        return 1;
    }
}
