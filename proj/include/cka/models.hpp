#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cka/rng.hpp"
#include "cka/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace cka {

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

struct Linear {
    Tensor weight;  // {in, out}
    Tensor bias;    // {out}

    Tensor forward(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }
    std::size_t in_dim() const { return weight.shape()[0]; }
    std::size_t out_dim() const { return weight.shape()[1]; }
};

// Scaled uniform fan-in init: U(-1/sqrt(in), 1/sqrt(in)), zero biases.
inline Linear make_linear(std::size_t in, std::size_t out, Rng& rng, const std::string& name) {
    if (in == 0 || out == 0)
        throw std::invalid_argument("make_linear: zero width in layer " + name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (double& v : w) v = rng.uniform(-bound, bound);
    Linear l{Tensor({in, out}, std::move(w), true), Tensor({out}, 0.0, true)};
    l.weight.set_name(name + ".weight");
    l.bias.set_name(name + ".bias");
    return l;
}

struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> widths;  // hidden widths; the last entry is the output dim
};

// Plain relu MLP; the final layer is linear.
struct Mlp {
    std::vector<Linear> layers;

    Tensor forward(Tensor x) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i].forward(x);
            if (i + 1 < layers.size()) x = relu(x);
        }
        return x;
    }

    std::size_t input_dim() const { return layers.front().in_dim(); }
    std::size_t output_dim() const { return layers.back().out_dim(); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const Linear& l : layers) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }
};

inline Mlp make_mlp(const MlpSpec& spec, Rng& rng, const std::string& name) {
    if (spec.input_dim == 0 || spec.widths.empty())
        throw std::invalid_argument("make_mlp: " + name + " needs a positive input dim and widths");
    Mlp mlp;
    std::size_t in = spec.input_dim;
    for (std::size_t i = 0; i < spec.widths.size(); ++i) {
        mlp.layers.push_back(make_linear(in, spec.widths[i], rng, name + ".l" + std::to_string(i)));
        in = spec.widths[i];
    }
    return mlp;
}

// Two-layer nonlinear head whose rows come out L2-normalized.
struct ProjectionHead {
    Linear hidden;
    Linear out;

    Tensor forward(const Tensor& features) const {
        return row_normalize(out.forward(relu(hidden.forward(features))));
    }

    std::vector<Tensor> parameters() const {
        return {hidden.weight, hidden.bias, out.weight, out.bias};
    }
};

inline ProjectionHead make_projection_head(std::size_t in, std::size_t hidden_dim,
                                           std::size_t out_dim, Rng& rng, const std::string& name) {
    return {make_linear(in, hidden_dim, rng, name + ".hidden"),
            make_linear(hidden_dim, out_dim, rng, name + ".out")};
}

// Linear map onto a contiguous slot range of the union label space.
struct ClassifierHead {
    Linear map;
    std::size_t slot_begin = 0;

    Tensor forward(const Tensor& features) const { return map.forward(features); }
    std::size_t slot_count() const { return map.out_dim(); }
    std::vector<Tensor> parameters() const { return {map.weight, map.bias}; }
};

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

struct TeacherModel {
    std::string id;
    Mlp encoder;
    ClassifierHead head;        // local logits over the specialty classes
    std::vector<int> class_ids; // specialty in slot order
    bool frozen = false;

    Tensor encode(const Tensor& x) const { return encoder.forward(x); }
    Tensor classify(const Tensor& features) const { return head.forward(features); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out = encoder.parameters();
        for (const Tensor& t : head.parameters()) out.push_back(t);
        return out;
    }

    void set_frozen(bool value) {
        frozen = value;
        for (Tensor& t : parameters()) t.set_requires_grad(!value);
    }
};

struct StudentModel {
    Mlp encoder;
    ProjectionHead proj;
    ClassifierHead head;              // whole union, slot 0 onward
    std::vector<int> slot_class_ids;  // original class id for each union slot

    Tensor encode(const Tensor& x) const { return encoder.forward(x); }
    Tensor project(const Tensor& features) const { return proj.forward(features); }
    Tensor classify(const Tensor& features) const { return head.forward(features); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out = encoder.parameters();
        for (const Tensor& t : proj.parameters()) out.push_back(t);
        for (const Tensor& t : head.parameters()) out.push_back(t);
        return out;
    }
};

inline TeacherModel make_teacher(const std::string& id, const MlpSpec& encoder_spec,
                                 std::vector<int> class_ids, std::size_t slot_begin,
                                 std::uint64_t seed) {
    if (class_ids.empty()) throw std::invalid_argument("make_teacher: empty class subset");
    Rng rng(seed);
    TeacherModel t;
    t.id = id;
    t.encoder = make_mlp(encoder_spec, rng, id + ".encoder");
    t.head = {make_linear(t.encoder.output_dim(), class_ids.size(), rng, id + ".head"), slot_begin};
    t.class_ids = std::move(class_ids);
    return t;
}

inline StudentModel make_student(const MlpSpec& encoder_spec, std::size_t proj_hidden,
                                 std::size_t proj_dim, std::vector<int> slot_class_ids,
                                 std::uint64_t seed) {
    Rng rng(seed);
    StudentModel s;
    s.encoder = make_mlp(encoder_spec, rng, "student.encoder");
    s.proj = make_projection_head(s.encoder.output_dim(), proj_hidden, proj_dim, rng, "student.proj");
    s.head = {make_linear(s.encoder.output_dim(), slot_class_ids.size(), rng, "student.head"), 0};
    s.slot_class_ids = std::move(slot_class_ids);
    return s;
}

// Per-model linear adapters feeding one shared MLP; all models meet in the
// same common space. The shared MLP is held once and referenced by every
// path, never copied.
struct CommonSpaceStack {
    std::map<std::string, Linear> adapters;
    Mlp shared;

    Tensor to_common(const std::string& model_id, const Tensor& features) const {
        auto it = adapters.find(model_id);
        if (it == adapters.end())
            throw std::invalid_argument("to_common: unknown model id '" + model_id + "'");
        return shared.forward(it->second.forward(features));
    }

    std::size_t common_dim() const { return shared.output_dim(); }

    std::vector<Tensor> adapter_parameters() const {
        std::vector<Tensor> out;
        for (const auto& [id, l] : adapters) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out = adapter_parameters();
        for (const Tensor& t : shared.parameters()) out.push_back(t);
        return out;
    }
};

inline CommonSpaceStack make_common_stack(const std::vector<std::pair<std::string, std::size_t>>& model_dims,
                                          std::size_t adapter_dim, std::size_t common_dim,
                                          std::uint64_t seed) {
    Rng rng(seed);
    CommonSpaceStack stack;
    for (const auto& [id, feature_dim] : model_dims)
        stack.adapters.emplace(id, make_linear(feature_dim, adapter_dim, rng, "adapter." + id));
    stack.shared = make_mlp({adapter_dim, {common_dim, common_dim}}, rng, "shared_mlp");
    return stack;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 5e-4;  // decoupled
};

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].size(), 0.0);
            v_[i].assign(params_[i].size(), 0.0);
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::uint64_t step_count() const { return step_; }

    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            Tensor& param = params_[p];
            const std::vector<double> g = param.grad();
            for (double gv : g)
                if (!std::isfinite(gv))
                    throw std::runtime_error("adam: non-finite gradient for parameter '" +
                                             param.name() + "'");
            std::vector<double>& vals = param.raw_values();
            for (std::size_t i = 0; i < vals.size(); ++i) {
                m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
                v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m_[p][i] / bc1;
                const double vhat = v_[p][i] / bc2;
                vals[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon) +
                                      cfg_.weight_decay * vals[i]);
            }
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

inline double cosine_lr(double base_lr, std::size_t epoch, std::size_t total_epochs) {
    if (total_epochs == 0) throw std::invalid_argument("cosine_lr: total_epochs must be positive");
    if (epoch > total_epochs) throw std::invalid_argument("cosine_lr: epoch beyond schedule end");
    const double pi = std::acos(-1.0);
    return base_lr * 0.5 *
           (1.0 + std::cos(pi * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

// FNV-1a over the raw bytes of all parameter values, in order.
inline std::uint64_t hash_params(const std::vector<Tensor>& params) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor& p : params)
        for (double v : p.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffULL;
                h *= 1099511628211ULL;
            }
        }
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + params.bin (LE float64, manifest order)
// ---------------------------------------------------------------------------

namespace detail {

constexpr int kCheckpointVersion = 1;

struct NamedParam {
    std::string name;
    Tensor tensor;
};

inline void write_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                             const nlohmann::json& metadata,
                             const std::vector<NamedParam>& params) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["kind"] = kind;
    manifest["metadata"] = metadata;
    nlohmann::json arrays = nlohmann::json::array();
    std::ofstream blob(dir / "params.bin", std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint: cannot write " + (dir / "params.bin").string());
    std::size_t offset = 0;
    for (const NamedParam& p : params) {
        nlohmann::json entry;
        entry["name"] = p.name;
        entry["shape"] = p.tensor.shape();
        entry["offset"] = offset;
        entry["count"] = p.tensor.size();
        arrays.push_back(entry);
        blob.write(reinterpret_cast<const char*>(p.tensor.values().data()),
                   static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
        offset += p.tensor.size() * sizeof(double);
    }
    manifest["arrays"] = arrays;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
    std::string kind;
    nlohmann::json metadata;
    std::map<std::string, Tensor> arrays;  // leaf tensors, requires_grad false
};

inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf)
        throw std::runtime_error("checkpoint: missing manifest " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format_version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unknown format version " +
                                 manifest.at("format_version").dump());
    std::ifstream blob(dir / "params.bin", std::ios::binary | std::ios::ate);
    if (!blob) throw std::runtime_error("checkpoint: missing blob " + (dir / "params.bin").string());
    const std::size_t blob_size = static_cast<std::size_t>(blob.tellg());

    LoadedCheckpoint out;
    out.kind = manifest.at("kind").get<std::string>();
    out.metadata = manifest.at("metadata");
    for (const nlohmann::json& entry : manifest.at("arrays")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t count = entry.at("count").get<std::size_t>();
        if (shape_size(shape) != count)
            throw std::runtime_error("checkpoint: manifest shape/count mismatch for array " + name);
        if (offset + count * sizeof(double) > blob_size)
            throw std::runtime_error("checkpoint: truncated blob for array " + name);
        std::vector<double> values(count);
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(reinterpret_cast<char*>(values.data()),
                  static_cast<std::streamsize>(count * sizeof(double)));
        if (!blob) throw std::runtime_error("checkpoint: read failed for array " + name);
        out.arrays.emplace(name, Tensor(shape, std::move(values)));
    }
    return out;
}

inline const Tensor& pick_array(const LoadedCheckpoint& ckpt, const std::string& name) {
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end())
        throw std::runtime_error("checkpoint: missing array " + name);
    return it->second;
}

inline void assign_param(Tensor& param, const Tensor& stored, const std::string& name) {
    if (param.shape() != stored.shape())
        throw std::runtime_error("checkpoint: shape mismatch for array " + name + ": " +
                                 shape_str(param.shape()) + " vs " + shape_str(stored.shape()));
    param.raw_values() = stored.values();
}

inline std::vector<NamedParam> named_mlp(const Mlp& mlp, const std::string& prefix) {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        out.push_back({prefix + ".l" + std::to_string(i) + ".weight", mlp.layers[i].weight});
        out.push_back({prefix + ".l" + std::to_string(i) + ".bias", mlp.layers[i].bias});
    }
    return out;
}

inline MlpSpec mlp_spec_from_json(const nlohmann::json& j) {
    MlpSpec spec;
    spec.input_dim = j.at("input_dim").get<std::size_t>();
    spec.widths = j.at("widths").get<std::vector<std::size_t>>();
    return spec;
}

inline nlohmann::json mlp_spec_to_json(const Mlp& mlp) {
    nlohmann::json j;
    j["input_dim"] = mlp.input_dim();
    std::vector<std::size_t> widths;
    for (const Linear& l : mlp.layers) widths.push_back(l.out_dim());
    j["widths"] = widths;
    return j;
}

}  // namespace detail

inline void save_teacher(const std::filesystem::path& dir, const TeacherModel& teacher) {
    nlohmann::json meta;
    meta["id"] = teacher.id;
    meta["encoder"] = detail::mlp_spec_to_json(teacher.encoder);
    meta["class_ids"] = teacher.class_ids;
    meta["slot_begin"] = teacher.head.slot_begin;
    meta["frozen"] = teacher.frozen;
    std::vector<detail::NamedParam> params = detail::named_mlp(teacher.encoder, "encoder");
    params.push_back({"head.weight", teacher.head.map.weight});
    params.push_back({"head.bias", teacher.head.map.bias});
    detail::write_checkpoint(dir, "teacher", meta, params);
}

inline TeacherModel load_teacher(const std::filesystem::path& dir) {
    detail::LoadedCheckpoint ckpt = detail::read_checkpoint(dir);
    if (ckpt.kind != "teacher")
        throw std::runtime_error("checkpoint: expected a teacher, found kind '" + ckpt.kind + "'");
    TeacherModel t = make_teacher(ckpt.metadata.at("id").get<std::string>(),
                                  detail::mlp_spec_from_json(ckpt.metadata.at("encoder")),
                                  ckpt.metadata.at("class_ids").get<std::vector<int>>(),
                                  ckpt.metadata.at("slot_begin").get<std::size_t>(), 0);
    for (std::size_t i = 0; i < t.encoder.layers.size(); ++i) {
        const std::string prefix = "encoder.l" + std::to_string(i);
        detail::assign_param(t.encoder.layers[i].weight, detail::pick_array(ckpt, prefix + ".weight"),
                             prefix + ".weight");
        detail::assign_param(t.encoder.layers[i].bias, detail::pick_array(ckpt, prefix + ".bias"),
                             prefix + ".bias");
    }
    detail::assign_param(t.head.map.weight, detail::pick_array(ckpt, "head.weight"), "head.weight");
    detail::assign_param(t.head.map.bias, detail::pick_array(ckpt, "head.bias"), "head.bias");
    t.set_frozen(ckpt.metadata.at("frozen").get<bool>());
    return t;
}

inline void save_student(const std::filesystem::path& dir, const StudentModel& student) {
    nlohmann::json meta;
    meta["encoder"] = detail::mlp_spec_to_json(student.encoder);
    meta["proj_hidden"] = student.proj.hidden.out_dim();
    meta["proj_dim"] = student.proj.out.out_dim();
    meta["slot_class_ids"] = student.slot_class_ids;
    std::vector<detail::NamedParam> params = detail::named_mlp(student.encoder, "encoder");
    params.push_back({"proj.hidden.weight", student.proj.hidden.weight});
    params.push_back({"proj.hidden.bias", student.proj.hidden.bias});
    params.push_back({"proj.out.weight", student.proj.out.weight});
    params.push_back({"proj.out.bias", student.proj.out.bias});
    params.push_back({"head.weight", student.head.map.weight});
    params.push_back({"head.bias", student.head.map.bias});
    detail::write_checkpoint(dir, "student", meta, params);
}

inline StudentModel load_student(const std::filesystem::path& dir) {
    detail::LoadedCheckpoint ckpt = detail::read_checkpoint(dir);
    if (ckpt.kind != "student")
        throw std::runtime_error("checkpoint: expected a student, found kind '" + ckpt.kind + "'");
    StudentModel s = make_student(detail::mlp_spec_from_json(ckpt.metadata.at("encoder")),
                                  ckpt.metadata.at("proj_hidden").get<std::size_t>(),
                                  ckpt.metadata.at("proj_dim").get<std::size_t>(),
                                  ckpt.metadata.at("slot_class_ids").get<std::vector<int>>(), 0);
    for (std::size_t i = 0; i < s.encoder.layers.size(); ++i) {
        const std::string prefix = "encoder.l" + std::to_string(i);
        detail::assign_param(s.encoder.layers[i].weight, detail::pick_array(ckpt, prefix + ".weight"),
                             prefix + ".weight");
        detail::assign_param(s.encoder.layers[i].bias, detail::pick_array(ckpt, prefix + ".bias"),
                             prefix + ".bias");
    }
    detail::assign_param(s.proj.hidden.weight, detail::pick_array(ckpt, "proj.hidden.weight"),
                         "proj.hidden.weight");
    detail::assign_param(s.proj.hidden.bias, detail::pick_array(ckpt, "proj.hidden.bias"),
                         "proj.hidden.bias");
    detail::assign_param(s.proj.out.weight, detail::pick_array(ckpt, "proj.out.weight"),
                         "proj.out.weight");
    detail::assign_param(s.proj.out.bias, detail::pick_array(ckpt, "proj.out.bias"), "proj.out.bias");
    detail::assign_param(s.head.map.weight, detail::pick_array(ckpt, "head.weight"), "head.weight");
    detail::assign_param(s.head.map.bias, detail::pick_array(ckpt, "head.bias"), "head.bias");
    return s;
}

inline std::string checkpoint_kind(const std::filesystem::path& dir) {
    return detail::read_checkpoint(dir).kind;
}

}  // namespace cka
