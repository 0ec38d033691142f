#include "uhrseg/model.hpp"

#include "uhrseg/checkpoint.hpp"
#include "uhrseg/ops.hpp"
#include "uhrseg/rng.hpp"

#include <cmath>

namespace uhrseg {

void ModelConfig::validate() const {
    if (d < 1) throw ConfigError("model.d must be >= 1");
    if (classes < 2) throw ConfigError("model.classes must be >= 2");
    if (downscale < 1 || (downscale & (downscale - 1)) != 0) {
        throw ConfigError("model.downscale_factor must be a positive power of two");
    }
    if (enc_freqs < 1) throw ConfigError("model.enc_freqs must be >= 1");
    if (head_hidden < 1) throw ConfigError("model.head_hidden must be >= 1");
    if (spatial_width < 1) throw ConfigError("model.spatial_width must be >= 1");
    if (semantic_widths.size() != 3) {
        throw ConfigError("model.semantic_widths must list 3 channel counts");
    }
    for (int64_t wdt : semantic_widths) {
        if (wdt < 1) throw ConfigError("model.semantic_widths entries must be >= 1");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"d", d},
            {"classes", classes},
            {"downscale_factor", downscale},
            {"enc_freqs", enc_freqs},
            {"head_hidden", head_hidden},
            {"spatial_width", spatial_width},
            {"semantic_widths", semantic_widths}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& js) {
    ModelConfig c;
    c.d = js.value("d", c.d);
    c.classes = js.value("classes", c.classes);
    c.downscale = js.value("downscale_factor", c.downscale);
    c.enc_freqs = js.value("enc_freqs", c.enc_freqs);
    c.head_hidden = js.value("head_hidden", c.head_hidden);
    c.spatial_width = js.value("spatial_width", c.spatial_width);
    c.semantic_widths = js.value("semantic_widths", c.semantic_widths);
    c.validate();
    return c;
}

void AblationFlags::validate() const {
    if (read_mode != "softmax" && read_mode != "concat") {
        throw ConfigError("ablation.read_mode must be softmax or concat");
    }
    if (update_mode != "cosine" && update_mode != "mean") {
        throw ConfigError("ablation.update_mode must be cosine or mean");
    }
    if (upsampler != "query" && upsampler != "bilinear") {
        throw ConfigError("ablation.upsampler must be query or bilinear");
    }
    if (use_memory && !use_m_b) {
        throw ConfigError("ablation.use_memory requires use_m_b");
    }
}

nlohmann::json AblationFlags::to_json() const {
    return {{"use_m_b", use_m_b},       {"use_m_l", use_m_l},
            {"use_memory", use_memory}, {"cross_branch", cross_branch},
            {"read_mode", read_mode},   {"update_mode", update_mode},
            {"upsampler", upsampler}};
}

AblationFlags AblationFlags::from_json(const nlohmann::json& js) {
    AblationFlags f;
    f.use_m_b = js.value("use_m_b", f.use_m_b);
    f.use_m_l = js.value("use_m_l", f.use_m_l);
    f.use_memory = js.value("use_memory", f.use_memory);
    f.cross_branch = js.value("cross_branch", f.cross_branch);
    f.read_mode = js.value("read_mode", f.read_mode);
    f.update_mode = js.value("update_mode", f.update_mode);
    f.upsampler = js.value("upsampler", f.upsampler);
    f.validate();
    return f;
}

PatchPair PatchPair::make(const TensorPtr& full, int64_t downscale) {
    if (full->ndim() != 3 || full->dim(0) != 3) {
        throw ShapeError("patch: expected {3,H,W}, got " + shape_str(full->shape));
    }
    const int64_t h = full->dim(1), w = full->dim(2);
    if (h % 4 != 0 || w % 4 != 0 || h % downscale != 0 || w % downscale != 0) {
        throw ShapeError("patch: H,W must be divisible by 4 and by the downscale factor");
    }
    PatchPair pp;
    pp.full = full;
    pp.down = downscale == 1 ? full : bilinear_resize(full, h / downscale, w / downscale);
    return pp;
}

void Model::add_param(const std::string& name, Shape shape, std::vector<double> values) {
    auto t = Tensor::from_data(std::move(shape), std::move(values), true);
    t->tag = name;
    params.emplace_back(name, std::move(t));
}

const TensorPtr& Model::p(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw ConfigError("unknown parameter " + name);
}

namespace {

std::vector<double> kaiming_uniform(Rng& rng, int64_t count, int64_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(static_cast<size_t>(count));
    for (double& x : v) x = rng.uniform(-limit, limit);
    return v;
}

} // namespace

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed);

    auto conv = [&](const std::string& name, int64_t cout, int64_t cin, int64_t k) {
        m.add_param(name + ".w", {cout, cin, k, k},
                    kaiming_uniform(rng, cout * cin * k * k, cin * k * k));
        m.add_param(name + ".b", {cout}, std::vector<double>(static_cast<size_t>(cout), 0.0));
    };
    auto fc = [&](const std::string& name, int64_t out, int64_t in) {
        m.add_param(name + ".w", {out, in}, kaiming_uniform(rng, out * in, in));
        m.add_param(name + ".b", {out}, std::vector<double>(static_cast<size_t>(out), 0.0));
    };

    const auto& sw = cfg.semantic_widths;
    conv("semantic.conv1", sw[0], 3, 3);
    conv("semantic.conv2", sw[1], sw[0], 3);
    conv("semantic.conv3", sw[2], sw[1], 3);
    conv("semantic.conv4", cfg.d, sw[2], 3);
    conv("semantic.res1.conv1", cfg.d, cfg.d, 3);
    conv("semantic.res1.conv2", cfg.d, cfg.d, 3);
    conv("semantic.res2.conv1", cfg.d, cfg.d, 3);
    conv("semantic.res2.conv2", cfg.d, cfg.d, 3);

    conv("memory.conv1", cfg.d, 3, 3);
    conv("memory.conv2", cfg.d, cfg.d, 3);
    conv("memory.conv3", cfg.d, cfg.d, 3);
    conv("memory.head", cfg.classes, cfg.d, 1);

    conv("spatial.conv1", cfg.spatial_width, 3, 3);
    conv("spatial.conv2", cfg.spatial_width, cfg.spatial_width, 3);
    conv("spatial.conv3", cfg.classes, cfg.spatial_width, 3);

    // periodic encoder frequencies, fine-tuned during training
    {
        std::vector<double> freqs(static_cast<size_t>(cfg.enc_freqs));
        for (int64_t i = 0; i < cfg.enc_freqs; ++i) {
            freqs[static_cast<size_t>(i)] = 2.0 * std::exp(static_cast<double>(i + 1));
        }
        m.add_param("query.freqs", {cfg.enc_freqs}, std::move(freqs));
    }
    fc("query.fc1", cfg.head_hidden, cfg.query_input_width());
    fc("query.fc2", cfg.head_hidden, cfg.head_hidden);
    fc("query.fc3", cfg.classes, cfg.head_hidden);

    conv("bilinear.head", cfg.classes, cfg.d, 1);

    // concat-read head starts as identity over the mask channels so the read
    // is a no-op until trained
    {
        const int64_t c = cfg.classes;
        std::vector<double> w(static_cast<size_t>(c * 2 * c), 0.0);
        for (int64_t i = 0; i < c; ++i) {
            w[static_cast<size_t>(i * 2 * c + c + i)] = 1.0;
        }
        m.add_param("memread.head.w", {c, 2 * c, 1, 1}, std::move(w));
        m.add_param("memread.head.b", {c}, std::vector<double>(static_cast<size_t>(c), 0.0));
    }
    return m;
}

namespace {

TensorPtr conv_block(const Model& m, const std::string& name, const TensorPtr& x,
                     int64_t stride) {
    return relu(conv2d(x, m.p(name + ".w"), m.p(name + ".b"), stride, 1));
}

TensorPtr residual_block(const Model& m, const std::string& name, const TensorPtr& x) {
    auto y = conv_block(m, name + ".conv1", x, 1);
    y = conv2d(y, m.p(name + ".conv2.w"), m.p(name + ".conv2.b"), 1, 1);
    return relu(add(x, y));
}

} // namespace

TensorPtr Model::semantic_branch(const TensorPtr& down) const {
    if (down->ndim() != 3 || down->dim(0) != 3) {
        throw ShapeError("semantic_branch: expected {3,h,w}");
    }
    if (down->dim(1) < 8 || down->dim(2) < 8 || down->dim(1) % 4 != 0 ||
        down->dim(2) % 4 != 0) {
        throw ShapeError("semantic_branch: input " + shape_str(down->shape) +
                         " below the stack's minimum 8x8 / divisibility-by-4 footprint");
    }
    auto x = conv_block(*this, "semantic.conv1", down, 2);
    x = conv_block(*this, "semantic.conv2", x, 1);
    x = conv_block(*this, "semantic.conv3", x, 2);
    x = conv_block(*this, "semantic.conv4", x, 1);
    x = residual_block(*this, "semantic.res1", x);
    x = residual_block(*this, "semantic.res2", x);
    x->tag = "semantic.latent";
    return x;
}

std::pair<TensorPtr, TensorPtr> Model::memory_branch(const TensorPtr& full) const {
    if (full->ndim() != 3 || full->dim(0) != 3) {
        throw ShapeError("memory_branch: expected {3,H,W}");
    }
    if (full->dim(1) < 4 || full->dim(2) < 4 || full->dim(1) % 2 != 0 ||
        full->dim(2) % 2 != 0) {
        throw ShapeError("memory_branch: input " + shape_str(full->shape) +
                         " below the stack's minimum footprint");
    }
    auto x = conv_block(*this, "memory.conv1", full, 2);
    x = conv_block(*this, "memory.conv2", x, 1);
    x = conv_block(*this, "memory.conv3", x, 1);
    x->tag = "memory.f_b";
    auto logits = conv2d(x, p("memory.head.w"), p("memory.head.b"), 1, 0);
    logits->tag = "memory.m_b_logits";
    return {x, logits};
}

TensorPtr Model::spatial_branch(const TensorPtr& full) const {
    if (full->ndim() != 3 || full->dim(0) != 3) {
        throw ShapeError("spatial_branch: expected {3,H,W}");
    }
    if (full->dim(1) < 3 || full->dim(2) < 3) {
        throw ShapeError("spatial_branch: input " + shape_str(full->shape) +
                         " below the stack's minimum footprint");
    }
    auto x = conv_block(*this, "spatial.conv1", full, 1);
    x = conv_block(*this, "spatial.conv2", x, 1);
    auto logits = conv2d(x, p("spatial.conv3.w"), p("spatial.conv3.b"), 1, 1);
    logits->tag = "spatial.m_l_logits";
    return logits;
}

TensorPtr Model::semantic_logit_head(const TensorPtr& latent) const {
    return conv2d(latent, p("bilinear.head.w"), p("bilinear.head.b"), 1, 0);
}

BranchOutputs Model::run_branches(const PatchPair& pp, const AblationFlags& flags) const {
    BranchOutputs out;
    out.latent = semantic_branch(pp.down);
    if (flags.use_m_b) {
        auto [f_b, m_b] = memory_branch(pp.full);
        out.f_b = f_b;
        out.m_b_logits = m_b;
    }
    if (flags.use_m_l) {
        out.m_l_logits = spatial_branch(pp.full);
    }
    return out;
}

int64_t Model::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t->numel();
    return n;
}

void save_model(const std::string& path, const Model& model, const AblationFlags& flags,
                const MemoryBank& bank) {
    Checkpoint ck;
    ck.meta["model"] = model.cfg.to_json();
    ck.meta["ablation"] = flags.to_json();
    ck.meta["memory_bank"] = {{"momentum", bank.momentum},
                              {"d", bank.d},
                              {"classes", bank.classes}};
    for (const auto& [name, t] : model.params) {
        ck.add(name, t->shape, t->data);
    }
    ck.add("memory_bank.m", {bank.d, bank.classes}, bank.m);
    ck.add("memory_bank.initialized", {bank.classes}, bank_flags_as_doubles(bank));
    ck.save(path);
}

LoadedModel load_model(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    ModelConfig cfg;
    AblationFlags flags;
    try {
        cfg = ModelConfig::from_json(ck.meta.at("model"));
        flags = AblationFlags::from_json(ck.meta.at("ablation"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: missing model metadata: " + std::string(e.what()));
    }
    LoadedModel lm{Model::init(cfg, 0), flags,
                   MemoryBank::make(cfg.d, cfg.classes,
                                    ck.meta.at("memory_bank").value("momentum", 0.9))};
    for (auto& [name, t] : lm.model.params) {
        const CheckpointTensor* ct = ck.find(name);
        if (!ct) throw IoError("checkpoint: missing tensor " + name);
        if (ct->shape != t->shape) {
            throw IoError("checkpoint: tensor " + name + " has shape " +
                          shape_str(ct->shape) + ", model expects " + shape_str(t->shape));
        }
        t->data = ct->data;
    }
    const CheckpointTensor* bm = ck.find("memory_bank.m");
    const CheckpointTensor* bf = ck.find("memory_bank.initialized");
    if (!bm || !bf) throw IoError("checkpoint: missing memory bank section");
    if (bm->shape != Shape{cfg.d, cfg.classes}) {
        throw IoError("checkpoint: memory bank shape mismatch");
    }
    lm.bank.m = bm->data;
    bank_flags_from_doubles(lm.bank, bf->data);
    return lm;
}

} // namespace uhrseg
