#include "uhrseg/config.hpp"

#include <fstream>
#include <sstream>

namespace uhrseg {

void TrainConfig::validate() const {
    if (iters < 0) throw ConfigError("train.iters must be >= 0");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (base_lr <= 0) throw ConfigError("train.base_lr must be positive");
    if (power <= 0) throw ConfigError("train.power must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (lambda_s < 0 || lambda_b < 0 || lambda_l < 0) {
        throw ConfigError("train loss weights must be >= 0");
    }
    if (crop < 8 || crop % 4 != 0) {
        throw ConfigError("train.crop must be a multiple of 4, at least 8");
    }
    if (query_samples < 0) throw ConfigError("train.query_samples must be >= 0");
    if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
    if (eval_scenes < 1) throw ConfigError("train.eval_scenes must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
}

void TilingConfig::validate() const {
    if (patch < 8) throw ConfigError("tiling.patch must be >= 8");
    if (overlap >= patch) throw ConfigError("tiling.overlap must be < patch");
    if (budget_bytes <= 0) throw ConfigError("tiling.budget_bytes must be positive");
    if (chunk_rows < 0) throw ConfigError("tiling.chunk_rows must be >= 0");
    if (workers < 1) throw ConfigError("tiling.workers must be >= 1");
    if (mode != "local" && mode != "global") {
        throw ConfigError("tiling.mode must be local or global");
    }
    if (target_side < 8) throw ConfigError("tiling.target_side must be >= 8");
}

void RunConfig::validate() const {
    if (schema_version != 1) throw ConfigError("unsupported schema_version");
    model.validate();
    train.validate();
    tiling.validate();
    data.validate();
    ablation.validate();
}

namespace {

nlohmann::json train_json(const TrainConfig& t) {
    return {{"iters", t.iters},
            {"batch", t.batch},
            {"base_lr", t.base_lr},
            {"power", t.power},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"lambda_s", t.lambda_s},
            {"lambda_b", t.lambda_b},
            {"lambda_l", t.lambda_l},
            {"crop", t.crop},
            {"query_samples", t.query_samples},
            {"eval_every", t.eval_every},
            {"eval_scenes", t.eval_scenes},
            {"checkpoint_every", t.checkpoint_every},
            {"seed", t.seed}};
}

nlohmann::json tiling_json(const TilingConfig& t) {
    return {{"patch", t.patch},       {"overlap", t.overlap},
            {"budget_bytes", t.budget_bytes}, {"chunk_rows", t.chunk_rows},
            {"workers", t.workers},   {"mode", t.mode},
            {"target_side", t.target_side}};
}

// Every key present in `input` must exist in `defaults` (recursively), so
// typos fail loudly instead of silently taking a default.
void reject_unknown_keys(const nlohmann::json& input, const nlohmann::json& defaults,
                         const std::string& prefix) {
    if (!input.is_object()) {
        throw ConfigError("config: expected an object at " +
                          (prefix.empty() ? std::string("<root>") : prefix));
    }
    for (auto it = input.begin(); it != input.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!defaults.contains(it.key())) {
            throw ConfigError("config: unknown key " + path);
        }
        const auto& dv = defaults.at(it.key());
        if (dv.is_object()) {
            reject_unknown_keys(it.value(), dv, path);
        } else if (dv.is_number() && !it.value().is_number()) {
            throw ConfigError("config: expected a number at " + path);
        } else if (dv.is_string() && !it.value().is_string()) {
            throw ConfigError("config: expected a string at " + path);
        } else if (dv.is_boolean() && !it.value().is_boolean()) {
            throw ConfigError("config: expected a boolean at " + path);
        } else if (dv.is_array() && !it.value().is_array()) {
            throw ConfigError("config: expected an array at " + path);
        }
    }
}

nlohmann::json merge_defaults(const nlohmann::json& input, const nlohmann::json& defaults) {
    nlohmann::json out = defaults;
    for (auto it = input.begin(); it != input.end(); ++it) {
        if (defaults.contains(it.key()) && defaults.at(it.key()).is_object() &&
            it.value().is_object()) {
            out[it.key()] = merge_defaults(it.value(), defaults.at(it.key()));
        } else {
            out[it.key()] = it.value();
        }
    }
    return out;
}

} // namespace

nlohmann::json RunConfig::to_json() const {
    nlohmann::json js;
    js["schema_version"] = schema_version;
    js["model"] = model.to_json();
    js["train"] = train_json(train);
    js["tiling"] = tiling_json(tiling);
    js["data"] = {{"manifest", data.manifest}};
    js["ablation"] = ablation.to_json();
    return js;
}

RunConfig RunConfig::from_json(const nlohmann::json& js) {
    const nlohmann::json defaults = RunConfig{}.to_json();
    reject_unknown_keys(js, defaults, "");
    const nlohmann::json merged = merge_defaults(js, defaults);

    RunConfig c;
    c.schema_version = merged.at("schema_version").get<int64_t>();
    c.model = ModelConfig::from_json(merged.at("model"));
    const auto& t = merged.at("train");
    c.train.iters = t.at("iters").get<int64_t>();
    c.train.batch = t.at("batch").get<int64_t>();
    c.train.base_lr = t.at("base_lr").get<double>();
    c.train.power = t.at("power").get<double>();
    c.train.momentum = t.at("momentum").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.lambda_s = t.at("lambda_s").get<double>();
    c.train.lambda_b = t.at("lambda_b").get<double>();
    c.train.lambda_l = t.at("lambda_l").get<double>();
    c.train.crop = t.at("crop").get<int64_t>();
    c.train.query_samples = t.at("query_samples").get<int64_t>();
    c.train.eval_every = t.at("eval_every").get<int64_t>();
    c.train.eval_scenes = t.at("eval_scenes").get<int64_t>();
    c.train.checkpoint_every = t.at("checkpoint_every").get<int64_t>();
    c.train.seed = t.at("seed").get<uint64_t>();
    const auto& g = merged.at("tiling");
    c.tiling.patch = g.at("patch").get<int64_t>();
    c.tiling.overlap = g.at("overlap").get<int64_t>();
    c.tiling.budget_bytes = g.at("budget_bytes").get<int64_t>();
    c.tiling.chunk_rows = g.at("chunk_rows").get<int64_t>();
    c.tiling.workers = g.at("workers").get<int64_t>();
    c.tiling.mode = g.at("mode").get<std::string>();
    c.tiling.target_side = g.at("target_side").get<int64_t>();
    c.data.manifest = merged.at("data").at("manifest").get<std::string>();
    c.ablation = AblationFlags::from_json(merged.at("ablation"));
    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    nlohmann::json js;
    try {
        f >> js;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("config: parse error in " + path + ": " + e.what());
    }
    return from_json(js);
}

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

std::string RunConfig::hash() const {
    return fnv1a_hex(to_json().dump());
}

} // namespace uhrseg
