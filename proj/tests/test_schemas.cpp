#include "uhrseg/config.hpp"
#include "uhrseg/metrics.hpp"
#include "uhrseg/tiling.hpp"
#include "uhrseg/trainer.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>

using namespace uhrseg;
namespace fs = std::filesystem;

namespace {

// Minimal structural validator for the schema subset this project ships:
// type, required, properties, items, enum, $ref (same directory).
nlohmann::json load_schema(const std::string& name) {
    fs::path p = fs::path(UHRSEG_SCHEMA_DIR) / name;
    std::ifstream f(p);
    REQUIRE_MESSAGE(f.good(), "missing schema ", p.string());
    nlohmann::json js;
    f >> js;
    return js;
}

bool type_matches(const nlohmann::json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "integer") return value.is_number_integer() || value.is_number_unsigned();
    if (type == "number") return value.is_number();
    if (type == "boolean") return value.is_boolean();
    if (type == "null") return value.is_null();
    return false;
}

void validate(const nlohmann::json& value, const nlohmann::json& schema,
              const std::string& path) {
    if (schema.contains("$ref")) {
        validate(value, load_schema(schema.at("$ref").get<std::string>()), path);
        return;
    }
    if (schema.contains("type")) {
        const auto& t = schema.at("type");
        bool ok = false;
        if (t.is_string()) {
            ok = type_matches(value, t.get<std::string>());
        } else {
            for (const auto& alt : t) ok = ok || type_matches(value, alt.get<std::string>());
        }
        INFO("at ", path);
        CHECK(ok);
        if (!ok) return;
    }
    if (schema.contains("enum")) {
        bool ok = false;
        for (const auto& e : schema.at("enum")) ok = ok || e == value;
        INFO("at ", path, " enum ", value.dump());
        CHECK(ok);
    }
    if (value.is_object()) {
        if (schema.contains("required")) {
            for (const auto& key : schema.at("required")) {
                INFO("at ", path, " requires ", key.get<std::string>());
                CHECK(value.contains(key.get<std::string>()));
            }
        }
        if (schema.contains("properties")) {
            for (auto it = value.begin(); it != value.end(); ++it) {
                if (schema.at("properties").contains(it.key())) {
                    validate(it.value(), schema.at("properties").at(it.key()),
                             path + "." + it.key());
                }
            }
        }
        if (schema.contains("additionalProperties") &&
            schema.at("additionalProperties").is_object()) {
            for (auto it = value.begin(); it != value.end(); ++it) {
                validate(it.value(), schema.at("additionalProperties"), path + "." + it.key());
            }
        }
    }
    if (value.is_array() && schema.contains("items")) {
        for (size_t i = 0; i < value.size(); ++i) {
            validate(value[i], schema.at("items"), path + "[" + std::to_string(i) + "]");
        }
    }
}

} // namespace

TEST_SUITE("schemas") {

TEST_CASE("run config output validates") {
    RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
    validate(cfg.to_json(), load_schema("run_config.schema.json"), "config");
}

TEST_CASE("iou report output validates") {
    LabelMap a, b;
    a.h = b.h = 2;
    a.w = b.w = 2;
    a.v = {0, 1, 1, 0};
    b.v = {0, 1, 0, 0};
    validate(miou(a, b, 3).to_json(), load_schema("iou_report.schema.json"), "iou");
}

TEST_CASE("memory report output validates") {
    MemoryReport rep;
    rep.estimated_peak_bytes = 100;
    rep.measured_peak_bytes = 120;
    rep.budget_bytes = 1000;
    rep.per_stage["branches"] = 60;
    validate(rep.to_json(), load_schema("memory_report.schema.json"), "memory");
}

TEST_CASE("run record output validates") {
    RunRecord rec;
    rec.config = RunConfig{}.to_json();
    rec.config_hash = "abc";
    rec.eval_history = {{100, 0.5}};
    rec.final_test = report_from_confusion(std::vector<int64_t>{1, 0, 0, 1}, 2);
    rec.memory.budget_bytes = 1;
    rec.wall_time_sec = 0.25;
    validate(rec.to_json(), load_schema("run_record.schema.json"), "record");
}

TEST_CASE("bench rows validate") {
    nlohmann::json rows = nlohmann::json::array();
    rows.push_back({{"patch", 64},
                    {"miou", 0.5},
                    {"measured_peak_bytes", 100},
                    {"estimated_peak_bytes", 90},
                    {"wall_time_sec", 1.5}});
    validate(rows, load_schema("bench.schema.json"), "bench");
}

TEST_CASE("manifest validates") {
    Manifest m;
    m.classes = 4;
    m.seed = 7;
    m.fractions = {0.7, 0.15, 0.15};
    m.train = {"0000"};
    validate(m.to_json(), load_schema("manifest.schema.json"), "manifest");
}

} // TEST_SUITE
