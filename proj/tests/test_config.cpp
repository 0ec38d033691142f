#include "uhrseg/config.hpp"

#include <doctest.h>

using namespace uhrseg;

TEST_SUITE("config") {

TEST_CASE("missing keys take defaults and are echoed back") {
    RunConfig c = RunConfig::from_json(nlohmann::json::object());
    CHECK(c.train.base_lr == doctest::Approx(1e-2));
    CHECK(c.train.power == doctest::Approx(0.9));
    CHECK(c.model.d == 32);
    nlohmann::json echoed = c.to_json();
    CHECK(echoed.at("train").at("iters") == 2000);
    CHECK(echoed.at("tiling").at("mode") == "local");
    CHECK(echoed.at("ablation").at("upsampler") == "query");
}

TEST_CASE("unknown keys are rejected with their path") {
    nlohmann::json js = {{"train", {{"iterz", 100}}}};
    try {
        RunConfig::from_json(js);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("train.iterz") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::from_json({{"bogus", 1}}), ConfigError);
}

TEST_CASE("type mismatches are rejected") {
    CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"iters", "many"}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json({{"tiling", {{"mode", 3}}}}), ConfigError);
}

TEST_CASE("flag consistency: use_memory requires use_m_b") {
    nlohmann::json js = {{"ablation", {{"use_m_b", false}, {"use_memory", true}}}};
    CHECK_THROWS_AS(RunConfig::from_json(js), ConfigError);
    nlohmann::json ok = {{"ablation", {{"use_m_b", false}, {"use_memory", false}}}};
    RunConfig c = RunConfig::from_json(ok);
    CHECK_FALSE(c.ablation.use_m_b);
}

TEST_CASE("value validation") {
    CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"batch", 0}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"crop", 30}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json({{"model", {{"classes", 1}}}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json({{"tiling", {{"mode", "diagonal"}}}}),
                    ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json({{"ablation", {{"read_mode", "minmax"}}}}),
                    ConfigError);
}

TEST_CASE("config hash is stable and sensitive") {
    RunConfig a = RunConfig::from_json(nlohmann::json::object());
    RunConfig b = RunConfig::from_json(nlohmann::json::object());
    CHECK(a.hash() == b.hash());
    RunConfig c = RunConfig::from_json({{"train", {{"seed", 999}}}});
    CHECK(a.hash() != c.hash());
}

} // TEST_SUITE
