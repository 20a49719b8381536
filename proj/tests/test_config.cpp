#include <gtest/gtest.h>

#include <string>

#include "rfd/config.hpp"

using namespace rfd;

namespace {

std::string error_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::config);
        return e.what();
    }
    return {};
}

} // namespace

TEST(Config, EmptyObjectGivesDefaults) {
    const RunConfig c = parse_config("{}");
    const RunConfig d;
    EXPECT_EQ(c.seed, d.seed);
    EXPECT_EQ(c.net, d.net);
    EXPECT_EQ(c.distill.inner_batch, d.distill.inner_batch);
    EXPECT_EQ(c.eval.quant_bits, d.eval.quant_bits);
}

TEST(Config, RoundTripsThroughJson) {
    RunConfig c;
    c.seed = 7;
    c.net.width = 32;
    c.distill.lambda_adv = 0.0;
    c.distill.disc.log_difference_loss = true;
    c.eval.bandwidth = 0.5;
    c.data.kind = DataKind::checkerboard;
    const Json j = to_json(c);
    const RunConfig back = config_from_json(j);
    EXPECT_EQ(to_json(back).dump(), j.dump());
    EXPECT_EQ(back.seed, 7u);
    EXPECT_EQ(back.data.kind, DataKind::checkerboard);
}

TEST(Config, PartialOverlayKeepsOtherDefaults) {
    const RunConfig c = parse_config(R"({"distill": {"dmd_iterations": 12, "disc": {"hidden": 8}}})");
    EXPECT_EQ(c.distill.dmd_iterations, 12u);
    EXPECT_EQ(c.distill.disc.hidden, 8u);
    EXPECT_EQ(c.distill.batch, RunConfig{}.distill.batch);
}

TEST(Config, UnknownKeyNamesItsPath) {
    EXPECT_NE(error_of(R"({"bogus": 1})").find(".bogus"), std::string::npos);
    EXPECT_NE(error_of(R"({"distill": {"disc": {"hiden": 4}}})").find(".distill.disc.hiden"), std::string::npos);
}

TEST(Config, TypeErrorsNameTheirPath) {
    EXPECT_NE(error_of(R"({"net": {"width": "wide"}})").find(".net.width"), std::string::npos);
    EXPECT_NE(error_of(R"({"net": {"width": -3}})").find(".net.width"), std::string::npos);
    EXPECT_NE(error_of(R"({"eval": {"quant_bits": [8, 1.5]}})").find(".eval.quant_bits[1]"), std::string::npos);
    EXPECT_NE(error_of(R"({"data": {"kind": "spiral"}})").find(".data.kind"), std::string::npos);
}

TEST(Config, MalformedJsonIsAConfigError) {
    EXPECT_NE(error_of("{").find("not valid JSON"), std::string::npos);
    EXPECT_NE(error_of("[1]").find("expected an object"), std::string::npos);
}

TEST(Config, SemanticValidationRuns) {
    EXPECT_FALSE(error_of(R"({"net": {"num_classes": 3}})").empty());
    EXPECT_FALSE(error_of(R"({"eval": {"n": 0}})").empty());
    EXPECT_FALSE(error_of(R"({"eval": {"quant_bits": [64, 4]}})").empty());
}
