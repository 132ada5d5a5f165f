#include <gtest/gtest.h>

#include <sstream>

#include "lance/config.hpp"

using namespace lance;

TEST(Config, DefaultsValidate) {
    EncodeConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.op.context_taps, 16u);
    EXPECT_EQ(c.op.synth_channels, 48u);
    EXPECT_EQ(c.schedule.total_iters(), 10000u);
}

TEST(Config, IterationsSplitNinetyTen) {
    EncodeConfig c;
    c.set_iterations(200);
    EXPECT_EQ(c.schedule.phase1_iters, 180u);
    EXPECT_EQ(c.schedule.phase2_iters, 20u);
    c.set_iterations(5);
    EXPECT_EQ(c.schedule.phase2_iters, 1u);
    EXPECT_THROW(c.set_iterations(1), ConfigError);
}

TEST(Config, OperationPointsByName) {
    EXPECT_EQ(OperationPoint::from_name("MOP").synth_channels, 16u);
    EXPECT_EQ(OperationPoint::from_name("mop").context_taps, 16u);
    EXPECT_EQ(OperationPoint::from_name("lop").context_taps, 8u);
    EXPECT_THROW(OperationPoint::from_name("xop"), ConfigError);
}

TEST(Config, ApplySettingCoversSwitches) {
    EncodeConfig c;
    apply_setting(c, "lambda", "0.02");
    apply_setting(c, "operation_point", "lop");
    apply_setting(c, "layers", "3");
    apply_setting(c, "use_hyperprior", "off");
    apply_setting(c, "med", "false");
    apply_setting(c, "cphi", "0");
    apply_setting(c, "use_layer_index", "no");
    apply_setting(c, "resample", "area");
    apply_setting(c, "checksums", "off");
    apply_setting(c, "iterations", "100");
    EXPECT_EQ(c.lambda, 0.02);
    EXPECT_EQ(c.op.name, "lop");
    EXPECT_EQ(c.layers, 3u);
    EXPECT_FALSE(c.ablation.use_hyperprior);
    EXPECT_FALSE(c.ablation.med);
    EXPECT_FALSE(c.ablation.cphi);
    EXPECT_FALSE(c.ablation.use_layer_index);
    EXPECT_EQ(c.ablation.resample, pyr::ResampleMode::Area);
    EXPECT_FALSE(c.checksums);
    EXPECT_EQ(c.schedule.total_iters(), 100u);
}

TEST(Config, RejectsMalformedValues) {
    EncodeConfig c;
    EXPECT_THROW(apply_setting(c, "lambda", "abc"), ConfigError);
    EXPECT_THROW(apply_setting(c, "lambda", "1e-3x"), ConfigError);
    EXPECT_THROW(apply_setting(c, "layers", "-3"), ConfigError);
    EXPECT_THROW(apply_setting(c, "med", "maybe"), ConfigError);
    EXPECT_THROW(apply_setting(c, "resample", "lanczos"), ConfigError);
    EXPECT_THROW(apply_setting(c, "no_such_key", "1"), ConfigError);
}

TEST(Config, ValidateRejectsOutOfRange) {
    auto bad = [](auto mutate) {
        EncodeConfig c;
        mutate(c);
        return c;
    };
    EXPECT_THROW(bad([](EncodeConfig& c) { c.lambda = 0.0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](EncodeConfig& c) { c.layers = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](EncodeConfig& c) { c.op.context_taps = 4; }).validate(), ConfigError);
    EXPECT_THROW(bad([](EncodeConfig& c) { c.precision = 20; }).validate(), ConfigError);
    EXPECT_THROW(bad([](EncodeConfig& c) { c.med_temperature_end = 0.0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](EncodeConfig& c) { c.hyperprior_downscale = 17; }).validate(), ConfigError);
}

TEST(Config, StreamParsesCommentsAndWhitespace) {
    std::istringstream in("# sweep point\n  lambda = 0.005  \n\nlayers=5 # fewer\r\nseed = 9\n");
    EncodeConfig c;
    apply_config_stream(c, in);
    EXPECT_EQ(c.lambda, 0.005);
    EXPECT_EQ(c.layers, 5u);
    EXPECT_EQ(c.seed, 9u);
}

TEST(Config, StreamReportsLineOfError) {
    std::istringstream in("lambda = 0.1\nlayers 3\n");
    EncodeConfig c;
    try {
        apply_config_stream(c, in);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Config, MissingFileIsAConfigError) {
    EncodeConfig c;
    EXPECT_THROW(apply_config_file(c, "/nonexistent/lance.cfg"), ConfigError);
}
