#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "imask/config.hpp"
#include "imask/errors.hpp"

using namespace imask;

TEST(Config, EmptyTextGivesDefaults) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.dataset.count, 1000u);
  EXPECT_EQ(c.pretrain.method, Method::kIntelligent);
  EXPECT_EQ(c.pretrain.epochs, 60);
  EXPECT_EQ(c.budgets, (std::vector<std::size_t>{13, 66, 129}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ShippedDefaultFileMatchesBuiltInDefaults) {
  const ExperimentConfig file = load_config(std::filesystem::path(IMASK_SOURCE_DIR) / "configs" / "default.ini");
  const ExperimentConfig def = parse_config("");
  EXPECT_EQ(file.dataset.image_side, def.dataset.image_side);
  EXPECT_EQ(file.dataset.count, def.dataset.count);
  EXPECT_EQ(file.dataset.lesion_probability, def.dataset.lesion_probability);
  EXPECT_EQ(file.dataset.radius_min, def.dataset.radius_min);
  EXPECT_EQ(file.dataset.radius_max, def.dataset.radius_max);
  EXPECT_EQ(file.dataset.texture_scale, def.dataset.texture_scale);
  EXPECT_EQ(file.dataset.texture_amplitude, def.dataset.texture_amplitude);
  EXPECT_EQ(file.dataset.background_level, def.dataset.background_level);
  EXPECT_EQ(file.dataset.noise_sigma, def.dataset.noise_sigma);
  EXPECT_EQ(file.dataset.lesion_intensity, def.dataset.lesion_intensity);
  EXPECT_EQ(file.dataset.seed, def.dataset.seed);
  EXPECT_EQ(file.fractions, def.fractions);
  EXPECT_EQ(file.split_seed, def.split_seed);
  const PretrainConfig &a = file.pretrain, &b = def.pretrain;
  EXPECT_EQ(a.method, b.method);
  EXPECT_EQ(a.encoder, b.encoder);
  EXPECT_EQ(a.epochs, b.epochs);
  EXPECT_EQ(a.batch_size, b.batch_size);
  EXPECT_EQ(a.base_lr, b.base_lr);
  EXPECT_EQ(a.lr_decay, b.lr_decay);
  EXPECT_EQ(a.k, b.k);
  EXPECT_EQ(a.patch_side, b.patch_side);
  EXPECT_EQ(a.temperature_start, b.temperature_start);
  EXPECT_EQ(a.temperature_end, b.temperature_end);
  EXPECT_EQ(a.gamma, b.gamma);
  EXPECT_EQ(a.fill, b.fill);
  EXPECT_EQ(a.n_swap, b.n_swap);
  EXPECT_EQ(a.swap_patch, b.swap_patch);
  EXPECT_EQ(a.q_head, b.q_head);
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_EQ(file.budgets, def.budgets);
  EXPECT_EQ(file.seeds, def.seeds);
  EXPECT_EQ(file.finetune.epochs, def.finetune.epochs);
  EXPECT_EQ(file.finetune.batch_size, def.finetune.batch_size);
  EXPECT_EQ(file.finetune.base_lr, def.finetune.base_lr);
  EXPECT_EQ(file.finetune.lr_decay, def.finetune.lr_decay);
  EXPECT_EQ(file.finetune.dropout, def.finetune.dropout);
  EXPECT_EQ(file.finetune.hidden, def.finetune.hidden);
  EXPECT_EQ(file.output_dir, def.output_dir);
}

TEST(Config, ValuesSectionsAndComments) {
  const ExperimentConfig c = parse_config(
      "; experiment\n"
      "[dataset]\n"
      "image_side = 16   # small\n"
      "fractions = 0.5, 0.25, 0.25\n"
      "[pretrain]\n"
      "method = context_restoration\n"
      "channels = 4,4\n"
      "temperature_start = inf\n"
      "q_head = flatten\n"
      "[finetune]\n"
      "budgets = 13\n"
      "seeds = 0..2, 7\n"
      "[output]\n"
      "dir = /tmp/somewhere\n");
  EXPECT_EQ(c.dataset.image_side, 16u);
  EXPECT_EQ(c.pretrain.encoder.image_side, 16u);
  EXPECT_EQ(c.fractions[1], 0.25);
  EXPECT_EQ(c.pretrain.method, Method::kContextRestoration);
  EXPECT_EQ(c.pretrain.encoder.channels, (std::vector<std::size_t>{4, 4}));
  EXPECT_TRUE(std::isinf(c.pretrain.temperature_start));
  EXPECT_EQ(c.pretrain.q_head, QHead::kFlatten);
  EXPECT_EQ(c.budgets, (std::vector<std::size_t>{13}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2, 7}));
  EXPECT_EQ(c.output_dir, "/tmp/somewhere");
}

TEST(Config, UnknownKeysAreNamed) {
  try {
    parse_config("[pretrain]\nepochs = 3\nlearning_rate = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("pretrain.learning_rate"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("[model]\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[pretrain]\nepochs\n"), ConfigError);
}

TEST(Config, BadValuesAreConfigErrors) {
  EXPECT_THROW(parse_config("[pretrain]\nepochs = many\n"), ConfigError);
  EXPECT_THROW(parse_config("[pretrain]\nmethod = jigsaw\n"), ConfigError);
  EXPECT_THROW(parse_config("[dataset]\ncount = -4\n"), ConfigError);
  EXPECT_THROW(parse_seed_list("4..2"), ConfigError);
  EXPECT_THROW(parse_config("[dataset]\nfractions = 0.5,0.5,0.5\n").validate(), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.ini"), std::exception);
}
