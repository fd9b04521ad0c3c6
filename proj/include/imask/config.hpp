#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "imask/data.hpp"
#include "imask/evaluation.hpp"
#include "imask/pretraining.hpp"

namespace imask {

/// Everything one experiment needs. Parsed from an INI-style file with
/// [dataset], [pretrain], [finetune] and [output] sections of `key = value`
/// lines; '#' and ';' start comments. Unknown sections or keys are errors.
struct ExperimentConfig {
  SyntheticConfig dataset;
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 1;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::vector<std::size_t> budgets{13, 66, 129};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir;  // empty: $IMASK_OUTPUT_ROOT, else "runs"

  void validate() const;
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

// "13,66,129"
std::vector<std::size_t> parse_size_list(std::string_view text);
// "0,1,2", "0..4" or a mix such as "0..2,7"
std::vector<std::uint64_t> parse_seed_list(std::string_view text);

}  // namespace imask
