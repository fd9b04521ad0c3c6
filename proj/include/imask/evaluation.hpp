#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imask/checkpoint.hpp"
#include "imask/data.hpp"
#include "imask/masking.hpp"
#include "imask/networks.hpp"

namespace imask {

// Fraction of positions where preds == labels. Throws on empty or unequal input.
double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Unweighted mean of per-class F1. Without num_classes the classes are the
/// union of values seen in preds and labels; with it, classes 0..num_classes-1
/// all count and one absent from both inputs scores 0.
double macro_f1(std::span<const int> preds, std::span<const int> labels,
                std::optional<int> num_classes = std::nullopt);

/// Probability that a random positive (label 1) outscores a random negative,
/// ties counted one half. Rank-based, O(n log n). Throws unless both classes occur.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double auroc = 0.0;
};

struct FinetuneConfig {
  int epochs = 40;
  std::size_t batch_size = 8;
  double base_lr = 1e-4;
  double lr_decay = 0.3;
  double dropout = kDefaultDropout;
  std::size_t hidden = kDefaultClassifierHidden;
  std::uint64_t seed = 0;        // initialization, dropout and batch order
  std::uint64_t label_seed = 0;  // which training samples carry labels

  void validate() const;
};

struct FinetuneResult {
  Metrics test;
  Metrics best_val;
  int best_epoch = 0;
  std::vector<std::size_t> labeled;  // dataset indices used for supervision
};

/// Fine-tunes encoder + head on n_labels stratified training labels, keeps the
/// epoch with the best validation macro F1 (earliest on ties) and reports test
/// metrics of that epoch. AUROC scores are the softmax probability of class 1.
FinetuneResult finetune_classifier(std::span<const NamedTensor> encoder_records,
                                   const EncoderSpec& spec, const Dataset& data,
                                   std::size_t n_labels, const FinetuneConfig& cfg);

// Eval-mode metrics of a classifier on the given dataset indices.
Metrics evaluate_classifier(Classifier& clf, const Dataset& data,
                            const std::vector<std::size_t>& which);

struct RunMetrics {
  std::uint64_t seed = 0;
  Metrics metrics;
};

struct EvalResult {
  std::string method;
  std::size_t budget = 0;
  std::size_t run_count = 0;
  Metrics mean;
  Metrics std;  // sample standard deviation; 0 for a single run
  std::vector<RunMetrics> runs;
};

EvalResult aggregate(std::string method, std::size_t budget, std::vector<RunMetrics> runs);

/// CSV, one row per (budget, method), sorted by budget then by the order
/// reconstruction, context_restoration, context_prediction, intelligent
/// (other names after, alphabetically). Numbers use %.17g.
/// Header: budget,method,runs,accuracy_mean,accuracy_std,macro_f1_mean,
///         macro_f1_std,auroc_mean,auroc_std
std::string report(std::vector<EvalResult> results);
std::vector<EvalResult> parse_report(std::string_view csv);

// Per-run rows: budget,method,seed,accuracy,macro_f1,auroc (same ordering, then seed).
std::string report_runs(std::vector<EvalResult> results);

struct Heatmap {
  std::size_t k = 0;
  std::vector<std::size_t> counts;  // row-major k x k

  std::size_t total() const;
};

// Greedy action of every listed image, tallied on the k x k grid.
Heatmap mask_heatmap(QNetwork& qnet, const ActionSpace& space, const Dataset& data,
                     const std::vector<std::size_t>& which);

/// Image-side graymap: per pixel, the share of greedy masks covering it
/// (scaled so the most-covered pixel is 1), blended half-and-half with
/// `background` when given.
Image render_heatmap(const Heatmap& heatmap, const ActionSpace& space,
                     const Image* background = nullptr);

// Header: action,grid_row,grid_col,anchor_row,anchor_col,count
std::string heatmap_csv(const Heatmap& heatmap, const ActionSpace& space);

// Pixel-wise mean of the listed images.
Image mean_image(const Dataset& data, const std::vector<std::size_t>& which);

/// Pearson chi-square goodness of fit of counts against probabilities (which
/// must sum to 1); returns the upper-tail p-value.
double chi_square_gof_p(std::span<const std::size_t> counts, std::span<const double> probs);
double chi_square_uniform_p(std::span<const std::size_t> counts);
// Two-sample homogeneity test on a 2 x K table; empty columns are dropped.
double chi_square_homogeneity_p(std::span<const std::size_t> a, std::span<const std::size_t> b);

}  // namespace imask
