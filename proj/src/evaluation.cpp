#include "imask/evaluation.hpp"

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "imask/errors.hpp"
#include "imask/optim.hpp"
#include "imask/pretraining.hpp"

namespace imask {
namespace {

enum Stream : std::uint64_t { kInit = 20, kDropout = 21, kOrder = 22 };

void check_pair(std::size_t a, std::size_t b, const char* what) {
  if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a) +
                                " vs " + std::to_string(b));
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  check_pair(preds.size(), labels.size(), "accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const int> preds, std::span<const int> labels,
                std::optional<int> num_classes) {
  check_pair(preds.size(), labels.size(), "macro_f1");
  std::set<int> classes;
  if (num_classes) {
    if (*num_classes < 1) throw std::invalid_argument("macro_f1: num_classes must be positive");
    for (int c = 0; c < *num_classes; ++c) classes.insert(c);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (!classes.count(preds[i]) || !classes.count(labels[i])) {
        throw std::invalid_argument("macro_f1: class index outside [0, num_classes)");
      }
    }
  } else {
    classes.insert(preds.begin(), preds.end());
    classes.insert(labels.begin(), labels.end());
  }
  double total = 0.0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, l = labels[i] == c;
      tp += p && l;
      fp += p && !l;
      fn += !p && l;
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    total += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return total / static_cast<double>(classes.size());
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores.size(), labels.size(), "auroc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (double s : scores)
    if (std::isnan(s)) throw std::invalid_argument("auroc: NaN score");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) {
        n_pos += 1;
        rank_sum += avg_rank;
      } else if (labels[order[t]] == 0) {
        n_neg += 1;
      } else {
        throw std::invalid_argument("auroc: labels must be 0 or 1");
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: needs both classes");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

// ---------------------------------------------------------------------------
// Fine-tuning

void FinetuneConfig::validate() const {
  if (epochs <= 0) throw ConfigError("finetune: epochs must be positive");
  if (batch_size < 2) throw ConfigError("finetune: batch_size must be at least 2");
  if (!(base_lr > 0.0)) throw ConfigError("finetune: base_lr must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("finetune: lr_decay must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("finetune: dropout must be in [0, 1)");
  if (hidden == 0) throw ConfigError("finetune: hidden must be positive");
}

Metrics evaluate_classifier(Classifier& clf, const Dataset& data,
                            const std::vector<std::size_t>& which) {
  if (which.empty()) throw DataError("evaluation: empty split");
  std::vector<int> preds, labels;
  std::vector<double> scores;
  Rng unused(0);
  constexpr std::size_t kChunk = 128;
  for (std::size_t s = 0; s < which.size(); s += kChunk) {
    std::vector<std::size_t> part(which.begin() + static_cast<std::ptrdiff_t>(s),
                                  which.begin() + static_cast<std::ptrdiff_t>(std::min(which.size(), s + kChunk)));
    Tape tape(false);
    Tensor logits = clf.forward(tape, stack_images(data.images, part), Mode::kEval, unused);
    Tensor prob = softmax(tape, logits, 1);
    const std::size_t c = clf.num_classes();
    for (std::size_t i = 0; i < part.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (logits[i * c + j] > logits[i * c + best]) best = j;
      preds.push_back(static_cast<int>(best));
      labels.push_back(data.manifest.records[part[i]].label);
      scores.push_back(prob[i * c + 1]);
    }
  }
  Metrics m;
  m.accuracy = accuracy(preds, labels);
  m.macro_f1 = macro_f1(preds, labels, static_cast<int>(clf.num_classes()));
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                    std::count(labels.begin(), labels.end(), 0) > 0;
  m.auroc = both ? auroc(scores, labels) : std::nan("");
  return m;
}

FinetuneResult finetune_classifier(std::span<const NamedTensor> encoder_records,
                                   const EncoderSpec& spec, const Dataset& data,
                                   std::size_t n_labels, const FinetuneConfig& cfg) {
  cfg.validate();
  if (n_labels < 2) throw DataError("finetune: label budget must be at least 2");
  FinetuneResult res;
  res.labeled = limit_train_labels(data.manifest, n_labels, cfg.label_seed);
  const auto val = data.indices(Split::kVal);
  const auto test = data.indices(Split::kTest);
  if (val.empty() || test.empty()) throw DataError("finetune: validation or test split is empty");

  Rng init_rng(derive_seed(cfg.seed, kInit));
  Rng drop_rng(derive_seed(cfg.seed, kDropout));
  Rng order_rng(derive_seed(cfg.seed, kOrder));
  Classifier clf = build_classifier(encoder_records, spec, 2, cfg.dropout, cfg.hidden, init_rng);
  std::vector<Tensor> params = clf.parameters();
  AdamState adam = make_adam_state(params);
  const LrSchedule schedule{cfg.base_lr, cfg.epochs, cfg.lr_decay};

  std::vector<NamedTensor> best;
  double best_f1 = -1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    for (const auto& batch : make_batches(res.labeled, cfg.batch_size, order_rng)) {
      std::vector<int> labels;
      for (std::size_t i : batch) labels.push_back(data.manifest.records[i].label);
      Tape tape;
      Tensor logits = clf.forward(tape, stack_images(data.images, batch), Mode::kTrain, drop_rng);
      Tensor loss = cross_entropy(tape, logits, labels);
      zero_grads(params);
      tape.backward(loss);
      adam_step(params, adam, lr);
    }
    const Metrics m = evaluate_classifier(clf, data, val);
    if (m.macro_f1 > best_f1) {
      best_f1 = m.macro_f1;
      best = snapshot(clf.state());
      res.best_val = m;
      res.best_epoch = epoch;
    }
  }
  auto state = clf.state();
  assign_state(state, best);
  res.test = evaluate_classifier(clf, data, test);
  return res;
}

// ---------------------------------------------------------------------------
// Aggregation and reports

EvalResult aggregate(std::string method, std::size_t budget, std::vector<RunMetrics> runs) {
  EvalResult r;
  r.method = std::move(method);
  r.budget = budget;
  r.run_count = runs.size();
  const double n = static_cast<double>(runs.size());
  auto fold = [&](auto get, double& mean, double& sd) {
    mean = 0.0;
    sd = 0.0;
    if (runs.empty()) return;
    for (const auto& run : runs) mean += get(run.metrics);
    mean /= n;
    if (runs.size() < 2) return;
    for (const auto& run : runs) sd += (get(run.metrics) - mean) * (get(run.metrics) - mean);
    sd = std::sqrt(sd / (n - 1.0));
  };
  fold([](const Metrics& m) { return m.accuracy; }, r.mean.accuracy, r.std.accuracy);
  fold([](const Metrics& m) { return m.macro_f1; }, r.mean.macro_f1, r.std.macro_f1);
  fold([](const Metrics& m) { return m.auroc; }, r.mean.auroc, r.std.auroc);
  r.runs = std::move(runs);
  return r;
}

namespace {

int method_rank(const std::string& name) {
  for (std::size_t i = 0; i < kAllMethods.size(); ++i)
    if (method_name(kAllMethods[i]) == name) return static_cast<int>(i);
  return static_cast<int>(kAllMethods.size());
}

void sort_results(std::vector<EvalResult>& results) {
  std::stable_sort(results.begin(), results.end(), [](const EvalResult& a, const EvalResult& b) {
    if (a.budget != b.budget) return a.budget < b.budget;
    const int ra = method_rank(a.method), rb = method_rank(b.method);
    if (ra != rb) return ra < rb;
    return a.method < b.method;
  });
}

constexpr std::string_view kReportHeader =
    "budget,method,runs,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,auroc_mean,"
    "auroc_std";

}  // namespace

std::string report(std::vector<EvalResult> results) {
  sort_results(results);
  std::string out(kReportHeader);
  out += '\n';
  for (const auto& r : results) {
    out += std::to_string(r.budget) + "," + r.method + "," + std::to_string(r.run_count) + "," +
           fmt(r.mean.accuracy) + "," + fmt(r.std.accuracy) + "," + fmt(r.mean.macro_f1) + "," +
           fmt(r.std.macro_f1) + "," + fmt(r.mean.auroc) + "," + fmt(r.std.auroc) + "\n";
  }
  return out;
}

std::vector<EvalResult> parse_report(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) {
    throw ParseError("results table: unexpected header");
  }
  std::vector<EvalResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw ParseError("results table line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      EvalResult r;
      r.budget = std::stoull(f[0]);
      r.method = f[1];
      r.run_count = std::stoull(f[2]);
      r.mean = {std::stod(f[3]), std::stod(f[5]), std::stod(f[7])};
      r.std = {std::stod(f[4]), std::stod(f[6]), std::stod(f[8])};
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError("results table line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

std::string report_runs(std::vector<EvalResult> results) {
  sort_results(results);
  std::string out = "budget,method,seed,accuracy,macro_f1,auroc\n";
  for (auto& r : results) {
    auto runs = r.runs;
    std::stable_sort(runs.begin(), runs.end(),
                     [](const RunMetrics& a, const RunMetrics& b) { return a.seed < b.seed; });
    for (const auto& run : runs) {
      out += std::to_string(r.budget) + "," + r.method + "," + std::to_string(run.seed) + "," +
             fmt(run.metrics.accuracy) + "," + fmt(run.metrics.macro_f1) + "," +
             fmt(run.metrics.auroc) + "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heatmaps

std::size_t Heatmap::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

Heatmap mask_heatmap(QNetwork& qnet, const ActionSpace& space, const Dataset& data,
                     const std::vector<std::size_t>& which) {
  if (which.empty()) throw DataError("heatmap: empty split");
  if (qnet.k() != space.k()) {
    throw ArchitectureError("architecture mismatch: Q-network has k = " + std::to_string(qnet.k()) +
                            ", action space has k = " + std::to_string(space.k()));
  }
  Heatmap h{space.k(), std::vector<std::size_t>(space.size(), 0)};
  Rng unused(0);
  const std::size_t a = space.size();
  constexpr std::size_t kChunk = 128;
  for (std::size_t s = 0; s < which.size(); s += kChunk) {
    std::vector<std::size_t> part(which.begin() + static_cast<std::ptrdiff_t>(s),
                                  which.begin() + static_cast<std::ptrdiff_t>(std::min(which.size(), s + kChunk)));
    Tape tape(false);
    Tensor q = qnet.forward(tape, stack_images(data.images, part), Mode::kEval);
    for (std::size_t i = 0; i < part.size(); ++i) {
      ++h.counts[select_action(q.data().subspan(i * a, a), ActionSelection::greedy(), unused)];
    }
  }
  return h;
}

Image render_heatmap(const Heatmap& heatmap, const ActionSpace& space, const Image* background) {
  const std::size_t side = space.image_side();
  Image img{side, side, std::vector<double>(side * side, 0.0)};
  for (std::size_t a = 0; a < space.size(); ++a) {
    if (heatmap.counts[a] == 0) continue;
    const Anchor an = space.anchor(a);
    for (std::size_t r = an.row; r < an.row + space.patch_side(); ++r)
      for (std::size_t c = an.col; c < an.col + space.patch_side(); ++c)
        img.at(r, c) += static_cast<double>(heatmap.counts[a]);
  }
  const double mx = *std::max_element(img.pixels.begin(), img.pixels.end());
  for (double& v : img.pixels) v = mx > 0 ? v / mx : 0.0;
  if (background) {
    if (background->height != side || background->width != side) {
      throw DimensionError("heatmap background does not match the image side");
    }
    for (std::size_t p = 0; p < img.pixels.size(); ++p) {
      img.pixels[p] = 0.5 * img.pixels[p] + 0.5 * std::clamp(background->pixels[p], 0.0, 1.0);
    }
  }
  return img;
}

std::string heatmap_csv(const Heatmap& heatmap, const ActionSpace& space) {
  std::string out = "action,grid_row,grid_col,anchor_row,anchor_col,count\n";
  for (std::size_t a = 0; a < space.size(); ++a) {
    const Anchor an = space.anchor(a);
    out += std::to_string(a) + "," + std::to_string(a / space.k()) + "," +
           std::to_string(a % space.k()) + "," + std::to_string(an.row) + "," +
           std::to_string(an.col) + "," + std::to_string(heatmap.counts[a]) + "\n";
  }
  return out;
}

Image mean_image(const Dataset& data, const std::vector<std::size_t>& which) {
  if (which.empty()) throw DataError("mean_image: empty selection");
  Image out = data.images.at(which.front());
  std::fill(out.pixels.begin(), out.pixels.end(), 0.0);
  for (std::size_t i : which)
    for (std::size_t p = 0; p < out.pixels.size(); ++p) out.pixels[p] += data.images.at(i).pixels[p];
  for (double& v : out.pixels) v /= static_cast<double>(which.size());
  return out;
}

// ---------------------------------------------------------------------------
// Chi-square tests

namespace {

double upper_tail(double stat, double dof) {
  if (dof < 1) return 1.0;
  boost::math::chi_squared dist(dof);
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace

double chi_square_gof_p(std::span<const std::size_t> counts, std::span<const double> probs) {
  if (counts.size() != probs.size() || counts.size() < 2) {
    throw std::invalid_argument("chi-square: need matching counts and probabilities, K >= 2");
  }
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  if (n == 0) throw std::invalid_argument("chi-square: no observations");
  double stat = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    if (!(e > 0)) throw std::invalid_argument("chi-square: expected counts must be positive");
    const double d = static_cast<double>(counts[i]) - e;
    stat += d * d / e;
  }
  return upper_tail(stat, static_cast<double>(counts.size() - 1));
}

double chi_square_uniform_p(std::span<const std::size_t> counts) {
  std::vector<double> p(counts.size(), 1.0 / static_cast<double>(counts.size()));
  return chi_square_gof_p(counts, p);
}

double chi_square_homogeneity_p(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("chi-square: histogram sizes differ");
  double na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]);
  }
  if (na == 0 || nb == 0) throw std::invalid_argument("chi-square: empty histogram");
  double stat = 0.0;
  std::size_t cols = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double col = static_cast<double>(a[i] + b[i]);
    if (col == 0) continue;
    ++cols;
    const double ea = col * na / (na + nb), eb = col * nb / (na + nb);
    stat += (a[i] - ea) * (a[i] - ea) / ea + (b[i] - eb) * (b[i] - eb) / eb;
  }
  return upper_tail(stat, static_cast<double>(cols) - 1.0);
}

}  // namespace imask
