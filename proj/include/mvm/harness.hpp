#pragma once

// Training loop, evaluation, memory inspection, gradient checking and the
// ablation driver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvm/checkpoint.hpp"
#include "mvm/config.hpp"
#include "mvm/losses.hpp"
#include "mvm/memory.hpp"
#include "mvm/model.hpp"
#include "mvm/optim.hpp"
#include "mvm/synthdata.hpp"

namespace mvm {

inline void check_compatible(const ModelConfig& c, const Dataset& d) {
  const auto& lex = d.lexicon;
  if (c.visemes != lex.num_visemes || c.phonemes != lex.num_phonemes || c.words != lex.num_words() ||
      c.frames != d.frames)
    throw std::invalid_argument("dataset (|V|=" + std::to_string(lex.num_visemes) + ", |P|=" +
                                std::to_string(lex.num_phonemes) + ", K=" + std::to_string(lex.num_words()) +
                                ", T=" + std::to_string(d.frames) + ") does not match config (|V|=" +
                                std::to_string(c.visemes) + ", |P|=" + std::to_string(c.phonemes) +
                                ", K=" + std::to_string(c.words) + ", T=" + std::to_string(c.frames) + ")");
}

/// Copies vocabulary sizes and T from a dataset into a config.
inline ModelConfig config_for(ModelConfig c, const Dataset& d) {
  c.visemes = d.lexicon.num_visemes;
  c.phonemes = d.lexicon.num_phonemes;
  c.words = d.lexicon.num_words();
  c.frames = d.frames;
  return c;
}

inline Batch make_batch(const std::vector<SyntheticExample>& examples, std::span<const std::size_t> indices,
                        std::size_t frames, bool with_audio = true) {
  Batch b;
  b.size = indices.size();
  b.frames = frames;
  for (auto i : indices) {
    const auto& ex = examples.at(i);
    if (ex.viseme_tokens.size() != frames) throw std::invalid_argument("make_batch: example length differs from T");
    b.viseme_tokens.insert(b.viseme_tokens.end(), ex.viseme_tokens.begin(), ex.viseme_tokens.end());
    if (with_audio) b.phoneme_tokens.insert(b.phoneme_tokens.end(), ex.phoneme_tokens.begin(), ex.phoneme_tokens.end());
    b.labels.push_back(ex.label);
  }
  return b;
}

struct TrainLogRecord {
  std::uint64_t step = 0;
  double task = 0, rec = 0, cont = 0, total = 0;
};

inline nlohmann::json to_json(const TrainLogRecord& r) {
  return {{"step", r.step}, {"task", r.task}, {"rec", r.rec}, {"cont", r.cont}, {"total", r.total}};
}

template <class T>
struct TrainResult {
  LipReadingModel<T> model;
  OptimizerState<T> optimizer;
  Checkpoint checkpoint;
  std::vector<TrainLogRecord> log;
  bool diverged = false;
  std::string diagnostics;
};

/// Mean |cos| over ordered pairs of distinct value slots, averaged over
/// levels; 0 for the memory-free model.
template <class T>
double mean_value_slot_similarity(const LipReadingModel<T>& m) {
  if (m.banks.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& bank : m.banks) acc += static_cast<double>(contrastive_loss<T>(nullptr, bank.value).item());
  return acc / static_cast<double>(m.banks.size());
}

/// Trains from the config's seed. The model is initialised from `seed`; batch
/// order comes from a separate stream derived from the same seed. On a
/// non-finite loss or gradient, training stops and the checkpoint holds the
/// last good parameters.
template <class T>
TrainResult<T> train(const ModelConfig& config, const Dataset& data,
                     const std::function<void(const TrainLogRecord&)>& on_step = {}) {
  check_compatible(config, data);
  if (data.examples.empty() && config.steps > 0) throw std::invalid_argument("train: empty dataset");
  TrainResult<T> r{LipReadingModel<T>::init(config), {}, {}, {}, false, {}};
  auto params = r.model.parameters();
  r.optimizer = OptimizerState<T>::for_parameters(
      params, {config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay});
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);

  std::vector<std::size_t> order(data.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const auto B = static_cast<std::size_t>(config.batch);
  const auto frames = static_cast<std::size_t>(config.frames);

  std::uint64_t step = 0;
  for (; step < static_cast<std::uint64_t>(config.steps); ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < B) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const auto batch = make_batch(data.examples, idx, frames, config.has_memory());
    Tape<T> tape;
    auto fwd = forward_train(&tape, r.model, batch);
    const auto& rep = fwd.loss.report;
    if (!std::isfinite(rep.total)) {
      r.diverged = true;
      r.diagnostics = "non-finite total loss at step " + std::to_string(step + 1);
      break;
    }
    tape.backward(fwd.loss.total);
    try {
      adamw_step(params, r.optimizer);
    } catch (const NumericalError& e) {
      r.diverged = true;
      r.diagnostics = e.what();
      zero_grads(params);
      break;
    }
    zero_grads(params);
    tape.clear();
    TrainLogRecord rec{step + 1, rep.task, rep.reconstruction, rep.contrastive, rep.total};
    r.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  r.checkpoint = make_checkpoint(r.model, &r.optimizer, step, rng);
  return r;
}

struct HomopheneRow {
  int word_a = 0, word_b = 0;
  double accuracy_a = 0, accuracy_b = 0;
  std::optional<double> delta_a, delta_b;
};

struct EvalReport {
  double overall_accuracy = 0;
  std::vector<double> per_word_accuracy;
  std::vector<std::size_t> per_word_count;
  std::vector<HomopheneRow> homophene_table;
  double homophene_accuracy = 0;      // over examples of words in some pair
  double non_homophene_accuracy = 0;  // over all other examples
  double mean_loss = 0;
  double loss_stddev = 0;
  std::string baseline;

  bool operator==(const EvalReport& o) const {
    auto same_rows = [&] {
      if (homophene_table.size() != o.homophene_table.size()) return false;
      for (std::size_t i = 0; i < homophene_table.size(); ++i) {
        const auto &a = homophene_table[i], &b = o.homophene_table[i];
        if (a.word_a != b.word_a || a.word_b != b.word_b || a.accuracy_a != b.accuracy_a ||
            a.accuracy_b != b.accuracy_b || a.delta_a != b.delta_a || a.delta_b != b.delta_b)
          return false;
      }
      return true;
    };
    return overall_accuracy == o.overall_accuracy && per_word_accuracy == o.per_word_accuracy &&
           per_word_count == o.per_word_count && same_rows() && homophene_accuracy == o.homophene_accuracy &&
           non_homophene_accuracy == o.non_homophene_accuracy && mean_loss == o.mean_loss &&
           loss_stddev == o.loss_stddev && baseline == o.baseline;
  }
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& h : r.homophene_table) {
    nlohmann::json row{{"word_a", h.word_a}, {"word_b", h.word_b}, {"accuracy_a", h.accuracy_a},
                       {"accuracy_b", h.accuracy_b}};
    if (h.delta_a) row["delta_a"] = *h.delta_a;
    if (h.delta_b) row["delta_b"] = *h.delta_b;
    rows.push_back(row);
  }
  return {{"overall_accuracy", r.overall_accuracy},
          {"per_word_accuracy", r.per_word_accuracy},
          {"per_word_count", r.per_word_count},
          {"homophene_table", rows},
          {"homophene_accuracy", r.homophene_accuracy},
          {"non_homophene_accuracy", r.non_homophene_accuracy},
          {"mean_loss", r.mean_loss},
          {"loss_stddev", r.loss_stddev},
          {"baseline", r.baseline}};
}

/// Per-example predictions and cross-entropy, visual input only.
template <class T>
void predict(const LipReadingModel<T>& m, const std::vector<SyntheticExample>& examples, std::size_t frames,
             std::vector<int>& predicted, std::vector<double>& losses, std::size_t chunk = 256) {
  predicted.assign(examples.size(), -1);
  losses.assign(examples.size(), 0.0);
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const auto end = std::min(examples.size(), start + chunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = make_batch(examples, idx, frames, false);
    const auto logits = forward_infer(m, batch.viseme_tokens, frames);
    const auto K = logits.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const T* row = logits.ptr() + r * K;
      predicted[start + r] = static_cast<int>(std::max_element(row, row + K) - row);
      const T mx = *std::max_element(row, row + K);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
      losses[start + r] = -(static_cast<double>(row[batch.labels[r]] - mx) - std::log(z));
    }
  }
}

template <class T>
EvalReport evaluate(const LipReadingModel<T>& m, const Dataset& data, const LipReadingModel<T>* baseline = nullptr,
                    std::string baseline_name = {}) {
  check_compatible(m.config, data);
  if (baseline) check_compatible(baseline->config, data);
  const auto frames = static_cast<std::size_t>(data.frames);
  const auto K = static_cast<std::size_t>(data.lexicon.num_words());
  std::vector<int> pred;
  std::vector<double> losses;
  predict(m, data.examples, frames, pred, losses);

  EvalReport r;
  r.baseline = std::move(baseline_name);
  std::vector<std::size_t> correct(K, 0);
  r.per_word_count.assign(K, 0);
  const auto mask = data.lexicon.homophene_mask();
  std::size_t hom_n = 0, hom_ok = 0, rest_n = 0, rest_ok = 0, ok = 0;
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const auto y = static_cast<std::size_t>(data.examples[i].label);
    const bool hit = pred[i] == data.examples[i].label;
    ++r.per_word_count[y];
    correct[y] += hit;
    ok += hit;
    if (mask[y]) { ++hom_n; hom_ok += hit; } else { ++rest_n; rest_ok += hit; }
  }
  const auto n = data.examples.size();
  r.overall_accuracy = n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
  r.homophene_accuracy = hom_n ? static_cast<double>(hom_ok) / static_cast<double>(hom_n) : 0.0;
  r.non_homophene_accuracy = rest_n ? static_cast<double>(rest_ok) / static_cast<double>(rest_n) : 0.0;
  r.per_word_accuracy.assign(K, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    if (r.per_word_count[k]) r.per_word_accuracy[k] = static_cast<double>(correct[k]) / static_cast<double>(r.per_word_count[k]);
  if (n) {
    r.mean_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double l : losses) ss += (l - r.mean_loss) * (l - r.mean_loss);
    r.loss_stddev = std::sqrt(ss / static_cast<double>(n));
  }

  std::optional<EvalReport> base;
  if (baseline) base = evaluate(*baseline, data);
  for (auto [a, b] : data.lexicon.homophene_pairs) {
    HomopheneRow row{a, b, r.per_word_accuracy[static_cast<std::size_t>(a)],
                     r.per_word_accuracy[static_cast<std::size_t>(b)], {}, {}};
    if (base) {
      row.delta_a = row.accuracy_a - base->per_word_accuracy[static_cast<std::size_t>(a)];
      row.delta_b = row.accuracy_b - base->per_word_accuracy[static_cast<std::size_t>(b)];
    }
    r.homophene_table.push_back(row);
  }
  return r;
}

/// Writes one CSV (level,head,frame,slot,score) per example into out_dir and
/// returns the paths.
template <class T>
std::vector<std::filesystem::path> inspect_memory(const LipReadingModel<T>& m,
                                                  const std::vector<SyntheticExample>& examples,
                                                  const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw FormatError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto frames = static_cast<std::size_t>(m.config.frames);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const auto vis = forward_infer_detailed(m, ex.viseme_tokens, frames);
    const auto path = out_dir / ("addressing_" + std::to_string(i) + "_word" + std::to_string(ex.label) + ".csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out << kAddressingCsvHeader << '\n';
    for (std::size_t l = 0; l < vis.levels.size(); ++l) write_addressing_csv(out, l, vis.levels[l].addressing, 0, frames);
    if (!out) throw FormatError("write failed: " + path.string());
    paths.push_back(path);
  }
  return paths;
}

/// Flattened [frames x N] addressing per (level, head) for one example.
template <class T>
std::vector<std::vector<std::vector<double>>> addressing_profile(const LipReadingModel<T>& m,
                                                                 const SyntheticExample& ex) {
  const auto vis = forward_infer_detailed(m, ex.viseme_tokens, static_cast<std::size_t>(m.config.frames));
  std::vector<std::vector<std::vector<double>>> out;
  for (const auto& lvl : vis.levels) {
    std::vector<std::vector<double>> heads;
    for (const auto& a : lvl.addressing.heads) heads.emplace_back(a.data().begin(), a.data().end());
    out.push_back(std::move(heads));
  }
  return out;
}

inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

struct AddressingSeparation {
  double homophene_distance = 0;  // between members of a homophene pair
  double same_word_distance = 0;  // between two samples of one word
};

/// Mean cosine distance between addressing profiles (over levels and heads)
/// for the first `samples` test examples of each homophene-pair member.
template <class T>
AddressingSeparation addressing_separation(const LipReadingModel<T>& m, const Dataset& data, std::size_t samples = 10) {
  std::vector<std::vector<const SyntheticExample*>> by_word(static_cast<std::size_t>(data.lexicon.num_words()));
  for (const auto& ex : data.examples) by_word[static_cast<std::size_t>(ex.label)].push_back(&ex);
  auto dist = [&](const SyntheticExample& x, const SyntheticExample& y) {
    const auto px = addressing_profile(m, x), py = addressing_profile(m, y);
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t l = 0; l < px.size(); ++l)
      for (std::size_t h = 0; h < px[l].size(); ++h, ++n) acc += cosine_distance(px[l][h], py[l][h]);
    return n ? acc / static_cast<double>(n) : 0.0;
  };
  AddressingSeparation s;
  std::size_t nh = 0, ns = 0;
  for (auto [a, b] : data.lexicon.homophene_pairs) {
    const auto& xa = by_word[static_cast<std::size_t>(a)];
    const auto& xb = by_word[static_cast<std::size_t>(b)];
    const auto n = std::min({samples, xa.size(), xb.size()});
    for (std::size_t i = 0; i < n; ++i) {
      s.homophene_distance += dist(*xa[i], *xb[i]);
      ++nh;
      if (i + 1 < n) {
        s.same_word_distance += dist(*xa[i], *xa[i + 1]) + dist(*xb[i], *xb[i + 1]);
        ns += 2;
      }
    }
  }
  if (nh) s.homophene_distance /= static_cast<double>(nh);
  if (ns) s.same_word_distance /= static_cast<double>(ns);
  return s;
}

struct GradCheckGroup {
  std::string name;
  double max_relative_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_relative_error = 0;
  double tolerance = 1e-4;
  bool deterministic = true;
  bool passed() const { return deterministic && max_relative_error < tolerance; }
};

enum class LossTerm { total, task, reconstruction, contrastive };

inline const char* loss_term_name(LossTerm t) {
  switch (t) {
    case LossTerm::task: return "task";
    case LossTerm::reconstruction: return "reconstruction";
    case LossTerm::contrastive: return "contrastive";
    default: return "total";
  }
}

template <class T>
Array<T> select_term(const TotalLoss<T>& l, LossTerm t) {
  switch (t) {
    case LossTerm::task: return l.task;
    case LossTerm::reconstruction: return l.reconstruction;
    case LossTerm::contrastive: return l.contrastive;
    default: return l.total;
  }
}

/// Tape gradient of one loss term vs central differences (64-bit) on random
/// tokens for the given config.
inline GradCheckReport grad_check(const ModelConfig& config, double eps = 1e-4, double tolerance = 1e-4,
                                  LossTerm term = LossTerm::total) {
  auto cfg = config;
  cfg.precision = "f64";
  cfg.validate();
  if (term != LossTerm::total && term != LossTerm::task && !cfg.has_memory())
    throw std::invalid_argument("grad_check: memory loss terms need at least one level");
  auto model = LipReadingModel<double>::init(cfg);
  std::mt19937_64 rng(cfg.seed + 17);
  Batch batch;
  batch.size = static_cast<std::size_t>(cfg.batch);
  batch.frames = static_cast<std::size_t>(cfg.frames);
  std::uniform_int_distribution<int> vt(0, cfg.visual_vocab() - 1), at(0, cfg.audio_vocab() - 1), yt(0, cfg.words - 1);
  for (std::size_t i = 0; i < batch.size * batch.frames; ++i) {
    batch.viseme_tokens.push_back(vt(rng));
    batch.phoneme_tokens.push_back(at(rng));
  }
  for (std::size_t i = 0; i < batch.size; ++i) batch.labels.push_back(yt(rng));

  auto params = model.parameters();
  Tape<double> tape;
  auto fwd = forward_train(&tape, model, batch);
  auto objective = select_term(fwd.loss, term);
  tape.backward(objective);
  std::vector<std::vector<double>> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                    : std::vector<double>(p.size(), 0.0));
  zero_grads(params);
  tape.clear();

  const auto f = [&] { return select_term(forward_train<double>(nullptr, model, batch).loss, term).item(); };
  GradCheckReport rep;
  rep.tolerance = tolerance;
  rep.deterministic = f() == f();
  const auto numeric = finite_diff_gradient<double>(f, params, eps);
  const auto names = model.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double err = max_relative_error<double>(analytic[i], numeric[i]);
    rep.groups.push_back({names[i], err});
    rep.max_relative_error = std::max(rep.max_relative_error, err);
  }
  return rep;
}

struct AblationVariant {
  std::string name;
  int levels = 0;
  int heads = 1;
};

/// Baseline, single memory, multi-head single level, multi-head multi-level,
/// and single-head multi-level (head-count comparison at equal depth).
inline std::vector<AblationVariant> default_ablation_variants(const ModelConfig& base) {
  const int multi = std::max(1, base.levels);
  const int h = base.heads;
  return {{"baseline", 0, h},
          {"visual_audio_memory", 1, 1},
          {"multi_head", 1, h},
          {"multi_head_multi_temporal", multi, h},
          {"single_head_multi_temporal", multi, 1}};
}

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  EvalReport report;
  double slot_similarity_init = 0;
  double slot_similarity_final = 0;
  AddressingSeparation separation;
  std::size_t parameter_count = 0;
  bool diverged = false;
};

inline nlohmann::json to_json(const AblationRun& r) {
  return {{"variant", r.variant},
          {"seed", r.seed},
          {"overall_accuracy", r.report.overall_accuracy},
          {"homophene_accuracy", r.report.homophene_accuracy},
          {"non_homophene_accuracy", r.report.non_homophene_accuracy},
          {"slot_similarity_init", r.slot_similarity_init},
          {"slot_similarity_final", r.slot_similarity_final},
          {"addressing_homophene_distance", r.separation.homophene_distance},
          {"addressing_same_word_distance", r.separation.same_word_distance},
          {"parameter_count", r.parameter_count},
          {"diverged", r.diverged}};
}

/// Trains and evaluates one variant. The trained model is moved into `keep`
/// when given.
template <class T>
AblationRun run_variant(const ModelConfig& base, const AblationVariant& v, std::uint64_t seed, const Dataset& train_set,
                        const Dataset& test_set, LipReadingModel<T>* keep = nullptr) {
  auto cfg = base;
  cfg.levels = v.levels;
  cfg.heads = v.heads;
  cfg.seed = seed;
  AblationRun run;
  run.variant = v.name;
  run.seed = seed;
  run.slot_similarity_init = mean_value_slot_similarity(LipReadingModel<T>::init(cfg));
  auto res = train<T>(cfg, train_set);
  run.diverged = res.diverged;
  run.parameter_count = res.model.parameter_count();
  run.slot_similarity_final = mean_value_slot_similarity(res.model);
  run.report = evaluate(res.model, test_set);
  if (cfg.has_memory()) run.separation = addressing_separation(res.model, test_set);
  if (keep) *keep = std::move(res.model);
  return run;
}

inline AblationRun run_variant(const ModelConfig& base, const AblationVariant& v, std::uint64_t seed,
                               const Dataset& train_set, const Dataset& test_set) {
  return base.precision == "f32" ? run_variant<float>(base, v, seed, train_set, test_set)
                                 : run_variant<double>(base, v, seed, train_set, test_set);
}

struct VariantSummary {
  std::string variant;
  double mean_accuracy = 0, std_accuracy = 0;
  double mean_homophene = 0, mean_non_homophene = 0;
  std::size_t runs = 0;
};

inline std::vector<VariantSummary> summarize(const std::vector<AblationRun>& runs) {
  std::vector<VariantSummary> out;
  for (const auto& r : runs) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& s) { return s.variant == r.variant; });
    if (it == out.end()) {
      out.push_back({r.variant});
      it = out.end() - 1;
    }
    it->mean_accuracy += r.report.overall_accuracy;
    it->mean_homophene += r.report.homophene_accuracy;
    it->mean_non_homophene += r.report.non_homophene_accuracy;
    ++it->runs;
  }
  for (auto& s : out) {
    const double n = static_cast<double>(s.runs);
    s.mean_accuracy /= n;
    s.mean_homophene /= n;
    s.mean_non_homophene /= n;
    double ss = 0;
    for (const auto& r : runs)
      if (r.variant == s.variant) ss += std::pow(r.report.overall_accuracy - s.mean_accuracy, 2);
    s.std_accuracy = s.runs > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  }
  return out;
}

}  // namespace mvm
