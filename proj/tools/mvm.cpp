// Command-line front end: data generation, training, evaluation, the
// ablation sweep, addressing export and the gradient oracle.
//
// Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O or format
// error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "mvm/mvm.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kNumerical = 2, kIo = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string precision;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value config file");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--precision", c.precision, "scalar type")->check(CLI::IsMember({"f32", "f64"}));
}

/// Config resolution: preset, then file, then flags.
mvm::ModelConfig resolve(const Common& c, mvm::ModelConfig preset) {
  auto cfg = c.config_path.empty() ? preset : mvm::load_config(c.config_path, preset);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.precision.empty()) cfg.precision = c.precision;
  return cfg;
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw mvm::FormatError("cannot create " + dir + ": " + ec.message());
  return fs::path(dir);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw mvm::FormatError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw mvm::FormatError("write failed: " + path.string());
}

template <class F>
decltype(auto) with_precision(const std::string& precision, F&& f) {
  if (precision == "f32") return f(float{});
  return f(double{});
}

// ---- gen-data --------------------------------------------------------------

struct GenOptions {
  mvm::LexiconSpec lexicon;
  int frames = 24;
  int train_per_word = 200;
  int test_per_word = 50;
};

int cmd_gen_data(const Common& common, const GenOptions& opt) {
  auto spec = opt.lexicon;
  if (common.seed) spec.seed = *common.seed;
  const auto lex = mvm::build_lexicon(spec);
  const auto dir = ensure_dir(common.out);
  const auto train = mvm::sample_split(lex, opt.frames, opt.train_per_word, spec.seed * 2 + 1);
  const auto test = mvm::sample_split(lex, opt.frames, opt.test_per_word, spec.seed * 2 + 2);
  mvm::write_dataset(dir / "train.mvmd", lex, opt.frames, train);
  mvm::write_dataset(dir / "test.mvmd", lex, opt.frames, test);
  std::cout << "wrote " << train.size() << " train and " << test.size() << " test examples to " << dir.string()
            << " (" << lex.homophene_pairs.size() << " homophene pairs)\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<int> levels;
  std::optional<int> heads;
};

int cmd_train(const Common& common, const TrainOptions& opt) {
  const auto data = mvm::read_dataset(opt.data);
  auto cfg = mvm::config_for(resolve(common, {}), data);
  if (opt.steps) cfg.steps = *opt.steps;
  if (opt.lr) cfg.lr = *opt.lr;
  if (opt.levels) cfg.levels = *opt.levels;
  if (opt.heads) cfg.heads = *opt.heads;
  cfg.validate();

  const auto dir = ensure_dir(common.out);
  std::ofstream log(dir / "train_log.ndjson", std::ios::trunc);
  if (!log) throw mvm::FormatError("cannot open " + (dir / "train_log.ndjson").string());
  auto on_step = [&](const mvm::TrainLogRecord& r) { log << mvm::to_json(r).dump() << '\n'; };

  return with_precision(cfg.precision, [&](auto tag) {
    using T = decltype(tag);
    auto res = mvm::train<T>(cfg, data, on_step);
    mvm::save_checkpoint(dir / "checkpoint.mvmc", res.checkpoint);
    if (res.diverged) {
      std::cerr << "training diverged: " << res.diagnostics << "\n"
                << "last good parameters saved to " << (dir / "checkpoint.mvmc").string() << '\n';
      return int{kNumerical};
    }
    const auto last = res.log.empty() ? mvm::TrainLogRecord{} : res.log.back();
    std::cout << "trained " << res.log.size() << " steps, final loss " << last.total << ", "
              << res.model.parameter_count() << " parameters -> " << (dir / "checkpoint.mvmc").string() << '\n';
    return int{kOk};
  });
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string baseline;
};

int cmd_eval(const Common& common, const EvalOptions& opt) {
  const auto ckpt = mvm::load_checkpoint(opt.checkpoint);
  const auto data = mvm::read_dataset(opt.data);
  std::optional<mvm::Checkpoint> base;
  if (!opt.baseline.empty()) base = mvm::load_checkpoint(opt.baseline);
  const auto precision = common.precision.empty() ? ckpt.config.precision : common.precision;

  const auto report = with_precision(precision, [&](auto tag) {
    using T = decltype(tag);
    const auto model = mvm::model_from_checkpoint<T>(ckpt);
    if (!base) return mvm::evaluate(model, data);
    const auto baseline = mvm::model_from_checkpoint<T>(*base);
    return mvm::evaluate(model, data, &baseline, fs::path(opt.baseline).filename().string());
  });
  const auto j = mvm::to_json(report);
  std::cout << j.dump(2) << '\n';
  if (common.out != ".") write_json(ensure_dir(common.out) / "eval.json", j);
  return kOk;
}

// ---- ablate ----------------------------------------------------------------

struct AblateOptions {
  int seeds = 5;
  std::optional<int> steps;
  std::string train_data;
  std::string test_data;
};

int cmd_ablate(const Common& common, const AblateOptions& opt) {
  if (opt.seeds < 1) throw std::invalid_argument("--seeds must be positive");
  auto base = resolve(common, mvm::ablation_config());
  if (opt.steps) base.steps = *opt.steps;

  mvm::Dataset train, test;
  if (!opt.train_data.empty() || !opt.test_data.empty()) {
    if (opt.train_data.empty() || opt.test_data.empty())
      throw std::invalid_argument("--train and --test must be given together");
    train = mvm::read_dataset(opt.train_data);
    test = mvm::read_dataset(opt.test_data);
  } else {
    const auto lex = mvm::build_lexicon({});
    train = {lex, base.frames, mvm::sample_split(lex, base.frames, 200, 3)};
    test = {lex, base.frames, mvm::sample_split(lex, base.frames, 50, 4)};
  }
  base = mvm::config_for(base, train);
  base.validate();

  const auto dir = ensure_dir(common.out);
  std::ofstream log(dir / "ablation.ndjson", std::ios::trunc);
  if (!log) throw mvm::FormatError("cannot open " + (dir / "ablation.ndjson").string());

  std::vector<mvm::AblationRun> runs;
  const auto variants = mvm::default_ablation_variants(base);
  for (int s = 0; s < opt.seeds; ++s) {
    for (const auto& v : variants) {
      const auto seed = base.seed + static_cast<std::uint64_t>(s);
      auto run = mvm::run_variant(base, v, seed, train, test);
      log << mvm::to_json(run).dump() << '\n' << std::flush;
      std::cerr << v.name << " seed " << seed << ": accuracy " << run.report.overall_accuracy << '\n';
      runs.push_back(std::move(run));
    }
  }

  std::cout << std::left << std::setw(30) << "variant" << std::right << std::setw(10) << "mean" << std::setw(10)
            << "std" << std::setw(12) << "homophene" << std::setw(10) << "other" << '\n';
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& s : mvm::summarize(runs))
    std::cout << std::left << std::setw(30) << s.variant << std::right << std::setw(10) << s.mean_accuracy
              << std::setw(10) << s.std_accuracy << std::setw(12) << s.mean_homophene << std::setw(10)
              << s.mean_non_homophene << '\n';
  for (const auto& r : runs)
    if (r.diverged) return kNumerical;
  return kOk;
}

// ---- inspect-memory --------------------------------------------------------

struct InspectOptions {
  std::string checkpoint;
  std::string data;
  int count = 4;
};

int cmd_inspect(const Common& common, const InspectOptions& opt) {
  const auto ckpt = mvm::load_checkpoint(opt.checkpoint);
  const auto data = mvm::read_dataset(opt.data);
  mvm::check_compatible(ckpt.config, data);
  if (!ckpt.config.has_memory()) throw std::invalid_argument("checkpoint has no memory levels to inspect");

  // Take the first `count` examples of each homophene word so pairs can be
  // compared side by side.
  std::vector<mvm::SyntheticExample> picked;
  const auto mask = data.lexicon.homophene_mask();
  std::vector<int> taken(mask.size(), 0);
  for (const auto& ex : data.examples) {
    auto& n = taken[static_cast<std::size_t>(ex.label)];
    if (mask[static_cast<std::size_t>(ex.label)] && n < opt.count) {
      picked.push_back(ex);
      ++n;
    }
  }
  const auto precision = common.precision.empty() ? ckpt.config.precision : common.precision;
  const auto paths = with_precision(precision, [&](auto tag) {
    using T = decltype(tag);
    return mvm::inspect_memory(mvm::model_from_checkpoint<T>(ckpt), picked, common.out);
  });
  std::cout << "wrote " << paths.size() << " addressing files to " << common.out << '\n';
  return kOk;
}

// ---- grad-check ------------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-4;
  double tolerance = 1e-4;
  std::string term = "total";
};

int cmd_grad_check(const Common& common, const GradCheckOptions& opt) {
  const auto cfg = resolve(common, mvm::micro_config());
  auto term = mvm::LossTerm::total;
  for (auto t : {mvm::LossTerm::task, mvm::LossTerm::reconstruction, mvm::LossTerm::contrastive})
    if (opt.term == mvm::loss_term_name(t)) term = t;
  const auto rep = mvm::grad_check(cfg, opt.eps, opt.tolerance, term);
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& g : rep.groups) std::cout << std::left << std::setw(36) << g.name << g.max_relative_error << '\n';
  std::cout << "max relative error " << rep.max_relative_error << " (tolerance " << rep.tolerance << ")"
            << (rep.deterministic ? "" : ", forward pass not deterministic") << '\n';
  std::cout << (rep.passed() ? "PASS" : "FAIL") << '\n';
  return rep.passed() ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-head visual-audio memory on a synthetic homophene benchmark"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, ablate_c, inspect_c, grad_c;
  GenOptions gen;
  TrainOptions tr;
  EvalOptions ev;
  AblateOptions ab;
  InspectOptions in;
  GradCheckOptions gc;

  auto* g = app.add_subcommand("gen-data", "generate train/test splits of the synthetic benchmark");
  add_common(g, gen_c);
  g->add_option("--words", gen.lexicon.words)->capture_default_str();
  g->add_option("--phonemes", gen.lexicon.phonemes)->capture_default_str();
  g->add_option("--visemes", gen.lexicon.visemes)->capture_default_str();
  g->add_option("--word-length", gen.lexicon.word_length)->capture_default_str();
  g->add_option("--pairs", gen.lexicon.homophene_pairs, "homophene pairs")->capture_default_str();
  g->add_option("--epsilon", gen.lexicon.emission_separation, "revealing-frame rate")->capture_default_str();
  g->add_option("--sigma", gen.lexicon.noise_sigma, "confusable-frame rate")->capture_default_str();
  g->add_option("--frames", gen.frames)->capture_default_str();
  g->add_option("--train-per-word", gen.train_per_word)->capture_default_str();
  g->add_option("--test-per-word", gen.test_per_word)->capture_default_str();

  auto* t = app.add_subcommand("train", "train a model and write checkpoint.mvmc and train_log.ndjson");
  add_common(t, train_c);
  t->add_option("--data", tr.data, "training split (.mvmd)")->required();
  t->add_option("--steps", tr.steps);
  t->add_option("--lr", tr.lr);
  t->add_option("--levels", tr.levels, "memory levels, 0 for the baseline");
  t->add_option("--heads", tr.heads);

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on visual input only");
  add_common(e, eval_c);
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--baseline", ev.baseline, "checkpoint to compute homophene deltas against");

  auto* a = app.add_subcommand("ablate", "run the component ablation across seeds");
  add_common(a, ablate_c);
  a->add_option("--seeds", ab.seeds)->capture_default_str();
  a->add_option("--steps", ab.steps);
  a->add_option("--train", ab.train_data, "training split (default: generated benchmark)");
  a->add_option("--test", ab.test_data, "test split");

  auto* i = app.add_subcommand("inspect-memory", "export addressing scores of homophene examples as CSV");
  add_common(i, inspect_c);
  i->add_option("--checkpoint", in.checkpoint)->required();
  i->add_option("--data", in.data)->required();
  i->add_option("--count", in.count, "examples per homophene word")->capture_default_str();

  auto* c = app.add_subcommand("grad-check", "compare tape gradients with central differences");
  add_common(c, grad_c);
  c->add_option("--eps", gc.eps, "central-difference step")->capture_default_str();
  c->add_option("--tolerance", gc.tolerance, "max relative error")->capture_default_str();
  c->add_option("--term", gc.term, "loss to differentiate")
      ->check(CLI::IsMember({"total", "task", "reconstruction", "contrastive"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen_c, gen);
    if (*t) return cmd_train(train_c, tr);
    if (*e) return cmd_eval(eval_c, ev);
    if (*a) return cmd_ablate(ablate_c, ab);
    if (*i) return cmd_inspect(inspect_c, in);
    if (*c) return cmd_grad_check(grad_c, gc);
  } catch (const mvm::NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kNumerical;
  } catch (const mvm::FormatError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kIo;
  }
  return kUsage;
}
