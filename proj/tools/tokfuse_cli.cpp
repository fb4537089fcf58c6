// tokfuse: command-line front end for feature generation, projector runs,
// FLOPs reports, gradient checks, toy training and benchmarks.
//
// Exit codes: 0 ok, 2 config or shape error, 3 I/O error, 4 numeric failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tokfuse/tokfuse.hpp"

namespace {

using namespace tokfuse;

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> projector;
  std::optional<std::size_t> k;
  std::optional<std::size_t> e;
  std::optional<std::string> out;
  std::optional<std::string> format;
  std::optional<std::string> input;
  std::optional<std::size_t> repetitions;
  std::optional<double> learning_rate;
  std::optional<std::size_t> steps;
  std::string module = "all";
  std::size_t seeds = 1;
  std::size_t samples = 200;
};

// Defaults for commands that run small by design.
enum class Preset { none, tiny, toy };

RunConfig resolve(const Flags& f, Preset preset) {
  RunConfig rc;
  if (!f.config.empty()) {
    rc = load_run_config(f.config);
  } else if (preset == Preset::tiny) {
    rc.fusion = gradcheck::tiny_config();
    rc.stf_hidden_explicit = true;
  } else if (preset == Preset::toy) {
    rc.fusion = toy_config();
    rc.stf_hidden_explicit = true;
  }
  if (f.k || f.e) rc.override_fusion(f.k, f.e);
  if (f.seed) {
    rc.fusion.seed = *f.seed;
    rc.synthetic_seed.reset();
  }
  if (f.input) {
    rc.input = *f.input;
    rc.synthetic_seed.reset();
  }
  if (f.projector) rc.projector = parse_projector(*f.projector);
  if (f.out) rc.output = *f.out;
  if (f.format) rc.format = parse_format(*f.format);
  if (f.repetitions) rc.repetitions = *f.repetitions;
  if (f.learning_rate) rc.learning_rate = *f.learning_rate;
  if (f.steps) rc.steps = *f.steps;
  rc.resolve_source();
  rc.fusion.validate();
  return rc;
}

FeatureStack load_features(const RunConfig& rc) {
  if (rc.input) return fmap::read_file(*rc.input);
  return gen_features(*rc.synthetic_seed, rc.fusion);
}

bool csv(const RunConfig& rc) { return rc.format == ReportFormat::csv; }

int cmd_gen_features(const RunConfig& rc) {
  if (rc.input) throw ConfigError("gen-features takes a seed, not --input");
  if (rc.output.empty()) throw ConfigError("gen-features needs --out");
  const FeatureStack stack = load_features(rc);
  fmap::write_file(rc.output, stack);
  std::printf("wrote %zu maps of %zux%zux%zu to %s\n", stack.size(),
              rc.fusion.height, rc.fusion.width, rc.fusion.channels,
              rc.output.c_str());
  return 0;
}

int cmd_forward(const RunConfig& rc) {
  const FeatureStack stack = load_features(rc);
  if (rc.projector == ProjectorKind::stf) check_stack(stack, rc.fusion);
  const ModuleParams params = init_params(rc.fusion, rc.projector);
  const TokenSequence seq =
      projector_forward(stack, params, rc.fusion, rc.projector);
  const auto values = seq.tokens.data();
  if (!all_finite(seq.tokens)) {
    throw NumericError("projector output contains non-finite values");
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  double mean = 0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (!rc.output.empty()) fmap::write_tokens(rc.output, seq);
  if (csv(rc)) {
    std::printf("projector,length,width,min,max,mean\n%s,%zu,%zu,%.9g,%.9g,"
                "%.9g\n",
                std::string(to_string(rc.projector)).c_str(), seq.length(),
                seq.width(), *lo, *hi, mean);
  } else {
    std::printf("projector %s\nlength %zu\nwidth %zu\nmin %.6g\nmax %.6g\n"
                "mean %.6g\n",
                std::string(to_string(rc.projector)).c_str(), seq.length(),
                seq.width(), *lo, *hi, mean);
  }
  return 0;
}

int cmd_report(const RunConfig& rc) {
  const auto grid = flops::kernel_grid(rc.fusion, rc.llm_params);
  const double base = static_cast<double>(rc.fusion.height * rc.fusion.width);
  if (csv(rc)) {
    std::printf("k,E,tokens,tflops,ratio,projector_gflops,projector_params\n");
    for (const auto& r : grid) {
      std::printf("%zu,%zu,%zu,%.4f,%.4f,%.3f,%zu\n", r.kernel, r.fused_tokens,
                  r.vision_token_count, r.tflops(), r.ratio_to_baseline,
                  r.projector_flops / 1e9, r.projector_params);
    }
  } else {
    std::printf("LLM %.3g params, %.0f baseline tokens, prefill = 2*N*L\n",
                rc.llm_params, base);
    std::printf("%3s %3s %7s %8s %7s %15s %14s\n", "k", "E", "tokens",
                "TFLOPs", "ratio", "proj GFLOPs", "proj params");
    for (const auto& r : grid) {
      std::printf("%3zu %3zu %7zu %8.2f %7.4f %15.1f %14zu\n", r.kernel,
                  r.fused_tokens, r.vision_token_count, r.tflops(),
                  r.ratio_to_baseline, r.projector_flops / 1e9,
                  r.projector_params);
    }
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& rc, const Flags& f) {
  std::vector<gradcheck::Module> modules;
  if (f.module == "all") {
    modules = {gradcheck::Module::mbtf, gradcheck::Module::stf,
               gradcheck::Module::projector, gradcheck::Module::avgpool,
               gradcheck::Module::tokenconcat};
  } else {
    modules = {gradcheck::parse_module(f.module)};
  }
  gradcheck::Options opts;
  opts.samples_per_block = f.samples;
  if (csv(rc)) {
    std::printf("module,seed,block,checked,max_rel_error,analytic,numeric,"
                "pass\n");
  }
  bool ok = true;
  for (std::size_t s = 0; s < f.seeds; ++s) {
    const std::uint64_t seed = rc.fusion.seed + s;
    for (auto m : modules) {
      const auto report = gradcheck::check_module(m, rc.fusion, seed, opts);
      ok = ok && report.passed();
      for (const auto& b : report.blocks) {
        if (csv(rc)) {
          std::printf("%s,%llu,%s,%zu,%.6e,%.9e,%.9e,%d\n",
                      report.module.c_str(),
                      static_cast<unsigned long long>(seed), b.name.c_str(),
                      b.checked, b.max_rel_error, b.worst_analytic,
                      b.worst_numeric, b.pass ? 1 : 0);
        } else {
          std::printf("%-11s seed %-3llu %-22s n=%-4zu max rel %.3e  %s\n",
                      report.module.c_str(),
                      static_cast<unsigned long long>(seed), b.name.c_str(),
                      b.checked, b.max_rel_error, b.pass ? "ok" : "FAIL");
        }
      }
    }
  }
  if (!csv(rc)) std::printf("%s\n", ok ? "all blocks pass" : "FAILED");
  return ok ? 0 : kExitNumeric;
}

int cmd_toy_train(const RunConfig& rc) {
  if (rc.input) throw ConfigError("toy-train generates its own batch");
  TrainOptions opts;
  opts.learning_rate = rc.learning_rate;
  opts.steps = rc.steps;
  opts.batch = rc.batch;
  const TrainResult r = toy_train(rc.fusion, opts);
  std::string table = "step,loss\n";
  char line[64];
  for (std::size_t i = 0; i < r.losses.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g\n", i, r.losses[i]);
    table += line;
  }
  if (rc.output.empty()) {
    std::fputs(table.c_str(), stdout);
  } else {
    std::ofstream out(rc.output);
    if (!out) throw IoError("cannot open '" + rc.output + "' for writing");
    out << table;
    if (!out) throw IoError("write error on '" + rc.output + "'");
    std::printf("initial %.6g final %.6g ratio %.4f\n", r.initial(),
                r.final(), r.final() / r.initial());
  }
  return 0;
}

int cmd_bench(const RunConfig& rc) {
  const FeatureStack stack = load_features(rc);
  if (rc.projector == ProjectorKind::stf) check_stack(stack, rc.fusion);
  const ModuleParams params = init_params(rc.fusion, rc.projector);
  const BenchReport b = bench_projector(stack, params, rc.fusion,
                                        rc.projector, rc.repetitions,
                                        rc.warmup);
  if (csv(rc)) {
    std::printf("projector,k,E,tokens,samples,median_s,p90_s,mean_s,"
                "stddev_s,tokens_per_s\n");
    std::printf("%s,%zu,%zu,%zu,%zu,%.6e,%.6e,%.6e,%.6e,%.6e\n",
                std::string(to_string(rc.projector)).c_str(),
                rc.fusion.kernel, rc.fusion.fused_tokens, b.tokens,
                b.seconds.size(), b.median, b.p90, b.mean, b.stddev,
                b.tokens_per_second());
  } else {
    std::printf("projector %s k=%zu E=%zu tokens %zu\n",
                std::string(to_string(rc.projector)).c_str(),
                rc.fusion.kernel, rc.fusion.fused_tokens, b.tokens);
    std::printf("samples %zu  median %.4f s  p90 %.4f s  stddev %.4f s  "
                "%.1f tokens/s\n",
                b.seconds.size(), b.median, b.p90, b.stddev,
                b.tokens_per_second());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-block token fusion projector toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config, "flat key = value config file");
    sub->add_option("--seed", f.seed, "seed for features and parameters");
    sub->add_option("--projector", f.projector, "stf, avgpool or tokenconcat");
    sub->add_option("--k", f.k, "fusion kernel size");
    sub->add_option("--e", f.e, "fused tokens per window");
    sub->add_option("--out", f.out, "output path");
    sub->add_option("--format", f.format, "text or csv");
  };
  auto* gen = app.add_subcommand("gen-features", "write synthetic features");
  auto* fwd = app.add_subcommand("forward", "run a projector");
  auto* rep = app.add_subcommand("report", "FLOPs grid over (k, E)");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check");
  auto* train = app.add_subcommand("toy-train", "toy regression training");
  auto* bench = app.add_subcommand("bench", "time projector forward");
  for (auto* s : {gen, fwd, rep, grad, train, bench}) common(s);
  for (auto* s : {fwd, bench}) {
    s->add_option("--input", f.input, "FMAP1 feature file");
  }
  bench->add_option("--repetitions", f.repetitions, "timed runs");
  train->add_option("--lr", f.learning_rate, "learning rate");
  train->add_option("--steps", f.steps, "gradient steps");
  grad->add_option("--module", f.module,
                   "mbtf, stf, projector, avgpool, tokenconcat or all");
  grad->add_option("--seeds", f.seeds, "number of consecutive seeds");
  grad->add_option("--samples", f.samples, "entries sampled per block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_features(resolve(f, Preset::none));
    if (*fwd) return cmd_forward(resolve(f, Preset::none));
    if (*rep) return cmd_report(resolve(f, Preset::none));
    if (*grad) return cmd_gradcheck(resolve(f, Preset::tiny), f);
    if (*train) return cmd_toy_train(resolve(f, Preset::toy));
    if (*bench) return cmd_bench(resolve(f, Preset::none));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
