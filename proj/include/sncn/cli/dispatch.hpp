#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sncn/cli/config.hpp"
#include "sncn/data/image.hpp"
#include "sncn/data/style.hpp"
#include "sncn/engine/invert.hpp"
#include "sncn/engine/properties.hpp"
#include "sncn/engine/train.hpp"
#include "sncn/eval/corruption.hpp"
#include "sncn/eval/metrics.hpp"

namespace sncn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Bad invocation: missing inputs, wrong argument count and the like.
class UsageError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string out = "out";
};

/// Resolution order: defaults, then the --config file, then --seed, then
/// each --set in command-line order (the last assignment to a key wins).
inline RunConfig resolve_config(const CommonFlags &f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) cfg.train.seed = *f.seed;
  for (const auto &s : f.sets) apply_override(cfg, s);
  return cfg;
}

namespace detail {

inline void require_file(const std::string &path, const std::string &what) {
  if (path.empty()) throw UsageError(what + " not given");
  if (!std::filesystem::is_regular_file(path)) throw UsageError(what + " '" + path + "' does not exist");
}

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

inline Dataset eval_split(const RunConfig &cfg) {
  DataSplits d = load_data(cfg.train);
  if (cfg.eval.split == "train") return std::move(d.train);
  if (cfg.eval.split == "test") return std::move(d.test);
  if (d.shifted_test.empty())
    throw ConfigError("eval.split = shifted is only available for the shapes dataset; use test");
  return std::move(d.shifted_test);
}

inline void stats_rows(std::ostream &out, const std::string &label, const Tensor<float> &img) {
  const auto s = image_stats(img);
  static const char *names[3] = {"R", "G", "B"};
  for (std::size_t c = 0; c < 3; ++c)
    out << label << "," << names[c] << "," << cli::detail::fmt_double(s.mean[c]) << ","
        << cli::detail::fmt_double(s.std[c]) << "\n";
}

inline ChannelStats<float> average_stats(const Tensor<float> &a, const Tensor<float> &b) {
  const auto sa = image_stats(a), sb = image_stats(b);
  return rgb_target((sa.mean[0] + sb.mean[0]) / 2, (sa.mean[1] + sb.mean[1]) / 2, (sa.mean[2] + sb.mean[2]) / 2,
                    (sa.std[0] + sb.std[0]) / 2, (sa.std[1] + sb.std[1]) / 2, (sa.std[2] + sb.std[2]) / 2);
}

} // namespace detail

// ----------------------------------------------------------------- commands

inline int cmd_train(const RunConfig &cfg, const std::filesystem::path &out) {
  cfg.train.validate();
  std::filesystem::create_directories(out);
  detail::write_text(out / "config.ini", serialize_config(cfg));
  const DataSplits data = load_data(cfg.train);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(cfg.train, data.train, data.test, {out});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream msg;
  for (const auto &row : r.log)
    msg << "epoch " << row.epoch << "  train_loss " << std::fixed << std::setprecision(4) << row.train_loss
              << "  test_error " << row.test_error << "\n";
  msg << "best test error " << r.best_test_error << " at epoch " << r.best_epoch << " (" << std::setprecision(1)
      << secs << " s); outputs in " << out.string() << "\n";
  std::cout << msg.str();
  return kExitOk;
}

inline int cmd_eval(const RunConfig &cfg, const std::filesystem::path &out) {
  cfg.train.model.validate();
  detail::require_file(cfg.eval.checkpoint, "eval.checkpoint");
  std::optional<ErrorTable> reference;
  if (!cfg.eval.reference.empty()) {
    detail::require_file(cfg.eval.reference, "eval.reference");
    std::ifstream in(cfg.eval.reference);
    reference = read_error_table_csv(in);
  }
  if (cfg.eval.batch_size < 1) throw ConfigError("eval.batch_size must be at least 1");
  Model<float> model = load_model(cfg.train.model, cfg.eval.checkpoint);
  const Dataset data = detail::eval_split(cfg);
  const EvalResult r = evaluate(model, data, cfg.eval.kinds, cfg.train.seed, reference, cfg.eval.batch_size);
  std::filesystem::create_directories(out);
  std::ofstream csv(out / "eval.csv", std::ios::binary);
  write_error_table_csv(csv, r.table);
  std::cout << "split " << cfg.eval.split << " (" << data.size() << " images)\n"
            << "clean error " << r.table.clean_error << "\n"
            << "mCE " << r.mce << "\n";
  if (r.mce_normalized) std::cout << "normalized mCE " << *r.mce_normalized << "\n";
  std::cout << "table written to " << (out / "eval.csv").string() << "\n";
  return kExitOk;
}

inline int cmd_corrupt(const RunConfig &cfg, const std::string &image, const std::filesystem::path &out) {
  detail::require_file(image, "input image");
  const Tensor<float> pixels = read_ppm(image);
  std::filesystem::create_directories(out);
  std::size_t written = 0;
  for (CorruptionKind k : cfg.corrupt.kinds)
    for (int s = 1; s <= kSeverities; ++s) {
      Rng rng = corruption_rng(cfg.train.seed, k, s, 0);
      write_ppm(out / (std::string(to_string(k)) + "_" + std::to_string(s) + ".ppm"),
                clamp01(corrupt_unclamped(pixels, {k, s}, rng)));
      ++written;
    }
  std::cout << written << " corrupted images written to " << out.string() << "\n";
  return kExitOk;
}

/// Writes the two outputs plus stylize_stats.csv holding per-channel
/// statistics of the inputs and of the outputs before clamping.
inline int cmd_stylize(const RunConfig &cfg, const std::vector<std::string> &images, const std::filesystem::path &out) {
  if (images.size() != 2) throw UsageError("stylize needs exactly two PPM images");
  for (const auto &p : images) detail::require_file(p, "input image");
  const Tensor<float> a = read_ppm(images[0]), b = read_ppm(images[1]);
  Tensor<float> oa, ob;
  if (cfg.stylize.mode == "exchange") {
    std::tie(oa, ob) = rgb_stat_exchange_unclamped(a, b);
  } else {
    ChannelStats<float> target = detail::average_stats(a, b);
    if (cfg.stylize.target_mean)
      for (std::size_t c = 0; c < 3; ++c) target.mean[c] = static_cast<float>((*cfg.stylize.target_mean)[c]);
    if (cfg.stylize.target_std)
      for (std::size_t c = 0; c < 3; ++c) target.std[c] = static_cast<float>((*cfg.stylize.target_std)[c]);
    oa = restyle_image_unclamped(a, target);
    ob = restyle_image_unclamped(b, target);
  }
  std::filesystem::create_directories(out);
  const std::string mode = cfg.stylize.mode;
  write_ppm(out / (mode + "_a.ppm"), clamp01(oa));
  write_ppm(out / (mode + "_b.ppm"), clamp01(ob));
  std::ostringstream report;
  report << "image,channel,mean,std\n";
  detail::stats_rows(report, "input_a", a);
  detail::stats_rows(report, "input_b", b);
  detail::stats_rows(report, "output_a", oa);
  detail::stats_rows(report, "output_b", ob);
  detail::write_text(out / "stylize_stats.csv", report.str());
  std::cout << report.str() << mode << " outputs written to " << out.string() << "\n";
  return kExitOk;
}

inline int cmd_invert(const RunConfig &cfg, const std::vector<std::string> &images, const std::filesystem::path &out) {
  if (images.empty()) throw UsageError("invert needs at least one content image");
  cfg.train.model.validate();
  InvertConfig icfg = cfg.invert.invert;
  icfg.seed = cfg.train.seed;
  icfg.validate();
  detail::require_file(cfg.invert.checkpoint, "invert.checkpoint");
  for (const auto &p : images) detail::require_file(p, "content image");
  std::optional<Tensor<float>> donor;
  if (!cfg.invert.donor.empty()) {
    detail::require_file(cfg.invert.donor, "invert.donor");
    donor = read_ppm(cfg.invert.donor);
  }
  Model<float> model = load_model(cfg.train.model, cfg.invert.checkpoint);
  std::filesystem::create_directories(out);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const InvertResult r = invert_representation(model, icfg, read_ppm(images[i]), donor);
    const auto name = out / inversion_filename(icfg, i);
    write_ppm(name, clamp01(r.image));
    std::cout << name.string() << ": loss " << r.losses.front() << " -> " << r.losses.back() << "\n";
  }
  return kExitOk;
}

inline int cmd_selftest() {
  std::size_t passed = 0, total = 0;
  for (const auto &check : properties::selftest_suite()) {
    const auto t0 = std::chrono::steady_clock::now();
    const properties::CheckResult r = check();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++total;
    passed += r.passed;
    std::ostringstream line;
    line << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " (" << std::fixed << std::setprecision(2)
         << secs << " s)\n";
    std::cout << line.str();
  }
  std::cout << passed << "/" << total << " properties passed\n";
  return passed == total ? kExitOk : kExitRuntime;
}

// --------------------------------------------------------------- dispatcher

/// Entry point of the `sncn` tool. Exit codes: 0 success, 1 usage or
/// configuration error, 2 runtime failure.
inline int dispatch(int argc, char **argv) {
  CLI::App app{"SelfNorm/CrossNorm training, evaluation and visualization"};
  app.name("sncn");
  app.require_subcommand(1);
  bool help_keys = false;
  app.add_flag("--help-keys", help_keys, "print every config key with its default and exit");

  CommonFlags flags;
  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", flags.config, "sectioned key = value config file");
    sub->add_option("--seed", flags.seed, "overrides run.seed");
    sub->add_option("--set", flags.sets, "key=value override, repeatable; applied after --config, last wins")
        ->allow_extra_args(false);
    sub->add_option("--out", flags.out, "output directory")->capture_default_str();
  };
  CLI::App *train_cmd = app.add_subcommand("train", "train a model; writes config.ini, log.csv, best.ckpt, final.ckpt");
  CLI::App *eval_cmd = app.add_subcommand("eval", "corruption grid and mCE for eval.checkpoint; writes eval.csv");
  CLI::App *corrupt_cmd = app.add_subcommand("corrupt", "write <kind>_<severity>.ppm for one image");
  CLI::App *stylize_cmd = app.add_subcommand("stylize", "RGB statistic exchange or adjustment of two PPM images");
  CLI::App *invert_cmd = app.add_subcommand("invert", "representation inversion of content images");
  CLI::App *selftest_cmd = app.add_subcommand("selftest", "run the invariant suite");
  for (CLI::App *sub : {train_cmd, eval_cmd, corrupt_cmd, stylize_cmd, invert_cmd}) add_common(sub);

  std::string checkpoint, corrupt_input, mode;
  std::vector<std::string> stylize_inputs, invert_inputs;
  eval_cmd->add_option("--checkpoint", checkpoint, "overrides eval.checkpoint");
  corrupt_cmd->add_option("image", corrupt_input, "input PPM")->required();
  stylize_cmd->add_option("--mode", mode, "exchange | adjust (overrides stylize.mode)");
  stylize_cmd->add_option("images", stylize_inputs, "two input PPMs")->required()->expected(2);
  invert_cmd->add_option("--checkpoint", checkpoint, "overrides invert.checkpoint");
  invert_cmd->add_option("images", invert_inputs, "content PPMs")->required();

  try {
    if (argc >= 2 && std::string(argv[1]) == "--help-keys") {
      std::cout << serialize_config(RunConfig{});
      return kExitOk;
    }
    if (argc >= 2 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
      std::cerr << "unknown subcommand '" << argv[1] << "'\n" << app.help();
      return kExitUsage;
    }
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (selftest_cmd->parsed()) return cmd_selftest();
    RunConfig cfg = resolve_config(flags);
    const std::filesystem::path out = flags.out;
    if (train_cmd->parsed()) return cmd_train(cfg, out);
    if (eval_cmd->parsed()) {
      if (!checkpoint.empty()) cfg.eval.checkpoint = checkpoint;
      return cmd_eval(cfg, out);
    }
    if (corrupt_cmd->parsed()) return cmd_corrupt(cfg, corrupt_input, out);
    if (stylize_cmd->parsed()) {
      if (!mode.empty()) set_key(cfg, "stylize.mode", mode);
      return cmd_stylize(cfg, stylize_inputs, out);
    }
    if (invert_cmd->parsed()) {
      if (!checkpoint.empty()) cfg.invert.checkpoint = checkpoint;
      return cmd_invert(cfg, invert_inputs, out);
    }
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

} // namespace sncn::cli
