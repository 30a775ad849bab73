// Acceptance suite: one PASS/FAIL line per criterion, exit 0 iff all pass.
// Usage: acceptance <path-to-sncn> [--skip-desk]

#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "sncn/data/image.hpp"
#include "sncn/data/style.hpp"
#include "sncn/engine/properties.hpp"
#include "sncn/engine/train.hpp"
#include "sncn/eval/metrics.hpp"

using namespace sncn;
namespace fs = std::filesystem;
using properties::CheckResult;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

struct Outcome {
  int id;
  CheckResult result;
  double secs;
};

Outcome timed(int id, double limit_secs, const std::function<CheckResult()> &check) {
  const auto t0 = Clock::now();
  CheckResult r = check();
  const double secs = seconds_since(t0);
  if (limit_secs > 0 && secs > limit_secs) {
    r.passed = false;
    r.detail += "; took " + fixed(secs, 1) + " s, limit " + fixed(limit_secs, 0) + " s";
  }
  return {id, r, secs};
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string quote(const std::string &s) { return "'" + s + "'"; }

int run_cli(const std::string &cli, const std::string &args, const fs::path &log) {
  const std::string cmd = quote(cli) + " " + args + " > " + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// stylize_stats.csv rows: image,channel,mean,std
std::map<std::string, std::array<double, 6>> read_stats_report(const fs::path &p) {
  std::map<std::string, std::array<double, 6>> out;
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string image, channel, mean, stddev;
    std::getline(ss, image, ',');
    std::getline(ss, channel, ',');
    std::getline(ss, mean, ',');
    std::getline(ss, stddev, ',');
    const std::size_t c = channel == "R" ? 0 : channel == "G" ? 1 : 2;
    out[image][c] = std::stod(mean);
    out[image][3 + c] = std::stod(stddev);
  }
  return out;
}

std::array<double, 6> stats_of(const Tensor<float> &img) {
  const auto s = image_stats(img);
  return {s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2]};
}

double max_gap(const std::array<double, 6> &a, const std::array<double, 6> &b) {
  double m = 0;
  for (std::size_t i = 0; i < 6; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------- criterion 6

struct DeskRun {
  double clean = 0, corrupted = 0;
};

DeskRun desk_run(std::uint64_t seed, bool sncn) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.model.sn_enabled = cfg.model.cn_enabled = sncn;
  const DataSplits data = load_data(cfg);
  TrainResult r = train(cfg, data.train, data.test);
  DeskRun out;
  out.clean = clean_error(r.model, data.test);
  out.corrupted = evaluate(r.model, data.shifted_test, all_corruption_kinds(), seed).mce;
  return out;
}

CheckResult desk_experiment() {
  double base_corr = 0, base_clean = 0, sncn_corr = 0, sncn_clean = 0;
  std::ostringstream per_seed;
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  for (std::uint64_t seed : seeds) {
    const auto t0 = Clock::now();
    const DeskRun b = desk_run(seed, false);
    const DeskRun s = desk_run(seed, true);
    std::cerr << "  desk seed " << seed << ": baseline corrupted " << fixed(b.corrupted, 4) << " clean "
              << fixed(b.clean, 4) << " | sncn corrupted " << fixed(s.corrupted, 4) << " clean " << fixed(s.clean, 4)
              << " (" << fixed(seconds_since(t0), 0) << " s)\n";
    per_seed << (seed ? "; " : "") << "seed " << seed << " " << fixed(100 * b.corrupted, 1) << "->"
             << fixed(100 * s.corrupted, 1);
    base_corr += b.corrupted / seeds.size();
    base_clean += b.clean / seeds.size();
    sncn_corr += s.corrupted / seeds.size();
    sncn_clean += s.clean / seeds.size();
  }
  const double gain = 100 * (base_corr - sncn_corr), degrade = 100 * (sncn_clean - base_clean);
  const bool ok = gain >= 5.0 && degrade <= 3.0;
  return {"desk OOD direction", ok,
          "mean corrupted error baseline " + fixed(100 * base_corr, 1) + "% vs SNCN " + fixed(100 * sncn_corr, 1) +
              "% (gain " + fixed(gain, 1) + " pts, need >= 5); clean error change " + fixed(degrade, 1) +
              " pts (need <= 3); " + per_seed.str()};
}

// ---------------------------------------------------------------- criterion 7

CheckResult stylize_cli(const std::string &cli, const fs::path &dir) {
  fs::create_directories(dir);
  const Tensor<float> scene_a = properties::natural_scene(101, 64, 96), scene_b = properties::natural_scene(202, 64, 96);
  write_ppm(dir / "a.ppm", scene_a);
  write_ppm(dir / "b.ppm", scene_b);
  if (int code = run_cli(cli, "stylize --mode exchange " + quote((dir / "a.ppm").string()) + " " +
                                  quote((dir / "b.ppm").string()) + " --out " + quote((dir / "ex").string()),
                         dir / "exchange.log");
      code != 0)
    return {"stylize statistics", false, "exchange exited " + std::to_string(code)};
  // Inputs as re-read from disk are the reference.
  const auto sa = stats_of(read_ppm(dir / "a.ppm")), sb = stats_of(read_ppm(dir / "b.ppm"));
  auto ex = read_stats_report(dir / "ex" / "stylize_stats.csv");
  const double cross = std::max(max_gap(ex["output_a"], sb), max_gap(ex["output_b"], sa));

  // Two styled variants of one scene, then mapped to a common target.
  Tensor<float> v1 = scene_a, v2 = scene_a;
  const float gain1[3] = {0.8f, 0.6f, 0.7f}, off1[3] = {0.15f, 0.05f, 0.0f};
  const float gain2[3] = {0.5f, 0.9f, 0.6f}, off2[3] = {0.0f, 0.1f, 0.3f};
  const std::size_t plane = scene_a.size() / 3;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      v1[c * plane + i] = gain1[c] * scene_a[c * plane + i] + off1[c];
      v2[c * plane + i] = gain2[c] * scene_a[c * plane + i] + off2[c];
    }
  write_ppm(dir / "v1.ppm", v1);
  write_ppm(dir / "v2.ppm", v2);
  if (int code = run_cli(cli, "stylize --mode adjust " + quote((dir / "v1.ppm").string()) + " " +
                                  quote((dir / "v2.ppm").string()) + " --out " + quote((dir / "adj").string()),
                         dir / "adjust.log");
      code != 0)
    return {"stylize statistics", false, "adjust exited " + std::to_string(code)};
  auto adj = read_stats_report(dir / "adj" / "stylize_stats.csv");
  const double distance = max_gap(adj["output_a"], adj["output_b"]);
  const double moved = max_gap(adj["input_a"], adj["input_b"]);
  const bool ok = cross <= 1e-2 && distance <= 1e-3 && ex.size() == 4 && adj.size() == 4;
  return {"stylize statistics", ok,
          "exchange crossover max err " + properties::detail::fmt(cross) + " (need <= 0.01); adjust stat distance " +
              properties::detail::fmt(distance) + " (need <= 0.001, inputs differed by " +
              properties::detail::fmt(moved) + ")"};
}

// ---------------------------------------------------------------- criterion 8

CheckResult train_determinism_cli(const std::string &cli, const fs::path &dir) {
  const std::string args =
      "train --seed 7 --set model.widths=8,16,16 --set train.epochs=3 --set data.train_per_class=20 "
      "--set data.test_per_class=10 --set train.batch_size=16";
  fs::create_directories(dir);
  for (const char *run : {"run1", "run2"})
    if (int code = run_cli(cli, args + " --out " + quote((dir / run).string()), dir / (std::string(run) + ".log"));
        code != 0)
      return {"train determinism", false, std::string(run) + " exited " + std::to_string(code)};
  std::string detail;
  bool ok = true;
  for (const char *f : {"log.csv", "final.ckpt", "best.ckpt", "config.ini"}) {
    const std::string a = slurp(dir / "run1" / f), b = slurp(dir / "run2" / f);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : ", ") + f + (same ? " identical" : " DIFFERS") + " (" +
              std::to_string(a.size()) + " B)";
  }
  return {"train determinism", ok, detail};
}

} // namespace

int main(int argc, char **argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path-to-sncn> [--skip-desk]\n";
    return 2;
  }
  const std::string cli = argv[1];
  const bool skip_desk = argc > 2 && std::string(argv[2]) == "--skip-desk";
  const fs::path work = fs::temp_directory_path() / ("sncn_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(work);
  fs::create_directories(work);

  std::vector<Outcome> outcomes;
  auto report = [&](const Outcome &o) {
    std::cout << (o.result.passed ? "PASS" : "FAIL") << " criterion " << o.id << " (" << o.result.name
              << "): " << o.result.detail << " [" << fixed(o.secs, 2) << " s]" << std::endl;
    outcomes.push_back(o);
  };

  report(timed(1, 10, [] { return properties::statistic_transfer(1000); }));
  report(timed(2, 5, [] { return properties::involution_identity(); }));
  report(timed(3, 60, [] { return properties::gradient_correctness(); }));
  report(timed(4, 0, [] { return properties::metric_arithmetic(100); }));
  report(timed(5, 0, [] { return properties::sampling_contracts(); }));
  if (skip_desk)
    std::cout << "SKIP criterion 6 (desk OOD direction): --skip-desk given" << std::endl;
  else
    report(timed(6, 15 * 60, [] { return desk_experiment(); }));
  report(timed(7, 0, [&] { return stylize_cli(cli, work / "stylize"); }));
  report(timed(8, 0, [&] { return train_determinism_cli(cli, work / "determinism"); }));

  fs::remove_all(work);
  std::size_t passed = 0;
  for (const auto &o : outcomes) passed += o.result.passed;
  std::cout << passed << "/" << outcomes.size() << " criteria passed" << std::endl;
  return passed == outcomes.size() && !skip_desk ? 0 : 1;
}
