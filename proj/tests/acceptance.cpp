// Acceptance checks. One line per criterion; `--only N` runs a single one.
// Long training runs are cached under --cache-dir, keyed by their config and a
// hash of this executable, so a rebuild always retrains.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bmrs/checkpoint.hpp"
#include "bmrs/experiment.hpp"
#include "bmrs/gradcheck.hpp"
#include "bmrs/verify.hpp"
#include "fixtures.hpp"
#include "json.hpp"

using namespace bmrs;
namespace fs = std::filesystem;
namespace fx = bmrs::fixtures;
using json = nlohmann::json;

namespace {

// Tolerances and bands. Fixed here, not tuned per run.
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-4;
constexpr double kMaskShrinkTol = 1e-10;
constexpr double kMcOutsideFraction = 0.01;  // of configs outside 3 s.e.
constexpr double kMlpMinAccuracy = 96.0;
constexpr double kMlpCompressionLo = 40.0, kMlpCompressionHi = 60.0;
constexpr double kLenetMinAccuracy = 93.0;
constexpr double kLenetCompressionLo = 78.0, kLenetCompressionHi = 94.0;
constexpr double kL2MaxAccuracy = 50.0;
constexpr double kKneeExtra = 10.0;  // percentage points
constexpr double kSpearmanMin = 0.8;
constexpr double kChunk = 0.05;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? NAN : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.2f", v[i]);
  return s + "]";
}

std::string self_hash() {
  std::ifstream in("/proc/self/exe", std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return git_blob_sha1(ss.str());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

class Runs {
 public:
  Runs(fs::path cache, std::optional<int> lenet_epochs)
      : cache_(std::move(cache)), stamp_(self_hash()), lenet_epochs_(lenet_epochs) {}

  struct Trained {
    double accuracy = 0.0;
    double compression = 0.0;
    fs::path checkpoint;
    ExperimentConfig cfg;
  };

  ExperimentConfig config(const std::string& model, CriterionConfig crit, std::uint64_t seed) const {
    ExperimentConfig cfg = default_config(model);
    cfg.criterion = crit;
    cfg.seed = seed;
    if (model == "lenet5" && lenet_epochs_) cfg.schedule.epochs_train = *lenet_epochs_;
    return cfg;
  }

  // Continuous run through the same path as `bmrs train`.
  Trained train(ExperimentConfig cfg) {
    const std::string key = git_blob_sha1(stamp_ + config_to_json(cfg)).substr(0, 16);
    const fs::path dir = cache_ / (cfg.model.kind + "_" + criterion_label(cfg.criterion) + "_s" +
                                   std::to_string(cfg.seed) + "_" + key);
    cfg.output_dir = dir.string();
    Trained t;
    t.cfg = cfg;
    t.checkpoint = dir / "model.bmrs";
    const fs::path done = dir / "done";
    if (!fs::exists(done)) {
      const auto t0 = std::chrono::steady_clock::now();
      std::cerr << "  training " << dir.filename().string() << " ..." << std::flush;
      const auto art = cmd_train(cfg);
      std::ofstream(done) << stamp_ << "\n";
      std::cerr << " " << fmt("%.0f", seconds_since(t0)) << " s, accuracy "
                << fmt("%.2f", art.run.final_accuracy()) << ", compression "
                << fmt("%.2f", art.run.final_compression()) << "\n";
    }
    std::ifstream in(dir / "manifest.json");
    const json m = json::parse(in);
    t.accuracy = m["final"]["accuracy"].get<double>();
    t.compression = m["final"]["compression"].get<double>();
    return t;
  }

  struct Multi {
    std::vector<double> accuracy, compression;
    std::vector<Trained> runs;
  };

  Multi over_seeds(const std::string& model, const CriterionConfig& crit) {
    Multi m;
    for (std::uint64_t s : kSeeds) {
      Trained t = train(config(model, crit, s));
      m.accuracy.push_back(t.accuracy);
      m.compression.push_back(t.compression);
      m.runs.push_back(std::move(t));
    }
    return m;
  }

  const DataSplits& mnist() {
    if (!mnist_) mnist_ = load_data(default_config("mlp"));
    return *mnist_;
  }

 private:
  fs::path cache_;
  std::string stamp_;
  std::optional<int> lenet_epochs_;
  std::optional<DataSplits> mnist_;
};

CriterionConfig crit(CriterionKind k, int p1 = 8) {
  CriterionConfig c;
  c.kind = k;
  c.p1 = p1;
  return c;
}

// ---------------------------------------------------------------------------
// 1-6: oracle and property suite

const VerifyReport& verify_report() {
  static const VerifyReport r = run_verify(VerifyProfile{});
  return r;
}

Outcome from_checks(const std::vector<std::string>& names) {
  Outcome o{true, ""};
  for (const auto& n : names) {
    const CheckResult* c = verify_report().find(n);
    if (!c) return {false, "missing check " + n};
    o.pass = o.pass && c->pass;
    o.detail += (o.detail.empty() ? "" : "; ") + n + " " + fmt("%.3g", c->measured) + " (tol " +
                fmt("%.3g", c->tolerance) + ")";
  }
  return o;
}

Outcome c1() {
  Outcome o = from_checks({"delta_f_lognormal_quadrature", "delta_f_loguniform_quadrature"});
  const CheckResult* mc = verify_report().find("delta_f_monte_carlo");
  if (!mc) return {false, "missing Monte Carlo check"};
  const bool mc_ok = mc->measured <= kMcOutsideFraction;
  o.pass = o.pass && mc_ok;
  o.detail += "; Monte Carlo " + mc->detail;
  return o;
}

Outcome c2() { return from_checks({"delta_f_lognormal_prior_recovery", "delta_f_loguniform_identity"}); }

Outcome c3() {
  const CheckResult* c = verify_report().find("kl_quadrature");
  if (!c) return {false, "missing kl check"};
  return {c->pass && c->measured <= 1e-6,
          "worst rel err " + fmt("%.3g", c->measured) + "; " + c->detail};
}

Outcome c4() {
  const CheckResult* c = verify_report().find("sampler_ks");
  if (!c) return {false, "missing KS check"};
  return {c->pass && c->measured < 0.01, "KS " + fmt("%.4f", c->measured) + " on 1e5 draws"};
}

Outcome c5() {
  double worst = 0.0;
  std::string where;
  auto check = [&](Network net, const std::string& name, std::size_t per_example) {
    Rng rng(77);
    const std::size_t batch = 4;
    const auto d = fx::random_draws(net, rng, per_example);
    const Tensor x = fx::kink_free_batch(net, batch, d, rng);
    const auto y = fx::cyclic_labels(batch, 3);
    const auto r = gradient_check(net, x, y, d, 0.3, kGradStep);
    for (const auto& e : r.entries) {
      if (e.max_rel_error > worst) {
        worst = e.max_rel_error;
        where = name + " " + e.param;
      }
    }
  };
  check(fx::small_mlp(3), "mlp", 0);
  check(fx::small_mlp(4), "mlp per-example", 4);
  check(fx::one_conv_net(5, 1, 1), "conv", 0);
  check(fx::one_conv_net(6, 2, 1), "conv stride 2", 0);
  return {worst <= kGradTol, "worst rel err " + fmt("%.3g", worst) + " at " + where};
}

Outcome c6() {
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    Rng rng(500 + trial);
    Network net = trial % 3 == 0   ? fx::small_mlp(trial)
                  : trial % 3 == 1 ? fx::one_conv_net(trial)
                                   : make_lenet5(1, 28, 28, 10, true, trial);
    fx::spread_gates(net);
    fx::prune_random(net, rng, uniform(rng, 0.05, 0.9));
    const Tensor x = fx::random_batch(net, 3, rng);
    const Tensor a = net.forward(x, Mode::Eval);
    const Tensor b = net.shrunk().forward(x, Mode::Eval);
    worst = std::max(worst, fx::max_abs_diff(a, b));
  }
  return {worst <= kMaskShrinkTol, "max |logit gap| " + fmt("%.3g", worst) + " over 30 nets"};
}

// ---------------------------------------------------------------------------
// 7-12: desk-scale runs on MNIST

Outcome c7(Runs& runs) {
  const auto m = runs.over_seeds("mlp", crit(CriterionKind::BmrsN));
  const double acc = mean(m.accuracy), comp = mean(m.compression);
  return {acc >= kMlpMinAccuracy && comp >= kMlpCompressionLo && comp <= kMlpCompressionHi,
          "accuracy " + fmt("%.2f", acc) + " " + list(m.accuracy) + ", compression " +
              fmt("%.2f", comp) + " " + list(m.compression)};
}

Outcome c8(Runs& runs) {
  const auto u4 = runs.over_seeds("mlp", crit(CriterionKind::BmrsU, 4));
  const auto u8 = runs.over_seeds("mlp", crit(CriterionKind::BmrsU, 8));
  const double c4 = mean(u4.compression), c8 = mean(u8.compression);
  const double a4 = mean(u4.accuracy), a8 = mean(u8.accuracy);
  return {c4 >= c8 && a4 >= kMlpMinAccuracy && a8 >= kMlpMinAccuracy,
          "p1=4 compression " + fmt("%.2f", c4) + " accuracy " + fmt("%.2f", a4) +
              "; p1=8 compression " + fmt("%.2f", c8) + " accuracy " + fmt("%.2f", a8)};
}

Outcome c9(Runs& runs) {
  const auto m = runs.over_seeds("lenet5", crit(CriterionKind::BmrsN));
  const double acc = mean(m.accuracy), comp = mean(m.compression);
  return {acc >= kLenetMinAccuracy && comp >= kLenetCompressionLo && comp <= kLenetCompressionHi,
          "epochs " + std::to_string(m.runs.front().cfg.schedule.epochs_train) + "+" +
              std::to_string(m.runs.front().cfg.schedule.fine_tune_epochs) + ", accuracy " +
              fmt("%.2f", acc) + " " + list(m.accuracy) + ", compression " + fmt("%.2f", comp) +
              " " + list(m.compression)};
}

// L2 pruning of a plainly trained model down to the compression BMRS_N reached
// on the same seed, then the usual fine-tune.
Outcome c10(Runs& runs) {
  const auto bn = runs.over_seeds("mlp", crit(CriterionKind::BmrsN));
  const auto none = runs.over_seeds("mlp", crit(CriterionKind::None));
  std::vector<double> acc, comp;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    const Network net = load_checkpoint(none.runs[i].checkpoint);
    const auto& cfg = none.runs[i].cfg;
    const auto r = prune_to_compression(net, runs.mnist(), crit(CriterionKind::L2), net.param_count(),
                                        bn.compression[i], cfg.schedule.fine_tune_epochs,
                                        cfg.optimizer, kSeeds[i]);
    acc.push_back(r.accuracy);
    comp.push_back(r.compression);
  }
  return {mean(acc) <= kL2MaxAccuracy, "L2 accuracy " + fmt("%.2f", mean(acc)) + " " + list(acc) +
                                           " at compression " + list(comp)};
}

Outcome c11(Runs& runs) {
  const auto t = runs.train(runs.config("mlp", crit(CriterionKind::None), kSeeds[0]));
  const Network net = load_checkpoint(t.checkpoint);
  const auto curve = post_training_prune(net, runs.mnist(), crit(CriterionKind::BmrsN), kChunk,
                                         t.cfg.optimizer, kSeeds[0], true);
  const CurvePoint* stop = curve.stop_point();
  if (!stop || !curve.stop_net) return {false, "no stop point"};
  const auto extra = prune_to_compression(*curve.stop_net, runs.mnist(), crit(CriterionKind::Snr),
                                          net.param_count(), stop->compression + kKneeExtra, 1,
                                          t.cfg.optimizer, kSeeds[0]);
  return {stop->accuracy > extra.accuracy,
          "stop at compression " + fmt("%.2f", stop->compression) + " accuracy " +
              fmt("%.2f", stop->accuracy) + "; +SNR pruning to " + fmt("%.2f", extra.compression) +
              " gives " + fmt("%.2f", extra.accuracy)};
}

Outcome c12(Runs& runs) {
  const auto t = runs.train(runs.config("mlp", crit(CriterionKind::None), kSeeds[0]));
  const Network net = load_checkpoint(t.checkpoint);
  const auto m = spearman_matrix(
      net, {crit(CriterionKind::BmrsN), crit(CriterionKind::Snr), crit(CriterionKind::BmrsU, 8)});
  const double n_snr = m.rho[0][1], u_snr = m.rho[2][1];
  return {n_snr >= kSpearmanMin && u_snr <= n_snr,
          "rho(bmrs_n, snr) " + fmt("%.3f", n_snr) + ", rho(bmrs_u-8, snr) " + fmt("%.3f", u_snr)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string cache = "acceptance_cache";
  std::optional<int> lenet_epochs;
  bool fast = false;
  app.add_option("--only", only, "criterion numbers to run (default: all)");
  app.add_option("--cache-dir", cache, "where trained runs are kept");
  app.add_option("--lenet-epochs", lenet_epochs, "override Lenet5 training epochs");
  app.add_flag("--fast", fast, "criteria 1-6 only");
  CLI11_PARSE(app, argc, argv);

  Runs runs(cache, lenet_epochs);
  const std::map<int, std::function<Outcome()>> criteria = {
      {1, c1}, {2, c2}, {3, c3}, {4, c4}, {5, c5}, {6, c6},
      {7, [&] { return c7(runs); }},   {8, [&] { return c8(runs); }},
      {9, [&] { return c9(runs); }},   {10, [&] { return c10(runs); }},
      {11, [&] { return c11(runs); }}, {12, [&] { return c12(runs); }},
  };
  const char* names[] = {"",
                         "dF closed forms vs quadrature and Monte Carlo",
                         "prior-recovery limits",
                         "KL closed form vs quadrature",
                         "sampler KS statistic",
                         "gradients vs finite differences",
                         "masked vs shrunk equivalence",
                         "MNIST MLP bmrs_n accuracy and compression",
                         "MNIST MLP bmrs_u p1=4 vs p1=8",
                         "MNIST Lenet5 bmrs_n accuracy and compression",
                         "L2 at bmrs_n compression collapses",
                         "bmrs_n stop point sits at the knee",
                         "rank correlation with SNR"};

  bool all = true;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    if (fast && id > 6) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("criterion %2d %s  %-46s %s\n", id, o.pass ? "PASS" : "FAIL", names[id],
                o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
