#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "bmrs/checkpoint.hpp"
#include "bmrs/errors.hpp"
#include "bmrs/experiment.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace bmrs;
namespace fs = std::filesystem;
namespace fx = bmrs::fixtures;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("bmrs_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_synth(const fs::path& out) {
  ExperimentConfig cfg = default_config("mlp");
  cfg.dataset = "synth";
  cfg.synth.n_train = 600;
  cfg.synth.n_test = 200;
  cfg.synth.dim = 8;
  cfg.model.layers = 2;
  cfg.model.hidden = 12;
  cfg.optimizer.lr = 5e-3;
  cfg.optimizer.batch_size = 50;
  cfg.schedule.epochs_train = 2;
  cfg.schedule.fine_tune_epochs = 1;
  cfg.chunk_fraction = 0.25;
  cfg.seed = 3;
  cfg.output_dir = out.string();
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BMRS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config JSON round trip") {
  ExperimentConfig cfg = default_config("lenet5");
  cfg.criterion.kind = CriterionKind::BmrsU;
  cfg.criterion.p1 = 4;
  cfg.criterion.threshold = 0.5;
  cfg.optimizer.noise = NoiseSharing::PerExample;
  cfg.seed = 17;
  const ExperimentConfig back = config_from_json(config_to_json(cfg));
  CHECK(config_to_json(back) == config_to_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(back.optimizer.lr == cfg.optimizer.lr);
  CHECK(back.optimizer.noise == NoiseSharing::PerExample);
  cfg.seed = 18;
  CHECK(config_hash(back) != config_hash(cfg));
}

TEST_CASE("defaults differ by model") {
  CHECK(default_config("mlp").optimizer.lr == 8.5e-4);
  CHECK(default_config("lenet5").optimizer.lr == 1.4e-3);
  CHECK(default_config("mlp").optimizer.batch_size == 128);
  CHECK(config_from_json("{}").model.kind == "mlp");
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_json("{\"modle\": {}}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"optimizer\": {\"lr\": -1}}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"optimizer\": {\"noise\": \"sometimes\"}}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"criterion\": {\"kind\": \"bmrs_u\", \"p1\": 23}}"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"model\": {\"kind\": \"lenet5\"}, \"dataset\": \"synth\"}"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"seed\": \"x\"}"), ConfigError);
}

TEST_CASE("git blob hash") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("csv quoting") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");
  CHECK(std::stod(csv_number(0.1)) == 0.1);
  CHECK(std::stod(csv_number(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(3);
  for (int kind = 0; kind < 3; ++kind) {
    Network net = kind == 0   ? fx::small_mlp(1)
                  : kind == 1 ? fx::one_conv_net(2, 2, 1)
                              : make_lenet5(1, 28, 28, 10, true, 4);
    fx::prune_random(net, rng, 0.3);
    std::stringstream buf;
    save_checkpoint(net, buf);
    Network back = load_checkpoint(buf);
    const auto pa = net.params(), pb = back.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.data == pb[i]->value.data);
    const auto ga = net.gates(), gb = back.gates();
    for (std::size_t g = 0; g < ga.size(); ++g) {
      CHECK(ga[g]->alive == gb[g]->alive);
      CHECK(ga[g]->ids == gb[g]->ids);
    }
    const Tensor x = fx::random_batch(net, 2, rng);
    CHECK(fx::max_abs_diff(net.forward(x, Mode::Eval), back.forward(x, Mode::Eval)) == 0.0);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  std::stringstream buf;
  save_checkpoint(fx::small_mlp(1), buf);
  const std::string good = buf.str();
  std::stringstream bad_magic("XMRS" + good.substr(4));
  CHECK_THROWS_AS(load_checkpoint(bad_magic), ParseError);
  std::stringstream truncated(good.substr(0, good.size() - 5));
  CHECK_THROWS_AS(load_checkpoint(truncated), ParseError);
}

TEST_CASE("train writes artifacts and is reproducible") {
  const fs::path a = scratch_dir("train_a"), b = scratch_dir("train_b");
  ExperimentConfig cfg = tiny_synth(a);
  cfg.criterion.kind = CriterionKind::Snr;
  const auto art = cmd_train(cfg);
  CHECK(fs::exists(art.run_csv));
  CHECK(fs::exists(art.manifest));
  CHECK(fs::exists(art.checkpoint));
  CHECK(art.run.records.size() == 3);
  cfg.output_dir = b.string();
  cmd_train(cfg);
  CHECK(slurp(a / "run.csv") == slurp(b / "run.csv"));
  CHECK(slurp(a / "run.csv").rfind("epoch,phase,accuracy,compression,alive_counts,criterion,seed", 0) ==
        0);

  SUBCASE("post-training curves from the checkpoint") {
    const auto post = cmd_prune_post(cfg, art.checkpoint);
    REQUIRE(!post.curves.empty());
    for (const auto& c : post.curves) {
      CHECK(c.points.front().compression == 0.0);
      CHECK(c.points.front().accuracy == post.checkpoint_accuracy);
    }
    const auto& m = post.spearman;
    for (std::size_t i = 0; i < m.names.size(); ++i) {
      if (m.names[i] == "bmrs_n") CHECK(m.rho[i][i] == doctest::Approx(1.0));
    }
    CHECK(fs::exists(post.curve_csv));
    CHECK(fs::exists(post.spearman_csv));
  }
  SUBCASE("a checkpoint for a different input size is refused") {
    ExperimentConfig other = cfg;
    other.synth.dim = 9;
    CHECK_THROWS(cmd_prune_post(other, art.checkpoint));
  }
}

TEST_CASE("p1 sweep") {
  ExperimentConfig cfg = tiny_synth(scratch_dir("sweep"));
  cfg.p1_list = {6};
  const auto rows = cmd_sweep_p1(cfg);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].p1 == 6);
  cfg.p1_list = {23};
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
}

TEST_CASE("command line exit codes") {
  const fs::path d = scratch_dir("cli");
  std::ofstream(d / "bad.json") << "{\"optimizer\": {\"lr\": 0}}";
  CHECK(run_cli("train --config " + (d / "bad.json").string()) == 2);
  CHECK(run_cli("train --config " + (d / "missing.json").string()) == 2);
  CHECK(run_cli("train --criterion nonsense --dataset synth") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("verify --profile quick") == 0);
  CHECK(run_cli("verify --profile nope") == 2);
  CHECK(run_cli("train --dataset synth --epochs 1 --fine-tune-epochs 0 --seed 2 --out " +
                (d / "ok").string()) == 0);
  CHECK(fs::exists(d / "ok" / "run.csv"));
}
