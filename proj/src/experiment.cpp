#include "bmrs/experiment.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

#include "bmrs/checkpoint.hpp"
#include "bmrs/errors.hpp"
#include "json.hpp"

namespace bmrs {

using json = nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class T>
void take(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json criterion_json(const CriterionConfig& c) {
  json j;
  j["kind"] = criterion_name(c.kind);
  j["p1"] = c.p1;
  j["p2"] = c.p2;
  j["threshold"] = c.threshold ? json(*c.threshold) : json(nullptr);
  j["mu_tilde_p"] = c.mu_tilde_p ? json(*c.mu_tilde_p) : json(nullptr);
  j["sigma2_tilde_p"] = c.sigma2_tilde_p;
  return j;
}

CriterionConfig criterion_from(const json& j) {
  reject_unknown(j, {"kind", "p1", "p2", "threshold", "mu_tilde_p", "sigma2_tilde_p"}, "criterion");
  CriterionConfig c;
  std::string kind = criterion_name(c.kind);
  take(j, "kind", kind, "criterion");
  c.kind = parse_criterion(kind);
  take(j, "p1", c.p1, "criterion");
  take(j, "p2", c.p2, "criterion");
  take(j, "sigma2_tilde_p", c.sigma2_tilde_p, "criterion");
  if (j.contains("threshold") && !j["threshold"].is_null()) c.threshold = j["threshold"].get<double>();
  if (j.contains("mu_tilde_p") && !j["mu_tilde_p"].is_null()) c.mu_tilde_p = j["mu_tilde_p"].get<double>();
  return c;
}

json config_json(const ExperimentConfig& cfg) {
  json j;
  j["model"] = {{"kind", cfg.model.kind}, {"layers", cfg.model.layers}, {"hidden", cfg.model.hidden}};
  j["dataset"] = cfg.dataset;
  j["data_dir"] = cfg.data_dir ? json(*cfg.data_dir) : json(nullptr);
  j["synth"] = {{"n_train", cfg.synth.n_train},     {"n_test", cfg.synth.n_test},
                {"dim", cfg.synth.dim},             {"n_classes", cfg.synth.n_classes},
                {"separation", cfg.synth.separation}};
  j["optimizer"] = {{"lr", cfg.optimizer.lr},
                    {"batch_size", cfg.optimizer.batch_size},
                    {"kl_scale", cfg.optimizer.kl_scale},
                    {"noise", cfg.optimizer.noise == NoiseSharing::PerExample ? "per_example"
                                                                             : "per_batch"}};
  j["schedule"] = {{"epochs_train", cfg.schedule.epochs_train},
                   {"fine_tune_epochs", cfg.schedule.fine_tune_epochs},
                   {"prune_interval", cfg.schedule.prune_interval}};
  j["criterion"] = criterion_json(cfg.criterion);
  j["gate_bounds"] = {cfg.log_lo, cfg.log_hi};
  j["chunk_fraction"] = cfg.chunk_fraction;
  j["p1_list"] = cfg.p1_list;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  return j;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::string join_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

// Removes the listed files unless release() was called.
class OutputGuard {
 public:
  void add(const std::filesystem::path& p) { paths_.push_back(p); }
  void release() { paths_.clear(); }
  ~OutputGuard() {
    std::error_code ec;
    for (const auto& p : paths_) std::filesystem::remove(p, ec);
  }

 private:
  std::vector<std::filesystem::path> paths_;
};

}  // namespace

ExperimentConfig default_config(const std::string& model_kind) {
  ExperimentConfig cfg;
  cfg.model.kind = model_kind;
  cfg.optimizer.lr = model_kind == "lenet5" ? 1.4e-3 : 8.5e-4;
  return cfg;
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, {"model", "dataset", "data_dir", "synth", "optimizer", "schedule", "criterion",
                     "gate_bounds", "chunk_fraction", "p1_list", "seed", "output_dir"},
                 "config");
  std::string kind = "mlp";
  if (j.contains("model")) {
    reject_unknown(j["model"], {"kind", "layers", "hidden"}, "model");
    take(j["model"], "kind", kind, "model");
  }
  ExperimentConfig cfg = default_config(kind);
  if (j.contains("model")) {
    take(j["model"], "layers", cfg.model.layers, "model");
    take(j["model"], "hidden", cfg.model.hidden, "model");
  }
  take(j, "dataset", cfg.dataset, "config");
  if (j.contains("data_dir") && !j["data_dir"].is_null()) cfg.data_dir = j["data_dir"].get<std::string>();
  if (j.contains("synth")) {
    const json& s = j["synth"];
    reject_unknown(s, {"n_train", "n_test", "dim", "n_classes", "separation"}, "synth");
    take(s, "n_train", cfg.synth.n_train, "synth");
    take(s, "n_test", cfg.synth.n_test, "synth");
    take(s, "dim", cfg.synth.dim, "synth");
    take(s, "n_classes", cfg.synth.n_classes, "synth");
    take(s, "separation", cfg.synth.separation, "synth");
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    reject_unknown(o, {"lr", "batch_size", "kl_scale", "noise"}, "optimizer");
    take(o, "lr", cfg.optimizer.lr, "optimizer");
    take(o, "batch_size", cfg.optimizer.batch_size, "optimizer");
    take(o, "kl_scale", cfg.optimizer.kl_scale, "optimizer");
    std::string noise = "per_batch";
    take(o, "noise", noise, "optimizer");
    if (noise == "per_batch") {
      cfg.optimizer.noise = NoiseSharing::PerBatch;
    } else if (noise == "per_example") {
      cfg.optimizer.noise = NoiseSharing::PerExample;
    } else {
      throw ConfigError("optimizer.noise must be per_batch or per_example, got '" + noise + "'");
    }
  }
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    reject_unknown(s, {"epochs_train", "fine_tune_epochs", "prune_interval"}, "schedule");
    take(s, "epochs_train", cfg.schedule.epochs_train, "schedule");
    take(s, "fine_tune_epochs", cfg.schedule.fine_tune_epochs, "schedule");
    take(s, "prune_interval", cfg.schedule.prune_interval, "schedule");
  }
  if (j.contains("criterion")) cfg.criterion = criterion_from(j["criterion"]);
  if (j.contains("gate_bounds")) {
    std::vector<double> b;
    take(j, "gate_bounds", b, "config");
    if (b.size() != 2) throw ConfigError("gate_bounds must be [log_lo, log_hi]");
    cfg.log_lo = b[0];
    cfg.log_hi = b[1];
  }
  take(j, "chunk_fraction", cfg.chunk_fraction, "config");
  take(j, "p1_list", cfg.p1_list, "config");
  take(j, "seed", cfg.seed, "config");
  take(j, "output_dir", cfg.output_dir, "config");
  validate_config(cfg);
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.model.kind != "mlp" && cfg.model.kind != "lenet5") {
    throw ConfigError("model.kind must be mlp or lenet5, got '" + cfg.model.kind + "'");
  }
  if (cfg.model.kind == "mlp" && (cfg.model.layers == 0 || cfg.model.hidden == 0)) {
    throw ConfigError("mlp needs layers >= 1 and hidden >= 1");
  }
  if (cfg.dataset != "mnist" && cfg.dataset != "fashion_mnist" && cfg.dataset != "synth") {
    throw ConfigError("dataset must be mnist, fashion_mnist or synth");
  }
  if (cfg.dataset == "synth" && cfg.model.kind == "lenet5") {
    throw ConfigError("lenet5 needs image data");
  }
  if (!(cfg.optimizer.lr > 0.0) || cfg.optimizer.batch_size == 0 || !(cfg.optimizer.kl_scale >= 0.0)) {
    throw ConfigError("optimizer: lr > 0, batch_size >= 1, kl_scale >= 0 required");
  }
  cfg.schedule.validate();
  if (!(cfg.log_lo < cfg.log_hi)) throw ConfigError("gate_bounds: log_lo < log_hi required");
  if (!(cfg.chunk_fraction > 0.0 && cfg.chunk_fraction <= 1.0)) {
    throw ConfigError("chunk_fraction must lie in (0, 1]");
  }
  auto check_u = [&](int p1, int p2) {
    if (p1 < 0 || p2 <= p1) {
      throw ConfigError("bmrs_u needs 0 <= p1 < p2 (got p1=" + std::to_string(p1) +
                        ", p2=" + std::to_string(p2) + ")");
    }
    const auto r = ReducedLogUniformPrior::from_precision(p1, p2);
    if (r.log_lo < cfg.log_lo || r.log_hi > cfg.log_hi) {
      throw ConfigError("bmrs_u support [2^-p2, 2^-p1] must lie inside the gate bounds");
    }
  };
  if (cfg.criterion.kind == CriterionKind::BmrsU) check_u(cfg.criterion.p1, cfg.criterion.p2);
  for (int p1 : cfg.p1_list) check_u(p1, cfg.criterion.p2);
  if (!(cfg.criterion.sigma2_tilde_p > 0.0)) throw ConfigError("criterion.sigma2_tilde_p must be > 0");
  if (cfg.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

std::string git_blob_sha1(const std::string& content) {
  const std::string framed = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(framed.data(), framed.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) { return git_blob_sha1(config_json(cfg).dump()); }

DataSplits load_data(const ExperimentConfig& cfg) {
  if (cfg.dataset == "synth") {
    const auto& s = cfg.synth;
    DataSplits d;
    auto full = synth_blobs(s.n_train, s.n_classes, s.dim, s.separation, cfg.seed);
    std::tie(d.train, d.val) = split(full, 0.8, mix_seed(cfg.seed, 21));
    d.test = synth_blobs(s.n_test, s.n_classes, s.dim, s.separation, mix_seed(cfg.seed, 22));
    d.test.split = "test";
    return d;
  }
  // The 80/20 split is fixed across seeds so every run sees the same train set.
  return load_mnist_dir(resolve_data_dir(cfg.data_dir), 0);
}

Network build_model(const ExperimentConfig& cfg, const Dataset& sample, bool with_gates) {
  const Shape s = sample.sample_shape();
  if (cfg.model.kind == "lenet5") {
    if (s.size() != 3) throw ConfigError("lenet5 needs [c, h, w] images");
    return make_lenet5(s[0], s[1], s[2], sample.n_classes, with_gates, cfg.seed, cfg.log_lo, cfg.log_hi);
  }
  return make_mlp(shape_size(s), cfg.model.hidden, cfg.model.layers, sample.n_classes, with_gates,
                  cfg.seed, cfg.log_lo, cfg.log_hi);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

TrainArtifacts cmd_train(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const DataSplits data = load_data(cfg);
  Network net = build_model(cfg, data.train);
  TrainSchedule sched = cfg.schedule;
  sched.seed = cfg.seed;

  const std::filesystem::path dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  TrainArtifacts art;
  art.run_csv = dir / "run.csv";
  art.manifest = dir / "manifest.json";
  art.checkpoint = dir / "model.bmrs";
  OutputGuard guard;
  guard.add(art.run_csv);
  guard.add(art.manifest);
  guard.add(art.checkpoint);

  std::ofstream csv(art.run_csv, std::ios::binary);
  csv << "epoch,phase,accuracy,compression,alive_counts,criterion,seed,train_loss,pruned,degenerate\r\n";
  const std::string crit = criterion_label(cfg.criterion);
  art.run = continuous_prune(std::move(net), data, cfg.criterion, sched, cfg.optimizer,
                             [&](const RunRecord& r) {
                               csv << r.epoch << ',' << r.phase << ',' << csv_number(r.test_accuracy)
                                   << ',' << csv_number(r.compression) << ','
                                   << csv_field(join_counts(r.alive_counts)) << ',' << csv_field(crit)
                                   << ',' << cfg.seed << ',' << csv_number(r.train_loss) << ','
                                   << r.prune_events.size() << ',' << (r.degenerate ? 1 : 0) << "\r\n";
                               csv.flush();
                             });
  csv.close();
  save_checkpoint(art.run.net, art.checkpoint);

  json m;
  m["command"] = "train";
  m["config"] = config_json(cfg);
  m["config_hash"] = config_hash(cfg);
  m["original_params"] = art.run.original_params;
  m["final_params"] = art.run.net.param_count();
  m["final"] = {{"accuracy", art.run.final_accuracy()},
                {"compression", art.run.final_compression()},
                {"alive_counts", art.run.records.empty() ? std::vector<std::size_t>{}
                                                         : art.run.records.back().alive_counts}};
  write_text(art.manifest, m.dump(2));
  guard.release();
  return art;
}

PostArtifacts cmd_prune_post(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint) {
  validate_config(cfg);
  const DataSplits data = load_data(cfg);
  Network trained = load_checkpoint(checkpoint);
  const Shape expect = data.train.sample_shape();
  if (shape_size(trained.input_shape) != shape_size(expect)) {
    throw ConfigError("checkpoint input " + shape_string(trained.input_shape) +
                      " does not match dataset samples " + shape_string(expect));
  }
  if (trained.gate_count() == 0) throw ConfigError("checkpoint has no gate layers");

  std::vector<CriterionConfig> crits;
  for (auto k : {CriterionKind::BmrsN, CriterionKind::BmrsU, CriterionKind::BmrsU, CriterionKind::Snr,
                 CriterionKind::MeanTheta, CriterionKind::L2}) {
    CriterionConfig c = cfg.criterion;
    c.kind = k;
    c.threshold.reset();
    crits.push_back(c);
  }
  crits[1].p1 = 4;
  crits[2].p1 = 8;

  const std::filesystem::path dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  PostArtifacts art;
  art.curve_csv = dir / "curve.csv";
  art.spearman_csv = dir / "spearman.csv";
  art.manifest = dir / "manifest.json";
  OutputGuard guard;
  guard.add(art.curve_csv);
  guard.add(art.spearman_csv);
  guard.add(art.manifest);

  art.checkpoint_accuracy = accuracy(trained, data.test);
  art.spearman = spearman_matrix(trained, crits);
  std::ofstream csv(art.curve_csv, std::ios::binary);
  csv << "step,removed,compression,accuracy,stop,criterion,seed\r\n";
  for (const auto& c : crits) {
    art.curves.push_back(post_training_prune(trained, data, c, cfg.chunk_fraction, cfg.optimizer, cfg.seed));
    const auto& curve = art.curves.back();
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
      const auto& p = curve.points[i];
      csv << i << ',' << p.removed << ',' << csv_number(p.compression) << ',' << csv_number(p.accuracy)
          << ',' << (p.stop ? 1 : 0) << ',' << csv_field(criterion_label(c)) << ',' << cfg.seed << "\r\n";
    }
  }
  csv.close();

  std::ofstream sp(art.spearman_csv, std::ios::binary);
  sp << "criterion";
  for (const auto& n : art.spearman.names) sp << ',' << csv_field(n);
  sp << "\r\n";
  for (std::size_t i = 0; i < art.spearman.names.size(); ++i) {
    sp << csv_field(art.spearman.names[i]);
    for (double r : art.spearman.rho[i]) sp << ',' << csv_number(r);
    sp << "\r\n";
  }
  sp.close();

  json m;
  m["command"] = "prune-post";
  m["config"] = config_json(cfg);
  m["config_hash"] = config_hash(cfg);
  m["checkpoint"] = checkpoint.string();
  m["checkpoint_accuracy"] = art.checkpoint_accuracy;
  json stops = json::object();
  for (const auto& c : art.curves) {
    if (const CurvePoint* p = c.stop_point()) {
      stops[criterion_label(c.criterion)] = {{"removed", p->removed},
                                             {"compression", p->compression},
                                             {"accuracy", p->accuracy}};
    }
  }
  m["stop_points"] = stops;
  json rho = json::object();
  for (std::size_t i = 0; i < art.spearman.names.size(); ++i) {
    for (std::size_t j = 0; j < art.spearman.names.size(); ++j) {
      const double r = art.spearman.rho[i][j];
      rho[art.spearman.names[i]][art.spearman.names[j]] = std::isnan(r) ? json(nullptr) : json(r);
    }
  }
  m["spearman"] = rho;
  write_text(art.manifest, m.dump(2));
  guard.release();
  return art;
}

std::vector<SweepRow> cmd_sweep_p1(const ExperimentConfig& cfg) {
  validate_config(cfg);
  if (cfg.p1_list.empty()) throw ConfigError("p1_list must not be empty");
  const std::filesystem::path dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  std::vector<SweepRow> rows;
  const auto sweep_csv = dir / "sweep.csv";
  OutputGuard guard;
  guard.add(sweep_csv);
  std::ofstream csv(sweep_csv, std::ios::binary);
  csv << "p1,compression,accuracy,seed\r\n";
  for (int p1 : cfg.p1_list) {
    ExperimentConfig run = cfg;
    run.criterion.kind = CriterionKind::BmrsU;
    run.criterion.p1 = p1;
    run.output_dir = (dir / ("p1_" + std::to_string(p1))).string();
    const auto art = cmd_train(run);
    rows.push_back({p1, art.run.final_compression(), art.run.final_accuracy()});
    csv << p1 << ',' << csv_number(rows.back().compression) << ',' << csv_number(rows.back().accuracy)
        << ',' << cfg.seed << "\r\n";
    csv.flush();
  }
  guard.release();
  return rows;
}

}  // namespace bmrs
