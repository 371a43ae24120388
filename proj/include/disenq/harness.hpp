#pragma once

// Command implementations behind the CLI: generate, train, evaluate, diagnose.

#include "disenq/checkpoint.hpp"
#include "disenq/diagnostics.hpp"
#include "disenq/io.hpp"
#include "disenq/plot.hpp"
#include "disenq/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace disenq {

inline constexpr const char* kOutputRootEnv = "DISENQ_OUTPUT_ROOT";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kTrainLogFile = "train_log.ndjson";

// $DISENQ_OUTPUT_ROOT when set, otherwise `fallback`.
inline fs::path output_root(const std::string& fallback = "runs") {
  const char* env = std::getenv(kOutputRootEnv);
  return (env && *env) ? fs::path(env) : fs::path(fallback);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot write ", path.string());
  out << j.dump(2) << "\n";
  if (!out) fail_io("failed writing ", path.string());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail_io("cannot create directory ", dir.string(), ": ", ec.message());
}

// ---------------------------------------------------------------------------
// generate

struct GenerateSummary {
  std::size_t clips = 0;
  int identities = 0;
  int actions = 0;
  int clothing = 0;
  int views = 0;
};

inline GenerateSummary cmd_generate(const RunConfig& cfg, const fs::path& out_dir, bool force, std::ostream& log) {
  cfg.world.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
    fail_validation("output directory ", out_dir.string(), " is not empty (use --force to overwrite)");
  }
  if (force && fs::exists(out_dir)) {
    for (const char* sub : {"features", "text"}) fs::remove_all(out_dir / sub);
  }
  const Dataset ds = generate_dataset(cfg.world);
  write_dataset(out_dir, ds);
  GenerateSummary s{ds.size(), ds.num_identities, ds.num_actions, ds.num_clothing, ds.num_views};
  log << "generated " << s.clips << " clips: " << s.identities << " identities, " << s.actions << " actions, "
      << s.clothing << " clothing, " << s.views << " views -> " << out_dir.string() << "\n";
  return s;
}

// ---------------------------------------------------------------------------
// train

// Model dimensions follow the dataset on disk.
inline RunConfig config_for_dataset(RunConfig cfg, const Dataset& ds) {
  cfg.encoder.tokens = ds.tokens_per_frame;
  cfg.encoder.dim = ds.token_dim;
  cfg.encoder.max_frames = ds.frames_per_clip;
  cfg.disenq.visual_dim = ds.token_dim;
  cfg.disenq.text_dim = ds.text_dim;
  cfg.validate();
  return cfg;
}

struct TrainSummary {
  int epochs_run = 0;
  int final_epoch = 0;
  std::vector<EpochRecord> records;
  fs::path checkpoint;
};

// Keeps the first `epochs` records of an existing log (used on resume).
inline void truncate_log(const fs::path& path, int epochs) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> kept;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("epoch").get<int>() <= epochs) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
}

inline TrainSummary cmd_train(const RunConfig& base_cfg, const fs::path& data_dir, const fs::path& out_dir,
                              const std::optional<fs::path>& resume, std::ostream& log) {
  const Dataset ds = ingest_manifest(data_dir);
  const RunConfig cfg = config_for_dataset(base_cfg, ds);
  ensure_dir(out_dir);
  write_json(out_dir / "config.json", nlohmann::json(cfg));
  const fs::path ckpt_path = out_dir / kCheckpointFile;
  const fs::path log_path = out_dir / kTrainLogFile;

  std::optional<Trainer> trainer;
  if (resume) {
    Checkpoint ck = load_checkpoint(*resume, config_hash(cfg));
    log << "resuming from " << resume->string() << " at epoch " << ck.epoch << "\n";
    trainer.emplace(cfg, ds, std::move(ck.model), std::move(ck.optimizer), ck.epoch, ck.rng);
    truncate_log(log_path, ck.epoch);
  } else {
    trainer.emplace(cfg, ds);
    std::ofstream(log_path, std::ios::binary | std::ios::trunc);
  }
  save_checkpoint(ckpt_path, cfg, trainer->model(), trainer->optimizer(), trainer->epoch(), trainer->rng());

  TrainSummary summary;
  summary.checkpoint = ckpt_path;
  std::ofstream log_file(log_path, std::ios::binary | std::ios::app);
  while (trainer->epoch() < cfg.training.epochs) {
    EpochRecord rec;
    try {
      rec = trainer->run_epoch();
    } catch (const TrainingDiverged& e) {
      log << "training diverged at epoch " << trainer->epoch() + 1 << ": " << e.what() << "; last good checkpoint kept at "
          << ckpt_path.string() << "\n";
      throw;
    }
    log_file << epoch_to_json(rec).dump() << "\n";
    log_file.flush();
    save_checkpoint(ckpt_path, cfg, trainer->model(), trainer->optimizer(), trainer->epoch(), trainer->rng());
    log << "epoch " << rec.epoch << " total " << rec.total << " (id " << rec.components.id << ", triplet "
        << rec.components.triplet << ", orth " << rec.components.orthogonality << ", action " << rec.components.action
        << ")\n";
    summary.records.push_back(rec);
    ++summary.epochs_run;
  }
  summary.final_epoch = trainer->epoch();
  return summary;
}

// ---------------------------------------------------------------------------
// evaluate

struct ProtocolResult {
  std::string protocol;
  RetrievalReport primary;                  // adaptive, or fixed when the weigher is disabled
  std::vector<RetrievalReport> baselines;   // fixed alpha and single streams
  double chance_rank1 = 0.0;
  fs::path report_path;
};

struct EvaluateSummary {
  std::vector<ProtocolResult> results;
  std::vector<std::string> skipped;
  std::vector<fs::path> plots;
};

inline nlohmann::json report_summary_json(const RetrievalReport& r) {
  return {{"scoring", r.scoring}, {"rank1", r.rank1}, {"rank5", r.rank5},           {"rank10", r.rank10},
          {"mAP", r.mean_ap},     {"cmc", r.cmc},     {"num_probes", r.num_probes}, {"num_skipped", r.num_skipped}};
}

inline std::string file_safe(std::string s) {
  for (char& c : s) {
    if (c == '+') c = '_';
  }
  return s;
}

// Features come from a copy of the dataset whose text entries fault on access.
inline std::vector<DisentangledFeatures> text_free_features(const Model& model, const Dataset& ds, int workers) {
  const Dataset poisoned = ds.with_poisoned_text();
  return infer_all(model, poisoned, workers);
}

inline void write_loss_plot(const fs::path& log_path, const fs::path& out) {
  std::ifstream in(log_path);
  std::vector<Series> series = {{"id", {}, {}}, {"triplet", {}, {}}, {"orthogonality", {}, {}}, {"action", {}, {}},
                                {"total", {}, {}}};
  const char* keys[] = {"loss_id", "loss_triplet", "loss_orthogonality", "loss_action", "total"};
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    for (std::size_t k = 0; k < series.size(); ++k) {
      series[k].x.push_back(j.at("epoch").get<double>());
      series[k].y.push_back(j.at(keys[k]).get<double>());
    }
  }
  ChartSpec spec{"Training losses", "epoch", "loss", 0.0, 1.0, true};
  write_svg(out.string(), spec, series);
}

inline EvaluateSummary cmd_evaluate(const fs::path& ckpt_path, const fs::path& data_dir,
                                    const std::vector<std::string>& protocols, bool plots, const fs::path& out_dir,
                                    int workers, std::ostream& log) {
  std::vector<Protocol> parsed;
  for (const auto& p : protocols) parsed.push_back(Protocol::parse(p));
  Checkpoint ck = load_checkpoint(ckpt_path);
  const Dataset ds = ingest_manifest(data_dir);
  ensure_dir(out_dir);
  const auto features = text_free_features(ck.model, ds, workers);

  EvaluateSummary summary;
  const bool adaptive = ck.config.training.adaptive_weigher;
  for (const auto& protocol : parsed) {
    const std::string name = protocol.name();
    Split split;
    try {
      split = split_protocol(ds, protocol, ck.config.split_seed, ck.config.split);
    } catch (const ValidationError& e) {
      log << "warning: skipping protocol " << name << ": " << e.what() << "\n";
      summary.skipped.push_back(name);
      continue;
    }
    ProtocolResult res;
    res.protocol = name;
    res.chance_rank1 = chance_rank1(ds, split);
    try {
      res.primary = evaluate_split(features, ds, split,
                                   Scorer{adaptive ? ScoreMode::kAdaptive : ScoreMode::kFixed, &ck.model.weigher}, name);
      for (ScoreMode m : {ScoreMode::kFixed, ScoreMode::kBiometrics, ScoreMode::kMotion, ScoreMode::kNonBiometrics}) {
        if (!adaptive && m == ScoreMode::kFixed) continue;
        res.baselines.push_back(evaluate_split(features, ds, split, Scorer{m, &ck.model.weigher}, name));
      }
    } catch (const ValidationError& e) {
      log << "warning: skipping protocol " << name << ": " << e.what() << "\n";
      summary.skipped.push_back(name);
      continue;
    }
    nlohmann::json j = report_to_json(res.primary, &ds);
    j["chance_rank1"] = res.chance_rank1;
    nlohmann::json baselines = nlohmann::json::object();
    for (const auto& b : res.baselines) baselines[b.scoring] = report_summary_json(b);
    j["baselines"] = baselines;
    res.report_path = out_dir / ("report_" + file_safe(name) + ".json");
    write_json(res.report_path, j);
    log << name << ": rank1 " << res.primary.rank1 << " rank5 " << res.primary.rank5 << " mAP " << res.primary.mean_ap
        << " (" << res.primary.scoring << ")\n";
    if (plots) {
      std::vector<Series> series;
      auto add = [&](const RetrievalReport& r) {
        Series s{r.scoring, {}, {}};
        for (std::size_t k = 0; k < r.cmc.size(); ++k) {
          s.x.push_back(static_cast<double>(k + 1));
          s.y.push_back(r.cmc[k]);
        }
        series.push_back(std::move(s));
      };
      add(res.primary);
      for (const auto& b : res.baselines) add(b);
      const fs::path plot = out_dir / ("cmc_" + file_safe(name) + ".svg");
      write_svg(plot.string(), ChartSpec{"CMC " + name, "rank", "identification rate"}, series);
      summary.plots.push_back(plot);
    }
    summary.results.push_back(std::move(res));
  }
  if (plots) {
    const fs::path train_log = ckpt_path.parent_path() / kTrainLogFile;
    if (fs::exists(train_log)) {
      const fs::path plot = out_dir / "loss_curves.svg";
      write_loss_plot(train_log, plot);
      summary.plots.push_back(plot);
    }
  }
  if (summary.results.empty()) fail_validation("no requested protocol is feasible on this dataset");
  return summary;
}

// ---------------------------------------------------------------------------
// diagnose

// Held-out identities (those outside the training split).
inline std::vector<std::size_t> held_out_clips(const Dataset& ds, const RunConfig& cfg) {
  const auto train = train_identities(ds, cfg.split_seed, cfg.split);
  const std::set<int> train_set(train.begin(), train.end());
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!train_set.count(ds.samples[i].identity)) rows.push_back(i);
  }
  return rows;
}

inline DiagnosticsReport cmd_diagnose(const fs::path& ckpt_path, const fs::path& data_dir, const fs::path& out_dir,
                                      int workers, std::ostream& log) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  const Dataset ds = ingest_manifest(data_dir);
  ensure_dir(out_dir);
  const auto features = text_free_features(ck.model, ds, workers);
  const auto rows = held_out_clips(ds, ck.config);
  const DiagnosticsReport rep = run_diagnostics(features, ds, rows, ck.config.diagnostics, ck.config.seed);
  write_json(out_dir / "diagnostics.json", diagnostics_to_json(rep));
  write_embeddings(out_dir / "embeddings.bin", embedding_records(features, ds));
  for (const auto& p : rep.probes) {
    if (!p.skipped.empty()) {
      log << "warning: probe " << p.target << " <- " << p.feature << " skipped: " << p.skipped << "\n";
      continue;
    }
    log << "probe " << p.target << " <- " << p.feature << ": " << p.accuracy << " (chance " << p.chance << ")\n";
  }
  for (const auto& m : rep.mutual_information) log << "infonce " << m.pair << ": " << m.lower_bound << " nats\n";
  log << "mean |cos(F_b, F_nb)|: " << rep.orthogonality.mean_abs_cos << "\n";
  return rep;
}

}  // namespace disenq
