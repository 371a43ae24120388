#include "disenq/disenq.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

using namespace disenq;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.world.num_identities = 6;
  c.world.num_actions = 3;
  c.world.num_clothing = 2;
  c.world.num_views = 2;
  c.world.frames_per_clip = 4;
  c.world.tokens_per_frame = 4;
  c.world.token_dim = 8;
  c.world.text_dim = 8;
  c.world.latent_dim = 4;
  c.disenq.layers = 1;
  c.disenq.heads = 2;
  c.disenq.model_dim = 8;
  c.disenq.queries_per_stream = 2;
  c.disenq.ffn_dim = 16;
  c.training.epochs = 2;
  c.training.identities_per_batch = 2;
  c.training.clips_per_identity = 2;
  c.training.batches_per_epoch = 3;
  c.optimizer.lr = 1e-3;
  c.diagnostics.critic_steps = 20;
  c.diagnostics.critic_batch = 8;
  c.diagnostics.probe_iterations = 20;
  c.diagnostics.probe_folds = 2;
  c.sync_dimensions();
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("disenq_test_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

// Generates the tiny world once per test binary.
const fs::path& tiny_data() {
  static const fs::path dir = [] {
    const fs::path d = scratch("data");
    std::ostringstream log;
    cmd_generate(tiny_config(), d, false, log);
    return d;
  }();
  return dir;
}

TEST(Config, RoundTrip) {
  RunConfig c = tiny_config();
  c.training.orthogonality = OrthogonalityMode::kCosineCrossCovariance;
  c.loss.margin = 0.7;
  c.world.text_jitter.motion = 0.1;
  c.protocols = {"cross_activity+exclude_view"};
  EXPECT_EQ(parse_config(serialize_config(c)), c);
  EXPECT_EQ(parse_config("{}"), RunConfig{});
}

TEST(Config, DefaultHyperparameters) {
  const RunConfig c;
  EXPECT_EQ(c.loss.id, 0.01);
  EXPECT_EQ(c.loss.triplet, 0.01);
  EXPECT_EQ(c.loss.orthogonality, 0.01);
  EXPECT_EQ(c.loss.action, 0.01);
  EXPECT_EQ(c.optimizer.lr, 1e-4);
  EXPECT_EQ(c.optimizer.weight_decay, 5e-2);
  EXPECT_EQ(c.training.epochs, 60);
  EXPECT_EQ(c.world.frames_per_clip, 8);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("{"), ValidationError);
  EXPECT_THROW(parse_config(R"({"seed": "x"})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"training": {"orthogonality": "sideways"}})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"sede": 3})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"optimizer": {"learning_rate": 0.1}})"), ValidationError);
  RunConfig c = tiny_config();
  c.protocols = {"nope"};
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), IoError);
  EXPECT_NE(config_hash(tiny_config()), config_hash(RunConfig{}));
  RunConfig moved = tiny_config();
  moved.output_dir = "elsewhere";
  moved.workers = 4;
  EXPECT_EQ(config_hash(moved), config_hash(tiny_config()));
}

TEST(Generate, WritesManifestAndRefusesNonEmptyDir) {
  const fs::path dir = scratch("gen");
  std::ostringstream log;
  const GenerateSummary s = cmd_generate(tiny_config(), dir, false, log);
  EXPECT_EQ(s.clips, 6u * 3 * 2 * 2);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  const std::string first = slurp(dir / "manifest.json");
  EXPECT_THROW(cmd_generate(tiny_config(), dir, false, log), ValidationError);
  cmd_generate(tiny_config(), dir, true, log);
  EXPECT_EQ(slurp(dir / "manifest.json"), first);
  EXPECT_EQ(slurp(dir / "features/clip5.bin"), slurp(tiny_data() / "features/clip5.bin"));
  fs::remove_all(dir);
}

TEST(Train, OneEpochLogRecord) {
  RunConfig c = tiny_config();
  c.training.epochs = 1;
  const fs::path out = scratch("train1");
  std::ostringstream log;
  const TrainSummary s = cmd_train(c, tiny_data(), out, std::nullopt, log);
  EXPECT_EQ(s.epochs_run, 1);
  const auto recs = lines(out / kTrainLogFile);
  ASSERT_EQ(recs.size(), 1u);
  const auto j = nlohmann::json::parse(recs[0]);
  EXPECT_EQ(j.at("epoch"), 1);
  for (const char* k : {"loss_id", "loss_triplet", "loss_orthogonality", "loss_action", "total"}) {
    EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_TRUE(std::isfinite(j.at(k).get<double>())) << k;
  }
  EXPECT_TRUE(fs::exists(out / kCheckpointFile));
  EXPECT_TRUE(fs::exists(out / "config.json"));
  fs::remove_all(out);
}

TEST(Train, ZeroWeightsLeaveParametersUnchanged) {
  const Dataset ds = ingest_manifest(tiny_data());
  RunConfig c = config_for_dataset(tiny_config(), ds);
  c.loss.id = c.loss.triplet = c.loss.orthogonality = c.loss.action = 0.0;
  c.training.weigher_loss_weight = 0.0;
  Trainer t(c, ds);
  std::vector<Matrix> before;
  for (Parameter* p : t.model().parameters()) before.push_back(p->value);
  t.run_epoch();
  const auto after = t.model().parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(after[i]->value, before[i]) << after[i]->name;
}

TEST(Train, ParametersMoveUnderDefaultWeights) {
  const Dataset ds = ingest_manifest(tiny_data());
  Trainer t(config_for_dataset(tiny_config(), ds), ds);
  const Matrix before = t.model().bank.queries[0].value;
  t.run_epoch();
  EXPECT_NE(t.model().bank.queries[0].value, before);
}

TEST(Train, RejectsInferenceOnlyData) {
  Dataset ds = ingest_manifest(tiny_data());
  ds.texts[0].reset();
  EXPECT_THROW(Trainer(config_for_dataset(tiny_config(), ds), ds), ValidationError);
}

TEST(Train, NonFiniteLossAbortsAndKeepsCheckpoint) {
  const Dataset clean = ingest_manifest(tiny_data());
  Dataset bad = clean;
  for (auto& s : bad.samples) s.frames[0](0, 0) = std::nan("");
  const fs::path data = scratch("nan_data");
  write_dataset(data, bad);
  const fs::path out = scratch("nan_run");
  std::ostringstream log;
  EXPECT_THROW(cmd_train(tiny_config(), data, out, std::nullopt, log), TrainingDiverged);
  EXPECT_NE(log.str().find("diverged"), std::string::npos);
  EXPECT_EQ(load_checkpoint(out / kCheckpointFile).epoch, 0);
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const Dataset ds = ingest_manifest(tiny_data());
  const RunConfig c = config_for_dataset(tiny_config(), ds);
  Trainer t(c, ds);
  t.run_epoch();
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  save_checkpoint(dir / "a.bin", c, t.model(), t.optimizer(), t.epoch(), t.rng());
  Checkpoint ck = load_checkpoint(dir / "a.bin", config_hash(c));
  EXPECT_EQ(ck.epoch, 1);
  EXPECT_EQ(ck.config, c);
  const auto original = t.model().parameters();
  const auto restored = ck.model.parameters();
  ASSERT_EQ(original.size(), restored.size());
  for (std::size_t i = 0; i < original.size(); ++i) EXPECT_EQ(original[i]->value, restored[i]->value);
  save_checkpoint(dir / "b.bin", ck.config, ck.model, ck.optimizer, ck.epoch, ck.rng);
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  fs::remove_all(dir);
}

TEST(Checkpoint, RefusesMismatchedConfig) {
  const Dataset ds = ingest_manifest(tiny_data());
  const RunConfig c = config_for_dataset(tiny_config(), ds);
  Trainer t(c, ds);
  const fs::path dir = scratch("ckpt_hash");
  fs::create_directories(dir);
  save_checkpoint(dir / "a.bin", c, t.model(), t.optimizer(), t.epoch(), t.rng());
  RunConfig other = c;
  other.loss.margin = 0.5;
  EXPECT_THROW(load_checkpoint(dir / "a.bin", config_hash(other)), ValidationError);
  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), IoError);
  fs::remove_all(dir);
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  std::ostringstream log;
  const fs::path straight = scratch("straight");
  cmd_train(tiny_config(), tiny_data(), straight, std::nullopt, log);

  // Interrupted run: one epoch, then resume from its checkpoint.
  const Dataset ds = ingest_manifest(tiny_data());
  const RunConfig c = config_for_dataset(tiny_config(), ds);
  Trainer t(c, ds);
  t.run_epoch();
  const fs::path resumed = scratch("resumed");
  fs::create_directories(resumed);
  save_checkpoint(resumed / "epoch1.bin", c, t.model(), t.optimizer(), t.epoch(), t.rng());
  cmd_train(tiny_config(), tiny_data(), resumed, resumed / "epoch1.bin", log);

  EXPECT_EQ(slurp(straight / kCheckpointFile), slurp(resumed / kCheckpointFile));
  const auto a = lines(straight / kTrainLogFile);
  const auto b = lines(resumed / kTrainLogFile);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(a.back(), b.back());
  fs::remove_all(straight);
  fs::remove_all(resumed);
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    run_ = new fs::path(scratch("pipeline_run"));
    std::ostringstream log;
    cmd_train(tiny_config(), tiny_data(), *run_, std::nullopt, log);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*run_);
    delete run_;
  }
  static fs::path ckpt() { return *run_ / kCheckpointFile; }
  static fs::path* run_;
};
fs::path* Pipeline::run_ = nullptr;

TEST_F(Pipeline, EvaluateWritesFourReportsWithoutPlots) {
  const fs::path out = scratch("eval");
  std::ostringstream log;
  const auto all = RunConfig{}.protocols;
  const EvaluateSummary s = cmd_evaluate(ckpt(), tiny_data(), all, false, out, 1, log);
  EXPECT_EQ(s.results.size(), 4u);
  std::size_t json = 0, svg = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    json += e.path().extension() == ".json";
    svg += e.path().extension() == ".svg";
  }
  EXPECT_EQ(json, 4u);
  EXPECT_EQ(svg, 0u);
  const auto j = nlohmann::json::parse(slurp(out / "report_same_activity_include_view.json"));
  for (const char* k : {"rank1", "rank5", "rank10", "mAP", "per_probe", "chance_rank1", "baselines"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_TRUE(j["baselines"].contains("fixed"));
  EXPECT_LE(j["rank1"].get<double>(), j["rank5"].get<double>());
  fs::remove_all(out);
}

TEST_F(Pipeline, EvaluatePlotsAndDeterminism) {
  const fs::path a = scratch("eval_a"), b = scratch("eval_b");
  std::ostringstream log;
  const std::vector<std::string> one{"cross_activity+exclude_view"};
  const EvaluateSummary s = cmd_evaluate(ckpt(), tiny_data(), one, true, a, 1, log);
  cmd_evaluate(ckpt(), tiny_data(), one, false, b, 1, log);
  EXPECT_TRUE(fs::exists(a / "cmc_cross_activity_exclude_view.svg"));
  EXPECT_TRUE(fs::exists(a / "loss_curves.svg"));
  EXPECT_EQ(s.plots.size(), 2u);
  EXPECT_EQ(slurp(a / "report_cross_activity_exclude_view.json"), slurp(b / "report_cross_activity_exclude_view.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_F(Pipeline, InferenceIsTextFree) {
  Checkpoint ck = load_checkpoint(ckpt());
  const Dataset ds = ingest_manifest(tiny_data());
  const auto plain = infer_all(ck.model, ds, 1);
  const auto poisoned = text_free_features(ck.model, ds, 2);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(plain[i].biometrics, poisoned[i].biometrics);
}

TEST_F(Pipeline, EvaluateInferenceOnlyDataset) {
  Dataset ds = ingest_manifest(tiny_data());
  ds.texts.clear();
  const fs::path data = scratch("notext");
  write_dataset(data, ds);
  const fs::path out = scratch("notext_eval");
  std::ostringstream log;
  EXPECT_EQ(cmd_evaluate(ckpt(), data, {"same_activity+include_view"}, false, out, 1, log).results.size(), 1u);
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST_F(Pipeline, InfeasibleProtocolSkipped) {
  Dataset ds = ingest_manifest(tiny_data());
  Dataset single;
  single = ds;
  single.samples.clear();
  single.texts.clear();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.samples[i].view == 0) {
      single.samples.push_back(ds.samples[i]);
      single.texts.push_back(ds.texts[i]);
    }
  }
  const fs::path data = scratch("oneview");
  write_dataset(data, single);
  const fs::path out = scratch("oneview_eval");
  std::ostringstream log;
  const EvaluateSummary s =
      cmd_evaluate(ckpt(), data, {"same_activity+include_view", "same_activity+exclude_view"}, false, out, 1, log);
  EXPECT_EQ(s.results.size(), 1u);
  EXPECT_EQ(s.skipped.size(), 1u);
  EXPECT_NE(log.str().find("warning"), std::string::npos);
  fs::remove_all(data);
  fs::remove_all(out);
}

TEST_F(Pipeline, DiagnoseWritesReportAndEmbeddings) {
  const fs::path out = scratch("diag");
  std::ostringstream log;
  const DiagnosticsReport r = cmd_diagnose(ckpt(), tiny_data(), out, 1, log);
  ASSERT_EQ(r.probes.size(), 6u);
  EXPECT_EQ(r.mutual_information.size(), 5u);
  // A probe needs two classes with at least five clips each on the held-out rows.
  const Dataset ds = ingest_manifest(tiny_data());
  const auto rows = held_out_clips(ds, tiny_config());
  auto feasible = [&](const std::string& target) {
    std::map<int, int> counts;
    for (std::size_t i : rows) ++counts[target == "identity" ? ds.samples[i].identity : ds.samples[i].action];
    if (counts.size() < 2) return false;
    for (const auto& [label, n] : counts) {
      if (n < 5) return false;
    }
    return true;
  };
  for (const auto& p : r.probes) {
    if (feasible(p.target)) {
      EXPECT_TRUE(p.skipped.empty()) << p.feature << " " << p.target;
      EXPECT_GT(p.chance, 0.0);
    } else {
      EXPECT_FALSE(p.skipped.empty()) << p.feature << " " << p.target;
      EXPECT_NE(log.str().find("skipped"), std::string::npos);
    }
  }
  EXPECT_TRUE(fs::exists(out / "diagnostics.json"));
  const auto emb = read_embeddings(out / "embeddings.bin");
  EXPECT_EQ(emb.size(), ingest_manifest(tiny_data()).size());
  EXPECT_THROW(cmd_diagnose(out / "missing.bin", tiny_data(), out, 1, log), IoError);
  fs::remove_all(out);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DISENQ_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path cfg = dir / "c.json";
  std::ofstream(cfg) << serialize_config(tiny_config());
  std::ofstream(dir / "bad.json") << R"({"world": {"num_identities": 0}})";

  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("generate"), 1);
  EXPECT_EQ(run_cli("generate --config " + (dir / "bad.json").string() + " --out " + (dir / "d0").string()), 2);
  EXPECT_EQ(run_cli("generate --config " + cfg.string() + " --out " + (dir / "d").string()), 0);
  EXPECT_EQ(run_cli("generate --config " + cfg.string() + " --out " + (dir / "d").string()), 2);
  EXPECT_EQ(run_cli("generate --config " + cfg.string() + " --out " + (dir / "d").string() + " --force"), 0);
  EXPECT_EQ(run_cli("evaluate --ckpt " + (dir / "missing.bin").string() + " --data " + (dir / "d").string()), 2);
  EXPECT_EQ(run_cli("evaluate --ckpt x --data " + (dir / "d").string() + " --protocols sideways"), 2);

  // Default output root comes from the environment.
  const std::string env = std::string("DISENQ_OUTPUT_ROOT=") + (dir / "root").string() + " ";
  const int status = std::system((env + DISENQ_CLI_PATH + " generate --config " + cfg.string() + " > /dev/null 2>&1").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_TRUE(fs::exists(dir / "root" / "data" / "manifest.json"));
  fs::remove_all(dir);
}

}  // namespace
