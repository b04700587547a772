#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdrsteer/pipeline.hpp"

using namespace cdrsteer;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cdrsteer_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig small_config(const fs::path& out) {
  PipelineConfig c;
  c.n_steer = 32;
  c.n_eval = 16;
  c.out_dir = out;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CDR_STEER_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  PipelineConfig c;
  c.tau = 0.8;
  c.alpha_grid = {0.0, 0.5, 1.0};
  c.steering.site = SteeringSite::FfnDownOutput;
  c.steering.single_layer = 3;
  c.std_convention = StdConvention::Sample;
  const PipelineConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.plant, c.plant);
  EXPECT_EQ(back.steering.single_layer, 3);
}

TEST(Config, MissingKeysKeepDefaultsUnknownKeysRejected) {
  const PipelineConfig c = config_from_json(nlohmann::json::parse(R"({"thresholds": {"tau": 0.5}})"));
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.n_probe, PipelineConfig{}.n_probe);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"thresholds": {"tua": 0.5}})")), std::invalid_argument);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"bogus": 1})")), std::invalid_argument);
}

TEST(Config, ValidationRejectsBadValues) {
  PipelineConfig c;
  c.alpha_grid = {0.0, 1.5};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = PipelineConfig{};
  c.gen_steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = PipelineConfig{};
  c.steering.k = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, HashIgnoresOutputDirectory) {
  PipelineConfig a;
  PipelineConfig b;
  b.out_dir = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.tau = 0.9;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, TemplateParsesToDefaults) {
  const PipelineConfig c = config_from_json(nlohmann::json::parse(config_template()));
  EXPECT_EQ(config_hash(c), config_hash(PipelineConfig{}));
}

TEST(Config, StageNames) {
  for (Stage s : {Stage::Probe, Stage::FfnScan, Stage::Branch, Stage::Binary, Stage::Extract, Stage::Steer,
                  Stage::Evaluate, Stage::Pipeline})
    EXPECT_EQ(parse_stage(stage_name(s)), s);
  EXPECT_THROW(parse_stage("train"), std::invalid_argument);
}

TEST(Pipeline, SteerWithoutDirectionsNamesTheArtifact) {
  const PipelineConfig c = small_config(scratch("missing"));
  try {
    run_stage(c, Stage::Steer);
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("directions.json"), std::string::npos);
  }
}

TEST(Pipeline, EndToEndReportAndHashCheck) {
  PipelineConfig c = small_config(scratch("e2e"));
  run_stage(c, Stage::Pipeline);
  for (std::string_view name :
       {artifact::head_scores, artifact::probe_data_u, artifact::probe_data_d, artifact::probe_weights,
        artifact::ffn_selection, artifact::branch_points, artifact::binary_traces_u, artifact::binary_traces_d,
        artifact::directions, artifact::steer_manifest, artifact::audit_log, artifact::eval_records,
        artifact::calibration_report, artifact::calibration_summary})
    EXPECT_TRUE(fs::exists(c.out_dir / std::string(name))) << name;

  std::ifstream report(c.out_dir / std::string(artifact::calibration_report));
  std::string line;
  std::getline(report, line);
  EXPECT_EQ(line, "# schema=1 config_hash=" + config_hash(c));
  std::getline(report, line);
  EXPECT_EQ(line, "alpha_u,mean_u_op,u_ip,deviation_pp,incr");
  int rows = 0;
  while (std::getline(report, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 11);

  const auto summary = nlohmann::json::parse(slurp(c.out_dir / std::string(artifact::calibration_summary)));
  EXPECT_EQ(summary.at("config_hash"), config_hash(c));
  EXPECT_TRUE(summary.at("payload").contains("mae_pp"));

  c.tau = 0.9;
  try {
    run_stage(c, Stage::Steer);
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("config hash mismatch"), std::string::npos);
  }
}

TEST(Pipeline, DeterministicAcrossOutputDirectories) {
  const PipelineConfig a = small_config(scratch("det_a"));
  const PipelineConfig b = small_config(scratch("det_b"));
  run_stage(a, Stage::Pipeline);
  run_stage(b, Stage::Pipeline);
  for (std::string_view name : {artifact::calibration_report, artifact::audit_log, artifact::directions})
    EXPECT_EQ(slurp(a.out_dir / std::string(name)), slurp(b.out_dir / std::string(name))) << name;
}

TEST(Pipeline, CorruptArtifactIsReported) {
  const PipelineConfig c = small_config(scratch("corrupt"));
  for (Stage s : {Stage::Probe, Stage::FfnScan, Stage::Branch, Stage::Binary, Stage::Extract}) run_stage(c, s);
  {
    std::ofstream out(c.out_dir / std::string(artifact::directions), std::ios::trunc);
    out << "{not json";
  }
  try {
    run_stage(c, Stage::Steer);
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("corrupt artifact"), std::string::npos);
  }
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  EXPECT_EQ(run_cli("--stage steer --out " + dir.string()), 3);
  EXPECT_EQ(run_cli("--stage nonsense --out " + dir.string()), 2);
  EXPECT_EQ(run_cli("--alpha-grid 0,2 --out " + dir.string()), 2);
  const fs::path tmpl = dir / "template.json";
  fs::create_directories(dir);
  EXPECT_EQ(run_cli("--write-template " + tmpl.string()), 0);
  EXPECT_EQ(config_hash(load_config(tmpl)), config_hash(PipelineConfig{}));
  EXPECT_EQ(run_cli("--config " + tmpl.string() + " --stage probe --out " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / std::string(artifact::head_scores)));
}
