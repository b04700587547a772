#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cdrsteer/kernels.hpp"
#include "cdrsteer/pipeline.hpp"

namespace {

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad --alpha-grid entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Branch-point localization, direction extraction and calibrated steering on a toy transformer"};
  std::string config_path;
  std::string stage = "pipeline";
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string alpha_grid;
  std::string template_path;
  app.add_option("--config", config_path, "JSON configuration file (defaults apply when omitted)");
  app.add_option("--stage", stage, "probe, ffn_scan, branch, binary, extract, steer, evaluate or pipeline")
      ->capture_default_str();
  app.add_option("--out", out_dir, "Artifact directory (overrides out_dir)");
  app.add_option("--seed", seed, "Model seed override");
  app.add_option("--alpha-grid", alpha_grid, "Comma-separated α_U values, e.g. 0,0.5,1");
  app.add_option("--write-template", template_path, "Write the default configuration to PATH and exit");
  CLI11_PARSE(app, argc, argv);

  try {
    cdrsteer::kernels::configure_threads_from_env();
    if (!template_path.empty()) {
      std::ofstream out(template_path);
      if (!out) throw std::runtime_error("cannot write " + template_path);
      out << cdrsteer::config_template();
      return 0;
    }

    cdrsteer::PipelineConfig config = config_path.empty() ? cdrsteer::PipelineConfig{} : cdrsteer::load_config(config_path);
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (seed) config.model.seed = *seed;
    if (!alpha_grid.empty()) config.alpha_grid = parse_grid(alpha_grid);
    config.validate();

    cdrsteer::run_stage(config, cdrsteer::parse_stage(stage), &std::cout);
    return 0;
  } catch (const cdrsteer::ArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
