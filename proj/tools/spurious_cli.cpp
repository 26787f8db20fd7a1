#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spurious/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<double> sigmas;
  std::optional<double> k_fraction;
  std::vector<int> classes;
  std::optional<int> epochs;
  std::string study = "discovery";
  std::size_t images_per_class = 200;
};

spurious::PipelineConfig resolve(const Flags& f) {
  spurious::PipelineConfig c = f.config.empty() ? spurious::PipelineConfig{} : spurious::PipelineConfig::load(f.config);
  if (!f.dataset.empty()) c.dataset = f.dataset;
  if (!f.out.empty()) c.out = f.out;
  if (f.seed) c.seed = *f.seed;
  if (!f.sigmas.empty()) c.sigmas = f.sigmas;
  if (f.k_fraction) c.k_fraction = *f.k_fraction;
  if (!f.classes.empty()) c.classes = f.classes;
  if (f.epochs) c.epochs = *f.epochs;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spurious feature discovery pipeline"};
  app.require_subcommand(1);
  Flags flags;

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"synth", "Write the synthetic watermark fixture dataset"},
      {"train-robust", "Train an l2 adversarially robust model"},
      {"extract", "Extract penultimate features and predictions"},
      {"importance", "Compute feature importance and per-class accuracy"},
      {"select-classes", "Select the class subset to annotate"},
      {"visualize", "Render images, heatmaps and feature attacks"},
      {"build-sets", "Build top-k feature image sets"},
      {"build-hits", "Create annotation HITs"},
      {"simulate", "Answer open HITs with simulated annotators"},
      {"serve", "Serve the annotation API (bind address from SPURIOUS_ANNOTATION_ADDR)"},
      {"aggregate", "Aggregate responses into verdicts"},
      {"build-dataset", "Assemble the causal dataset with masks"},
      {"evaluate", "Causal/spurious accuracy and sensitivity under corruption"},
      {"report", "Write plot data series"},
  };
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "JSON pipeline config")->check(CLI::ExistingFile);
    sub->add_option("--dataset", flags.dataset, "Image folder dataset");
    sub->add_option("--out", flags.out, "Output root");
    sub->add_option("--seed", flags.seed, "Random seed");
    sub->add_option("--sigma", flags.sigmas, "Noise level (repeatable)");
    sub->add_option("--k-fraction", flags.k_fraction, "Feature set size as a fraction of the class");
    sub->add_option("--classes", flags.classes, "Explicit class subset")->delimiter(',');
    sub->add_option("--epochs", flags.epochs, "Training epochs");
    if (name == "build-hits" || name == "simulate") {
      sub->add_option("--study", flags.study, "discovery or validation")
          ->check(CLI::IsMember({"discovery", "validation"}));
    }
    if (name == "synth") sub->add_option("--images-per-class", flags.images_per_class, "Images per class");
  }

  CLI11_PARSE(app, argc, argv);
  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    const spurious::PipelineConfig config = resolve(flags);
    spurious::StageOptions options;
    options.study = flags.study;
    options.synth_images_per_class = flags.images_per_class;
    spurious::run_stage(stage, config, options, std::cout);
  } catch (const spurious::MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << stage << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
