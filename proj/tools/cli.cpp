#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "microid/data_core.hpp"
#include "microid/ensemble.hpp"
#include "microid/error.hpp"
#include "microid/evaluation.hpp"
#include "microid/gradcam.hpp"
#include "microid/slowfast.hpp"
#include "microid/synth.hpp"
#include "microid/training.hpp"

namespace microid::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Accepts "0.125" or "1/8".
double parse_ratio(const std::string& text) {
  const auto slash = text.find('/');
  try {
    std::size_t used = 0;
    if (slash == std::string::npos) {
      const double v = std::stod(text, &used);
      if (used == text.size()) return v;
    } else {
      const std::string num = text.substr(0, slash);
      const std::string den = text.substr(slash + 1);
      std::size_t un = 0, ud = 0;
      const double n = std::stod(num, &un);
      const double d = std::stod(den, &ud);
      if (un == num.size() && ud == den.size() && d != 0.0) return n / d;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(fmt::format("not a number or fraction: '{}'", text));
}

FrameSize parse_frame_size(const std::string& text) {
  const auto x = text.find_first_of("xX");
  auto to_int = [&](std::string_view s) {
    int v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || v <= 0)
      throw ConfigError(fmt::format("bad frame size '{}', expected HxW", text));
    return v;
  };
  const std::string_view sv(text);
  if (x == std::string::npos) {
    const int side = to_int(sv);
    return {side, side};
  }
  return {to_int(sv.substr(0, x)), to_int(sv.substr(x + 1))};
}

void echo(std::ostream& out, const json& config) { out << config.dump(2) << "\n"; }

// ---------------------------------------------------------------- data

struct DataOptions {
  std::string root;
  std::string frame_size;
  int channels = 1;
  int window = kDefaultWindow;
  double split_ratio = 0.5;
  std::uint64_t split_seed = 0;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.root, "Dataset directory or JSON-lines manifest")
      ->envname(kDataRootEnv);
  cmd->add_option("--frame-size", d.frame_size, "Resize target HxW (default: from the dataset)");
  cmd->add_option("--channels", d.channels, "1 (gray) or 3 (color)")
      ->check(CLI::IsMember({1, 3}));
  cmd->add_option("--window", d.window, "Frames per clip")->check(CLI::PositiveNumber);
  cmd->add_option("--split-ratio", d.split_ratio, "Training share of every subject's clips");
  cmd->add_option("--split-seed", d.split_seed, "Seed of the train/test split");
}

void validate_data(const DataOptions& d) {
  if (d.root.empty())
    throw ConfigError(fmt::format("no dataset given (--data or {})", kDataRootEnv));
  if (!(d.split_ratio > 0.0 && d.split_ratio < 1.0))
    throw ConfigError(fmt::format("split ratio must lie in (0, 1), got {}", d.split_ratio));
  if (!d.frame_size.empty()) parse_frame_size(d.frame_size);
}

json data_json(const DataOptions& d) {
  return {{"root", d.root},
          {"frame_size", d.frame_size.empty() ? json(nullptr) : json(d.frame_size)},
          {"channels", d.channels},
          {"window", d.window},
          {"split_ratio", d.split_ratio},
          {"split_seed", d.split_seed}};
}

DatasetManifest load_dataset(const DataOptions& d) {
  const fs::path root(d.root);
  std::optional<FrameSize> size;
  if (!d.frame_size.empty()) size = parse_frame_size(d.frame_size);
  if (fs::is_directory(root)) {
    if (!size && fs::exists(root / kSynthConfigFile)) return load_synth_manifest(root);
    return load_manifest(root / kManifestFile, size);
  }
  if (!fs::exists(root)) throw IoError(fmt::format("dataset not found: {}", root.string()));
  return load_manifest(root, size);
}

struct LoadedSplit {
  DatasetManifest manifest;
  DatasetManifest train;
  DatasetManifest test;
};

LoadedSplit load_split(const DataOptions& d) {
  LoadedSplit s;
  s.manifest = load_dataset(d);
  std::tie(s.train, s.test) = split_dataset(s.manifest, d.split_ratio, d.split_seed);
  return s;
}

std::map<int, int> subject_names(const DatasetManifest& m) {
  std::map<int, int> names;
  for (const auto& [original, label] : m.label_map) names[label] = original;
  return names;
}

// ---------------------------------------------------------------- model / solver

struct ModelOptions {
  int alpha = 16;
  std::string beta = "1/16";
  int base = 32;
  std::vector<int> stages{1, 1, 1};
  bool no_feature_norm = false;
  std::uint64_t seed = 0;
};

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--alpha", m.alpha, "Fast/slow frame ratio");
  cmd->add_option("--beta", m.beta, "Fast/slow channel ratio, e.g. 0.125 or 1/8");
  cmd->add_option("--base", m.base, "Slow-pathway width of the first stage");
  cmd->add_option("--stages", m.stages, "Residual blocks per stage")->delimiter(',');
  cmd->add_flag("--no-feature-norm", m.no_feature_norm,
                "Feed pooled features to the classifier unnormalized");
  cmd->add_option("--model-seed", m.seed, "Weight initialization seed");
}

ModelConfig make_model_config(const ModelOptions& m, const DataOptions& d, FrameSize size,
                              int num_classes, bool validate = true) {
  ModelConfig c;
  c.alpha = m.alpha;
  c.beta = parse_ratio(m.beta);
  c.base_channels = m.base;
  c.stage_depths = m.stages;
  c.feature_norm = !m.no_feature_norm;
  c.seed = m.seed;
  c.num_classes = num_classes;
  c.input_shape = InputShape{d.window, size.height, size.width, d.channels};
  if (validate) c.validate();
  return c;
}

// Checks flags that do not depend on the dataset, using a stand-in frame size
// and class count.
void prevalidate_model(const ModelOptions& m, const DataOptions& d) {
  FrameSize size{64, 64};
  if (!d.frame_size.empty()) size = parse_frame_size(d.frame_size);
  make_model_config(m, d, size, 2);
}

struct SolverOptions {
  std::string solver = "adam";
  double lr = 0.001;
  int batch = 16;
  int epochs = 30;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

void add_solver_options(CLI::App* cmd, SolverOptions& s) {
  cmd->add_option("--solver", s.solver, "adam or adamw");
  cmd->add_option("--lr", s.lr, "Learning rate");
  cmd->add_option("--batch", s.batch, "Mini-batch size");
  cmd->add_option("--epochs", s.epochs, "Training epochs");
  cmd->add_option("--weight-decay", s.weight_decay, "Decoupled weight decay (adamw)");
  cmd->add_option("--seed", s.seed, "Seed of the batch order");
}

SolverConfig make_solver_config(const SolverOptions& s) {
  SolverConfig c;
  c.solver = parse_solver(s.solver);
  c.learning_rate = s.lr;
  c.batch_size = s.batch;
  c.epochs = s.epochs;
  c.weight_decay = s.weight_decay;
  c.seed = s.seed;
  c.validate();
  return c;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError(fmt::format("cannot create directory {}: {}", dir.string(), ec.message()));
}

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

// Model input must agree with the clips the data flags produce.
void check_compatible(const Model& model, const DatasetManifest& manifest, const DataOptions& d) {
  const ModelConfig& c = model.config();
  const InputShape want{d.window, manifest.target_size.height, manifest.target_size.width,
                        d.channels};
  if (c.input_shape != want) {
    throw ShapeError(fmt::format(
        "checkpoint {} expects {} frames of {}x{}x{}, the data gives {} frames of {}x{}x{}",
        hex(model.fingerprint()), c.input_shape.frames, c.input_shape.height,
        c.input_shape.width, c.input_shape.channels, want.frames, want.height, want.width,
        want.channels));
  }
  if (c.num_classes != manifest.num_classes()) {
    throw ShapeError(fmt::format("checkpoint {} has {} classes, the dataset has {} subjects",
                                 hex(model.fingerprint()), c.num_classes,
                                 manifest.num_classes()));
  }
}

// ---------------------------------------------------------------- synth

struct SynthOptions {
  std::string out;
  int paths = 4;
  int subjects = 0;
  int clips = 20;
  std::string size = "64x64";
  int window = kDefaultWindow;
  int span = 15;
  double sigma = 3.0;
  double amplitude = 0.4;
  double noise = 0.02;
  int start_jitter = 3;
  double amplitude_jitter = 0.1;
  std::string pairing = "forward_reverse";
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthOptions& o, int jobs, std::ostream& out, std::ostream& err) {
  SynthConfig c;
  c.num_paths = o.paths;
  if (o.subjects != 0) {
    if (o.subjects % 2 != 0)
      throw ConfigError(fmt::format("--subjects must be even (two per path), got {}", o.subjects));
    c.num_paths = o.subjects / 2;
  }
  c.clips_per_subject = o.clips;
  c.frame_size = parse_frame_size(o.size);
  c.window = o.window;
  c.motion_span = o.span;
  c.blob_sigma = o.sigma;
  c.blob_amplitude = o.amplitude;
  c.noise_std = o.noise;
  c.start_jitter = o.start_jitter;
  c.amplitude_jitter = o.amplitude_jitter;
  c.pairing = parse_pairing(o.pairing);
  c.seed = o.seed;
  c.validate();
  if (o.out.empty()) throw ConfigError("--out is required");

  echo(out, {{"command", "synth"}, {"out", o.out}, {"jobs", jobs}, {"synth", c}});
  const DatasetManifest m = generate_dataset(c, o.out, jobs);
  err << fmt::format("wrote {} clips of {} subjects to {}\n", m.entries.size(), m.num_classes(),
                     o.out);
  out << json{{"subjects", m.num_classes()},
              {"clips", m.entries.size()},
              {"manifest", (fs::path(o.out) / kManifestFile).string()}}
             .dump()
      << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainCmdOptions {
  DataOptions data;
  ModelOptions model;
  SolverOptions solver;
  std::string out;
};

int cmd_train(const TrainCmdOptions& o, int jobs, std::ostream& out, std::ostream& err) {
  validate_data(o.data);
  prevalidate_model(o.model, o.data);
  const SolverConfig solver = make_solver_config(o.solver);
  if (o.out.empty()) throw ConfigError("--out is required");

  const LoadedSplit split = load_split(o.data);
  const ModelConfig model =
      make_model_config(o.model, o.data, split.manifest.target_size, split.manifest.num_classes());
  echo(out, {{"command", "train"},
             {"data", data_json(o.data)},
             {"model", model},
             {"solver", solver},
             {"out", o.out},
             {"jobs", jobs}});
  ensure_directory(o.out);

  const std::vector<ClipTensor> train = load_clips(split.train, o.data.window, o.data.channels);
  const std::vector<ClipTensor> test = load_clips(split.test, o.data.window, o.data.channels);
  err << fmt::format("training on {} clips, testing on {}\n", train.size(), test.size());

  TrainOptions options;
  options.jobs = jobs;
  options.on_epoch = [&err, total = solver.epochs](const EpochRecord& r) {
    err << fmt::format("epoch {:3d}/{}  loss {:.4f}  train {:.1f}%\n", r.epoch, total, r.loss,
                       r.train_accuracy);
  };
  TrainResult result = train_model(model, solver, train, {}, options);
  const EvaluationReport report = evaluate_model(result.model, test, jobs);
  result.report.test_accuracy = report.rank1;

  const fs::path dir(o.out);
  save_checkpoint(result.model, dir / "model.ckpt");
  write_train_report(result.report, dir / "train_report.json");
  write_report(report, dir / "eval_report.json");
  err << format_report(report, "test split", subject_names(split.manifest));
  out << json{{"checkpoint", (dir / "model.ckpt").string()},
              {"fingerprint", hex(result.model.fingerprint())},
              {"parameter_digest", hex(parameter_digest(result.model))},
              {"test_rank1", report.rank1}}
             .dump()
      << "\n";
  return 0;
}

// ---------------------------------------------------------------- grid

struct GridCmdOptions {
  DataOptions data;
  ModelOptions model;
  SolverOptions solver;
  std::vector<std::string> alphas{"4", "16"};
  std::vector<std::string> betas{"1/8", "1/16"};
  std::vector<std::string> solvers{"adam", "adamw"};
  std::vector<std::string> batches{"16", "32"};
  std::vector<std::string> lrs;
  std::uint64_t root_seed = 0;
  bool dry_run = false;
  std::string out;
};

// A list flag given without values ("--alphas" or "--alphas=") is an empty list.
template <typename F>
auto parse_list(const std::vector<std::string>& items, F parse) {
  std::vector<decltype(parse(std::string()))> out;
  for (const std::string& item : items)
    if (!item.empty()) out.push_back(parse(item));
  return out;
}

int parse_int(const std::string& text) {
  int v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size())
    throw ConfigError(fmt::format("not an integer: '{}'", text));
  return v;
}

std::vector<GridCell> build_space(const GridCmdOptions& o, const ModelConfig& base_model,
                                  const SolverConfig& base_solver) {
  const std::vector<int> alphas = parse_list(o.alphas, parse_int);
  const std::vector<double> betas = parse_list(o.betas, parse_ratio);
  const std::vector<Solver> solvers = parse_list(o.solvers, parse_solver);
  const std::vector<int> batches = parse_list(o.batches, parse_int);
  std::vector<double> lrs = parse_list(o.lrs, parse_ratio);
  if (o.lrs.empty()) lrs.push_back(base_solver.learning_rate);

  std::vector<GridCell> cells;
  for (int alpha : alphas)
    for (double beta : betas)
      for (Solver solver : solvers)
        for (int batch : batches)
          for (double lr : lrs) {
            GridCell cell{base_model, base_solver};
            cell.model.alpha = alpha;
            cell.model.beta = beta;
            cell.solver.solver = solver;
            cell.solver.batch_size = batch;
            cell.solver.learning_rate = lr;
            cells.push_back(cell);
          }
  if (cells.empty()) throw ConfigError("the grid has no cells");
  return cells;
}

int cmd_grid(const GridCmdOptions& o, int jobs, std::ostream& out, std::ostream& err) {
  validate_data(o.data);
  const SolverConfig base_solver = make_solver_config(o.solver);
  if (!o.dry_run && o.out.empty()) throw ConfigError("--out is required");

  const LoadedSplit split = load_split(o.data);
  // Cells that fail validation stay in the grid and rank last.
  const ModelConfig base_model = make_model_config(o.model, o.data, split.manifest.target_size,
                                                   split.manifest.num_classes(), false);
  const std::vector<GridCell> space = build_space(o, base_model, base_solver);

  json cells = json::array();
  for (const GridCell& cell : space) {
    const GridCell seeded = seed_cell(cell, o.root_seed);
    std::string problem;
    try {
      cell.model.validate();
    } catch (const ConfigError& e) {
      problem = e.what();
    }
    cells.push_back({{"hash", hex(cell_hash(cell))},
                     {"valid", problem.empty()},
                     {"problem", problem},
                     {"alpha", cell.model.alpha},
                     {"beta", cell.model.beta},
                     {"solver", solver_name(cell.solver.solver)},
                     {"batch", cell.solver.batch_size},
                     {"lr", cell.solver.learning_rate},
                     {"model_seed", seeded.model.seed},
                     {"solver_seed", seeded.solver.seed}});
  }
  echo(out, {{"command", "grid"},
             {"data", data_json(o.data)},
             {"base_model", base_model},
             {"base_solver", base_solver},
             {"root_seed", o.root_seed},
             {"dry_run", o.dry_run},
             {"out", o.out},
             {"jobs", jobs},
             {"cells", cells}});
  if (o.dry_run) return 0;
  err << fmt::format("grid of {} cells\n", space.size());

  ensure_directory(o.out);
  const std::vector<ClipTensor> train = load_clips(split.train, o.data.window, o.data.channels);
  const std::vector<ClipTensor> val = load_clips(split.test, o.data.window, o.data.channels);

  GridOptions options;
  options.root_seed = o.root_seed;
  options.jobs = jobs;
  options.checkpoint_dir = fs::path(o.out) / "checkpoints";
  options.on_cell = [&err](const GridResult& r) {
    if (r.accuracy)
      err << fmt::format("cell {} done: {:.2f}%\n", hex(r.hash), *r.accuracy);
    else
      err << fmt::format("cell {} failed: {}\n", hex(r.hash), r.error);
  };
  const std::vector<GridResult> results = grid_search(space, train, val, options);
  const fs::path ranking = fs::path(o.out) / "grid.jsonl";
  write_grid_results(results, ranking);
  for (std::size_t i = 0; i < results.size(); ++i) {
    json line = results[i];
    line["rank"] = i + 1;
    line.erase("report");
    out << line.dump() << "\n";
  }
  err << fmt::format("ranking written to {}\n", ranking.string());
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalCmdOptions {
  DataOptions data;
  std::string checkpoint;
  std::string ensemble;
  std::vector<std::string> members;
  std::string policy = "soft";
  std::string split = "test";
  bool subsets = false;
  std::string report;
};

std::vector<ClipTensor> eval_clips(const LoadedSplit& s, const EvalCmdOptions& o) {
  const DatasetManifest* m = &s.test;
  if (o.split == "train") m = &s.train;
  if (o.split == "all") m = &s.manifest;
  return load_clips(*m, o.data.window, o.data.channels);
}

int cmd_eval(const EvalCmdOptions& o, int jobs, std::ostream& out, std::ostream& err) {
  validate_data(o.data);
  const int sources = int(!o.checkpoint.empty()) + int(!o.ensemble.empty()) + int(!o.members.empty());
  if (sources != 1)
    throw ConfigError("give exactly one of --checkpoint, --ensemble or --members");
  if (o.split != "test" && o.split != "train" && o.split != "all")
    throw ConfigError(fmt::format("unknown split '{}'", o.split));

  std::optional<EnsembleSpec> spec;
  if (!o.ensemble.empty()) spec = load_ensemble_spec(o.ensemble);
  if (!o.members.empty()) {
    spec = EnsembleSpec{};
    for (const std::string& p : o.members) spec->member_checkpoints.emplace_back(p);
    spec->policy = parse_policy(o.policy);
    spec->validate();
  }
  if (o.subsets && !spec) throw ConfigError("--subsets needs an ensemble");

  json echoed{{"command", "eval"}, {"data", data_json(o.data)}, {"split", o.split},
              {"jobs", jobs},      {"report", o.report}};
  if (spec) {
    echoed["ensemble"] = *spec;
    echoed["subsets"] = o.subsets;
  } else {
    echoed["checkpoint"] = o.checkpoint;
  }
  echo(out, echoed);

  const LoadedSplit split = load_split(o.data);
  std::vector<Model> models;
  if (spec) {
    models = load_members(*spec);
  } else {
    models.push_back(load_checkpoint(o.checkpoint));
  }
  for (const Model& m : models) check_compatible(m, split.manifest, o.data);
  const std::vector<ClipTensor> clips = eval_clips(split, o);
  err << fmt::format("evaluating {} model(s) on {} clips\n", models.size(), clips.size());

  EvaluationReport report = spec ? evaluate_ensemble(models, spec->policy, clips, jobs)
                                 : evaluate_model(models.front(), clips, jobs);
  const std::string title =
      fmt::format("{} split, {}", o.split,
                  spec ? fmt::format("{} members, {} vote", models.size(), policy_name(spec->policy))
                       : fmt::format("model {}", hex(models.front().fingerprint())));
  out << format_report(report, title, subject_names(split.manifest));

  if (o.subsets) {
    for (const std::vector<int>& subset : member_subsets(static_cast<int>(models.size()))) {
      std::vector<Model> chosen;
      for (int i : subset) chosen.push_back(models[static_cast<std::size_t>(i)]);
      const EvaluationReport r = evaluate_ensemble(chosen, spec->policy, clips, jobs);
      json line{{"members", subset}, {"rank1", r.rank1}, {"n_hits", r.n_hits}};
      out << line.dump() << "\n";
    }
  }
  if (!o.report.empty()) write_report(report, o.report);
  return 0;
}

// ---------------------------------------------------------------- gradcam

struct GradcamCmdOptions {
  DataOptions data;
  std::string checkpoint;
  std::string clip_id;
  std::optional<int> target;
  std::string pathway = "fast";
  std::string out;
  double max_alpha = 0.6;
  std::string raw;
};

int cmd_gradcam(const GradcamCmdOptions& o, int jobs, std::ostream& out, std::ostream& err) {
  validate_data(o.data);
  const Pathway pathway = parse_pathway(o.pathway);
  if (o.out.empty()) throw ConfigError("--out is required");
  if (!(o.max_alpha >= 0.0 && o.max_alpha <= 1.0))
    throw ConfigError(fmt::format("--max-alpha must lie in [0, 1], got {}", o.max_alpha));

  echo(out, {{"command", "gradcam"},
             {"data", data_json(o.data)},
             {"checkpoint", o.checkpoint},
             {"clip_id", o.clip_id},
             {"class", o.target ? json(*o.target) : json(nullptr)},
             {"pathway", pathway_name(pathway)},
             {"max_alpha", o.max_alpha},
             {"out", o.out},
             {"raw", o.raw},
             {"jobs", jobs}});

  const DatasetManifest manifest = load_dataset(o.data);
  const Model model = load_checkpoint(o.checkpoint);
  check_compatible(model, manifest, o.data);
  const auto it = std::find_if(manifest.entries.begin(), manifest.entries.end(),
                               [&](const ManifestEntry& e) { return e.clip_id == o.clip_id; });
  if (it == manifest.entries.end())
    throw DataError(fmt::format("clip '{}' is not in the manifest", o.clip_id));
  const ClipTensor clip = load_clip(*it, manifest.target_size, o.data.window, o.data.channels);

  const int target = o.target.value_or(it->label);
  const SaliencyMap map = compute_gradcam(model, clip, target, pathway);
  const std::vector<double> logits = model.forward(clip);
  const int predicted =
      static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const std::vector<fs::path> written = render_overlays(map, clip, o.out, {o.max_alpha});
  if (!o.raw.empty()) write_saliency(map, o.raw);
  err << fmt::format("{} overlay frames written to {}\n", written.size(), o.out);
  out << json{{"clip_id", clip.clip_id},
              {"true_class", it->label},
              {"target_class", target},
              {"predicted_class", predicted},
              {"pathway", pathway_name(pathway)},
              {"frames_written", written.size()},
              {"raw_shape",
               {map.raw.frames(), map.raw.height(), map.raw.width()}}}
             .dump()
      << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Identity recognition from facial micro-movements"};
  app.name("microid");
  app.set_config("--config", "", "INI or TOML file with option values; flags take precedence");
  app.require_subcommand(1);
  app.fallthrough();
  int jobs = 1;
  app.add_option("--jobs,-j", jobs, "Worker threads")->check(CLI::PositiveNumber);

  SynthOptions synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--paths", synth.paths, "Trajectories; two subjects each");
  synth_cmd->add_option("--subjects", synth.subjects, "Subjects (even); overrides --paths");
  synth_cmd->add_option("--clips", synth.clips, "Clips per subject");
  synth_cmd->add_option("--size", synth.size, "Frame size HxW");
  synth_cmd->add_option("--window", synth.window, "Frames per clip");
  synth_cmd->add_option("--span", synth.span, "Frames the motion lasts");
  synth_cmd->add_option("--sigma", synth.sigma, "Blob radius (Gaussian sigma, pixels)");
  synth_cmd->add_option("--amplitude", synth.amplitude, "Blob intensity");
  synth_cmd->add_option("--noise", synth.noise, "Pixel noise standard deviation");
  synth_cmd->add_option("--start-jitter", synth.start_jitter, "Motion start jitter (frames)");
  synth_cmd->add_option("--amplitude-jitter", synth.amplitude_jitter,
                        "Relative amplitude jitter");
  synth_cmd->add_option("--pairing", synth.pairing, "forward_reverse or distinct");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");

  TrainCmdOptions train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train one model and evaluate it");
  add_data_options(train_cmd, train.data);
  add_model_options(train_cmd, train.model);
  add_solver_options(train_cmd, train.solver);
  train_cmd->add_option("--out", train.out, "Output directory")->required();

  GridCmdOptions grid;
  CLI::App* grid_cmd = app.add_subcommand("grid", "Grid search over alpha, beta, solver, batch");
  add_data_options(grid_cmd, grid.data);
  add_model_options(grid_cmd, grid.model);
  add_solver_options(grid_cmd, grid.solver);
  grid_cmd->add_option("--alphas", grid.alphas, "Alpha values")->delimiter(',')->expected(0, -1);
  grid_cmd->add_option("--betas", grid.betas, "Beta values")->delimiter(',')->expected(0, -1);
  grid_cmd->add_option("--solvers", grid.solvers, "Solvers")->delimiter(',')->expected(0, -1);
  grid_cmd->add_option("--batches", grid.batches, "Batch sizes")->delimiter(',')->expected(0, -1);
  grid_cmd->add_option("--lrs", grid.lrs, "Learning rates (default: --lr)")->delimiter(',');
  grid_cmd->add_option("--root-seed", grid.root_seed, "Seed every cell is derived from");
  grid_cmd->add_flag("--dry-run", grid.dry_run, "List the cells and stop");
  grid_cmd->add_option("--out", grid.out, "Output directory");

  EvalCmdOptions eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or an ensemble");
  add_data_options(eval_cmd, eval.data);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint");
  eval_cmd->add_option("--ensemble", eval.ensemble, "Ensemble spec (JSON)");
  eval_cmd->add_option("--members", eval.members, "Member checkpoints")->delimiter(',');
  eval_cmd->add_option("--policy", eval.policy, "soft or hard (with --members)");
  eval_cmd->add_option("--split", eval.split, "test, train or all");
  eval_cmd->add_flag("--subsets", eval.subsets, "Also score every member subset");
  eval_cmd->add_option("--report", eval.report, "Write the report as JSON");

  GradcamCmdOptions cam;
  CLI::App* cam_cmd = app.add_subcommand("gradcam", "Saliency overlays for one clip");
  add_data_options(cam_cmd, cam.data);
  cam_cmd->add_option("--checkpoint", cam.checkpoint, "Model checkpoint")->required();
  cam_cmd->add_option("--clip-id", cam.clip_id, "Clip to explain")->required();
  cam_cmd->add_option("--class", cam.target, "Target class (default: the true class)");
  cam_cmd->add_option("--pathway", cam.pathway, "fast or slow");
  cam_cmd->add_option("--out", cam.out, "Overlay directory")->required();
  cam_cmd->add_option("--max-alpha", cam.max_alpha, "Overlay opacity at saliency 1");
  cam_cmd->add_option("--raw", cam.raw, "Also write the raw map as a packed tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(synth, jobs, out, err);
    if (train_cmd->parsed()) return cmd_train(train, jobs, out, err);
    if (grid_cmd->parsed()) return cmd_grid(grid, jobs, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval, jobs, out, err);
    if (cam_cmd->parsed()) return cmd_gradcam(cam, jobs, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}

}  // namespace microid::cli
