#include "microid/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "microid/evaluation.hpp"
#include "microid/parallel.hpp"
#include "microid/random.hpp"

namespace microid {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEpsilon = 1e-8;
constexpr double kStatsMomentum = 0.1;

void check_clips(const ModelConfig& config, std::span<const ClipTensor> clips, const Model& model,
                 const char* what) {
  for (const ClipTensor& clip : clips) {
    model.check_input(clip);
    if (clip.subject_id < 0 || clip.subject_id >= config.num_classes) {
      throw DataError(fmt::format("{} clip {}: label {} outside [0, {})", what, clip.clip_id,
                                  clip.subject_id, config.num_classes));
    }
  }
}

void add_into(Gradients& total, Gradients& part) {
  std::vector<std::span<double>> dst = total.arrays();
  std::vector<std::span<double>> src = part.arrays();
  for (std::size_t a = 0; a < dst.size(); ++a)
    for (std::size_t i = 0; i < dst[a].size(); ++i) dst[a][i] += src[a][i];
}

FeatureStats unbiased(FeatureStats st, std::size_t count) {
  const double n = static_cast<double>(count);
  for (double& v : st.variance) v *= n / (n - 1.0);
  return st;
}

FeatureStats blend_stats(const FeatureStats& running, const FeatureStats& batch,
                         std::size_t count) {
  FeatureStats out = unbiased(batch, count);
  for (std::size_t i = 0; i < out.mean.size(); ++i) {
    out.mean[i] = (1.0 - kStatsMomentum) * running.mean[i] + kStatsMomentum * out.mean[i];
    out.variance[i] =
        (1.0 - kStatsMomentum) * running.variance[i] + kStatsMomentum * out.variance[i];
  }
  return out;
}

}  // namespace

FeatureStats population_feature_stats(const Model& model, std::span<const ClipTensor> clips,
                                      int jobs) {
  if (clips.empty()) throw DataError("no clips for feature statistics");
  std::vector<std::vector<double>> pooled(clips.size());
  parallel_for(clips.size(), jobs,
               [&](std::size_t i) { pooled[i] = model.trace(clips[i]).pooled; });
  const std::size_t features = pooled[0].size();
  const double n = static_cast<double>(clips.size());
  FeatureStats st;
  st.mean.assign(features, 0.0);
  st.variance.assign(features, 0.0);
  for (const auto& p : pooled)
    for (std::size_t f = 0; f < features; ++f) st.mean[f] += p[f] / n;
  for (const auto& p : pooled)
    for (std::size_t f = 0; f < features; ++f) {
      const double d = p[f] - st.mean[f];
      st.variance[f] += d * d / n;
    }
  return st;
}

const char* solver_name(Solver s) { return s == Solver::kAdam ? "adam" : "adamw"; }

Solver parse_solver(const std::string& name) {
  if (name == "adam") return Solver::kAdam;
  if (name == "adamw") return Solver::kAdamW;
  throw ConfigError(fmt::format("unknown solver '{}' (expected adam or adamw)", name));
}

void SolverConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw ConfigError("weight decay must be non-negative");
}

void to_json(json& j, const SolverConfig& c) {
  j = json{{"solver", solver_name(c.solver)}, {"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},      {"epochs", c.epochs},
           {"weight_decay", c.weight_decay},  {"seed", c.seed}};
}

void from_json(const json& j, SolverConfig& c) {
  c = SolverConfig{};
  if (j.contains("solver")) c.solver = parse_solver(j.at("solver").get<std::string>());
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

Optimizer::Optimizer(const SolverConfig& config, const Model& model) : config_(config) {
  config_.validate();
  for (const ConstParameterView& p : model.parameters()) {
    m_.emplace_back(p.values.size(), 0.0);
    v_.emplace_back(p.values.size(), 0.0);
    decays_.push_back(config_.solver == Solver::kAdamW && p.name.ends_with(".weight"));
  }
}

void Optimizer::step(Model& model, Gradients& grads) {
  std::vector<ParameterView> params = model.parameters();
  std::vector<std::span<double>> g = grads.arrays();
  if (params.size() != m_.size() || g.size() != m_.size()) {
    throw ShapeError("optimizer state does not match the model");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  const double lr = config_.learning_rate;
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t a = 0; a < params.size(); ++a) {
    std::span<double> p = params[a].values;
    std::vector<double>& m = m_[a];
    std::vector<double>& v = v_[a];
    if (decays_[a]) {
      for (double& x : p) x *= decay;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[a][i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[a][i] * g[a][i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEpsilon);
    }
  }
}

void to_json(json& j, const EpochRecord& r) {
  j = json{{"epoch", r.epoch}, {"loss", r.loss}, {"train_accuracy", r.train_accuracy}};
}

void to_json(json& j, const TrainReport& r) {
  j = json{{"model", r.model},
           {"solver", r.solver},
           {"fingerprint", r.fingerprint},
           {"epochs", r.epochs},
           {"test_accuracy", r.test_accuracy ? json(*r.test_accuracy) : json(nullptr)},
           {"wall_seconds", r.wall_seconds}};
}

void write_train_report(const TrainReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write report {}", path.string()));
  out << json(report).dump(2) << "\n";
  if (!out) throw IoError(fmt::format("failed writing report {}", path.string()));
}

TrainResult train_model(const ModelConfig& config, const SolverConfig& solver,
                        std::span<const ClipTensor> train, std::span<const ClipTensor> test,
                        const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  solver.validate();
  if (train.empty()) throw DataError("training set is empty");
  Model model(config);
  check_clips(config, train, model, "training");
  check_clips(config, test, model, "test");

  Optimizer optimizer(solver, model);
  std::mt19937_64 rng(solver.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  const std::size_t batch = std::min<std::size_t>(solver.batch_size, train.size());
  std::vector<Gradients> sample_grads;
  for (std::size_t i = 0; i < batch; ++i) sample_grads.push_back(model.make_gradients());
  Gradients total = model.make_gradients();
  std::vector<ForwardTrace> traces(batch);
  std::vector<const ForwardTrace*> trace_ptrs;
  std::vector<int> labels;
  bool stats_seeded = false;

  TrainReport report;
  report.model = config;
  report.solver = solver;
  report.fingerprint = hex64(model.fingerprint());

  for (int epoch = 1; epoch <= solver.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long hits = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      parallel_for(count, options.jobs,
                   [&](std::size_t i) { traces[i] = model.trace(train[order[start + i]]); });
      trace_ptrs.clear();
      labels.clear();
      for (std::size_t i = 0; i < count; ++i) {
        trace_ptrs.push_back(&traces[i]);
        labels.push_back(train[order[start + i]].subject_id);
      }
      total.zero();
      BatchHeadResult head = model.batch_head(trace_ptrs, labels, total);
      if (!std::isfinite(head.loss)) {
        throw TrainingError(fmt::format(
            "non-finite loss at epoch {}, step {}; try a smaller learning rate", epoch,
            optimizer.steps() + 1));
      }
      parallel_for(count, options.jobs, [&](std::size_t i) {
        sample_grads[i].zero();
        model.trunk_backward(traces[i], head.pooled_grads[i], sample_grads[i]);
      });
      // the head already holds gradients of the batch mean; the trunk
      // gradients above were taken from it, so they sum without rescaling
      for (std::size_t i = 0; i < count; ++i) {
        add_into(total, sample_grads[i]);
        hits += argmax(head.logits[i]) == labels[i];
      }
      loss_sum += head.loss * static_cast<double>(count);
      optimizer.step(model, total);
      if (!head.batch_stats.mean.empty()) {
        model.set_feature_stats(stats_seeded
                                    ? blend_stats(model.feature_stats(), head.batch_stats, count)
                                    : unbiased(head.batch_stats, count));
        stats_seeded = true;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(train.size());
    rec.train_accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(train.size());
    report.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }

  for (const ParameterView& p : model.parameters()) {
    for (double v : p.values) {
      if (!std::isfinite(v)) throw TrainingError(fmt::format("parameter {} diverged", p.name));
    }
  }
  if (config.feature_norm && train.size() >= 2) {
    model.set_feature_stats(population_feature_stats(model, train, options.jobs));
  }
  if (!test.empty()) report.test_accuracy = evaluate_model(model, test, options.jobs).rank1;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return TrainResult{std::move(model), std::move(report)};
}

std::uint64_t cell_hash(const GridCell& cell) {
  ModelConfig model = cell.model;
  model.seed = 0;
  const std::string key = fmt::format(
      "{}|solver={}|lr={:.17g}|batch={}|epochs={}|wd={:.17g}", json(model).dump(),
      solver_name(cell.solver.solver), cell.solver.learning_rate, cell.solver.batch_size,
      cell.solver.epochs, cell.solver.weight_decay);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<GridCell> default_grid(const ModelConfig& base_model, const SolverConfig& base_solver) {
  std::vector<GridCell> cells;
  for (int alpha : {4, 16})
    for (double beta : {1.0 / 8.0, 1.0 / 16.0})
      for (Solver solver : {Solver::kAdam, Solver::kAdamW})
        for (int batch : {16, 32}) {
          GridCell cell{base_model, base_solver};
          cell.model.alpha = alpha;
          cell.model.beta = beta;
          cell.solver.solver = solver;
          cell.solver.batch_size = batch;
          cells.push_back(cell);
        }
  return cells;
}

GridCell seed_cell(const GridCell& cell, std::uint64_t root_seed) {
  const std::uint64_t h = cell_hash(cell);
  GridCell seeded = cell;
  seeded.model.seed = mix_seed(root_seed, h);
  seeded.solver.seed = mix_seed(root_seed, h ^ 0x5bd1e995ULL);
  return seeded;
}

bool grid_rank_before(const GridResult& a, const GridResult& b) {
  if (a.accuracy.has_value() != b.accuracy.has_value()) return a.accuracy.has_value();
  if (a.accuracy && *a.accuracy != *b.accuracy) return *a.accuracy > *b.accuracy;
  if (a.cell.model.alpha != b.cell.model.alpha) return a.cell.model.alpha < b.cell.model.alpha;
  if (a.cell.model.beta != b.cell.model.beta) return a.cell.model.beta < b.cell.model.beta;
  const std::string sa = solver_name(a.cell.solver.solver);
  const std::string sb = solver_name(b.cell.solver.solver);
  if (sa != sb) return sa < sb;
  if (a.cell.solver.batch_size != b.cell.solver.batch_size)
    return a.cell.solver.batch_size < b.cell.solver.batch_size;
  if (a.cell.solver.learning_rate != b.cell.solver.learning_rate)
    return a.cell.solver.learning_rate < b.cell.solver.learning_rate;
  return a.hash < b.hash;
}

std::vector<GridResult> grid_search(std::span<const GridCell> space,
                                    std::span<const ClipTensor> train,
                                    std::span<const ClipTensor> val, const GridOptions& options) {
  if (space.empty()) throw ConfigError("grid search space is empty");
  if (val.empty()) throw DataError("grid search needs a non-empty validation set");
  if (options.checkpoint_dir) fs::create_directories(*options.checkpoint_dir);

  std::vector<GridResult> results(space.size());
  std::mutex report_mutex;
  parallel_for(space.size(), options.jobs, [&](std::size_t i) {
    GridResult& r = results[i];
    r.hash = cell_hash(space[i]);
    r.cell = seed_cell(space[i], options.root_seed);
    try {
      TrainResult trained = train_model(r.cell.model, r.cell.solver, train, {});
      r.accuracy = evaluate_model(trained.model, val).rank1;
      trained.report.test_accuracy = r.accuracy;
      r.report = std::move(trained.report);
      if (options.checkpoint_dir) {
        save_checkpoint(trained.model, *options.checkpoint_dir / (hex64(r.hash) + ".ckpt"));
      }
    } catch (const std::exception& e) {
      r.accuracy.reset();
      r.error = e.what();
    }
    if (options.on_cell) {
      std::lock_guard<std::mutex> lock(report_mutex);
      options.on_cell(r);
    }
  });
  std::stable_sort(results.begin(), results.end(), grid_rank_before);
  return results;
}

void to_json(json& j, const GridResult& r) {
  j = json{{"hash", hex64(r.hash)},
           {"model", r.cell.model},
           {"solver", r.cell.solver},
           {"accuracy", r.accuracy ? json(*r.accuracy) : json(nullptr)}};
  if (!r.error.empty()) j["error"] = r.error;
  if (r.report) j["report"] = *r.report;
}

void write_grid_results(const std::vector<GridResult>& results, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write grid results {}", path.string()));
  for (std::size_t rank = 0; rank < results.size(); ++rank) {
    json line = results[rank];
    line["rank"] = rank + 1;
    out << line.dump() << "\n";
  }
  if (!out) throw IoError(fmt::format("failed writing grid results {}", path.string()));
}

}  // namespace microid
