#ifndef MICROID_TRAINING_HPP_
#define MICROID_TRAINING_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "microid/data_core.hpp"
#include "microid/slowfast.hpp"

namespace microid {

enum class Solver { kAdam, kAdamW };

const char* solver_name(Solver s);
Solver parse_solver(const std::string& name);

struct SolverConfig {
  Solver solver = Solver::kAdam;
  double learning_rate = 0.001;
  int batch_size = 16;
  int epochs = 30;
  double weight_decay = 0.01;  // adamw only
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SolverConfig& config);
void from_json(const nlohmann::json& j, SolverConfig& config);

/**
 * Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8). The AdamW
 * variant applies decoupled weight decay to arrays named "*.weight" (not
 * biases or normalization parameters) before the moment update.
 */
class Optimizer {
 public:
  Optimizer(const SolverConfig& config, const Model& model);

  void step(Model& model, Gradients& grads);
  long steps() const { return t_; }

 private:
  SolverConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<bool> decays_;
  long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;            // mean cross-entropy over the epoch
  double train_accuracy = 0.0;  // rank-1 of the pre-update predictions
};

struct TrainReport {
  ModelConfig model;
  SolverConfig solver;
  std::string fingerprint;
  std::vector<EpochRecord> epochs;
  std::optional<double> test_accuracy;
  double wall_seconds = 0.0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void to_json(nlohmann::json& j, const TrainReport& r);
void write_train_report(const TrainReport& report, const std::filesystem::path& path);

struct TrainOptions {
  int jobs = 1;  // workers for per-sample gradients; results do not depend on it
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Model model;
  TrainReport report;
};

// Minimizes mean cross-entropy over mini-batches. Each epoch visits the
// training clips in an order drawn from the solver seed. With feature_norm the
// stored feature statistics are recomputed over the whole training set once
// training ends. An empty `test` span skips the final evaluation.
TrainResult train_model(const ModelConfig& config, const SolverConfig& solver,
                        std::span<const ClipTensor> train, std::span<const ClipTensor> test,
                        const TrainOptions& options = {});

// Mean and population variance of the pooled features over `clips`.
FeatureStats population_feature_stats(const Model& model, std::span<const ClipTensor> clips,
                                      int jobs = 1);

// One cell of a hyperparameter grid.
struct GridCell {
  ModelConfig model;
  SolverConfig solver;
};

// Hash of everything that distinguishes a cell (the model config and solver
// settings); seeds excluded. Invalid configs hash fine.
std::uint64_t cell_hash(const GridCell& cell);

// Alpha {4, 16} x beta {1/8, 1/16} x {adam, adamw} x batch {16, 32}, other
// settings copied from the bases.
std::vector<GridCell> default_grid(const ModelConfig& base_model, const SolverConfig& base_solver);

struct GridResult {
  GridCell cell;  // with the seeds actually used
  std::uint64_t hash = 0;
  std::optional<double> accuracy;
  std::string error;
  std::optional<TrainReport> report;
};

struct GridOptions {
  std::uint64_t root_seed = 0;
  int jobs = 1;  // cells trained concurrently
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const GridResult&)> on_cell;
};

// Seeds a cell deterministically from the root seed and its hash.
GridCell seed_cell(const GridCell& cell, std::uint64_t root_seed);

// Trains every cell, scores rank-1 on `val`, and ranks by accuracy
// (descending), then alpha, beta, solver name, batch size, learning rate and
// hash. Cells whose training fails are kept with their error and rank last.
std::vector<GridResult> grid_search(std::span<const GridCell> space,
                                    std::span<const ClipTensor> train,
                                    std::span<const ClipTensor> val, const GridOptions& options);

// Ordering used by grid_search, exposed for tests.
bool grid_rank_before(const GridResult& a, const GridResult& b);

void to_json(nlohmann::json& j, const GridResult& r);
void write_grid_results(const std::vector<GridResult>& results, const std::filesystem::path& path);

}  // namespace microid

#endif  // MICROID_TRAINING_HPP_
