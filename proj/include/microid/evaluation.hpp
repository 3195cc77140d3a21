#ifndef MICROID_EVALUATION_HPP_
#define MICROID_EVALUATION_HPP_

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "microid/data_core.hpp"
#include "microid/slowfast.hpp"

namespace microid {

// Outcome of one test clip. predicted_label is argmax(probabilities).
struct PredictionRecord {
  std::string clip_id;
  int true_label = 0;
  int predicted_label = 0;
  std::vector<double> probabilities;
};

PredictionRecord make_record(std::string clip_id, int true_label, std::vector<double> probabilities);

// 100 * n_hits / n_total, counted in integers.
double rank1_accuracy(std::span<const PredictionRecord> records);

// Share of records whose true label is among the k highest probabilities
// (ties broken toward lower indices, as for rank 1).
double rank_k_accuracy(std::span<const PredictionRecord> records, int k);

struct EvaluationReport {
  double rank1 = 0.0;
  int n_hits = 0;
  int n_total = 0;
  int num_classes = 0;
  std::map<int, double> per_subject_accuracy;  // compact label -> percentage
  std::map<int, int> per_subject_count;
  std::vector<std::vector<int>> confusion_matrix;  // [true][predicted]
  std::vector<PredictionRecord> records;
};

// Diagonal of the confusion matrix sums to n_hits, rows to the per-subject
// counts, and everything to n_total.
bool confusion_consistent(const EvaluationReport& report);

EvaluationReport make_report(std::vector<PredictionRecord> records, int num_classes);

EvaluationReport evaluate_model(const Model& model, std::span<const ClipTensor> test, int jobs = 1);

// Human-readable table. `subject_names` maps compact labels to display ids
// (for example the original subject ids); labels are shown when absent.
std::string format_report(const EvaluationReport& report, const std::string& title,
                          const std::map<int, int>& subject_names = {});

void to_json(nlohmann::json& j, const PredictionRecord& record);
void to_json(nlohmann::json& j, const EvaluationReport& report);

void write_report(const EvaluationReport& report, const std::filesystem::path& path);

}  // namespace microid

#endif  // MICROID_EVALUATION_HPP_
