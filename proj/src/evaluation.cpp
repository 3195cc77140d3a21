#include "microid/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "microid/parallel.hpp"

namespace microid {

using json = nlohmann::json;

PredictionRecord make_record(std::string clip_id, int true_label,
                             std::vector<double> probabilities) {
  if (probabilities.empty()) throw ShapeError("prediction has no class probabilities");
  if (true_label < 0 || true_label >= static_cast<int>(probabilities.size())) {
    throw DataError(fmt::format("clip {}: label {} outside [0, {})", clip_id, true_label,
                                probabilities.size()));
  }
  PredictionRecord r;
  r.clip_id = std::move(clip_id);
  r.true_label = true_label;
  r.predicted_label = argmax(probabilities);
  r.probabilities = std::move(probabilities);
  return r;
}

double rank1_accuracy(std::span<const PredictionRecord> records) {
  if (records.empty()) throw DataError("rank-1 accuracy of an empty record list");
  long hits = 0;
  for (const PredictionRecord& r : records) hits += r.predicted_label == r.true_label;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(records.size());
}

double rank_k_accuracy(std::span<const PredictionRecord> records, int k) {
  if (records.empty()) throw DataError("rank-k accuracy of an empty record list");
  if (k < 1) throw ConfigError("rank k must be >= 1");
  long hits = 0;
  for (const PredictionRecord& r : records) {
    const int n = static_cast<int>(r.probabilities.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return r.probabilities[a] > r.probabilities[b];
    });
    const auto end = order.begin() + std::min(k, n);
    hits += std::find(order.begin(), end, r.true_label) != end;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(records.size());
}

bool confusion_consistent(const EvaluationReport& report) {
  const auto& m = report.confusion_matrix;
  if (static_cast<int>(m.size()) != report.num_classes) return false;
  long diagonal = 0;
  long total = 0;
  for (int t = 0; t < report.num_classes; ++t) {
    if (static_cast<int>(m[t].size()) != report.num_classes) return false;
    long row = 0;
    for (int v : m[t]) row += v;
    const auto it = report.per_subject_count.find(t);
    if (row != (it == report.per_subject_count.end() ? 0 : it->second)) return false;
    diagonal += m[t][t];
    total += row;
  }
  return diagonal == report.n_hits && total == report.n_total &&
         static_cast<std::size_t>(total) == report.records.size();
}

EvaluationReport make_report(std::vector<PredictionRecord> records, int num_classes) {
  if (records.empty()) throw DataError("cannot evaluate an empty test set");
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  EvaluationReport report;
  report.num_classes = num_classes;
  report.confusion_matrix.assign(num_classes, std::vector<int>(num_classes, 0));
  std::map<int, int> hits;
  for (const PredictionRecord& r : records) {
    if (r.true_label < 0 || r.true_label >= num_classes || r.predicted_label < 0 ||
        r.predicted_label >= num_classes) {
      throw DataError(fmt::format("record {} has a label outside [0, {})", r.clip_id, num_classes));
    }
    ++report.confusion_matrix[r.true_label][r.predicted_label];
    ++report.per_subject_count[r.true_label];
    if (r.true_label == r.predicted_label) {
      ++report.n_hits;
      ++hits[r.true_label];
    }
  }
  report.n_total = static_cast<int>(records.size());
  report.rank1 = 100.0 * static_cast<double>(report.n_hits) / static_cast<double>(report.n_total);
  for (const auto& [label, count] : report.per_subject_count) {
    report.per_subject_accuracy[label] = 100.0 * static_cast<double>(hits[label]) / count;
  }
  report.records = std::move(records);
  return report;
}

EvaluationReport evaluate_model(const Model& model, std::span<const ClipTensor> test, int jobs) {
  if (test.empty()) throw DataError("cannot evaluate an empty test set");
  for (const ClipTensor& clip : test) model.check_input(clip);
  std::vector<PredictionRecord> records(test.size());
  parallel_for(test.size(), jobs, [&](std::size_t i) {
    records[i] = make_record(test[i].clip_id, test[i].subject_id, predict_proba(model, test[i]));
  });
  return make_report(std::move(records), model.config().num_classes);
}

std::string format_report(const EvaluationReport& report, const std::string& title,
                          const std::map<int, int>& subject_names) {
  auto name = [&](int label) {
    const auto it = subject_names.find(label);
    return it == subject_names.end() ? std::to_string(label) : std::to_string(it->second);
  };
  std::string out = fmt::format("{}\n", title);
  out += fmt::format("  rank-1 accuracy  {:6.2f}%   ({} / {})\n\n", report.rank1, report.n_hits,
                     report.n_total);
  out += fmt::format("  {:>8}  {:>6}  {:>9}\n", "subject", "clips", "accuracy");
  for (const auto& [label, acc] : report.per_subject_accuracy) {
    out += fmt::format("  {:>8}  {:>6}  {:8.2f}%\n", name(label),
                       report.per_subject_count.at(label), acc);
  }
  out += "\n  confusion matrix (rows: true, columns: predicted)\n";
  out += fmt::format("  {:>8}", "");
  for (int k = 0; k < report.num_classes; ++k) out += fmt::format(" {:>5}", name(k));
  out += "\n";
  for (int t = 0; t < report.num_classes; ++t) {
    out += fmt::format("  {:>8}", name(t));
    for (int k = 0; k < report.num_classes; ++k)
      out += fmt::format(" {:>5}", report.confusion_matrix[t][k]);
    out += "\n";
  }
  return out;
}

void to_json(json& j, const PredictionRecord& r) {
  j = json{{"clip_id", r.clip_id},
           {"true_label", r.true_label},
           {"predicted_label", r.predicted_label},
           {"probabilities", r.probabilities}};
}

void to_json(json& j, const EvaluationReport& report) {
  json subjects = json::array();
  for (const auto& [label, acc] : report.per_subject_accuracy) {
    subjects.push_back(
        {{"label", label}, {"clips", report.per_subject_count.at(label)}, {"accuracy", acc}});
  }
  j = json{{"rank1", report.rank1},
           {"n_hits", report.n_hits},
           {"n_total", report.n_total},
           {"num_classes", report.num_classes},
           {"per_subject", subjects},
           {"matrix", report.confusion_matrix},
           {"records", report.records}};
}

void write_report(const EvaluationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write report {}", path.string()));
  out << json(report).dump(2) << "\n";
  if (!out) throw IoError(fmt::format("failed writing report {}", path.string()));
}

}  // namespace microid
