#include "microid/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "microid/error.hpp"
#include "microid/parallel.hpp"

namespace microid {

using json = nlohmann::json;
namespace fs = std::filesystem;

const char* policy_name(VotePolicy policy) { return policy == VotePolicy::kSoft ? "soft" : "hard"; }

VotePolicy parse_policy(const std::string& name) {
  if (name == "soft") return VotePolicy::kSoft;
  if (name == "hard") return VotePolicy::kHard;
  throw ConfigError(fmt::format("unknown voting policy '{}' (expected soft or hard)", name));
}

EnsemblePrediction ensemble_predict(std::span<const std::vector<double>> member_probs,
                                    VotePolicy policy) {
  if (member_probs.empty()) throw DataError("ensemble needs at least one member");
  const std::size_t k = member_probs[0].size();
  if (k == 0) throw ShapeError("empty probability vector");
  for (const auto& p : member_probs) {
    if (p.size() != k) {
      throw ShapeError(fmt::format("member probability vectors differ in length ({} vs {})",
                                   p.size(), k));
    }
    double sum = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw DataError("member probabilities must be nonnegative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw DataError(fmt::format("member probabilities sum to {}, not 1", sum));
    }
  }

  // sorted summation keeps the mean independent of member order
  EnsemblePrediction out;
  out.combined.resize(k);
  std::vector<double> column(member_probs.size());
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t m = 0; m < member_probs.size(); ++m) column[m] = member_probs[m][c];
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (double v : column) sum += v;
    out.combined[c] = sum / static_cast<double>(member_probs.size());
  }

  if (policy == VotePolicy::kSoft) {
    out.predicted = argmax(out.combined);
    return out;
  }
  std::vector<int> votes(k, 0);
  for (const auto& p : member_probs) ++votes[argmax(p)];
  int best = 0;
  for (int c = 1; c < static_cast<int>(k); ++c) {
    if (votes[c] > votes[best] ||
        (votes[c] == votes[best] && out.combined[c] > out.combined[best])) {
      best = c;
    }
  }
  out.predicted = best;
  return out;
}

void EnsembleSpec::validate() const {
  if (member_checkpoints.size() < 2) throw ConfigError("an ensemble needs at least two members");
}

void to_json(json& j, const EnsembleSpec& spec) {
  std::vector<std::string> paths;
  for (const fs::path& p : spec.member_checkpoints) paths.push_back(p.string());
  j = json{{"members", paths}, {"policy", policy_name(spec.policy)}};
}

void from_json(const json& j, EnsembleSpec& spec) {
  spec = EnsembleSpec{};
  for (const auto& p : j.at("members")) spec.member_checkpoints.emplace_back(p.get<std::string>());
  if (j.contains("policy")) spec.policy = parse_policy(j.at("policy").get<std::string>());
}

EnsembleSpec load_ensemble_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open ensemble spec {}", path.string()));
  EnsembleSpec spec;
  try {
    spec = json::parse(in).get<EnsembleSpec>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  for (fs::path& p : spec.member_checkpoints) {
    if (p.is_relative()) p = path.parent_path() / p;
  }
  spec.validate();
  return spec;
}

void check_members(std::span<const Model> members) {
  if (members.empty()) throw DataError("ensemble needs at least one member");
  const ModelConfig& first = members[0].config();
  for (const Model& m : members) {
    if (m.config().num_classes != first.num_classes) {
      throw ShapeError(fmt::format("ensemble members disagree on the class count ({} vs {})",
                                   m.config().num_classes, first.num_classes));
    }
    if (!(m.config().input_shape == first.input_shape)) {
      throw ShapeError("ensemble members disagree on the input shape");
    }
  }
}

std::vector<Model> load_members(const EnsembleSpec& spec) {
  spec.validate();
  std::vector<Model> members;
  for (const fs::path& p : spec.member_checkpoints) members.push_back(load_checkpoint(p));
  check_members(members);
  return members;
}

EvaluationReport evaluate_ensemble(std::span<const Model> members, VotePolicy policy,
                                   std::span<const ClipTensor> test, int jobs) {
  check_members(members);
  for (const ClipTensor& clip : test) members[0].check_input(clip);
  std::vector<PredictionRecord> records(test.size());
  parallel_for(test.size(), jobs, [&](std::size_t i) {
    std::vector<std::vector<double>> probs;
    for (const Model& m : members) probs.push_back(predict_proba(m, test[i]));
    EnsemblePrediction pred = ensemble_predict(probs, policy);
    PredictionRecord r;
    r.clip_id = test[i].clip_id;
    r.true_label = test[i].subject_id;
    r.predicted_label = pred.predicted;
    r.probabilities = std::move(pred.combined);
    records[i] = std::move(r);
  });
  return make_report(std::move(records), members[0].config().num_classes);
}

EvaluationReport evaluate_ensemble(const EnsembleSpec& spec, std::span<const ClipTensor> test,
                                   int jobs) {
  std::vector<Model> members = load_members(spec);
  return evaluate_ensemble(members, spec.policy, test, jobs);
}

std::vector<std::vector<int>> member_subsets(int members, int min_size) {
  if (members < 0 || members > 20) throw ConfigError("member count out of range for subsets");
  std::vector<std::vector<int>> out;
  for (unsigned mask = 1; mask < (1u << members); ++mask) {
    std::vector<int> s;
    for (int i = 0; i < members; ++i)
      if (mask & (1u << i)) s.push_back(i);
    if (static_cast<int>(s.size()) >= min_size) out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return out;
}

}  // namespace microid
