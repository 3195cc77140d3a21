#ifndef MICROID_ENSEMBLE_HPP_
#define MICROID_ENSEMBLE_HPP_

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "microid/evaluation.hpp"
#include "microid/slowfast.hpp"

namespace microid {

enum class VotePolicy { kSoft, kHard };

const char* policy_name(VotePolicy policy);
VotePolicy parse_policy(const std::string& name);

struct EnsemblePrediction {
  int predicted = 0;
  std::vector<double> combined;  // mean member probability under both policies
};

/**
 * Combines member probability vectors.
 *
 * Soft: argmax of the mean. Hard: the class with most member votes; ties go to
 * the tied class with the highest mean probability, then the lowest index.
 * The result does not depend on member order, bit for bit.
 */
EnsemblePrediction ensemble_predict(std::span<const std::vector<double>> member_probs,
                                    VotePolicy policy);

struct EnsembleSpec {
  std::vector<std::filesystem::path> member_checkpoints;
  VotePolicy policy = VotePolicy::kSoft;

  void validate() const;
};

void to_json(nlohmann::json& j, const EnsembleSpec& spec);
void from_json(const nlohmann::json& j, EnsembleSpec& spec);

// Reads a JSON spec; relative checkpoint paths resolve against the file's
// directory.
EnsembleSpec load_ensemble_spec(const std::filesystem::path& path);

// Loads every member and checks they agree on classes and input shape.
std::vector<Model> load_members(const EnsembleSpec& spec);

void check_members(std::span<const Model> members);

EvaluationReport evaluate_ensemble(std::span<const Model> members, VotePolicy policy,
                                   std::span<const ClipTensor> test, int jobs = 1);
EvaluationReport evaluate_ensemble(const EnsembleSpec& spec, std::span<const ClipTensor> test,
                                   int jobs = 1);

// All member index subsets of size >= min_size, by size then lexicographically.
std::vector<std::vector<int>> member_subsets(int members, int min_size = 2);

}  // namespace microid

#endif  // MICROID_ENSEMBLE_HPP_
