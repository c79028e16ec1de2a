#pragma once

#include <functional>

#include "lidia/harness/run_config.hpp"

namespace lidia {

struct StepLog {
  int step = 0;
  double seg = 0, focal = 0, acl = 0, total = 0;
  double grad_norm = 0, perturbed_loss = 0;
  int grad_evals = 0;
};

struct TrainResult {
  std::filesystem::path checkpoint_path;  // final (or last good on abort)
  std::filesystem::path log_path;
  int steps_run = 0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<StepLog> history;
};

/// Called after every step with the live model; returning true stops training
/// early (used by overfit-style runs that stop when a target is reached).
using StopCallback = std::function<bool(int step, LidiaModel<float>& model)>;

/// Deterministic single-worker training loop: per step draw batch_size cases,
/// forward each case independently (3- or 4-phase path), accumulate gradients
/// of the mean L_final, and take one SAM step. Memory-bank pushes happen once
/// per step, after the update, with the embeddings of the unperturbed pass.
TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& run_dir,
                      const StopCallback& stop = {});

/// Loads every case of a split into memory (cases are small at desk scale).
std::vector<phantom::Case> load_split(const phantom::DatasetIndex& idx,
                                      const std::string& split);

}  // namespace lidia
