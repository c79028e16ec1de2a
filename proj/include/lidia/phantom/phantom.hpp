#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "lidia/common.hpp"
#include "lidia/core/rng.hpp"
#include "lidia/core/tensor.hpp"

namespace lidia::phantom {

/// Mean intensity offset (HU-like arbitrary units) and spread of a lesion
/// class in one phase.
struct Enhancement {
  double mean = 0.0;
  double spread = 0.0;
};

using EnhancementRow = std::array<Enhancement, kNumPhases>;

/// Configuration for synthetic multi-phase CT generation.
///
/// The default enhancement table is a clinically *motivated invention*
/// (arterial washout for HCC, progressive delayed enhancement for ICC,
/// water-density cysts, ...); no published intensity statistics back these
/// numbers and they should be treated as a test substrate, not ground truth.
struct PhantomConfig {
  int grid_size = 48;
  std::array<int, 2> num_lesions_range = {1, 3};
  std::array<double, kNumClasses> class_mix = {0.125, 0.125, 0.125, 0.125,
                                               0.125, 0.125, 0.125, 0.125};
  double delayed_phase_prob = 2.0 / 3.0;
  std::array<EnhancementRow, kNumClasses> enhancement_table = default_enhancement_table();
  /// The "others" label covers heterogeneous rare lesions: each lesion of
  /// that class draws one of these sub-profiles (>= 3 distinct ones).
  std::vector<EnhancementRow> others_profiles = default_others_profiles();
  double noise_sigma = 4.0;
  std::array<int, 2> lesion_radius_range = {3, 6};
  uint64_t seed = 0;

  // Base tissue model (arbitrary units, order of soft-tissue HU spans).
  double background_intensity = 20.0;
  double liver_base_intensity = 100.0;
  std::array<double, kNumPhases> liver_phase_offset = {0.0, 12.0, 30.0, 20.0};

  static std::array<EnhancementRow, kNumClasses> default_enhancement_table();
  static std::vector<EnhancementRow> default_others_profiles();

  /// Throws config_error naming the first violated invariant.
  void validate() const;
};

/// One patient: registered phase volumes (identical geometry, intensity-only
/// differences), liver mask, and K instance lesion masks with class labels.
struct Case {
  std::string case_id;
  std::vector<Phase> phases_present;  // always contains NC, A, V; maybe D
  std::map<Phase, Tensor<float>> volumes;
  Tensor<uint8_t> liver_mask;
  std::vector<Tensor<uint8_t>> instance_masks;
  std::vector<int> labels;

  int grid() const { return liver_mask.dim(0); }
  int num_lesions() const { return static_cast<int>(instance_masks.size()); }
  bool has_delayed() const {
    return std::find(phases_present.begin(), phases_present.end(), Phase::D) !=
           phases_present.end();
  }

  /// Throws if any structural invariant is violated (mask containment,
  /// pairwise disjointness, shape agreement, K consistency).
  void validate() const;

  bool operator==(const Case& o) const;
};

Case generate_case(const PhantomConfig& config, uint64_t case_seed);

void write_case(const Case& c, const std::filesystem::path& directory);
Case read_case(const std::filesystem::path& directory);

struct DatasetIndex {
  std::filesystem::path root;
  std::map<std::string, std::vector<std::string>> splits;  // train/val/test -> case ids

  std::vector<std::string> split(const std::string& name) const;
  std::vector<std::string> all_ids() const;
};

DatasetIndex build_dataset(const PhantomConfig& config, int n_cases,
                           const std::array<double, 3>& split_fracs,
                           const std::filesystem::path& out_dir);

void write_index(const DatasetIndex& idx, const std::filesystem::path& path);
DatasetIndex read_index(const std::filesystem::path& path);

/// Config pair for the delayed-only fixture: two classes (HCC and ICC slots)
/// whose enhancement rows are identical on NC/A/V and differ only in phase D.
/// All signal separating the pair therefore lives in the delayed phase.
PhantomConfig delayed_only_pair_config(uint64_t seed, double separation = 45.0);

/// Config producing a single small lesion of `lesion_class` per positive
/// case; used by the tiny-lesion diagnosis fixtures.
PhantomConfig tiny_lesion_config(uint64_t seed, int lesion_class);

uint32_t crc32_bytes(const void* data, size_t n);

}  // namespace lidia::phantom
