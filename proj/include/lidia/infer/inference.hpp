#pragma once

#include <array>
#include <optional>

#include "lidia/common.hpp"
#include "lidia/core/tensor.hpp"

namespace lidia::infer {

/// Plain value view of the segmentation head (no autodiff graph).
struct HeadView {
  Tensor<float> class_logits;  // Q x (8 + 1)
  Tensor<float> mask_logits;   // Q x V
  Tensor<float> embeddings;    // Q x d_e
  std::array<int, 3> grid_dims = {0, 0, 0};
};

/// Per-voxel probability distribution over 8 tumor classes + background
/// (channel kNumClasses). Channel sums are 1 at every voxel.
struct SemanticMap {
  Tensor<float> prob;  // (9, D, H, W)
  int64_t voxels() const { return prob.numel() / (kNumClasses + 1); }
};

struct PatientDiagnosis {
  std::array<double, kNumClasses> class_prob{};
  double malignant = 0.0;  // max over HCC, ICC, meta
  double benign = 0.0;     // max over heman, FNH, cyst, calc
};

struct LesionDetection {
  Tensor<uint8_t> mask;
  int predicted_class = 0;
  double confidence = 0.0;
  int64_t voxel_count = 0;
  std::array<int, 6> bbox{};  // zmin, ymin, xmin, zmax, ymax, xmax (inclusive)
};

struct DetectionThresholds {
  double class_prob = 0.5;
  double mask_sigmoid = 0.5;
  int64_t min_voxels = 8;
  double dedup_iou = 0.5;
};

SemanticMap semantic_map(const HeadView& head);
PatientDiagnosis livermax(const SemanticMap& map, const Tensor<uint8_t>& liver_mask);
PatientDiagnosis pixelcount_diagnosis(const SemanticMap& map, const Tensor<uint8_t>& liver_mask);
std::vector<LesionDetection> extract_lesions(const HeadView& head,
                                             const Tensor<uint8_t>& liver_mask,
                                             const DetectionThresholds& thresholds = {});

double mask_iou(const Tensor<uint8_t>& a, const Tensor<uint8_t>& b);

}  // namespace lidia::infer
