#pragma once

#include <filesystem>
#include <optional>

#include "lidia/infer/inference.hpp"

namespace lidia::eval {

/// Tie-aware rank AUC: P(score_pos > score_neg) + 0.5 P(equal) over all
/// positive/negative pairs. Single-class inputs yield nullopt (undefined).
std::optional<double> auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct PatientMetrics {
  std::optional<double> auc8;  // mean of defined per-class AUCs
  std::optional<double> auc2;  // mean of malignant and benign one-vs-rest AUCs
  std::array<std::optional<double>, kNumClasses> per_class;
  std::optional<double> auc_malignant, auc_benign;
  int undefined_classes = 0;
};

/// Ground-truth class presence per case: has_class[c] = any lesion of class c.
struct CaseLabels {
  std::array<bool, kNumClasses> has_class{};

  bool has_any(const std::vector<int>& classes) const {
    for (int c : classes)
      if (has_class[static_cast<size_t>(c)]) return true;
    return false;
  }
};

/// auc2_single_binary: one malignant-vs-benign AUC over patients having
/// either, instead of the mean of two one-vs-rest AUCs.
PatientMetrics patient_metrics(const std::vector<infer::PatientDiagnosis>& diagnoses,
                               const std::vector<CaseLabels>& labels,
                               bool auc2_single_binary = false);

struct LesionMetrics {
  std::optional<double> precision;
  std::optional<double> sensitivity;
  std::optional<double> accuracy;
  std::array<std::array<int64_t, kNumClasses>, kNumClasses> confusion{};  // [gt][pred]
  int64_t matched = 0, detections = 0, ground_truths = 0;
};

struct CaseDetections {
  std::vector<infer::LesionDetection> detections;
  std::vector<Tensor<uint8_t>> gt_masks;
  std::vector<int> gt_labels;
};

/// Greedy matching in descending confidence at the given mask-IoU threshold.
LesionMetrics lesion_metrics(const std::vector<CaseDetections>& cases,
                             double iou_threshold = 0.3);

/// 2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty.
double dice_score(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt);

struct EvalReport {
  PatientMetrics patient;
  LesionMetrics lesion;
  double mean_dice = 0.0;
  int num_cases = 0;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  /// Plain-text table: patient-wise / lesion-wise / pixel-wise columns.
  std::string to_table() const;
  std::string confusion_csv() const;
};

}  // namespace lidia::eval
