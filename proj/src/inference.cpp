#include "lidia/infer/inference.hpp"

#include <algorithm>
#include <cmath>

namespace lidia::infer {

namespace {

double sigmoid_d(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// softmax over the 9 class logits of one query
std::array<double, kNumClasses + 1> class_probs(const Tensor<float>& logits, int q) {
  const int nc = kNumClasses + 1;
  std::array<double, kNumClasses + 1> p{};
  const float* row = logits.data() + static_cast<int64_t>(q) * nc;
  double mx = row[0];
  for (int j = 1; j < nc; ++j) mx = std::max<double>(mx, row[j]);
  double s = 0;
  for (int j = 0; j < nc; ++j) {
    p[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
    s += p[static_cast<size_t>(j)];
  }
  for (auto& x : p) x /= s;
  return p;
}

void check_liver(const SemanticMap& map, const Tensor<uint8_t>& liver_mask) {
  if (liver_mask.numel() != map.voxels())
    throw dimension_error("liver mask does not match the semantic map grid");
  for (int64_t i = 0; i < liver_mask.numel(); ++i)
    if (liver_mask[i]) return;
  throw Error("empty_liver_mask", "patient volume invalid: liver mask is empty");
}

}  // namespace

SemanticMap semantic_map(const HeadView& head) {
  const int q = head.class_logits.dim(0);
  const int64_t v = head.mask_logits.dim(1);
  const int nc = kNumClasses + 1;

  // s(c, v) = sum_q p_q(c) * sigmoid(mask_q(v)) for tumor channels; the
  // no-object mass spreads uniformly (weight 1 at every voxel)
  std::vector<double> acc(static_cast<size_t>(nc) * v, 0.0);
  for (int qi = 0; qi < q; ++qi) {
    const auto p = class_probs(head.class_logits, qi);
    const float* mrow = head.mask_logits.data() + static_cast<int64_t>(qi) * v;
    for (int64_t i = 0; i < v; ++i) {
      const double sig = sigmoid_d(mrow[i]);
      for (int c = 0; c < kNumClasses; ++c)
        acc[static_cast<size_t>(c) * v + i] += p[static_cast<size_t>(c)] * sig;
    }
    const double bg = p[kNumClasses];
    for (int64_t i = 0; i < v; ++i) acc[static_cast<size_t>(kNumClasses) * v + i] += bg;
  }

  SemanticMap out;
  const int d = head.grid_dims[0], h = head.grid_dims[1], w = head.grid_dims[2];
  if (static_cast<int64_t>(d) * h * w != v)
    throw dimension_error("semantic_map: grid dims do not match mask logits");
  out.prob = Tensor<float>({nc, d, h, w});
  for (int64_t i = 0; i < v; ++i) {
    double s = 0;
    for (int c = 0; c < nc; ++c) s += acc[static_cast<size_t>(c) * v + i];
    for (int c = 0; c < nc; ++c)
      out.prob[static_cast<int64_t>(c) * v + i] =
          static_cast<float>(acc[static_cast<size_t>(c) * v + i] / s);
  }
  return out;
}

PatientDiagnosis livermax(const SemanticMap& map, const Tensor<uint8_t>& liver_mask) {
  check_liver(map, liver_mask);
  const int64_t v = map.voxels();
  PatientDiagnosis d;
  for (int c = 0; c < kNumClasses; ++c) {
    double mx = 0.0;
    const float* ch = map.prob.data() + static_cast<int64_t>(c) * v;
    for (int64_t i = 0; i < v; ++i)
      if (liver_mask[i]) mx = std::max<double>(mx, ch[i]);
    d.class_prob[static_cast<size_t>(c)] = mx;
  }
  for (int c : malignant_classes())
    d.malignant = std::max(d.malignant, d.class_prob[static_cast<size_t>(c)]);
  for (int c : benign_classes())
    d.benign = std::max(d.benign, d.class_prob[static_cast<size_t>(c)]);
  return d;
}

PatientDiagnosis pixelcount_diagnosis(const SemanticMap& map, const Tensor<uint8_t>& liver_mask) {
  check_liver(map, liver_mask);
  const int64_t v = map.voxels();
  std::array<int64_t, kNumClasses> counts{};
  int64_t liver_voxels = 0;
  for (int64_t i = 0; i < v; ++i) {
    if (!liver_mask[i]) continue;
    ++liver_voxels;
    int arg = 0;
    float best = map.prob[i];
    for (int c = 1; c <= kNumClasses; ++c) {
      const float x = map.prob[static_cast<int64_t>(c) * v + i];
      if (x > best) {
        best = x;
        arg = c;
      }
    }
    if (arg < kNumClasses) ++counts[static_cast<size_t>(arg)];
  }
  PatientDiagnosis d;
  for (int c = 0; c < kNumClasses; ++c)
    d.class_prob[static_cast<size_t>(c)] =
        static_cast<double>(counts[static_cast<size_t>(c)]) / static_cast<double>(liver_voxels);
  for (int c : malignant_classes())
    d.malignant = std::max(d.malignant, d.class_prob[static_cast<size_t>(c)]);
  for (int c : benign_classes())
    d.benign = std::max(d.benign, d.class_prob[static_cast<size_t>(c)]);
  return d;
}

double mask_iou(const Tensor<uint8_t>& a, const Tensor<uint8_t>& b) {
  if (a.shape() != b.shape()) throw dimension_error("mask_iou: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<LesionDetection> extract_lesions(const HeadView& head,
                                             const Tensor<uint8_t>& liver_mask,
                                             const DetectionThresholds& thresholds) {
  const int q = head.class_logits.dim(0);
  const int64_t v = head.mask_logits.dim(1);
  if (liver_mask.numel() != v) throw dimension_error("extract_lesions: liver mask mismatch");
  const int d = head.grid_dims[0], h = head.grid_dims[1], w = head.grid_dims[2];
  const double logit_cut = std::log(thresholds.mask_sigmoid / (1.0 - thresholds.mask_sigmoid));

  std::vector<LesionDetection> kept;
  for (int qi = 0; qi < q; ++qi) {
    const auto p = class_probs(head.class_logits, qi);
    int cls = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (p[static_cast<size_t>(c)] > p[static_cast<size_t>(cls)]) cls = c;
    const double conf = p[static_cast<size_t>(cls)];
    if (conf < thresholds.class_prob) continue;

    LesionDetection det;
    det.mask = Tensor<uint8_t>({d, h, w});
    det.predicted_class = cls;
    det.confidence = conf;
    std::array<int, 6> bbox = {d, h, w, -1, -1, -1};
    const float* mrow = head.mask_logits.data() + static_cast<int64_t>(qi) * v;
    for (int64_t i = 0; i < v; ++i) {
      if (mrow[i] > logit_cut && liver_mask[i]) {
        det.mask[i] = 1;
        ++det.voxel_count;
        const int z = static_cast<int>(i / (static_cast<int64_t>(h) * w));
        const int y = static_cast<int>((i / w) % h);
        const int x = static_cast<int>(i % w);
        bbox[0] = std::min(bbox[0], z);
        bbox[1] = std::min(bbox[1], y);
        bbox[2] = std::min(bbox[2], x);
        bbox[3] = std::max(bbox[3], z);
        bbox[4] = std::max(bbox[4], y);
        bbox[5] = std::max(bbox[5], x);
      }
    }
    if (det.voxel_count < thresholds.min_voxels) continue;
    det.bbox = bbox;
    kept.push_back(std::move(det));
  }

  // dedup overlapping detections, higher confidence wins (stable order)
  std::stable_sort(kept.begin(), kept.end(),
                   [](const LesionDetection& a, const LesionDetection& b) {
                     return a.confidence > b.confidence;
                   });
  std::vector<LesionDetection> out;
  for (auto& det : kept) {
    bool duplicate = false;
    for (const auto& prev : out)
      if (mask_iou(det.mask, prev.mask) > thresholds.dedup_iou) {
        duplicate = true;
        break;
      }
    if (!duplicate) out.push_back(std::move(det));
  }
  return out;
}

}  // namespace lidia::infer
