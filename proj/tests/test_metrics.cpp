#include "doctest.h"

#include "lidia/core/rng.hpp"
#include "lidia/eval/metrics.hpp"

using namespace lidia;
using namespace lidia::eval;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, ties = 0;
  int64_t pairs = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) ties += 1;
    }
  return (wins + 0.5 * ties) / static_cast<double>(pairs);
}

Tensor<uint8_t> mask_of(std::vector<int64_t> voxels, int g = 6) {
  Tensor<uint8_t> m({g, g, g});
  for (int64_t i : voxels) m[i] = 1;
  return m;
}

infer::LesionDetection det_of(std::vector<int64_t> voxels, int cls, double conf, int g = 6) {
  infer::LesionDetection d;
  d.mask = mask_of(std::move(voxels), g);
  d.predicted_class = cls;
  d.confidence = conf;
  return d;
}

}  // namespace

TEST_CASE("auc: perfect separation, ties, undefined") {
  CHECK(*auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(*auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
  CHECK(*auc({0.1, 0.9}, {0, 1}) == 1.0);
  CHECK(*auc({0.9, 0.1}, {0, 1}) == 0.0);
  CHECK_FALSE(auc({0.1, 0.9}, {1, 1}).has_value());
  CHECK_FALSE(auc({0.1, 0.9}, {0, 0}).has_value());
}

TEST_CASE("auc equals O(n^2) pair counting on 500-point fixtures") {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> s(500);
    std::vector<int> y(500);
    for (int i = 0; i < 500; ++i) {
      // quantized scores force plenty of ties
      s[static_cast<size_t>(i)] = std::round(rng.normal(0.0, 1.0) * 8.0) / 8.0;
      y[static_cast<size_t>(i)] = rng.uniform01() < 0.4 ? 1 : 0;
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0)
      continue;
    const double got = *auc(s, y);
    const double want = pair_count_auc(s, y);
    CHECK(std::abs(got - want) <= 1e-12);
  }
}

TEST_CASE("auc invariant under strictly monotone transforms") {
  Rng rng(2);
  std::vector<double> s(60);
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) {
    s[static_cast<size_t>(i)] = rng.normal(0.0, 1.0);
    y[static_cast<size_t>(i)] = rng.uniform01() < 0.5 ? 1 : 0;
  }
  y[0] = 1;
  y[1] = 0;
  const double base = *auc(s, y);

  std::vector<double> exp_s = s, affine_s = s;
  for (auto& x : exp_s) x = std::exp(x);
  for (auto& x : affine_s) x = 3.0 * x + 11.0;
  CHECK(*auc(exp_s, y) == doctest::Approx(base).epsilon(1e-12));
  CHECK(*auc(affine_s, y) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("patient metrics: perfect predictions, constant scores, pair oracle") {
  Rng rng(3);
  std::vector<infer::PatientDiagnosis> diag(20);
  std::vector<CaseLabels> labels(20);
  for (int i = 0; i < 20; ++i) {
    for (int c = 0; c < kNumClasses; ++c)
      labels[static_cast<size_t>(i)].has_class[static_cast<size_t>(c)] = rng.uniform01() < 0.3;
  }
  // ensure every class has a positive and a negative patient
  for (int c = 0; c < kNumClasses; ++c) {
    labels[static_cast<size_t>(c)].has_class[static_cast<size_t>(c)] = true;
    labels[static_cast<size_t>(c + 8)].has_class[static_cast<size_t>(c)] = false;
  }

  // perfect: score = label
  for (int i = 0; i < 20; ++i) {
    for (int c = 0; c < kNumClasses; ++c)
      diag[static_cast<size_t>(i)].class_prob[static_cast<size_t>(c)] =
          labels[static_cast<size_t>(i)].has_class[static_cast<size_t>(c)] ? 1.0 : 0.0;
    diag[static_cast<size_t>(i)].malignant =
        labels[static_cast<size_t>(i)].has_any(malignant_classes()) ? 1.0 : 0.0;
    diag[static_cast<size_t>(i)].benign =
        labels[static_cast<size_t>(i)].has_any(benign_classes()) ? 1.0 : 0.0;
  }
  PatientMetrics perfect = patient_metrics(diag, labels);
  CHECK(*perfect.auc8 == 1.0);
  CHECK(*perfect.auc2 == 1.0);

  // identical scores: every defined AUC is 0.5
  for (auto& d : diag) {
    d.class_prob.fill(0.7);
    d.malignant = 0.7;
    d.benign = 0.7;
  }
  PatientMetrics ties = patient_metrics(diag, labels);
  for (int c = 0; c < kNumClasses; ++c) CHECK(*ties.per_class[static_cast<size_t>(c)] == 0.5);
  CHECK(*ties.auc8 == 0.5);
  CHECK(*ties.auc2 == 0.5);

  // random scores: auc8 equals the mean of hand-computed per-class AUCs
  for (auto& d : diag)
    for (int c = 0; c < kNumClasses; ++c)
      d.class_prob[static_cast<size_t>(c)] = rng.uniform01();
  PatientMetrics got = patient_metrics(diag, labels);
  double sum = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 20; ++i) {
      s.push_back(diag[static_cast<size_t>(i)].class_prob[static_cast<size_t>(c)]);
      y.push_back(labels[static_cast<size_t>(i)].has_class[static_cast<size_t>(c)] ? 1 : 0);
    }
    const double want = pair_count_auc(s, y);
    CHECK(*got.per_class[static_cast<size_t>(c)] == doctest::Approx(want).epsilon(1e-12));
    sum += want;
  }
  CHECK(*got.auc8 == doctest::Approx(sum / 8).epsilon(1e-12));

  CHECK_THROWS_AS(patient_metrics({diag[0]}, {labels[0]}), Error);
}

TEST_CASE("lesion metrics: forced outcomes") {
  CaseDetections c;
  c.gt_masks.push_back(mask_of({0, 1, 2, 3}));
  c.gt_labels = {2};
  c.detections.push_back(det_of({0, 1, 2, 3}, 2, 0.9));
  LesionMetrics m = lesion_metrics({c});
  CHECK(*m.precision == 1.0);
  CHECK(*m.sensitivity == 1.0);
  CHECK(*m.accuracy == 1.0);
  CHECK(m.confusion[2][2] == 1);

  CaseDetections miss;
  miss.gt_masks.push_back(mask_of({0, 1, 2, 3}));
  miss.gt_labels = {2};
  miss.detections.push_back(det_of({100, 101, 102}, 2, 0.9));
  LesionMetrics m2 = lesion_metrics({miss});
  CHECK(*m2.precision == 0.0);
  CHECK(*m2.sensitivity == 0.0);
  CHECK_FALSE(m2.accuracy.has_value());  // 0 matched

  LesionMetrics m3 = lesion_metrics({CaseDetections{}});
  CHECK_FALSE(m3.precision.has_value());
  CHECK_FALSE(m3.sensitivity.has_value());
}

TEST_CASE("lesion metrics: greedy matching equals a reference on small cases") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    CaseDetections c;
    const int n_gt = 1 + static_cast<int>(rng.uniform_int(4));
    const int n_det = 1 + static_cast<int>(rng.uniform_int(4));
    for (int g = 0; g < n_gt; ++g) {
      std::vector<int64_t> vox;
      const int64_t base = static_cast<int64_t>(rng.uniform_int(180));
      for (int64_t i = 0; i < 12; ++i) vox.push_back(base + i);
      c.gt_masks.push_back(mask_of(vox));
      c.gt_labels.push_back(static_cast<int>(rng.uniform_int(kNumClasses)));
    }
    for (int dd = 0; dd < n_det; ++dd) {
      std::vector<int64_t> vox;
      const int64_t base = static_cast<int64_t>(rng.uniform_int(180));
      for (int64_t i = 0; i < 12; ++i) vox.push_back(base + i);
      c.detections.push_back(det_of(vox, static_cast<int>(rng.uniform_int(kNumClasses)),
                                    rng.uniform01()));
    }
    LesionMetrics got = lesion_metrics({c}, 0.3);

    // independent reference: sort by confidence, match best unmatched IoU
    std::vector<size_t> order(c.detections.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return c.detections[a].confidence > c.detections[b].confidence;
    });
    std::vector<char> used(c.gt_masks.size(), 0);
    int64_t matched = 0, correct = 0;
    for (size_t oi : order) {
      int best = -1;
      double best_iou = 0;
      for (size_t g = 0; g < c.gt_masks.size(); ++g) {
        if (used[g]) continue;
        const double iou = infer::mask_iou(c.detections[oi].mask, c.gt_masks[g]);
        if (iou >= 0.3 && iou > best_iou) {
          best_iou = iou;
          best = static_cast<int>(g);
        }
      }
      if (best < 0) continue;
      used[static_cast<size_t>(best)] = 1;
      ++matched;
      if (c.gt_labels[static_cast<size_t>(best)] == c.detections[oi].predicted_class) ++correct;
    }
    CHECK(got.matched == matched);
    if (matched > 0) CHECK(*got.accuracy == doctest::Approx(static_cast<double>(correct) / matched));
  }
}

TEST_CASE("confusion trace over sum equals classification accuracy") {
  Rng rng(5);
  std::vector<CaseDetections> cases;
  for (int ci = 0; ci < 6; ++ci) {
    CaseDetections c;
    for (int g = 0; g < 3; ++g) {
      std::vector<int64_t> vox;
      for (int64_t i = 0; i < 10; ++i) vox.push_back(g * 40 + i);
      c.gt_masks.push_back(mask_of(vox));
      c.gt_labels.push_back(static_cast<int>(rng.uniform_int(kNumClasses)));
      std::vector<int64_t> dvox;
      for (int64_t i = 0; i < 10; ++i) dvox.push_back(g * 40 + i + (rng.uniform01() < 0.3 ? 2 : 0));
      c.detections.push_back(det_of(dvox, static_cast<int>(rng.uniform_int(kNumClasses)),
                                    rng.uniform01()));
    }
    cases.push_back(std::move(c));
  }
  LesionMetrics m = lesion_metrics(cases, 0.3);
  int64_t trace = 0, total = 0;
  for (int g = 0; g < kNumClasses; ++g)
    for (int p = 0; p < kNumClasses; ++p) {
      total += m.confusion[static_cast<size_t>(g)][static_cast<size_t>(p)];
      if (g == p) trace += m.confusion[static_cast<size_t>(g)][static_cast<size_t>(p)];
    }
  CHECK(total == m.matched);
  if (m.matched > 0)
    CHECK(*m.accuracy == doctest::Approx(static_cast<double>(trace) / total).epsilon(1e-15));

  // confusion row sums equal per-class matched ground-truth counts
  for (int g = 0; g < kNumClasses; ++g) {
    int64_t row = 0;
    for (int p = 0; p < kNumClasses; ++p) row += m.confusion[static_cast<size_t>(g)][static_cast<size_t>(p)];
    CHECK(row <= m.matched);
  }
}

TEST_CASE("precision and sensitivity are monotone non-increasing in the IoU threshold") {
  Rng rng(6);
  std::vector<CaseDetections> cases;
  for (int ci = 0; ci < 4; ++ci) {
    CaseDetections c;
    for (int g = 0; g < 3; ++g) {
      std::vector<int64_t> vox, dvox;
      for (int64_t i = 0; i < 12; ++i) vox.push_back(g * 50 + i);
      const int64_t shift = static_cast<int64_t>(rng.uniform_int(8));
      for (int64_t i = 0; i < 12; ++i) dvox.push_back(g * 50 + i + shift);
      c.gt_masks.push_back(mask_of(vox));
      c.gt_labels.push_back(0);
      c.detections.push_back(det_of(dvox, 0, rng.uniform01()));
    }
    cases.push_back(std::move(c));
  }
  double prev_p = 1.0, prev_s = 1.0;
  for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    LesionMetrics m = lesion_metrics(cases, thr);
    const double p = m.precision.value_or(0.0);
    const double s = m.sensitivity.value_or(0.0);
    CHECK(p <= prev_p + 1e-12);
    CHECK(s <= prev_s + 1e-12);
    prev_p = p;
    prev_s = s;
  }
}

TEST_CASE("dice score: fixtures and errors") {
  Tensor<uint8_t> a({4, 4, 4}), b({4, 4, 4});
  CHECK(dice_score(a, b) == 1.0);  // both empty
  for (int64_t i = 0; i < 10; ++i) a[i] = 1;
  CHECK(dice_score(a, a) == 1.0);
  for (int64_t i = 20; i < 30; ++i) b[i] = 1;
  CHECK(dice_score(a, b) == 0.0);

  Tensor<uint8_t> c({6, 6, 6}), d({6, 6, 6});
  for (int64_t i = 0; i < 100; ++i) c[i] = 1;
  for (int64_t i = 50; i < 150; ++i) d[i] = 1;
  CHECK(dice_score(c, d) == doctest::Approx(0.5).epsilon(1e-15));

  Tensor<uint8_t> e({3, 3, 3});
  CHECK_THROWS_AS(dice_score(a, e), Error);
}

TEST_CASE("eval report JSON round trip and table shape") {
  EvalReport r;
  r.num_cases = 12;
  r.patient.auc8 = 0.91;
  r.patient.auc2 = 0.95;
  r.patient.per_class[0] = 0.99;
  r.patient.per_class[3] = std::nullopt;
  r.patient.undefined_classes = 1;
  r.lesion.precision = 0.8;
  r.lesion.sensitivity = 0.7;
  r.lesion.accuracy = 0.9;
  r.lesion.matched = 9;
  r.lesion.detections = 11;
  r.lesion.ground_truths = 13;
  r.lesion.confusion[2][3] = 4;
  r.mean_dice = 0.77;

  EvalReport rt = EvalReport::from_json(r.to_json());
  CHECK(rt.to_json() == r.to_json());
  CHECK(*rt.patient.auc8 == 0.91);
  CHECK_FALSE(rt.patient.per_class[3].has_value());
  CHECK(rt.lesion.confusion[2][3] == 4);

  const std::string table = r.to_table();
  CHECK(table.find("AUC-8") != std::string::npos);
  CHECK(table.find("Dice") != std::string::npos);
  const std::string csv = r.confusion_csv();
  CHECK(csv.find("meta,0,0,0,4") != std::string::npos);
  CHECK_THROWS_AS(EvalReport::from_json("{broken"), Error);
}
