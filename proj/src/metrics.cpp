#include "lidia/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace lidia::eval {

using nlohmann::json;

std::optional<double> auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw dimension_error("auc: score/label size mismatch");
  int64_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  // average ranks; tie groups share the mean rank, which reproduces the
  // pairwise wins + half-ties statistic exactly
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

PatientMetrics patient_metrics(const std::vector<infer::PatientDiagnosis>& diagnoses,
                               const std::vector<CaseLabels>& labels, bool auc2_single_binary) {
  if (diagnoses.size() != labels.size())
    throw dimension_error("patient_metrics: diagnosis/label count mismatch");
  if (diagnoses.size() < 2) throw Error("too_few_cases", "patient metrics need >= 2 cases");

  PatientMetrics out;
  double sum8 = 0.0;
  int defined8 = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> scores;
    std::vector<int> y;
    for (size_t i = 0; i < diagnoses.size(); ++i) {
      scores.push_back(diagnoses[i].class_prob[static_cast<size_t>(c)]);
      y.push_back(labels[i].has_class[static_cast<size_t>(c)] ? 1 : 0);
    }
    out.per_class[static_cast<size_t>(c)] = auc(scores, y);
    if (out.per_class[static_cast<size_t>(c)]) {
      sum8 += *out.per_class[static_cast<size_t>(c)];
      ++defined8;
    } else {
      ++out.undefined_classes;
    }
  }
  if (defined8 > 0) out.auc8 = sum8 / defined8;

  if (auc2_single_binary) {
    // one malignant-vs-benign AUC over patients having either
    std::vector<double> scores;
    std::vector<int> y;
    for (size_t i = 0; i < diagnoses.size(); ++i) {
      const bool mal = labels[i].has_any(malignant_classes());
      const bool ben = labels[i].has_any(benign_classes());
      if (!mal && !ben) continue;
      scores.push_back(diagnoses[i].malignant);
      y.push_back(mal ? 1 : 0);
    }
    out.auc2 = scores.empty() ? std::nullopt : auc(scores, y);
    out.auc_malignant = out.auc2;
  } else {
    std::vector<double> ms, bs;
    std::vector<int> my, by;
    for (size_t i = 0; i < diagnoses.size(); ++i) {
      ms.push_back(diagnoses[i].malignant);
      my.push_back(labels[i].has_any(malignant_classes()) ? 1 : 0);
      bs.push_back(diagnoses[i].benign);
      by.push_back(labels[i].has_any(benign_classes()) ? 1 : 0);
    }
    out.auc_malignant = auc(ms, my);
    out.auc_benign = auc(bs, by);
    double sum = 0.0;
    int n = 0;
    if (out.auc_malignant) {
      sum += *out.auc_malignant;
      ++n;
    }
    if (out.auc_benign) {
      sum += *out.auc_benign;
      ++n;
    }
    if (n > 0) out.auc2 = sum / n;
  }
  return out;
}

LesionMetrics lesion_metrics(const std::vector<CaseDetections>& cases, double iou_threshold) {
  LesionMetrics m;

  struct Flat {
    size_t case_idx;
    size_t det_idx;
    double confidence;
  };
  std::vector<Flat> all;
  for (size_t ci = 0; ci < cases.size(); ++ci) {
    m.detections += static_cast<int64_t>(cases[ci].detections.size());
    m.ground_truths += static_cast<int64_t>(cases[ci].gt_masks.size());
    for (size_t di = 0; di < cases[ci].detections.size(); ++di)
      all.push_back({ci, di, cases[ci].detections[di].confidence});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Flat& a, const Flat& b) { return a.confidence > b.confidence; });

  std::vector<std::vector<char>> gt_used;
  for (const auto& c : cases) gt_used.emplace_back(c.gt_masks.size(), 0);

  int64_t correct = 0;
  for (const auto& f : all) {
    const auto& det = cases[f.case_idx].detections[f.det_idx];
    int best_gt = -1;
    double best_iou = 0.0;
    for (size_t gi = 0; gi < cases[f.case_idx].gt_masks.size(); ++gi) {
      if (gt_used[f.case_idx][gi]) continue;
      const double iou = infer::mask_iou(det.mask, cases[f.case_idx].gt_masks[gi]);
      if (iou >= iou_threshold && iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt < 0) continue;
    gt_used[f.case_idx][static_cast<size_t>(best_gt)] = 1;
    ++m.matched;
    const int gt_cls = cases[f.case_idx].gt_labels[static_cast<size_t>(best_gt)];
    m.confusion[static_cast<size_t>(gt_cls)][static_cast<size_t>(det.predicted_class)]++;
    if (gt_cls == det.predicted_class) ++correct;
  }

  if (m.detections > 0)
    m.precision = static_cast<double>(m.matched) / static_cast<double>(m.detections);
  if (m.ground_truths > 0)
    m.sensitivity = static_cast<double>(m.matched) / static_cast<double>(m.ground_truths);
  if (m.matched > 0) m.accuracy = static_cast<double>(correct) / static_cast<double>(m.matched);
  return m;
}

double dice_score(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt) {
  if (pred.shape() != gt.shape()) throw dimension_error("dice_score: shape mismatch");
  int64_t inter = 0, a = 0, b = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool x = pred[i] != 0, y = gt[i] != 0;
    a += x;
    b += y;
    inter += (x && y) ? 1 : 0;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

namespace {

json opt_to_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

std::optional<double> opt_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "  n/a ";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.4f", *v);
  return buf;
}

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["num_cases"] = num_cases;
  j["patient"]["auc8"] = opt_to_json(patient.auc8);
  j["patient"]["auc2"] = opt_to_json(patient.auc2);
  j["patient"]["auc_malignant"] = opt_to_json(patient.auc_malignant);
  j["patient"]["auc_benign"] = opt_to_json(patient.auc_benign);
  j["patient"]["undefined_classes"] = patient.undefined_classes;
  json per = json::object();
  for (int c = 0; c < kNumClasses; ++c)
    per[class_names()[static_cast<size_t>(c)]] = opt_to_json(patient.per_class[static_cast<size_t>(c)]);
  j["patient"]["per_class"] = per;
  j["lesion"]["precision"] = opt_to_json(lesion.precision);
  j["lesion"]["sensitivity"] = opt_to_json(lesion.sensitivity);
  j["lesion"]["accuracy"] = opt_to_json(lesion.accuracy);
  j["lesion"]["matched"] = lesion.matched;
  j["lesion"]["detections"] = lesion.detections;
  j["lesion"]["ground_truths"] = lesion.ground_truths;
  json conf = json::array();
  for (const auto& row : lesion.confusion) conf.push_back(row);
  j["lesion"]["confusion"] = conf;
  j["pixel"]["mean_dice"] = mean_dice;
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
    EvalReport r;
    r.num_cases = j.at("num_cases").get<int>();
    r.patient.auc8 = opt_from_json(j.at("patient").at("auc8"));
    r.patient.auc2 = opt_from_json(j.at("patient").at("auc2"));
    r.patient.auc_malignant = opt_from_json(j.at("patient").at("auc_malignant"));
    r.patient.auc_benign = opt_from_json(j.at("patient").at("auc_benign"));
    r.patient.undefined_classes = j.at("patient").at("undefined_classes").get<int>();
    for (int c = 0; c < kNumClasses; ++c)
      r.patient.per_class[static_cast<size_t>(c)] =
          opt_from_json(j.at("patient").at("per_class").at(class_names()[static_cast<size_t>(c)]));
    r.lesion.precision = opt_from_json(j.at("lesion").at("precision"));
    r.lesion.sensitivity = opt_from_json(j.at("lesion").at("sensitivity"));
    r.lesion.accuracy = opt_from_json(j.at("lesion").at("accuracy"));
    r.lesion.matched = j.at("lesion").at("matched").get<int64_t>();
    r.lesion.detections = j.at("lesion").at("detections").get<int64_t>();
    r.lesion.ground_truths = j.at("lesion").at("ground_truths").get<int64_t>();
    for (int g = 0; g < kNumClasses; ++g)
      for (int p = 0; p < kNumClasses; ++p)
        r.lesion.confusion[static_cast<size_t>(g)][static_cast<size_t>(p)] =
            j.at("lesion").at("confusion").at(static_cast<size_t>(g)).at(static_cast<size_t>(p)).get<int64_t>();
    r.mean_dice = j.at("pixel").at("mean_dice").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw format_error(std::string("malformed eval report: ") + e.what());
  }
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "            | Patient-wise    | Lesion-wise              | Pixel-wise\n";
  os << "            | AUC-8  | AUC-2  | Prec.  | Sens.  | Acc.   | Dice\n";
  os << "------------+--------+--------+--------+--------+--------+-------\n";
  os << "LIDIA       | " << fmt(patient.auc8) << " | " << fmt(patient.auc2) << " | "
     << fmt(lesion.precision) << " | " << fmt(lesion.sensitivity) << " | "
     << fmt(lesion.accuracy) << " | " << fmt(mean_dice) << "\n";
  os << "\nper-class AUC:\n";
  for (int c = 0; c < kNumClasses; ++c)
    os << "  " << class_names()[static_cast<size_t>(c)] << ": "
       << fmt(patient.per_class[static_cast<size_t>(c)]) << "\n";
  return os.str();
}

std::string EvalReport::confusion_csv() const {
  std::ostringstream os;
  os << "gt\\pred";
  for (int c = 0; c < kNumClasses; ++c) os << "," << class_names()[static_cast<size_t>(c)];
  os << "\n";
  for (int g = 0; g < kNumClasses; ++g) {
    os << class_names()[static_cast<size_t>(g)];
    for (int p = 0; p < kNumClasses; ++p)
      os << "," << lesion.confusion[static_cast<size_t>(g)][static_cast<size_t>(p)];
    os << "\n";
  }
  return os.str();
}

}  // namespace lidia::eval
