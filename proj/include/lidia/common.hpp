#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidia {

/// Contrast-enhancement phases in temporal order. D (delayed) is optional.
enum class Phase : int { NC = 0, A = 1, V = 2, D = 3 };

constexpr int kNumPhases = 4;
constexpr int kNumClasses = 8;
constexpr int kNoObjectClass = kNumClasses;  // extra class-head slot
constexpr int kOthersClass = 7;

inline const std::array<std::string, kNumPhases>& phase_names() {
  static const std::array<std::string, kNumPhases> names = {"NC", "A", "V", "D"};
  return names;
}

inline const std::array<std::string, kNumClasses>& class_names() {
  static const std::array<std::string, kNumClasses> names = {"HCC",  "ICC", "meta", "heman",
                                                             "FNH",  "cyst", "calc", "others"};
  return names;
}

inline const std::vector<int>& malignant_classes() {
  static const std::vector<int> v = {0, 1, 2};  // HCC, ICC, meta
  return v;
}

inline const std::vector<int>& benign_classes() {
  static const std::vector<int> v = {3, 4, 5, 6};  // heman, FNH, cyst, calc
  return v;
}

inline Phase phase_from_name(const std::string& s) {
  for (int i = 0; i < kNumPhases; ++i)
    if (phase_names()[static_cast<size_t>(i)] == s) return static_cast<Phase>(i);
  throw std::invalid_argument("unknown phase: " + s);
}

inline int class_from_name(const std::string& s) {
  for (int i = 0; i < kNumClasses; ++i)
    if (class_names()[static_cast<size_t>(i)] == s) return i;
  throw std::invalid_argument("unknown class: " + s);
}

/// Error with a stable machine-parsable code (CLI prints `error[<code>]: msg`).
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline Error config_error(const std::string& msg) { return Error("config_invalid", msg); }
inline Error corrupt_data_error(const std::string& msg) { return Error("corrupt_data", msg); }
inline Error format_error(const std::string& msg) { return Error("format_error", msg); }
inline Error io_error(const std::string& msg) { return Error("io_error", msg); }
inline Error dimension_error(const std::string& msg) { return Error("dimension_mismatch", msg); }

}  // namespace lidia
