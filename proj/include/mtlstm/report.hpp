#pragma once

#include <charconv>
#include <fstream>
#include <string>
#include <vector>

#include "mtlstm/train.hpp"

namespace mtlstm {

/// Shortest round-trip decimal form, locale-independent ('.' separator).
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

/// step,joint_loss,<task>_loss... — one row per training step, LF endings.
inline void write_metrics_csv(const std::string& path,
                              const std::vector<std::string>& task_names,
                              const TrainResult& result) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  os << "step,joint_loss";
  for (const auto& name : task_names) os << ',' << name << "_loss";
  os << '\n';
  for (const StepRecord& rec : result.trajectory) {
    os << rec.step << ',' << format_double(rec.joint);
    for (double v : rec.per_task) os << ',' << format_double(v);
    os << '\n';
  }
}

inline void write_accuracy_csv(const std::string& path,
                               const std::vector<std::string>& task_names,
                               const std::vector<double>& accuracies) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_accuracy_csv: cannot open " + path);
  os << "task,accuracy\n";
  for (std::size_t k = 0; k < task_names.size(); ++k) {
    os << task_names[k] << ',' << format_double(accuracies[k]) << '\n';
  }
}

/// key: value report mirroring the CSV content.
inline void write_eval_report(const std::string& path,
                              const std::vector<std::string>& task_names,
                              const std::vector<double>& accuracies,
                              const TrainResult* result = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_eval_report: cannot open " + path);
  for (std::size_t k = 0; k < task_names.size(); ++k) {
    os << "accuracy." << task_names[k] << ": " << format_double(accuracies[k])
       << '\n';
  }
  if (result != nullptr && !result->trajectory.empty()) {
    os << "steps: " << result->trajectory.size() << '\n';
    os << "final_joint_loss: "
       << format_double(result->trajectory.back().joint) << '\n';
  }
}

/// Plot-ready square matrix with task names on both axes; the diagonal is
/// 1.0 by convention.
inline void write_ppg_csv(const std::string& path,
                          const std::vector<std::string>& task_names,
                          const std::vector<std::vector<double>>& matrix) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppg_csv: cannot open " + path);
  os << "task";
  for (const auto& name : task_names) os << ',' << name;
  os << '\n';
  for (std::size_t i = 0; i < task_names.size(); ++i) {
    os << task_names[i];
    for (std::size_t j = 0; j < task_names.size(); ++j) {
      os << ',' << format_double(matrix[i][j]);
    }
    os << '\n';
  }
}

inline void write_sweep_csv(const std::string& path,
                            const std::vector<std::string>& task_names,
                            const std::vector<std::pair<std::size_t, std::vector<double>>>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_sweep_csv: cannot open " + path);
  os << "n0";
  for (const auto& name : task_names) os << ',' << name << "_accuracy";
  os << '\n';
  for (const auto& [n0, accs] : rows) {
    os << n0;
    for (double a : accs) os << ',' << format_double(a);
    os << '\n';
  }
}

}  // namespace mtlstm
