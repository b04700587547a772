#include "cdrsteer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

#include "cdrsteer/probing.hpp"
#include "csv.hpp"
#include "json.hpp"

namespace cdrsteer {

namespace {

std::string cell(const std::optional<double>& v) {
  return v ? csv::number(*v) : std::string(kUndefinedMarker);
}

}  // namespace

HardLabelRates hard_label_rate(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("hard_label_rate: no records");
  std::size_t compliant = 0;
  std::size_t utilitarian = 0;
  for (const EvalRecord& r : records) {
    if (!r.compliant) continue;
    ++compliant;
    if (r.hard_label == HardLabel::Utilitarian) ++utilitarian;
  }
  HardLabelRates out;
  out.incr = static_cast<double>(records.size() - compliant) / static_cast<double>(records.size());
  if (compliant > 0) {
    out.u_ip = static_cast<double>(utilitarian) / static_cast<double>(compliant);
    out.d_ip = 1.0 - *out.u_ip;
  }
  return out;
}

std::optional<double> token_prob_ratio(std::span<const double> dist, int token_u, int token_d) {
  if (token_u == token_d) throw std::invalid_argument("token_prob_ratio: token ids must differ");
  auto at = [&](int t) {
    if (t < 0 || static_cast<std::size_t>(t) >= dist.size())
      throw std::out_of_range("token_prob_ratio: token id out of range");
    return dist[static_cast<std::size_t>(t)];
  };
  const double pu = at(token_u);
  const double pd = at(token_d);
  if (!(pu + pd > 0.0)) return std::nullopt;
  return pu / (pu + pd);
}

double mae(std::span<const double> observed, std::span<const double> targets) {
  if (observed.empty()) throw std::invalid_argument("mae: empty grid");
  if (observed.size() != targets.size()) throw std::invalid_argument("mae: length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) sum += std::abs(observed[i] - targets[i]);
  return sum / static_cast<double>(observed.size());
}

namespace {

std::vector<std::size_t> alpha_order(const ControlSeries& s) {
  if (s.alpha.size() != s.u_op.size()) throw std::invalid_argument("control series: length mismatch");
  if (s.alpha.size() < 2) throw std::invalid_argument("control series: needs at least 2 control levels");
  std::vector<std::size_t> order(s.alpha.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.alpha[a] < s.alpha[b]; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (s.alpha[order[i]] == s.alpha[order[i - 1]]) throw std::invalid_argument("control series: tied α values");
  return order;
}

}  // namespace

double monotonicity_violation_rate(const ControlSeries& series) {
  const auto order = alpha_order(series);
  std::size_t decreases = 0;
  for (std::size_t i = 1; i < order.size(); ++i)
    if (series.u_op[order[i]] < series.u_op[order[i - 1]]) ++decreases;
  return static_cast<double>(decreases) / static_cast<double>(order.size() - 1);
}

ControlRankMetrics control_rank_metrics(std::span<const ControlSeries> per_prompt) {
  if (per_prompt.empty()) throw std::invalid_argument("control_rank_metrics: no prompts");
  ControlRankMetrics out;
  for (const ControlSeries& s : per_prompt) {
    alpha_order(s);
    out.rho += spearman(s.alpha, s.u_op).rho;
    out.mvr += monotonicity_violation_rate(s);
  }
  out.rho /= static_cast<double>(per_prompt.size());
  out.mvr /= static_cast<double>(per_prompt.size());
  return out;
}

CalibrationReport build_calibration_report(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("calibration report: no records");
  std::map<double, std::vector<EvalRecord>> by_alpha;
  std::map<int, ControlSeries> by_prompt;
  for (const EvalRecord& r : records) {
    by_alpha[r.alpha_u].push_back(r);
    if (r.u_op) {
      ControlSeries& s = by_prompt[r.prompt_id];
      s.alpha.push_back(r.alpha_u);
      s.u_op.push_back(*r.u_op);
    }
  }

  CalibrationReport report;
  Vector observed;
  Vector targets;
  for (const auto& [alpha, group] : by_alpha) {
    CalibrationRow row;
    row.alpha_u = alpha;
    const HardLabelRates rates = hard_label_rate(group);
    row.u_ip = rates.u_ip;
    row.incr = rates.incr;
    double sum = 0.0;
    std::size_t n = 0;
    for (const EvalRecord& r : group)
      if (r.u_op) {
        sum += *r.u_op;
        ++n;
      }
    if (n > 0) {
      row.mean_u_op = sum / static_cast<double>(n);
      row.deviation_pp = (*row.mean_u_op - alpha) * 100.0;
      observed.push_back(*row.mean_u_op);
      targets.push_back(alpha);
    }
    report.rows.push_back(row);
  }
  if (observed.empty()) throw std::runtime_error("calibration report: no α level has a defined Ū_op");
  report.mae_pp = mae(observed, targets) * 100.0;

  std::vector<ControlSeries> series;
  for (auto& [id, s] : by_prompt)
    if (s.alpha.size() >= 2) series.push_back(std::move(s));
  if (!series.empty()) report.rank = control_rank_metrics(series);
  return report;
}

void write_calibration_csv(std::ostream& out, const CalibrationReport& report) {
  out << "alpha_u,mean_u_op,u_ip,deviation_pp,incr\n";
  for (const CalibrationRow& r : report.rows)
    out << csv::number(r.alpha_u) << ',' << cell(r.mean_u_op) << ',' << cell(r.u_ip) << ',' << cell(r.deviation_pp)
        << ',' << csv::number(r.incr) << '\n';
}

void write_calibration_summary_json(std::ostream& out, const CalibrationReport& report) {
  const nlohmann::json j = {{"mae_pp", report.mae_pp}, {"rho", report.rank.rho}, {"mvr", report.rank.mvr}};
  out << j.dump(2) << '\n';
}

std::string_view hard_label_name(HardLabel label) {
  switch (label) {
    case HardLabel::Utilitarian: return "U";
    case HardLabel::Deontological: return "D";
    case HardLabel::None: return "none";
  }
  return "none";
}

HardLabel parse_hard_label(std::string_view name) {
  if (name == "U") return HardLabel::Utilitarian;
  if (name == "D") return HardLabel::Deontological;
  if (name == "none") return HardLabel::None;
  throw std::invalid_argument("unknown hard label: " + std::string(name));
}

}  // namespace cdrsteer
