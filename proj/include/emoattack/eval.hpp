#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emoattack/errors.hpp"
#include "emoattack/features.hpp"
#include "emoattack/nn.hpp"
#include "emoattack/triggers.hpp"
#include "emoattack/waveform.hpp"

namespace emoattack {

inline std::vector<float> logmel_features(const Waveform& w, const MelConfig& cfg = {}) {
  const auto m = mel_spectrogram(w, cfg);
  return {m.values.begin(), m.values.end()};
}

struct HitCount {
  std::size_t hits = 0;
  std::size_t eligible = 0;
  double rate() const { return eligible == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(eligible); }
};

struct AsrResult {
  double asr = 0.0;
  std::size_t hits = 0;
  std::size_t eligible = 0;
  std::map<int, HitCount> by_class;
  std::map<Emotion, HitCount> by_emotion;
};

// Fraction of triggered inputs whose original label is not y_t that are
// classified as y_t. `predict_triggered(u)` returns the model's prediction
// on the triggered version of u.
inline AsrResult attack_success_rate(const std::vector<Utterance>& test, int y_t,
                                     const std::function<std::size_t(const Utterance&)>& predict_triggered) {
  AsrResult r;
  for (const auto& u : test) {
    if (u.class_label == y_t) continue;
    const bool hit = predict_triggered(u) == static_cast<std::size_t>(y_t);
    ++r.eligible;
    r.hits += hit ? 1 : 0;
    auto& c = r.by_class[u.class_label];
    ++c.eligible;
    c.hits += hit ? 1 : 0;
    auto& e = r.by_emotion[u.emotion];
    ++e.eligible;
    e.hits += hit ? 1 : 0;
  }
  if (r.eligible == 0) throw DomainError("attack_success_rate: no test sample has a label other than y_t");
  r.asr = static_cast<double>(r.hits) / static_cast<double>(r.eligible);
  return r;
}

inline AsrResult attack_success_rate(const Classifier& model, const std::vector<Utterance>& test,
                                     const TriggerSpec& trigger, int y_t) {
  return attack_success_rate(test, y_t, [&](const Utterance& u) {
    return model.predict(logmel_features(apply_trigger(trigger, u.waveform)));
  });
}

inline double accuracy(const std::vector<std::size_t>& predictions, const std::vector<Utterance>& test) {
  if (test.empty() || predictions.size() != test.size()) throw DomainError("accuracy: empty or mismatched input");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i) ok += predictions[i] == static_cast<std::size_t>(test[i].class_label);
  return static_cast<double>(ok) / static_cast<double>(test.size());
}

inline double accuracy(const Classifier& model, const std::vector<Utterance>& test) {
  std::vector<std::size_t> pred;
  pred.reserve(test.size());
  for (const auto& u : test) pred.push_back(model.predict(logmel_features(u.waveform)));
  return accuracy(pred, test);
}

inline double accuracy_variance_points(double acc_baseline, double acc_backdoored) {
  return std::abs(acc_baseline - acc_backdoored) * 100.0;
}

inline double accuracy_variance(const Classifier& baseline, const Classifier& backdoored,
                                const std::vector<Utterance>& test) {
  return accuracy_variance_points(accuracy(baseline, test), accuracy(backdoored, test));
}

// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

// Pearson correlation of the fractional ranks; NaN if either side is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DomainError("spearman: need two equal-length series of length >= 2");
  const auto ra = fractional_ranks(a), rb = fractional_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

struct Distortion {
  double lsd_db = 0.0;
  double snr_db = std::numeric_limits<double>::infinity();  // +inf when the signals are identical
};

// Mean per-frame log-spectral distance (dB, 400/160 Hann STFT) and the SNR of
// clean against (triggered - clean).
inline Distortion distortion_report(const Waveform& clean, const Waveform& triggered) {
  if (clean.size() != triggered.size()) throw DomainError("distortion_report: length mismatch");
  const auto a = clean.to_double(), b = triggered.to_double();
  Distortion d;
  double signal = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    signal += a[i] * a[i];
    noise += (b[i] - a[i]) * (b[i] - a[i]);
  }
  d.snr_db = noise == 0.0 ? std::numeric_limits<double>::infinity()
                          : 10.0 * std::log10(std::max(signal, 1e-300) / noise);
  const std::size_t win = std::min<std::size_t>(400, a.size() - a.size() % 2);
  if (win < 2) return d;
  const auto sa = stft(a, clean.sample_rate(), win, win * 2 / 5);
  const auto sb = stft(b, clean.sample_rate(), win, win * 2 / 5);
  double total = 0.0;
  for (std::size_t t = 0; t < sa.n_frames; ++t) {
    double acc = 0.0;
    for (std::size_t k = 0; k < sa.n_bins; ++k) {
      const double la = 10.0 * std::log10(std::norm(sa.at(t, k)) + 1e-10);
      const double lb = 10.0 * std::log10(std::norm(sb.at(t, k)) + 1e-10);
      acc += (la - lb) * (la - lb);
    }
    total += std::sqrt(acc / static_cast<double>(sa.n_bins));
  }
  d.lsd_db = total / static_cast<double>(sa.n_frames);
  return d;
}

struct SweepPoint {
  std::size_t pn = 0;
  double asr = 0.0;
  double av_points = 0.0;
};

struct SweepResult {
  Emotion target_emotion = Emotion::Angry;
  std::vector<SweepPoint> points;
  std::optional<std::size_t> min_pn;  // smallest pn with asr >= threshold

  double rank_correlation() const {
    std::vector<double> pn, asr;
    for (const auto& p : points) {
      pn.push_back(static_cast<double>(p.pn));
      asr.push_back(p.asr);
    }
    return spearman(pn, asr);
  }
};

inline std::optional<std::size_t> minimal_pn(const std::vector<SweepPoint>& points, double threshold) {
  for (const auto& p : points) {
    if (p.asr >= threshold) return p.pn;
  }
  return std::nullopt;
}

// One report.csv row.
struct ReportRow {
  std::string run_id;
  TriggerKind trigger_kind = TriggerKind::ProsodyEVC;
  Emotion target_emotion = Emotion::Angry;
  int y_t = 0;
  std::size_t pn = 0;
  double asr = 0.0;
  double av_points = 0.0;
  double clean_acc_baseline = 0.0;
  double clean_acc_backdoored = 0.0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double lsd = 0.0;
  double snr_db = 0.0;
  std::uint64_t synth_seed = 0, split_seed = 0, select_seed = 0, trigger_seed = 0, init_seed = 0, shuffle_seed = 0;
  std::string timestamp;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {
      "run_id",        "trigger_kind", "target_emotion", "y_t",          "pn",          "asr",
      "av_points",     "clean_acc_baseline", "clean_acc_backdoored", "micro_f1", "macro_f1", "lsd",
      "snr_db",        "synth_seed",   "split_seed",     "select_seed",  "trigger_seed", "init_seed",
      "shuffle_seed",  "timestamp"};
  return cols;
}

inline std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> report_fields(const ReportRow& r) {
  return {r.run_id,
          std::string(to_string(r.trigger_kind)),
          std::string(to_string(r.target_emotion)),
          std::to_string(r.y_t),
          std::to_string(r.pn),
          format_number(r.asr),
          format_number(r.av_points),
          format_number(r.clean_acc_baseline),
          format_number(r.clean_acc_backdoored),
          format_number(r.micro_f1),
          format_number(r.macro_f1),
          format_number(r.lsd),
          format_number(r.snr_db),
          std::to_string(r.synth_seed),
          std::to_string(r.split_seed),
          std::to_string(r.select_seed),
          std::to_string(r.trigger_seed),
          std::to_string(r.init_seed),
          std::to_string(r.shuffle_seed),
          r.timestamp};
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "# asr counts only triggered test inputs whose original label differs from y_t\n";
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << cols[i] << (i + 1 == cols.size() ? '\n' : ',');
  for (const auto& r : rows) {
    const auto f = report_fields(r);
    for (std::size_t i = 0; i < f.size(); ++i) os << f[i] << (i + 1 == f.size() ? '\n' : ',');
  }
  return os.str();
}

// Parses report_csv output into column -> values (one entry per row).
inline std::vector<std::map<std::string, std::string>> parse_report_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header.empty()) {
      header = split(line);
      continue;
    }
    const auto f = split(line);
    if (f.size() != header.size()) throw FormatError("report.csv: row has " + std::to_string(f.size()) + " fields");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

// Line chart of ASR against PN, one polyline per curve.
inline std::string curves_svg(const std::vector<SweepResult>& curves) {
  const double width = 640, height = 400, left = 60, right = 140, top = 30, bottom = 50;
  std::size_t max_pn = 1;
  for (const auto& c : curves) {
    for (const auto& p : c.points) max_pn = std::max(max_pn, p.pn);
  }
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double pn) { return left + pw * pn / static_cast<double>(max_pn); };
  auto py = [&](double asr) { return top + ph * (1.0 - std::clamp(asr, 0.0, 1.0)); };
  static const char* colors[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};
  std::ostringstream os;
  char buf[160];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", left, top + ph,
                left + pw, top + ph);
  os << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", left, top, left,
                top + ph);
  os << buf;
  for (int i = 0; i <= 4; ++i) {
    const double a = i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"end\">%.2f</text>\n",
                  left - 6, py(a) + 4, a);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">PN</text>\n",
                left + pw / 2, height - 12);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"14\" y=\"%g\" font-size=\"12\" transform=\"rotate(-90 14 %g)\" text-anchor=\"middle\">"
                "ASR</text>\n",
                top + ph / 2, top + ph / 2);
  os << buf;
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = colors[c % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" data-emotion=\""
       << to_string(curves[c].target_emotion) << "\" points=\"";
    for (std::size_t i = 0; i < curves[c].points.size(); ++i) {
      const auto& p = curves[c].points[i];
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(static_cast<double>(p.pn)), py(p.asr));
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\" fill=\"%s\">%s</text>\n",
                  left + pw + 10, top + 16.0 * static_cast<double>(c + 1), color,
                  std::string(to_string(curves[c].target_emotion)).c_str());
    os << buf;
  }
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"10\" text-anchor=\"middle\">%zu</text>\n",
                    px(static_cast<double>(p.pn)), top + ph + 14, p.pn);
      os << buf;
    }
    break;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace emoattack
