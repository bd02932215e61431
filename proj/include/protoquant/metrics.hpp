#pragma once

// Accuracy, prototype purity, and the spatial-misalignment stability family
// (PAC, PLC, PRC, AC) over activation records.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "featurestore.hpp"
#include "head.hpp"

namespace protoquant {

inline double top1(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty()) throw DomainError("top1: empty input");
  if (predictions.size() != labels.size()) throw ShapeError("top1: length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
}

/// One scored spatial location, for purity ranking.
struct ScoredLocation {
  std::size_t sample = 0;
  std::size_t location = 0;
  double score = 0.0;
  std::int32_t part = -1;
};

/// Frequency of the modal part among the top_n highest scores. Unannotated
/// locations (part -1) are ignored; ties rank by sample, then location.
inline double purity_from_scores(std::vector<ScoredLocation> scored, std::size_t top_n = 10) {
  std::erase_if(scored, [](const ScoredLocation& s) { return s.part < 0; });
  if (top_n == 0 || scored.size() < top_n) {
    throw DomainError("purity: need at least " + std::to_string(top_n) + " annotated locations, have " +
                      std::to_string(scored.size()));
  }
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top_n), scored.end(),
                    [](const ScoredLocation& a, const ScoredLocation& b) {
                      if (a.score != b.score) return a.score > b.score;
                      if (a.sample != b.sample) return a.sample < b.sample;
                      return a.location < b.location;
                    });
  std::map<std::int32_t, std::size_t> counts;
  std::size_t modal = 0;
  for (std::size_t i = 0; i < top_n; ++i) modal = std::max(modal, ++counts[scored[i].part]);
  return static_cast<double>(modal) / static_cast<double>(top_n);
}

/// Concept probabilities of every annotated location, one vector per concept.
inline std::vector<std::vector<ScoredLocation>> annotated_scores(const HeadModel& model,
                                                                 const FeatureDataset& ds) {
  if (!ds.part_annotations) throw DomainError("purity: dataset has no part annotations");
  std::vector<std::vector<ScoredLocation>> out(model.concepts());
  for (std::size_t s = 0; s < ds.n_samples; ++s) {
    const ConceptActivation act = concept_match(ds.feature_map(s), model);
    for (std::size_t loc = 0; loc < ds.locations(); ++loc) {
      const std::int32_t part = ds.part(s, loc);
      if (part < 0) continue;
      for (std::size_t m = 0; m < model.concepts(); ++m) {
        out[m].push_back({s, loc, act.prob(loc, m), part});
      }
    }
  }
  return out;
}

inline double purity(const HeadModel& model, const FeatureDataset& ds, std::size_t concept_id,
                     std::size_t top_n = 10) {
  if (concept_id >= model.concepts()) throw IndexError("purity: concept out of range");
  return purity_from_scores(annotated_scores(model, ds)[concept_id], top_n);
}

// ---------------------------------------------------------------------------
// Spatial misalignment records

/// A (sample, concept) pair observed before and after a background perturbation.
struct PrototypeRecord {
  std::size_t sample = 0;
  std::size_t concept_id = 0;
  double activation_before = 0.0;
  double activation_after = 0.0;
  Rect bbox_before;
  Rect bbox_after;
  bool operator==(const PrototypeRecord&) const = default;
};

struct SampleRecord {
  std::size_t true_label = 0;
  std::size_t prediction_before = 0;
  std::size_t prediction_after = 0;
  Vector activations_before;
  Vector activations_after;
  bool operator==(const SampleRecord&) const = default;
};

struct ActivationRecordSet {
  std::size_t image_width = 0;
  std::size_t image_height = 0;
  std::vector<std::vector<std::size_t>> class_concepts;
  std::vector<SampleRecord> samples;
  std::vector<PrototypeRecord> prototypes;
  bool operator==(const ActivationRecordSet&) const = default;

  void validate() const {
    for (const auto& p : prototypes) {
      if (p.sample >= samples.size()) throw DomainError("record refers to unknown sample");
      if (!(p.activation_before > 0.0 && p.activation_before <= 1.0) ||
          !(p.activation_after > 0.0 && p.activation_after <= 1.0)) {
        throw DomainError("activations must lie in (0, 1]");
      }
      for (const Rect& r : {p.bbox_before, p.bbox_after}) {
        if (r.x0 < 0 || r.y0 < 0 || r.x1 > static_cast<std::int32_t>(image_width) ||
            r.y1 > static_cast<std::int32_t>(image_height)) {
          throw DomainError("bounding box outside image bounds");
        }
      }
    }
    for (const auto& s : samples) {
      if (s.true_label >= class_concepts.size()) throw DomainError("sample label has no concept set");
    }
  }
};

inline double iou(const Rect& a, const Rect& b) {
  if (a.area() == 0 || b.area() == 0) throw DomainError("iou: degenerate (empty) rectangle");
  const Rect inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  const double i = static_cast<double>(inter.area());
  return i / static_cast<double>(a.area() + b.area() - inter.area());
}

/// Tightest pixel box around the cells whose activation is at least
/// threshold * max. Cells map to pixels through `geometry` (row-major H x W).
inline Rect activation_bbox(std::span<const double> activation_map, std::span<const Rect> geometry,
                            double threshold = 0.5) {
  if (activation_map.empty() || activation_map.size() != geometry.size()) {
    throw ShapeError("activation_bbox: map and geometry sizes differ");
  }
  const double cut = threshold * *std::max_element(activation_map.begin(), activation_map.end());
  Rect box{INT32_MAX, INT32_MAX, INT32_MIN, INT32_MIN};
  for (std::size_t i = 0; i < activation_map.size(); ++i) {
    if (activation_map[i] < cut) continue;
    box.x0 = std::min(box.x0, geometry[i].x0);
    box.y0 = std::min(box.y0, geometry[i].y0);
    box.x1 = std::max(box.x1, geometry[i].x1);
    box.y1 = std::max(box.y1, geometry[i].y1);
  }
  return box;
}

/// Mean relative activation decrease in percent; increases count as zero.
inline double pac(const ActivationRecordSet& records) {
  if (records.prototypes.empty()) throw DomainError("pac: no records");
  double total = 0.0;
  for (const auto& r : records.prototypes) {
    if (!(r.activation_before > 0.0)) throw DomainError("pac: non-positive before-activation");
    total += 100.0 * std::max(0.0, r.activation_before - r.activation_after) / r.activation_before;
  }
  return total / static_cast<double>(records.prototypes.size());
}

/// Mean 100 * (1 - IoU) between before and after activation boxes.
inline double plc(const ActivationRecordSet& records) {
  if (records.prototypes.empty()) throw DomainError("plc: no records");
  double total = 0.0;
  for (const auto& r : records.prototypes) total += 100.0 * (1.0 - iou(r.bbox_before, r.bbox_after));
  return total / static_cast<double>(records.prototypes.size());
}

/// Mean number of out-of-class concepts that newly overtake the target
/// concept: above it after the perturbation, not above it before.
inline double prc(const ActivationRecordSet& records) {
  if (records.prototypes.empty()) throw DomainError("prc: no records");
  double total = 0.0;
  for (const auto& r : records.prototypes) {
    if (r.sample >= records.samples.size()) throw DomainError("prc: unknown sample");
    const SampleRecord& s = records.samples[r.sample];
    if (r.concept_id >= s.activations_before.size() || r.concept_id >= s.activations_after.size()) {
      throw DomainError("prc: target concept missing from activation vectors");
    }
    if (s.true_label >= records.class_concepts.size()) throw DomainError("prc: unknown class");
    const auto& own = records.class_concepts[s.true_label];
    const double target_before = s.activations_before[r.concept_id];
    const double target_after = s.activations_after[r.concept_id];
    std::size_t count = 0;
    for (std::size_t j = 0; j < s.activations_after.size(); ++j) {
      if (std::find(own.begin(), own.end(), j) != own.end()) continue;
      if (s.activations_after[j] > target_after && s.activations_before[j] <= target_before) ++count;
    }
    total += static_cast<double>(count);
  }
  return total / static_cast<double>(records.prototypes.size());
}

/// top1(before) - top1(after), in percentage points.
inline double ac(const ActivationRecordSet& records) {
  if (records.samples.empty()) throw DomainError("ac: no samples");
  std::vector<std::size_t> before, after, labels;
  for (const auto& s : records.samples) {
    before.push_back(s.prediction_before);
    after.push_back(s.prediction_after);
    labels.push_back(s.true_label);
  }
  return top1(before, labels) - top1(after, labels);
}

// Text format, one record per line:
//   pqrec 1
//   image <width> <height>
//   class <c> <concept> ...
//   sample <true> <pred_before> <pred_after> <M> <before x M> <after x M>
//   proto <sample> <concept> <a_before> <a_after> <x0 y0 x1 y1> <x0 y0 x1 y1>
// Blank lines and lines starting with '#' are ignored. Reals are written with
// 17 significant digits so files round-trip exactly.

inline void write_records(std::ostream& out, const ActivationRecordSet& set) {
  out.precision(17);
  out << "pqrec 1\nimage " << set.image_width << ' ' << set.image_height << '\n';
  for (std::size_t c = 0; c < set.class_concepts.size(); ++c) {
    out << "class " << c;
    for (auto m : set.class_concepts[c]) out << ' ' << m;
    out << '\n';
  }
  for (const auto& s : set.samples) {
    out << "sample " << s.true_label << ' ' << s.prediction_before << ' ' << s.prediction_after << ' '
        << s.activations_before.size();
    for (double v : s.activations_before) out << ' ' << v;
    for (double v : s.activations_after) out << ' ' << v;
    out << '\n';
  }
  for (const auto& p : set.prototypes) {
    out << "proto " << p.sample << ' ' << p.concept_id << ' ' << p.activation_before << ' '
        << p.activation_after;
    for (const Rect& r : {p.bbox_before, p.bbox_after}) {
      out << ' ' << r.x0 << ' ' << r.y0 << ' ' << r.x1 << ' ' << r.y1;
    }
    out << '\n';
  }
}

inline ActivationRecordSet read_records(std::istream& in) {
  ActivationRecordSet set;
  std::string line;
  std::size_t line_no = 0;
  bool saw_header = false;
  auto fail = [&](const std::string& why) {
    throw FormatError("records line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (!saw_header) {
      int version = 0;
      if (tag != "pqrec" || !(ls >> version)) fail("missing 'pqrec' header");
      if (version != 1) throw UnsupportedVersionError("unsupported records version");
      saw_header = true;
      continue;
    }
    if (tag == "image") {
      if (!(ls >> set.image_width >> set.image_height)) fail("bad image line");
    } else if (tag == "class") {
      std::size_t c = 0;
      if (!(ls >> c)) fail("bad class line");
      if (set.class_concepts.size() <= c) set.class_concepts.resize(c + 1);
      std::size_t m;
      while (ls >> m) set.class_concepts[c].push_back(m);
    } else if (tag == "sample") {
      SampleRecord s;
      std::size_t n = 0;
      if (!(ls >> s.true_label >> s.prediction_before >> s.prediction_after >> n)) fail("bad sample line");
      s.activations_before.resize(n);
      s.activations_after.resize(n);
      for (double& v : s.activations_before) {
        if (!(ls >> v)) fail("short activation vector");
      }
      for (double& v : s.activations_after) {
        if (!(ls >> v)) fail("short activation vector");
      }
      set.samples.push_back(std::move(s));
    } else if (tag == "proto") {
      PrototypeRecord p;
      if (!(ls >> p.sample >> p.concept_id >> p.activation_before >> p.activation_after)) {
        fail("bad proto line");
      }
      for (Rect* r : {&p.bbox_before, &p.bbox_after}) {
        if (!(ls >> r->x0 >> r->y0 >> r->x1 >> r->y1)) fail("bad bounding box");
      }
      set.prototypes.push_back(p);
    } else {
      fail("unknown record type '" + tag + "'");
    }
  }
  if (!saw_header) throw FormatError("records: empty input");
  return set;
}

struct MisalignmentReport {
  double pac = 0.0;
  double plc = 0.0;
  double prc = 0.0;
  double ac = 0.0;
};

inline MisalignmentReport score_misalignment(const ActivationRecordSet& set) {
  set.validate();
  return {pac(set), plc(set), prc(set), ac(set)};
}

}  // namespace protoquant
