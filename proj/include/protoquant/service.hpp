#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "explain.hpp"
#include "featurestore.hpp"
#include "head.hpp"
#include "pruning.hpp"

namespace protoquant {

struct ModelSnapshot {
  HeadModel model;
  std::uint64_t version = 0;
};

struct AccuracyReport {
  double overall = 0.0;
  Vector per_class;                     // NaN for classes with no samples
  std::vector<std::size_t> class_count;
};

/// Explanation-and-editing state behind the HTTP API. Readers take an
/// immutable snapshot; mutations are serialized and swap in a new one.
class ConceptService {
public:
  ConceptService(Checkpoint ck, FeatureDataset store, std::filesystem::path save_path = {})
      : config_(std::move(ck.config)),
        provenance_(ck.provenance),
        store_(std::move(store)),
        save_path_(std::move(save_path)) {
    ck.model.validate();
    store_.validate();
    if (store_.dim != ck.model.dim()) throw ShapeError("service: store dim != model dim");
    if (store_.classes != ck.model.num_classes()) throw ShapeError("service: store classes != model classes");
    for (std::size_t i = 0; i < store_.n_samples; ++i) {
      if (!store_.split || (*store_.split)[i] == static_cast<std::uint8_t>(SplitTag::Validation)) {
        eval_samples_.push_back(i);
      }
    }
    if (eval_samples_.empty()) {
      for (std::size_t i = 0; i < store_.n_samples; ++i) eval_samples_.push_back(i);
    }
    // masks never change p or s, so one pass is enough for the service lifetime
    scores_.reserve(eval_samples_.size());
    for (std::size_t i : eval_samples_) {
      scores_.push_back(aggregate(concept_match(store_.feature_map(i), ck.model)).s);
    }
    baseline_ = accuracy(ck.model);
    current_ = std::make_shared<const ModelSnapshot>(ModelSnapshot{std::move(ck.model), 0});
  }

  std::shared_ptr<const ModelSnapshot> snapshot() const {
    std::lock_guard lock(snapshot_mu_);
    return current_;
  }

  /// Accuracy over the cached evaluation scores; only W and its masks are read from the model.
  AccuracyReport accuracy(const HeadModel& model) const {
    AccuracyReport out;
    const std::size_t k = model.num_classes();
    out.per_class.assign(k, 0.0);
    out.class_count.assign(k, 0);
    std::size_t correct = 0;
    for (std::size_t j = 0; j < eval_samples_.size(); ++j) {
      const auto label = static_cast<std::size_t>(store_.labels[eval_samples_[j]]);
      const bool hit = predict(class_logits(scores_[j], model)) == label;
      correct += hit;
      out.per_class[label] += hit;
      ++out.class_count[label];
    }
    for (std::size_t c = 0; c < k; ++c) {
      out.per_class[c] = out.class_count[c] ? out.per_class[c] / static_cast<double>(out.class_count[c])
                                            : std::numeric_limits<double>::quiet_NaN();
    }
    out.overall = eval_samples_.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(eval_samples_.size());
    return out;
  }

  const AccuracyReport& baseline() const { return baseline_; }
  const FeatureDataset& store() const { return store_; }
  const std::vector<std::size_t>& eval_samples() const { return eval_samples_; }
  const std::vector<Vector>& cached_scores() const { return scores_; }
  const std::string& config() const { return config_; }
  std::uint64_t provenance() const { return provenance_; }

  struct Mutation {
    std::shared_ptr<const ModelSnapshot> before;
    std::shared_ptr<const ModelSnapshot> after;
  };

  Mutation set_neutralized(std::size_t m, bool on, std::optional<std::uint64_t> expected = {}) {
    return mutate(expected, [&](const HeadModel& model) { return neutralize(model, m, on); });
  }

  std::pair<Mutation, PruneReport> prune_topk(std::size_t top_k, std::optional<std::uint64_t> expected = {}) {
    Mutation mu = mutate(expected, [&](const HeadModel& model) { return logical_prune_topk(model, top_k); });
    PruneReport report;
    report.k = top_k;
    report.codes_before = mu.after->model.concepts();
    report.removed = unused_codes(mu.after->model);
    report.codes_after = report.codes_before - report.removed.size();
    report.accuracy_before = accuracy(mu.before->model).overall;
    report.accuracy_after = accuracy(mu.after->model).overall;
    return {mu, report};
  }

  /// Writes the current snapshot; an empty path means the configured save path.
  std::filesystem::path save(std::filesystem::path path = {}) const {
    if (path.empty()) path = save_path_;
    if (path.empty()) throw StateError("service: no save path configured");
    save_checkpoint(Checkpoint{snapshot()->model, config_, provenance_}, path);
    return path;
  }

private:
  template <class F>
  Mutation mutate(std::optional<std::uint64_t> expected, F&& edit) {
    std::lock_guard writer(writer_mu_);
    auto before = snapshot();
    if (expected && *expected != before->version) {
      throw ConflictError("model version is " + std::to_string(before->version) + ", request expected " +
                          std::to_string(*expected));
    }
    auto after = std::make_shared<const ModelSnapshot>(ModelSnapshot{edit(before->model), before->version + 1});
    {
      std::lock_guard lock(snapshot_mu_);
      current_ = after;
    }
    return {before, after};
  }

  std::string config_;
  std::uint64_t provenance_ = 0;
  FeatureDataset store_;
  std::filesystem::path save_path_;
  std::vector<std::size_t> eval_samples_;
  std::vector<Vector> scores_;
  AccuracyReport baseline_;

  mutable std::mutex snapshot_mu_;
  std::shared_ptr<const ModelSnapshot> current_;
  std::mutex writer_mu_;
};

// JSON rendering ------------------------------------------------------------

namespace api {

using nlohmann::json;

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json accuracy_json(const AccuracyReport& acc) {
  json per = json::array();
  for (double v : acc.per_class) per.push_back(number_or_null(v));
  return {{"accuracy", acc.overall}, {"per_class_accuracy", per}};
}

inline json concepts_json(const ModelSnapshot& snap) {
  const HeadModel& model = snap.model;
  json list = json::array();
  for (std::size_t m = 0; m < model.concepts(); ++m) {
    json weights = json::array();
    double mass = 0.0;
    for (std::size_t c = 0; c < model.num_classes(); ++c) {
      weights.push_back(model.classes.weights(c, m));
      mass += model.classes.effective(c, m);
    }
    list.push_back({{"id", m},
                    {"weights", weights},
                    {"weight_mass", mass},
                    {"neutralized", model.classes.neutralized[m] != 0},
                    {"active", model.codebook.is_active(m)}});
  }
  return {{"version", snap.version}, {"concepts", list}};
}

inline json patch_json(const FeatureDataset& store, const PatchMatch& p) {
  json out = {{"sample", p.sample},
              {"location", p.location},
              {"row", p.location / store.width},
              {"col", p.location % store.width},
              {"similarity", p.similarity},
              {"label", store.labels[p.sample]}};
  if (store.patch_geometry) {
    const Rect& r = (*store.patch_geometry)[p.location];
    out["rect"] = {r.x0, r.y0, r.x1, r.y1};
  }
  if (store.thumbnails) out["thumbnail"] = "/thumbnails/" + std::to_string(p.sample);
  return out;
}

inline json patches_json(const ConceptService& svc, std::size_t m, std::size_t n) {
  const auto snap = svc.snapshot();
  json patches = json::array();
  for (const PatchMatch& p : nearest_patches(snap->model, svc.store(), m, n)) {
    patches.push_back(patch_json(svc.store(), p));
  }
  return {{"concept", m}, {"version", snap->version}, {"patches", patches}};
}

inline json explanation_json(const FeatureDataset& store, const ExplanationPayload& e) {
  json top = json::array();
  for (const ConceptExplanation& ce : e.top) {
    json patches = json::array();
    for (const PatchMatch& p : ce.patches) patches.push_back(patch_json(store, p));
    top.push_back({{"concept", ce.concept_id},
                   {"contribution", ce.contribution},
                   {"presence", ce.presence},
                   {"location", ce.location},
                   {"row", ce.location / e.width},
                   {"col", ce.location % e.width},
                   {"activation_map", ce.activation_map},
                   {"patches", patches}});
  }
  return {{"sample", e.sample},
          {"label", e.label},
          {"predicted", e.predicted},
          {"height", e.height},
          {"width", e.width},
          {"logits", e.logits},
          {"contributions", e.contributions},
          {"top", top},
          {"remainder", e.remainder}};
}

inline json prune_report_json(const PruneReport& r) {
  json out = {{"K", r.k}, {"codes_before", r.codes_before}, {"codes_after", r.codes_after}, {"removed", r.removed}};
  if (r.accuracy_before) out["accuracy_before"] = *r.accuracy_before;
  if (r.accuracy_after) out["accuracy_after"] = *r.accuracy_after;
  if (r.full_support_max_delta) out["full_support_max_logit_delta"] = *r.full_support_max_delta;
  return out;
}

inline json model_json(const ConceptService& svc) {
  const auto snap = svc.snapshot();
  const HeadModel& m = snap->model;
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(svc.provenance()));
  return {{"M", m.concepts()},
          {"k", m.num_classes()},
          {"d", m.dim()},
          {"height", svc.store().height},
          {"width", svc.store().width},
          {"samples", svc.store().n_samples},
          {"eval_samples", svc.eval_samples().size()},
          {"alpha", m.alpha},
          {"temperature_mode", m.temperature_mode == TemperatureMode::Divide ? "divide" : "multiply"},
          {"softmax_support", m.softmax_support == SoftmaxSupport::All ? "all" : "active"},
          {"provenance", hex},
          {"config", svc.config()},
          {"version", snap->version}};
}

inline json mutation_json(const ConceptService& svc, const ConceptService::Mutation& mu) {
  const AccuracyReport before = svc.accuracy(mu.before->model);
  const AccuracyReport after = svc.accuracy(mu.after->model);
  json delta = json::array();
  json delta_baseline = json::array();
  for (std::size_t c = 0; c < after.per_class.size(); ++c) {
    delta.push_back(number_or_null(after.per_class[c] - before.per_class[c]));
    delta_baseline.push_back(number_or_null(after.per_class[c] - svc.baseline().per_class[c]));
  }
  json out = accuracy_json(after);
  out["version"] = mu.after->version;
  out["previous_accuracy"] = before.overall;
  out["baseline_accuracy"] = svc.baseline().overall;
  out["per_class_delta"] = delta;
  out["per_class_delta_from_baseline"] = delta_baseline;
  return out;
}

// HTTP binding --------------------------------------------------------------

class BadRequest : public Error {
public:
  using Error::Error;
};

inline std::size_t parse_index(const std::string& text, const char* what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw IndexError(std::string("unknown ") + what + " '" + text + "'");
  }
  return v;
}

inline std::size_t query_count(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string text = req.get_param_value(key);
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw BadRequest(std::string("query parameter '") + key + "' must be a non-negative integer");
  }
  return v;
}

inline std::optional<std::uint64_t> expected_version(const httplib::Request& req) {
  if (!req.has_header("If-Match")) return std::nullopt;
  std::string text = req.get_header_value("If-Match");
  if (text.size() >= 2 && text.front() == '"' && text.back() == '"') text = text.substr(1, text.size() - 2);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) throw BadRequest("If-Match must be a model version");
  return v;
}

inline void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const IndexError& e) {
    send_json(res, {{"error", e.what()}}, 404);
  } catch (const ConflictError& e) {
    send_json(res, {{"error", e.what()}}, 409);
  } catch (const BadRequest& e) {
    send_json(res, {{"error", e.what()}}, 400);
  } catch (const DomainError& e) {
    send_json(res, {{"error", e.what()}}, 400);
  } catch (const json::exception& e) {
    send_json(res, {{"error", std::string("malformed body: ") + e.what()}}, 400);
  } catch (const std::exception& e) {
    send_json(res, {{"error", e.what()}}, 500);
  }
}

/// Registers the JSON API on `server`. A non-empty `static_dir` is served at "/".
inline void register_routes(httplib::Server& server, ConceptService& svc,
                            const std::filesystem::path& static_dir = {}) {
  server.Get("/concepts", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, concepts_json(*svc.snapshot())); });
  });

  server.Get(R"(/concepts/(\d+)/patches)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::size_t m = parse_index(req.matches[1], "concept");
      send_json(res, patches_json(svc, m, query_count(req, "n", 8)));
    });
  });

  auto toggle = [&svc](bool on) {
    return [&svc, on](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::size_t m = parse_index(req.matches[1], "concept");
        const auto mu = svc.set_neutralized(m, on, expected_version(req));
        json body = mutation_json(svc, mu);
        body["concept"] = m;
        body["neutralized"] = on;
        send_json(res, body);
      });
    };
  };
  server.Post(R"(/concepts/(\d+)/neutralize)", toggle(true));
  server.Delete(R"(/concepts/(\d+)/neutralize)", toggle(false));

  server.Post("/prune/topk", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = json::parse(req.body);
      if (!body.is_object() || !body.contains("K") || !body["K"].is_number_unsigned()) {
        throw BadRequest("body must be {\"K\": <positive integer>}");
      }
      const auto top_k = body["K"].get<std::size_t>();
      if (top_k == 0) throw BadRequest("K must be >= 1");
      auto [mu, report] = svc.prune_topk(top_k, expected_version(req));
      json out = prune_report_json(report);
      out["version"] = mu.after->version;
      send_json(res, out);
    });
  });

  server.Get(R"(/explain/(\d+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::size_t i = parse_index(req.matches[1], "sample");
      const auto snap = svc.snapshot();
      const auto payload = explain_sample(snap->model, svc.store(), i, query_count(req, "topn", 3),
                                          query_count(req, "patches", 4));
      json out = explanation_json(svc.store(), payload);
      out["version"] = snap->version;
      send_json(res, out);
    });
  });

  server.Get(R"(/thumbnails/(\d+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::size_t i = parse_index(req.matches[1], "sample");
      const auto& thumbs = svc.store().thumbnails;
      if (!thumbs || i >= thumbs->size()) throw IndexError("no thumbnail for sample " + std::to_string(i));
      res.set_content((*thumbs)[i], "application/octet-stream");
    });
  });

  server.Get("/metrics/accuracy", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      const auto snap = svc.snapshot();
      json out = accuracy_json(svc.accuracy(snap->model));
      out["baseline_accuracy"] = svc.baseline().overall;
      out["version"] = snap->version;
      send_json(res, out);
    });
  });

  server.Get("/model", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, model_json(svc)); });
  });

  server.Post("/model/save", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::filesystem::path path;
      if (!req.body.empty()) {
        const json body = json::parse(req.body);
        if (!body.is_object()) throw BadRequest("body must be a JSON object");
        if (body.contains("path")) {
          if (!body["path"].is_string()) throw BadRequest("path must be a string");
          path = body["path"].get<std::string>();
        }
      }
      try {
        path = svc.save(path);
      } catch (const StateError& e) {
        throw BadRequest(e.what());
      }
      send_json(res, {{"saved", path.string()}, {"version", svc.snapshot()->version}});
    });
  });

  if (!static_dir.empty() && !server.set_mount_point("/", static_dir.string())) {
    throw IoError("static directory not found: " + static_dir.string());
  }
}

}  // namespace api

}  // namespace protoquant
