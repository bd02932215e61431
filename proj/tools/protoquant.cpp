// protoquant command-line entry point.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <typeinfo>
#include <vector>

#include <CLI11.hpp>

#include "protoquant/protoquant.hpp"
#include "protoquant/service.hpp"

using namespace protoquant;

namespace {

struct TrainFlags {
  TrainConfig cfg;
  std::string trainable = "w";
  std::string support = "all";
  std::string temperature = "divide";
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--epochs", f.cfg.epochs, "Training epochs")->capture_default_str();
  sub->add_option("--lr", f.cfg.base_lr, "Peak learning rate")->capture_default_str();
  sub->add_option("--min-lr", f.cfg.min_lr, "Learning rate floor")->capture_default_str();
  sub->add_option("--warmup", f.cfg.warmup_epochs, "Linear warm-up epochs")->capture_default_str();
  sub->add_option("--batch", f.cfg.batch_size, "Batch size (clamped to the training split)")->capture_default_str();
  sub->add_option("--weight-decay", f.cfg.weight_decay, "Decoupled weight decay on W")->capture_default_str();
  sub->add_option("--label-smoothing", f.cfg.label_smoothing, "Label smoothing epsilon")->capture_default_str();
  sub->add_option("--alpha", f.cfg.alpha, "Softmax temperature")->capture_default_str();
  sub->add_option("--temperature-mode", f.temperature, "divide | multiply")
      ->check(CLI::IsMember({"divide", "multiply"}))
      ->capture_default_str();
  sub->add_option("--support", f.support, "Softmax support: all | active")
      ->check(CLI::IsMember({"all", "active"}))
      ->capture_default_str();
  sub->add_option("--seed", f.cfg.seed, "Random seed")->capture_default_str();
}

TrainConfig resolve(const TrainFlags& f) {
  TrainConfig cfg = f.cfg;
  cfg.trainable = f.trainable == "w+codes" ? Trainable::WeightsAndCodes : Trainable::Weights;
  cfg.softmax_support = f.support == "active" ? SoftmaxSupport::Active : SoftmaxSupport::All;
  cfg.temperature_mode = f.temperature == "multiply" ? TemperatureMode::Multiply : TemperatureMode::Divide;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  io::write_file(path, text);
}

std::vector<std::size_t> validation_or_all(const FeatureDataset& ds) {
  std::vector<std::size_t> out;
  if (ds.split) {
    for (std::size_t i = 0; i < ds.n_samples; ++i) {
      if ((*ds.split)[i] == static_cast<std::uint8_t>(SplitTag::Validation)) out.push_back(i);
    }
  }
  return out.empty() ? all_indices(ds) : out;
}

std::string fmt(double v, int precision = 2) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(precision) << v;
  return out.str();
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const BadMagicError*>(&e)) return "bad magic";
  if (dynamic_cast<const UnsupportedVersionError*>(&e)) return "unsupported version";
  if (dynamic_cast<const TruncatedPayloadError*>(&e)) return "truncated payload";
  if (dynamic_cast<const ShapeMismatchError*>(&e)) return "shape mismatch";
  if (dynamic_cast<const FormatError*>(&e)) return "format error";
  if (dynamic_cast<const IoError*>(&e)) return "io error";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape error";
  if (dynamic_cast<const DomainError*>(&e)) return "domain error";
  if (dynamic_cast<const CapacityError*>(&e)) return "capacity error";
  if (dynamic_cast<const EmptyCodebookError*>(&e)) return "empty codebook";
  if (dynamic_cast<const IndexError*>(&e)) return "index error";
  if (dynamic_cast<const DegenerateModelError*>(&e)) return "degenerate model";
  if (dynamic_cast<const StateError*>(&e)) return "state error";
  return "error";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ProtoQuant: codebook-quantized interpretable classification head"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // synth
  SynthConfig synth;
  std::size_t grid = 7;
  std::string synth_out, truth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a planted-concept feature store");
  synth_cmd->add_option("--classes", synth.classes, "Number of classes k")->capture_default_str();
  synth_cmd->add_option("--concepts", synth.true_concepts, "Number of planted concepts G")->capture_default_str();
  synth_cmd->add_option("--concepts-per-class", synth.concepts_per_class, "Concepts planted per sample")
      ->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "Feature dimension d")->capture_default_str();
  synth_cmd->add_option("--grid", grid, "Spatial grid side (H = W)")->capture_default_str();
  synth_cmd->add_option("--per-class", synth.samples_per_class, "Samples per class")->capture_default_str();
  synth_cmd->add_option("--sigma", synth.noise_sigma, "Noise on planted concepts")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Output PQFS path")->required();
  synth_cmd->add_option("--truth-out", truth_out, "Optional CSV of ground-truth concepts (G x d)");

  // export-inspect
  std::string inspect_data;
  auto* inspect_cmd = app.add_subcommand("export-inspect", "Summarize a PQFS feature store");
  inspect_cmd->add_option("--data", inspect_data, "PQFS path")->required();

  // train-codebook
  TrainFlags tc;
  tc.cfg.seed = 40;
  std::string tc_data, tc_out, tc_history;
  bool tc_normalize = false;
  auto* tc_cmd = app.add_subcommand("train-codebook", "Stage 1: learn the codebook");
  tc_cmd->add_option("--data", tc_data, "PQFS path")->required();
  tc_cmd->add_option("--codes", tc.cfg.codebook_size, "Codebook size M (0 = 10 x classes)")->capture_default_str();
  add_train_flags(tc_cmd, tc);
  tc_cmd->add_flag("--normalize-codes", tc_normalize, "Renormalize codes after every step");
  tc_cmd->add_option("--out", tc_out, "Output PQCK path (W is all zeros)")->required();
  tc_cmd->add_option("--history", tc_history, "Per-epoch CSV output");

  // train-head
  TrainFlags th;
  std::string th_data, th_codebook, th_out, th_history;
  auto* th_cmd = app.add_subcommand("train-head", "Stage 2: fit the class matrix on a learned codebook");
  th_cmd->add_option("--data", th_data, "PQFS path")->required();
  th_cmd->add_option("--codebook", th_codebook, "PQCK from train-codebook")->required();
  add_train_flags(th_cmd, th);
  th_cmd->add_option("--trainable", th.trainable, "w | w+codes")
      ->check(CLI::IsMember({"w", "w+codes"}))
      ->capture_default_str();
  th_cmd->add_option("--out", th_out, "Output PQCK path")->required();
  th_cmd->add_option("--history", th_history, "Per-epoch CSV output");

  // eval
  std::string ev_data, ev_model, ev_split = "validation";
  auto* ev_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  ev_cmd->add_option("--data", ev_data, "PQFS path")->required();
  ev_cmd->add_option("--model", ev_model, "PQCK path")->required();
  ev_cmd->add_option("--split", ev_split, "validation | all")
      ->check(CLI::IsMember({"validation", "all"}))
      ->capture_default_str();

  // purity
  std::string pu_data, pu_model;
  std::size_t pu_top = 10;
  auto* pu_cmd = app.add_subcommand("purity", "Per-concept part purity");
  pu_cmd->add_option("--data", pu_data, "PQFS path with part annotations")->required();
  pu_cmd->add_option("--model", pu_model, "PQCK path")->required();
  pu_cmd->add_option("--top-n", pu_top, "Locations ranked per concept")->capture_default_str();

  // misalign-score
  std::string ms_records;
  auto* ms_cmd = app.add_subcommand("misalign-score", "PAC / PLC / PRC / AC from activation records");
  ms_cmd->add_option("--records", ms_records, "Record file (pqrec 1)")->required();

  // prune
  std::string pr_model, pr_data, pr_out, pr_report;
  std::size_t pr_k = 0;
  bool pr_physical = false, pr_finetune = false;
  TrainFlags pr;
  pr.cfg.epochs = 10;
  pr.cfg.warmup_epochs = 1;
  auto* pr_cmd = app.add_subcommand("prune", "Top-K masking, optional physical pruning and finetuning");
  pr_cmd->add_option("--model", pr_model, "PQCK path")->required();
  pr_cmd->add_option("--topk", pr_k, "Weights kept per class")->required();
  pr_cmd->add_flag("--physical", pr_physical, "Remove codes no class uses");
  pr_cmd->add_flag("--finetune", pr_finetune, "Train W and codes after pruning (needs --data)");
  pr_cmd->add_option("--data", pr_data, "PQFS path (accuracy report and finetuning)");
  add_train_flags(pr_cmd, pr);
  pr_cmd->add_option("--out", pr_out, "Output PQCK path")->required();
  pr_cmd->add_option("--report", pr_report, "Write the PruneReport here as well");

  // finetune
  std::string ft_model, ft_data, ft_out, ft_history;
  TrainFlags ft;
  ft.cfg.epochs = 10;
  ft.cfg.warmup_epochs = 1;
  auto* ft_cmd = app.add_subcommand("finetune", "Train W and codes from an existing checkpoint");
  ft_cmd->add_option("--model", ft_model, "PQCK path")->required();
  ft_cmd->add_option("--data", ft_data, "PQFS path")->required();
  add_train_flags(ft_cmd, ft);
  ft_cmd->add_option("--out", ft_out, "Output PQCK path")->required();
  ft_cmd->add_option("--history", ft_history, "Per-epoch CSV output");

  // explain
  std::string ex_model, ex_data;
  std::size_t ex_sample = 0, ex_topn = 3, ex_patches = 4;
  auto* ex_cmd = app.add_subcommand("explain", "Concept contributions for one sample");
  ex_cmd->add_option("--model", ex_model, "PQCK path")->required();
  ex_cmd->add_option("--data", ex_data, "PQFS path")->required();
  ex_cmd->add_option("--sample", ex_sample, "Sample index")->required();
  ex_cmd->add_option("--topn", ex_topn, "Concepts listed")->capture_default_str();
  ex_cmd->add_option("--patches", ex_patches, "Nearest patches per concept")->capture_default_str();

  // serve
  std::string sv_model, sv_data, sv_host = "127.0.0.1", sv_static, sv_save;
  int sv_port = 8080;
  auto* sv_cmd = app.add_subcommand("serve", "HTTP explanation and editing API");
  sv_cmd->add_option("--model", sv_model, "PQCK path")->required();
  sv_cmd->add_option("--data", sv_data, "PQFS path (validation store)")->required();
  sv_cmd->add_option("--port", sv_port, "TCP port")->capture_default_str();
  sv_cmd->add_option("--host", sv_host, "Bind address")->capture_default_str();
  sv_cmd->add_option("--static", sv_static, "Directory served at /");
  sv_cmd->add_option("--save-path", sv_save, "Default target of POST /model/save (defaults to --model)");

  // ablate-codebook
  std::string ab_data;
  std::vector<std::size_t> ab_codes{10, 40, 80, 320};
  std::vector<std::uint64_t> ab_seeds{40, 41, 42};
  TrainFlags ab1, ab2;
  ab1.cfg.batch_size = 16;
  ab2.cfg.batch_size = 64;
  auto* ab_cmd = app.add_subcommand("ablate-codebook", "Accuracy against codebook size");
  ab_cmd->add_option("--data", ab_data, "PQFS path")->required();
  ab_cmd->add_option("--codes", ab_codes, "Codebook sizes")->delimiter(',')->capture_default_str();
  ab_cmd->add_option("--seeds", ab_seeds, "Seeds")->delimiter(',')->capture_default_str();
  ab_cmd->add_option("--stage1-epochs", ab1.cfg.epochs, "Stage 1 epochs")->capture_default_str();
  ab_cmd->add_option("--stage1-lr", ab1.cfg.base_lr, "Stage 1 learning rate")->capture_default_str();
  ab_cmd->add_option("--stage1-batch", ab1.cfg.batch_size, "Stage 1 batch size")->capture_default_str();
  ab_cmd->add_option("--stage2-epochs", ab2.cfg.epochs, "Stage 2 epochs")->capture_default_str();
  ab_cmd->add_option("--stage2-lr", ab2.cfg.base_lr, "Stage 2 learning rate")->capture_default_str();
  ab_cmd->add_option("--stage2-batch", ab2.cfg.batch_size, "Stage 2 batch size")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth_cmd) {
      synth.height = synth.width = grid;
      const SynthResult res = synth_generate(synth);
      write_store(res.dataset, synth_out);
      if (!truth_out.empty()) {
        std::ostringstream csv;
        csv.precision(17);
        for (std::size_t g = 0; g < res.ground_truth.rows(); ++g) {
          for (std::size_t j = 0; j < res.ground_truth.cols(); ++j) csv << (j ? "," : "") << res.ground_truth(g, j);
          csv << "\n";
        }
        write_text(truth_out, csv.str());
      }
      std::cout << "wrote " << synth_out << ": n=" << res.dataset.n_samples << " k=" << res.dataset.classes
                << " d=" << res.dataset.dim << " grid=" << grid << "x" << grid << "\n";
    } else if (*inspect_cmd) {
      const FeatureDataset ds = read_store(inspect_data);
      std::cout << "samples=" << ds.n_samples << "\nd=" << ds.dim << "\nH=" << ds.height << "\nW=" << ds.width
                << "\nclasses=" << ds.classes << "\nparts=" << (ds.part_annotations ? "yes" : "no")
                << "\npretrained_head=" << (ds.pretrained_head ? "yes" : "no")
                << "\npatch_geometry=" << (ds.patch_geometry ? "yes" : "no")
                << "\nthumbnails=" << (ds.thumbnails ? "yes" : "no") << "\nsplit=" << (ds.split ? "yes" : "no");
      char hex[17];
      std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(provenance_hash(ds)));
      std::cout << "\nprovenance=" << hex << "\n";
      if (ds.pretrained_head) {
        std::cout << "pretrained_head_acc=" << fmt(probe_accuracy(ds, validation_or_all(ds))) << "\n";
      }
    } else if (*tc_cmd) {
      const FeatureDataset ds = read_store(tc_data);
      TrainConfig cfg = resolve(tc);
      cfg.normalize_codes_each_step = tc_normalize;
      const Stage1Result res = stage1_train(ds, cfg);
      HeadModel model;
      model.codebook = res.codebook;
      model.classes = ClassMatrix(Matrix(ds.classes, res.codebook.size()));
      model.alpha = cfg.alpha;
      model.temperature_mode = cfg.temperature_mode;
      model.softmax_support = cfg.softmax_support;
      save_checkpoint({model, cfg.to_text(), provenance_hash(ds)}, tc_out);
      write_text(tc_history, res.history.to_csv());
      std::cout << "codebook M=" << res.codebook.size() << " selected_epoch=" << res.history.selected_epoch
                << " dead_codes=" << (res.history.epochs.empty() ? 0 : res.history.epochs.back().dead_codes)
                << " -> " << tc_out << "\n";
    } else if (*th_cmd) {
      const FeatureDataset ds = read_store(th_data);
      const Checkpoint base = load_checkpoint(th_codebook);
      TrainConfig cfg = resolve(th);
      cfg.codebook_size = base.model.concepts();
      const Stage2Result res = stage2_train(ds, base.model.codebook, cfg);
      save_checkpoint({res.model, cfg.to_text(), provenance_hash(ds)}, th_out);
      write_text(th_history, res.history.to_csv());
      const auto& last = res.history.epochs.empty() ? EpochRecord{} : res.history.epochs.back();
      std::cout << "head M=" << res.model.concepts() << " selected_epoch=" << res.history.selected_epoch
                << " final_val_acc=" << fmt(last.val_acc) << " -> " << th_out << "\n";
    } else if (*ev_cmd) {
      const FeatureDataset ds = read_store(ev_data);
      const Checkpoint ck = load_checkpoint(ev_model);
      const auto idx = ev_split == "all" ? all_indices(ds) : validation_or_all(ds);
      std::cout << "samples=" << idx.size() << "\ninterpretable_top1=" << fmt(head_accuracy(ds, ck.model, idx)) << "\n";
      if (ds.pretrained_head) std::cout << "pretrained_top1=" << fmt(probe_accuracy(ds, idx)) << "\n";
    } else if (*pu_cmd) {
      const FeatureDataset ds = read_store(pu_data);
      const Checkpoint ck = load_checkpoint(pu_model);
      const auto scores = annotated_scores(ck.model, ds);
      std::vector<double> values;
      std::cout << "concept,purity\n";
      for (std::size_t m = 0; m < scores.size(); ++m) {
        const double v = purity_from_scores(scores[m], pu_top);
        values.push_back(v);
        std::cout << m << "," << fmt(v, 4) << "\n";
      }
      double mean = 0.0, var = 0.0;
      for (double v : values) mean += v;
      mean /= static_cast<double>(values.size());
      for (double v : values) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(values.size()));
      std::cout << "purity " << fmt(mean) << " ± " << fmt(sd) << "\n";
    } else if (*ms_cmd) {
      std::ifstream in(ms_records);
      if (!in) throw IoError("cannot open " + ms_records);
      const MisalignmentReport r = score_misalignment(read_records(in));
      std::cout << "PAC=" << fmt(r.pac) << "\nPLC=" << fmt(r.plc) << "\nPRC=" << fmt(r.prc) << "\nAC=" << fmt(r.ac)
                << "\n";
    } else if (*pr_cmd) {
      if (pr_finetune && pr_data.empty()) throw DomainError("--finetune needs --data");
      const Checkpoint ck = load_checkpoint(pr_model);
      std::optional<FeatureDataset> ds;
      if (!pr_data.empty()) ds = read_store(pr_data);
      HeadModel model = logical_prune_topk(ck.model, pr_k);
      PruneReport report;
      report.k = pr_k;
      report.codes_before = ck.model.concepts();
      report.removed = unused_codes(model);
      report.codes_after = report.codes_before - report.removed.size();
      if (pr_physical) model = physical_prune(model).model;
      std::string config = ck.config;
      if (pr_finetune) {
        TrainConfig cfg = resolve(pr);
        model = finetune_after_prune(model, *ds, cfg).model;
        config = cfg.to_text();
      }
      if (ds) {
        const auto idx = validation_or_all(*ds);
        report.accuracy_before = head_accuracy(*ds, ck.model, idx);
        report.accuracy_after = head_accuracy(*ds, model, idx);
      }
      save_checkpoint({model, config, ck.provenance}, pr_out);
      write_text(pr_report, report.to_text());
      std::cout << report.to_text();
    } else if (*ft_cmd) {
      const Checkpoint ck = load_checkpoint(ft_model);
      const FeatureDataset ds = read_store(ft_data);
      const TrainConfig cfg = resolve(ft);
      const Stage2Result res = finetune_after_prune(ck.model, ds, cfg);
      save_checkpoint({res.model, cfg.to_text(), ck.provenance}, ft_out);
      write_text(ft_history, res.history.to_csv());
      std::cout << "finetuned selected_epoch=" << res.history.selected_epoch << " -> " << ft_out << "\n";
    } else if (*ex_cmd) {
      const Checkpoint ck = load_checkpoint(ex_model);
      const FeatureDataset ds = read_store(ex_data);
      const ExplanationPayload e = explain_sample(ck.model, ds, ex_sample, ex_topn, ex_patches);
      std::cout << "sample " << e.sample << " label " << e.label << " predicted " << e.predicted << " logit "
                << fmt(e.logits[e.predicted], 6) << "\n";
      for (const auto& ce : e.top) {
        std::cout << "concept " << ce.concept_id << " contribution " << fmt(ce.contribution, 6) << " presence "
                  << fmt(ce.presence, 6) << " at (" << ce.location / e.width << "," << ce.location % e.width
                  << ")\n";
        for (std::size_t r = 0; r < e.height; ++r) {
          std::cout << "  ";
          for (std::size_t c = 0; c < e.width; ++c) std::cout << (c ? " " : "") << fmt(ce.activation_map[r * e.width + c], 3);
          std::cout << "\n";
        }
        for (const auto& p : ce.patches) {
          std::cout << "  nearest sample " << p.sample << " loc (" << p.location / ds.width << ","
                    << p.location % ds.width << ") cos " << fmt(p.similarity, 4) << "\n";
        }
      }
      std::cout << "other " << fmt(e.remainder, 6) << "\n";
    } else if (*sv_cmd) {
      Checkpoint ck = load_checkpoint(sv_model);
      ConceptService svc(std::move(ck), read_store(sv_data), sv_save.empty() ? sv_model : sv_save);
      httplib::Server server;
      api::register_routes(server, svc, sv_static);
      std::cout << "serving on http://" << sv_host << ":" << sv_port << std::endl;
      if (!server.listen(sv_host, sv_port)) throw IoError("cannot listen on " + sv_host + ":" + std::to_string(sv_port));
    } else if (*ab_cmd) {
      const FeatureDataset ds = read_store(ab_data);
      std::cout << ablation_csv(ablate_codebook(ds, ab_codes, ab_seeds, resolve(ab1), resolve(ab2)));
    }
  } catch (const std::exception& e) {
    std::cerr << "protoquant: " << error_kind(e) << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
