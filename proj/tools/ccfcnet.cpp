// ccfcnet: synthesize FC datasets, train the counter-condition model,
// evaluate, and run the analysis pipelines.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ccfcnet/analysis.hpp"
#include "ccfcnet/checkpoint.hpp"
#include "ccfcnet/dataset.hpp"
#include "ccfcnet/metrics.hpp"
#include "ccfcnet/synthetic.hpp"
#include "ccfcnet/training.hpp"

namespace fs = std::filesystem;
using namespace ccfcnet;

namespace {

void write_resolved_config(CLI::App* cmd, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "resolved_config");
  out << "# resolved configuration; pass back via --config to reproduce\n";
  out << cmd->config_to_str(/*default_also=*/true, /*write_description=*/false);
}

void add_config_option(CLI::App* cmd) {
  cmd->option_defaults()->always_capture_default(true);
  cmd->set_config("--config", "", "read options from a key = value file");
  cmd->allow_config_extras(CLI::config_extras_mode::ignore_all);
}

void print_metrics(const std::string& title, const MetricSet& m) {
  std::printf("%s  auc %.4f  acc %.4f  sen %.4f  spc %.4f\n", title.c_str(), m.auc, m.acc, m.sen,
              m.spc);
}

Ablations parse_ablations(const std::string& joined) {
  Ablations ab;
  std::string cur;
  auto apply = [&ab](const std::string& name) {
    if (name.empty()) return;
    if (name == "no_mask") ab.no_mask = true;
    else if (name == "no_intra") ab.no_intra = true;
    else if (name == "no_prototype") ab.no_prototype = true;
    else if (name == "no_step2") ab.no_step2 = true;
    else if (name == "no_reg") ab.no_reg = true;
    else throw ConfigError("unknown ablation '" + name + "'");
  };
  for (char c : joined) {
    if (c == ',') {
      apply(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  apply(cur);
  return ab;
}

struct DataOptions {
  std::string data;
  std::string split_name = "test";
};

void add_data_options(CLI::App* cmd, DataOptions& opt) {
  cmd->add_option("--data", opt.data, "dataset directory (with manifest.csv)")->required();
  cmd->add_option("--split", opt.split_name, "partition to use")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
}

struct LoadedData {
  Dataset full;
  Dataset selected;
};

LoadedData load_selected(const DataOptions& opt, const Json& ckpt_meta) {
  LoadedData out;
  int clamped = 0;
  out.full = load_dataset(fs::path(opt.data) / "manifest.csv", &clamped);
  if (clamped > 0) {
    std::cerr << "warning: clamped " << clamped << " FC entries to [-1,1]\n";
  }
  if (opt.split_name == "all") {
    out.selected = out.full;
    return out;
  }
  SplitFractions fr;
  uint64_t seed = 7;
  if (ckpt_meta.contains("split")) {
    fr.train = ckpt_meta["split"].value("train", fr.train);
    fr.val = ckpt_meta["split"].value("val", fr.val);
    fr.test = ckpt_meta["split"].value("test", fr.test);
    seed = ckpt_meta["split"].value("seed", seed);
  }
  DatasetSplits splits = split(out.full, fr, seed);
  out.selected = opt.split_name == "train" ? splits.train
               : opt.split_name == "val"   ? splits.val
                                           : splits.test;
  return out;
}

std::vector<CounterConditionReport> collect_reports(const Dataset& ds, const ModelParams& params,
                                                    ExtremeMode mode, int label_filter,
                                                    std::vector<const SubjectRecord*>* kept) {
  std::vector<CounterConditionReport> reports;
  for (const auto& rec : ds.records) {
    if (label_filter >= 0 && rec.label != label_filter) continue;
    CounterConditionReport rep = make_counter_report(rec, params, mode);
    if (!rep.own_correct || !rep.cc_correct) continue;
    reports.push_back(std::move(rep));
    if (kept) kept->push_back(&rec);
  }
  return reports;
}

// -------------------------------------------------------------------------
// synth
// -------------------------------------------------------------------------

struct SynthOptions {
  int r = 20;
  int n_per_class = 100;
  int planted = 40;
  double effect = 0.6;
  int subtypes = 3;
  double overlap = 0.5;
  double noise = 0.05;
  uint64_t seed = 7;
  std::string out;
};

int run_synth(const SynthOptions& o, CLI::App* cmd) {
  SyntheticSpec spec;
  spec.r = o.r;
  spec.n_per_class = o.n_per_class;
  spec.effect_size = o.effect;
  spec.n_subtypes = o.subtypes;
  spec.subtype_edge_overlap = o.overlap;
  spec.noise_std = o.noise;
  spec.seed = o.seed;
  Rng edge_rng(o.seed);
  spec.planted_edges = random_upper_edges(o.r, o.planted, edge_rng);
  SyntheticResult result = generate_synthetic(spec);
  save_synthetic(result, o.out);
  write_resolved_config(cmd, o.out);
  std::printf("wrote %zu subjects (R=%d, %d planted edges, %d subtype(s)) to %s\n",
              result.dataset.size(), o.r, o.planted, o.subtypes, o.out.c_str());
  return 0;
}

// -------------------------------------------------------------------------
// train
// -------------------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::string out;
  TrainConfig tcfg;
  std::string ablate;
  ModelConfig mcfg;
  SplitFractions fractions;
  int folds = 1;
};

Json split_meta(const SplitFractions& fr, uint64_t seed) {
  return Json{{"train", fr.train}, {"val", fr.val}, {"test", fr.test}, {"seed", seed}};
}

int run_train(TrainOptions& o, CLI::App* cmd) {
  o.tcfg.ablations = parse_ablations(o.ablate);
  int clamped = 0;
  Dataset full = load_dataset(fs::path(o.data) / "manifest.csv", &clamped);
  if (clamped > 0) std::cerr << "warning: clamped " << clamped << " FC entries to [-1,1]\n";
  fs::create_directories(o.out);

  Json extra;
  extra["train"] = Json{{"lr_step1", o.tcfg.lr_step1},
                        {"lr_step2", o.tcfg.lr_step2},
                        {"batch_size", o.tcfg.batch_size},
                        {"weight_decay", o.tcfg.weight_decay},
                        {"lambda_recon", o.tcfg.lambda_recon},
                        {"lambda_class", o.tcfg.lambda_class},
                        {"epochs", o.tcfg.epochs}};
  extra["optimizer"] = Json{{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}};
  extra["split"] = split_meta(o.fractions, o.tcfg.seed);

  if (o.folds <= 1) {
    DatasetSplits splits = split(full, o.fractions, o.tcfg.seed);
    TrainResult res = train(splits.train, splits.val, o.mcfg, o.tcfg);
    extra["best_epoch"] = res.best_epoch;
    extra["best_val_auc"] = res.best_val_auc;
    save_checkpoint(fs::path(o.out) / "checkpoint", res.best_params, full.class_names,
                    o.tcfg.seed, extra);
    save_epoch_logs(fs::path(o.out) / "epoch_log.csv", res.logs);
    write_resolved_config(cmd, o.out);
    std::printf("best epoch %d (val auc %.4f); checkpoint in %s/checkpoint\n", res.best_epoch,
                res.best_val_auc, o.out.c_str());
    return 0;
  }

  // k-fold loop: fold i is the test fold, fold (i+1)%k validation, rest train.
  std::vector<Dataset> folds(o.folds);
  for (auto& f : folds) {
    f.r = full.r;
    f.class_names = full.class_names;
  }
  Rng fold_rng(o.tcfg.seed);
  for (size_t cls = 0; cls < full.class_names.size(); ++cls) {
    std::vector<int> idx;
    for (size_t i = 0; i < full.records.size(); ++i) {
      if (full.records[i].label == static_cast<int>(cls)) idx.push_back(static_cast<int>(i));
    }
    std::shuffle(idx.begin(), idx.end(), fold_rng);
    for (size_t i = 0; i < idx.size(); ++i) {
      folds[i % o.folds].records.push_back(full.records[idx[i]]);
    }
  }
  std::ofstream cv(fs::path(o.out) / "cv_metrics.csv");
  cv << "fold,auc,acc,sen,spc\n";
  MetricSet mean_metrics;
  for (int f = 0; f < o.folds; ++f) {
    Dataset train_ds, val_ds = folds[(f + 1) % o.folds], test_ds = folds[f];
    train_ds.r = full.r;
    train_ds.class_names = full.class_names;
    for (int g = 0; g < o.folds; ++g) {
      if (g == f || g == (f + 1) % o.folds) continue;
      for (const auto& rec : folds[g].records) train_ds.records.push_back(rec);
    }
    TrainResult res = train(train_ds, val_ds, o.mcfg, o.tcfg);
    const fs::path fold_dir = fs::path(o.out) / ("fold" + std::to_string(f));
    save_checkpoint(fold_dir / "checkpoint", res.best_params, full.class_names, o.tcfg.seed,
                    extra);
    save_epoch_logs(fold_dir / "epoch_log.csv", res.logs);
    MetricSet m = evaluate(test_ds, res.best_params).metrics;
    cv << f << ',' << format_double(m.auc) << ',' << format_double(m.acc) << ','
       << format_double(m.sen) << ',' << format_double(m.spc) << '\n';
    mean_metrics.auc += m.auc / o.folds;
    mean_metrics.acc += m.acc / o.folds;
    mean_metrics.sen += m.sen / o.folds;
    mean_metrics.spc += m.spc / o.folds;
    print_metrics("fold " + std::to_string(f), m);
  }
  cv << "mean," << format_double(mean_metrics.auc) << ',' << format_double(mean_metrics.acc)
     << ',' << format_double(mean_metrics.sen) << ',' << format_double(mean_metrics.spc) << '\n';
  write_resolved_config(cmd, o.out);
  print_metrics("cv mean", mean_metrics);
  return 0;
}

// -------------------------------------------------------------------------
// eval / counter / analyze
// -------------------------------------------------------------------------

struct EvalOptions {
  DataOptions data;
  std::string checkpoint;
  std::string out;
};

int run_eval(const EvalOptions& o, CLI::App* cmd) {
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  LoadedData data = load_selected(o.data, ckpt.meta);
  EvalResult res = evaluate(data.selected, ckpt.params);
  fs::create_directories(o.out);
  {
    std::ofstream out(fs::path(o.out) / "metrics.csv");
    out << "auc,acc,sen,spc,n\n";
    out << format_double(res.metrics.auc) << ',' << format_double(res.metrics.acc) << ','
        << format_double(res.metrics.sen) << ',' << format_double(res.metrics.spc) << ','
        << res.predictions.size() << '\n';
  }
  {
    std::ofstream out(fs::path(o.out) / "predictions.csv");
    out << "subject_id,label,prob_patient,predicted\n";
    for (const auto& p : res.predictions) {
      out << p.subject_id << ',' << data.full.class_names[p.label] << ','
          << format_double(p.prob_patient) << ',' << data.full.class_names[p.predicted] << '\n';
    }
  }
  write_resolved_config(cmd, o.out);
  print_metrics(o.data.split_name + " (" + std::to_string(res.predictions.size()) + " subjects)",
                res.metrics);
  return 0;
}

struct CounterOptions {
  DataOptions data;
  std::string checkpoint;
  std::string out;
  std::string extreme_mode = "exclude";
};

int run_counter(const CounterOptions& o, CLI::App* cmd) {
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  if (ckpt.params.ablations.no_prototype) {
    throw ConfigError("checkpoint was trained with no_prototype; counter-condition analysis "
                      "requires class prototypes");
  }
  const ExtremeMode mode =
      o.extreme_mode == "keep" ? ExtremeMode::keep : ExtremeMode::exclude;
  LoadedData data = load_selected(o.data, ckpt.meta);

  CounterClassification cc = counter_condition_classify(data.selected, ckpt.params);
  fs::create_directories(o.out);
  write_counter_metrics_csv(fs::path(o.out) / "counter_metrics.csv", cc);

  std::vector<CounterConditionReport> reports =
      collect_reports(data.selected, ckpt.params, mode, /*label_filter=*/-1, nullptr);
  write_diff_edges_csv(fs::path(o.out) / "diff_edges.csv", reports);
  {
    std::ofstream out(fs::path(o.out) / "reports.csv");
    out << "subject_id,label,own_correct,cc_correct,cc_prob_patient,n_excluded\n";
    for (const auto& rec : data.selected.records) {
      CounterConditionReport rep = make_counter_report(rec, ckpt.params, mode);
      out << rep.subject_id << ',' << data.full.class_names[rep.label] << ',' << rep.own_correct
          << ',' << rep.cc_correct << ',' << format_double(rep.cc_probs[1]) << ','
          << rep.excluded.size() << '\n';
    }
  }
  write_resolved_config(cmd, o.out);
  print_metrics("counter-condition (" + std::to_string(cc.n_considered) + " considered)",
                cc.metrics);
  return 0;
}

struct AnalyzeOptions {
  DataOptions data;
  std::string checkpoint;
  std::string out;
  int k = 3;
  std::string extreme_mode = "exclude";
};

int run_analyze(AnalyzeOptions& o, CLI::App* cmd) {
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  o.data.split_name = o.data.split_name.empty() ? "all" : o.data.split_name;
  LoadedData data = load_selected(o.data, ckpt.meta);
  const ExtremeMode mode =
      o.extreme_mode == "keep" ? ExtremeMode::keep : ExtremeMode::exclude;
  fs::create_directories(o.out);

  MaskStats mask_stats = mask_statistics(data.selected, ckpt.params);
  write_mask_stats_csv(fs::path(o.out) / "mask_stats.csv", mask_stats, data.full.class_names);

  int n_sig = 0;
  for (int i = 0; i < data.selected.r; ++i) {
    if (mask_stats.dc_pvalues[i] < 0.05) ++n_sig;
  }
  std::printf("mask stats: %d/%d ROIs with group DC difference at p<0.05\n", n_sig,
              data.selected.r);

  if (ckpt.params.ablations.no_prototype) {
    std::printf("checkpoint has no prototypes; skipping counter-condition analyses\n");
    write_resolved_config(cmd, o.out);
    return 0;
  }

  std::vector<const SubjectRecord*> kept;
  std::vector<CounterConditionReport> patient_reports =
      collect_reports(data.selected, ckpt.params, mode, /*label_filter=*/1, &kept);
  std::vector<CounterConditionReport> all_reports =
      collect_reports(data.selected, ckpt.params, mode, /*label_filter=*/-1, nullptr);
  write_plotdata(fs::path(o.out) / "plotdata", mask_stats, data.full.class_names, data.selected,
                 all_reports);

  if (static_cast<int>(patient_reports.size()) < o.k) {
    std::printf("only %zu patients pass both filters; skipping subtype clustering\n",
                patient_reports.size());
    write_resolved_config(cmd, o.out);
    return 0;
  }
  std::vector<std::optional<double>> scores;
  std::vector<int> true_subtypes;
  bool have_truth = true;
  for (const auto* rec : kept) {
    scores.push_back(rec->clinical_score);
    if (rec->subtype) true_subtypes.push_back(*rec->subtype);
    else have_truth = false;
  }
  SubtypeResult subtypes = subtype_cluster(patient_reports, o.k, scores);
  write_subtypes_csv(fs::path(o.out) / "subtypes.csv", patient_reports, subtypes);
  write_subtype_plotdata(fs::path(o.out) / "plotdata", patient_reports, subtypes, scores);

  int n_roi_sig = 0;
  for (int i = 0; i < data.selected.r; ++i) {
    if (subtypes.roi_anova_pvalues[i] < 0.05) ++n_roi_sig;
  }
  std::printf("subtypes: k=%d over %zu patients; %d ROIs cluster-associated (Bonferroni p<0.05); "
              "score ANOVA p=%.4g\n",
              o.k, patient_reports.size(), n_roi_sig, subtypes.score_anova_pvalue);
  if (have_truth && !true_subtypes.empty()) {
    std::printf("adjusted Rand index vs planted subtypes: %.4f\n",
                adjusted_rand_index(subtypes.assignments, true_subtypes));
  }
  write_resolved_config(cmd, o.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counter-condition functional connectivity framework"};
  app.require_subcommand(1);

  SynthOptions so;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic FC dataset");
  add_config_option(synth);
  synth->add_option("--r", so.r, "ROI count");
  synth->add_option("--n-per-class", so.n_per_class, "subjects per class");
  synth->add_option("--planted", so.planted, "number of planted edges");
  synth->add_option("--effect", so.effect, "mean correlation shift on planted edges");
  synth->add_option("--subtypes", so.subtypes, "number of patient subtypes");
  synth->add_option("--overlap", so.overlap, "shared fraction of planted edges across subtypes");
  synth->add_option("--noise", so.noise, "per-edge noise std");
  synth->add_option("--seed", so.seed, "RNG seed")->envname("CCFCNET_SEED");
  synth->add_option("--out", so.out, "output dataset directory")->required();

  TrainOptions to;
  CLI::App* train_cmd = app.add_subcommand("train", "train on a dataset directory");
  add_config_option(train_cmd);
  train_cmd->add_option("--data", to.data, "dataset directory")->required();
  train_cmd->add_option("--out", to.out, "run output directory")->required();
  train_cmd->add_option("--epochs", to.tcfg.epochs, "total alternating epochs");
  train_cmd->add_option("--batch-size", to.tcfg.batch_size, "minibatch size");
  train_cmd->add_option("--lr-step1", to.tcfg.lr_step1, "step-1 learning rate");
  train_cmd->add_option("--lr-step2", to.tcfg.lr_step2, "step-2 (decoder) learning rate");
  train_cmd->add_option("--weight-decay", to.tcfg.weight_decay, "decoupled weight decay");
  train_cmd->add_option("--lambda-recon", to.tcfg.lambda_recon, "step-2 reconstruction weight");
  train_cmd->add_option("--lambda-class", to.tcfg.lambda_class, "step-2 classification weight");
  train_cmd->add_option("--seed", to.tcfg.seed, "RNG seed")->envname("CCFCNET_SEED");
  train_cmd->add_option("--ablate", to.ablate,
                        "comma list: no_mask,no_intra,no_prototype,no_step2,no_reg");
  train_cmd->add_option("--d", to.mcfg.d, "feature dim (0 = R)");
  train_cmd->add_option("--hidden-enc", to.mcfg.hidden_enc, "encoder MLP hidden width");
  train_cmd->add_option("--blocks", to.mcfg.n_blocks, "encoder blocks");
  train_cmd->add_option("--heads", to.mcfg.n_heads, "attention heads");
  train_cmd->add_option("--tau", to.mcfg.tau_gumbel, "Gumbel-sigmoid temperature");
  train_cmd->add_option("--temp", to.mcfg.softmax_temp, "classifier softmax temperature");
  train_cmd->add_option("--dropout", to.mcfg.dropout, "dropout rate");
  train_cmd->add_option("--attn-hidden", to.mcfg.attn_hidden, "attention net hidden (0 = auto)");
  train_cmd->add_option("--dec-hidden", to.mcfg.dec_hidden, "decoder hidden (0 = auto)");
  train_cmd->add_option("--frac-train", to.fractions.train, "train fraction");
  train_cmd->add_option("--frac-val", to.fractions.val, "validation fraction");
  train_cmd->add_option("--frac-test", to.fractions.test, "test fraction");
  train_cmd->add_option("--folds", to.folds, "k-fold loop instead of a single split");

  EvalOptions eo;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config_option(eval_cmd);
  add_data_options(eval_cmd, eo.data);
  eval_cmd->add_option("--checkpoint", eo.checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--out", eo.out, "output directory")->required();

  CounterOptions co;
  CLI::App* counter_cmd =
      app.add_subcommand("counter", "counter-condition classification and reports");
  add_config_option(counter_cmd);
  add_data_options(counter_cmd, co.data);
  counter_cmd->add_option("--checkpoint", co.checkpoint, "checkpoint directory")->required();
  counter_cmd->add_option("--out", co.out, "output directory")->required();
  counter_cmd->add_option("--extreme-mode", co.extreme_mode, "extreme-1% rule")
      ->check(CLI::IsMember({"exclude", "keep"}));

  AnalyzeOptions ao;
  CLI::App* analyze_cmd = app.add_subcommand("analyze", "mask statistics and subtype clustering");
  add_config_option(analyze_cmd);
  ao.data.split_name = "all";
  add_data_options(analyze_cmd, ao.data);
  analyze_cmd->add_option("--checkpoint", ao.checkpoint, "checkpoint directory")->required();
  analyze_cmd->add_option("--out", ao.out, "output directory")->required();
  analyze_cmd->add_option("--k", ao.k, "number of subtype clusters");
  analyze_cmd->add_option("--extreme-mode", ao.extreme_mode, "extreme-1% rule")
      ->check(CLI::IsMember({"exclude", "keep"}));

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return run_synth(so, synth);
    if (train_cmd->parsed()) return run_train(to, train_cmd);
    if (eval_cmd->parsed()) return run_eval(eo, eval_cmd);
    if (counter_cmd->parsed()) return run_counter(co, counter_cmd);
    if (analyze_cmd->parsed()) return run_analyze(ao, analyze_cmd);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
