#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "modicf/io.hpp"
#include "modicf/training.hpp"

namespace modicf::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::size_t> parse_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError(std::string("--") + what + " expects a comma-separated list of positive integers, got '" + s + "'");
    }
    out.push_back(std::stoul(tok));
  }
  if (out.empty()) throw UsageError(std::string("--") + what + " must not be empty");
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(p.string() + ": invalid JSON (" + e.what() + ")");
  }
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

struct ConfigFlags {
  std::string config_path;
  std::string preset_name = "desk";
  std::optional<std::uint64_t> seed;
  std::string variant;

  void attach(CLI::App* app, bool with_variant) {
    app->add_option("--config", config_path, "Training config JSON (may name a \"preset\")");
    app->add_option("--preset", preset_name, "Named preset used when --config is absent");
    app->add_option("--seed", seed, "Master seed (overrides the config)");
    if (with_variant) app->add_option("--variant", variant, "Variant name or ablation label");
  }

  TrainConfig resolve() const {
    TrainConfig c = config_path.empty() ? preset(preset_name) : config_from_json(read_json(config_path));
    if (seed) c.seed = *seed;
    if (!variant.empty()) {
      c.variant = parse_variant(variant);
      if (c.variant == Variant::kNoConditioning) c.mddc.use_conditions = false;
    }
    return c;
  }
};

// ---- run directories ------------------------------------------------------

constexpr const char* kManifest = "manifest.json";
constexpr const char* kModel = "model.ckpt";

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kPretrain:
      return "pretrain";
    case Stage::kJoint:
      return "joint";
    case Stage::kDone:
      return "done";
  }
  return "?";
}

nlohmann::json make_manifest(const fs::path& data, const DatasetBundle& masked, const TrainingState& s,
                             const std::string& checkpoint) {
  nlohmann::json m;
  m["dataset"] = fs::absolute(data).lexically_normal().string();
  m["dataset_hash"] = bundle_hash(masked);
  m["config"] = config_to_json(s.config);
  m["config_hash"] = config_hash(s.config);
  m["seed"] = s.config.seed;
  m["variant"] = variant_name(s.config.variant);
  m["checkpoint"] = checkpoint;
  m["stage"] = stage_name(s.stage);
  return m;
}

struct LoadedRun {
  nlohmann::json manifest;
  DatasetBundle masked;
  TrainingState state;
};

LoadedRun load_run(const fs::path& run) {
  LoadedRun r;
  r.manifest = read_json(run / kManifest);
  r.masked = load_bundle(r.manifest.at("dataset").get<std::string>());
  r.state = load_checkpoint(run / r.manifest.at("checkpoint").get<std::string>(), r.masked);
  return r;
}

// ---- subcommands ----------------------------------------------------------

int cmd_synth(const fs::path& out_dir, const SyntheticConfig& c, std::ostream& out) {
  DatasetBundle b = generate_synthetic(c);
  save_bundle(b, out_dir);
  out << "wrote " << b.n_users << " users, " << b.n_items << " items, " << b.interactions.size()
      << " interactions to " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_mask(const fs::path& data, const fs::path& out_dir, double mr, std::uint64_t seed, std::ostream& out) {
  DatasetBundle b = load_bundle(data);
  MaskResult r = apply_missing_mask(b, mr, seed);
  save_bundle(r.bundle, out_dir);
  out << "masked " << r.bundle.indicator.missing_count() << " item-modality cells (mr " << mr << ") into "
      << out_dir.string() << "\n";
  return kExitOk;
}

void progress(std::ostream& out, const TrainingState& s) {
  if (s.stage == Stage::kPretrain || (s.stage == Stage::kJoint && !s.pretrain_losses.empty() && s.epoch == 0)) {
    out << "pretrain epoch " << s.pretrain_losses.size() << " loss " << s.pretrain_losses.back() << "\n";
  } else if (!s.joint_losses.empty()) {
    out << "joint epoch " << s.joint_losses.size() << " loss " << s.joint_losses.back() << " val "
        << s.val_history.back() << "\n";
  }
}

int cmd_pretrain(const fs::path& data, const fs::path& run, const ConfigFlags& flags, std::ostream& out) {
  const DatasetBundle masked = load_bundle(data);
  TrainConfig c = flags.resolve();
  if (!uses_mddc(c.variant)) throw std::invalid_argument(std::string("variant ") + variant_name(c.variant) + " has no pretraining stage");
  TrainingState s = init_training(masked, c);
  finish_pretraining(s, [&](const TrainingState& st) { progress(out, st); });
  fs::create_directories(run);
  save_checkpoint(s, run / "pretrain.ckpt");
  write_json(run / kManifest, make_manifest(data, masked, s, "pretrain.ckpt"));
  out << "pretraining finished after " << s.pretrain_losses.size() << " epochs\n";
  return kExitOk;
}

struct TrainFlags {
  std::string from;
  std::size_t checkpoint_every = 10;
  std::optional<std::size_t> max_epochs;
  bool restart = false;
};

int cmd_train(const fs::path& data, const fs::path& run, const ConfigFlags& flags, const TrainFlags& tf,
              std::ostream& out) {
  const DatasetBundle masked = load_bundle(data);
  const fs::path ckpt = run / kModel;
  TrainingState s;
  if (fs::exists(ckpt) && !tf.restart) {
    s = load_checkpoint(ckpt, masked);
    out << "resuming " << stage_name(s.stage) << " stage at epoch " << s.epoch << "\n";
  } else if (!tf.from.empty()) {
    s = load_checkpoint(tf.from, masked);
    if (!flags.variant.empty()) {
      const Variant v = parse_variant(flags.variant);
      if (uses_mddc(v) != s.mddc.has_value() || (v == Variant::kNoConditioning) != !s.config.mddc.use_conditions) {
        throw std::invalid_argument(std::string("checkpoint ") + tf.from + " cannot continue as variant " + variant_name(v));
      }
      s.config.variant = v;
    }
  } else {
    s = init_training(masked, flags.resolve());
  }
  fs::create_directories(run);
  std::size_t done = 0;
  while (s.stage != Stage::kDone && (!tf.max_epochs || done < *tf.max_epochs)) {
    std::size_t chunk = tf.checkpoint_every;
    if (tf.max_epochs) chunk = std::min(chunk, *tf.max_epochs - done);
    advance_training(s, chunk, [&](const TrainingState& st) { progress(out, st); });
    done += chunk;
    save_checkpoint(s, ckpt);
    write_json(run / kManifest, make_manifest(data, masked, s, kModel));
  }
  save_checkpoint(s, ckpt);
  write_json(run / kManifest, make_manifest(data, masked, s, kModel));
  out << (s.stage == Stage::kDone ? "training finished" : "training paused") << "; checkpoint " << ckpt.string() << "\n";
  return kExitOk;
}

int cmd_eval(const fs::path& run, const std::string& ks, const std::string& split, std::ostream& out) {
  const auto cutoffs = parse_list(ks, "k");
  const Split which = parse_split(split);
  LoadedRun r = load_run(run);
  if (r.state.stage != Stage::kDone) throw std::invalid_argument("run " + run.string() + " has not finished training");
  r.state.config.report_ks = cutoffs;
  MetricReport rep = evaluate_state(r.state, which);
  write_json(run / "metrics.json", report_to_json(rep));
  write_text(run / "metrics.csv", report_to_csv(rep));
  write_json(run / "metrics.timings.json", timings_to_json(rep));
  r.manifest["metrics"] = report_to_json(rep);
  r.manifest["metrics_split"] = split;
  write_json(run / kManifest, r.manifest);
  for (const auto& [k, m] : rep.at_k) {
    out << "K=" << k << " Recall " << m.recall << " Precision " << m.precision << " NDCG " << m.ndcg << " F "
        << (m.f ? std::to_string(*m.f) : std::string("n/a")) << " F_fuse " << m.f_fuse << "\n";
  }
  return kExitOk;
}

int cmd_impute(const fs::path& run, const fs::path& out_dir, std::ostream& out) {
  LoadedRun r = load_run(run);
  export_imputed(r.state.completed, out_dir);
  out << "exported " << r.state.completed.indicator.missing_count() << " completed rows to " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_recommend(const fs::path& run, std::vector<std::size_t> users, std::size_t k, const std::string& out_path,
                  std::ostream& out) {
  LoadedRun r = load_run(run);
  TrainingState& s = r.state;
  InteractionIndex index(s.completed);
  if (users.empty()) {
    users.resize(s.completed.n_users);
    std::iota(users.begin(), users.end(), 0);
  }
  std::vector<std::uint32_t> ids;
  for (auto u : users) {
    if (u >= s.completed.n_users) throw std::invalid_argument("user " + std::to_string(u) + " out of range");
    ids.push_back(static_cast<std::uint32_t>(u));
  }
  const ScoreTable table = score_state(s);
  const Tensor adjusted = ranking_scores(table, s.config.cfmr.gamma, uses_counterfactual(s.config.variant));
  const RankingResult ranked = rank_topk(adjusted, index, k, ids);
  std::ostringstream tsv;
  tsv << std::setprecision(9) << "user_id\trank\titem_id\tadjusted_score\traw_score\titem_direct_score\n";
  for (const auto& list : ranked.lists) {
    for (std::size_t rank = 0; rank < list.items.size(); ++rank) {
      const auto i = list.items[rank];
      tsv << list.user << '\t' << rank + 1 << '\t' << i << '\t' << adjusted(list.user, i) << '\t'
          << table.raw(list.user, i) << '\t' << table.item_direct(i, 0) << '\n';
    }
  }
  if (out_path.empty() || out_path == "-")
    out << tsv.str();
  else
    write_text(out_path, tsv.str());
  return kExitOk;
}

// ---- report ---------------------------------------------------------------

struct RunMetrics {
  std::string variant;
  std::uint64_t seed;
  MetricReport report;
};

std::vector<std::pair<std::string, double>> metric_columns(const MetricReport& r) {
  std::vector<std::pair<std::string, double>> cols;
  for (const auto& [k, m] : r.at_k) {
    const std::string at = "@" + std::to_string(k);
    cols.emplace_back("Recall" + at, m.recall);
    cols.emplace_back("Precision" + at, m.precision);
    cols.emplace_back("NDCG" + at, m.ndcg);
    cols.emplace_back("F" + at, m.f.value_or(std::nan("")));
    cols.emplace_back("F_fuse" + at, m.f_fuse);
  }
  return cols;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& reference, const fs::path& prefix,
               std::ostream& out) {
  std::vector<RunMetrics> runs;
  for (const auto& in : inputs) {
    const fs::path p = fs::is_directory(in) ? fs::path(in) / kManifest : fs::path(in);
    const nlohmann::json m = read_json(p);
    if (!m.contains("metrics")) throw FormatError(p.string() + ": manifest has no metrics; run eval first");
    MetricReport rep = report_from_json(m.at("metrics"));
    runs.push_back({m.at("variant").get<std::string>(), m.at("seed").get<std::uint64_t>(), rep});
  }
  if (runs.empty()) throw UsageError("report needs at least one run");

  // variant -> seed -> columns; variants keep first-seen order.
  std::vector<std::string> order;
  std::map<std::string, std::map<std::uint64_t, std::vector<std::pair<std::string, double>>>> table;
  std::vector<std::string> names;
  for (const auto& r : runs) {
    auto cols = metric_columns(r.report);
    if (names.empty())
      for (const auto& c : cols) names.push_back(c.first);
    std::vector<std::string> these;
    for (const auto& c : cols) these.push_back(c.first);
    if (these != names) throw FormatError("runs report different metric columns; evaluate all with the same --k");
    if (!table.count(r.variant)) order.push_back(r.variant);
    if (!table[r.variant].emplace(r.seed, cols).second) {
      throw FormatError("duplicate run for variant " + r.variant + " seed " + std::to_string(r.seed));
    }
  }
  const std::string ref = variant_name(parse_variant(reference));

  std::ostringstream md, csv, tt;
  md << "| Variant | Seeds |";
  csv << "variant,seeds";
  for (const auto& n : names) {
    md << ' ' << n << " |";
    csv << ',' << n;
  }
  md << "\n|---|---|";
  for (std::size_t i = 0; i < names.size(); ++i) md << "---|";
  md << "\n";
  csv << "\n";
  tt << "variant,reference,metric,pairs,t,df,significant\n";

  for (const auto& v : order) {
    const auto& seeds = table.at(v);
    md << "| " << v << " | " << seeds.size() << " |";
    csv << v << ',' << seeds.size();
    for (std::size_t c = 0; c < names.size(); ++c) {
      double sum = 0;
      for (const auto& [seed, cols] : seeds) sum += cols[c].second;
      const double mean = sum / static_cast<double>(seeds.size());
      std::string mark;
      if (v != ref && table.count(ref)) {
        std::vector<double> a, b;
        for (const auto& [seed, cols] : seeds) {
          auto it = table.at(ref).find(seed);
          if (it == table.at(ref).end() || std::isnan(cols[c].second) || std::isnan(it->second[c].second)) continue;
          a.push_back(it->second[c].second);
          b.push_back(cols[c].second);
        }
        if (a.size() >= 2) {
          const TTestResult t = paired_ttest(a, b);
          if (t.significant.value_or(false)) mark = "*";
          tt << v << ',' << ref << ',' << names[c] << ',' << a.size() << ',' << t.t << ',' << t.df << ','
             << (t.significant ? (*t.significant ? "yes" : "no") : "undefined") << "\n";
        }
      }
      md << ' ' << fmt(mean) << mark << " |";
      csv << ',' << fmt(mean);
    }
    md << "\n";
    csv << "\n";
  }
  md << "\nMeans over seeds. * marks a significant difference from " << ref
     << " (two-sided paired t-test, 5%).\n";
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  write_text(prefix.string() + ".md", md.str());
  write_text(prefix.string() + ".csv", csv.str());
  write_text(prefix.string() + ".ttest.csv", tt.str());
  out << md.str();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal diffusion imputation and counterfactual recommendation toolkit", "modicf"};
  app.require_subcommand(1);

  SyntheticConfig synth_cfg;
  std::string synth_out, synth_dims = "16,16";
  auto* synth = app.add_subcommand("synth", "Generate a planted synthetic dataset");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_cfg.seed, "Seed");
  synth->add_option("--users", synth_cfg.n_users, "Number of users");
  synth->add_option("--items", synth_cfg.n_items, "Number of items");
  synth->add_option("--dims", synth_dims, "Per-modality feature dimensions, comma separated");
  synth->add_option("--groups", synth_cfg.n_latent_groups, "Number of latent groups");
  synth->add_option("--density", synth_cfg.density, "Expected interaction density");

  std::string data, out_dir, run_dir;
  double mr = 0;
  std::uint64_t mask_seed = 7;
  auto* mask = app.add_subcommand("mask", "Mask item-modality cells at a missing rate");
  mask->add_option("--data", data, "Input dataset directory")->required();
  mask->add_option("--out", out_dir, "Output dataset directory")->required();
  mask->add_option("--mr", mr, "Missing rate in (0, (M-1)/M]")->required();
  mask->add_option("--seed", mask_seed, "Mask seed");

  ConfigFlags pre_flags;
  auto* pretrain = app.add_subcommand("pretrain", "Run the imputation pretraining stage");
  pretrain->add_option("--data", data, "Masked dataset directory")->required();
  pretrain->add_option("--out", run_dir, "Run directory")->required();
  pre_flags.attach(pretrain, true);

  ConfigFlags train_flags;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a variant end to end (resumes from the run checkpoint)");
  train->add_option("--data", data, "Masked dataset directory")->required();
  train->add_option("--out", run_dir, "Run directory")->required();
  train_flags.attach(train, true);
  train->add_option("--from", tf.from, "Start from a pretraining checkpoint");
  train->add_option("--checkpoint-every", tf.checkpoint_every, "Epochs between checkpoints")->check(CLI::PositiveNumber);
  train->add_option("--max-epochs", tf.max_epochs, "Stop after this many epochs (resume later)");
  train->add_flag("--restart", tf.restart, "Ignore an existing run checkpoint");

  std::string ks = "10,20", split = "test";
  auto* eval = app.add_subcommand("eval", "Evaluate a trained run");
  eval->add_option("--run", run_dir, "Run directory")->required();
  eval->add_option("--k", ks, "Cutoffs, comma separated");
  eval->add_option("--split", split, "Split to evaluate (val or test)");

  auto* impute = app.add_subcommand("impute", "Export completed feature matrices of a run");
  impute->add_option("--run", run_dir, "Run directory")->required();
  impute->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::size_t> rec_users;
  std::size_t top_k = 20;
  std::string rec_out;
  auto* recommend = app.add_subcommand("recommend", "Write top-K recommendations as TSV");
  recommend->add_option("--run", run_dir, "Run directory")->required();
  recommend->add_option("--user", rec_users, "User id (repeatable; all users when absent)");
  recommend->add_option("--top-k", top_k, "List length")->check(CLI::PositiveNumber);
  recommend->add_option("--out", rec_out, "Output TSV path (stdout when absent)");

  std::vector<std::string> report_runs;
  std::string reference = "full", report_out;
  auto* report = app.add_subcommand("report", "Aggregate evaluated runs across seeds");
  report->add_option("runs", report_runs, "Run directories or manifest files")->required();
  report->add_option("--reference", reference, "Variant the t-tests compare against");
  report->add_option("--out", report_out, "Output prefix for .md, .csv and .ttest.csv")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (*synth) {
      synth_cfg.dims = parse_list(synth_dims, "dims");
      return cmd_synth(synth_out, synth_cfg, out);
    }
    if (*mask) return cmd_mask(data, out_dir, mr, mask_seed, out);
    if (*pretrain) return cmd_pretrain(data, run_dir, pre_flags, out);
    if (*train) return cmd_train(data, run_dir, train_flags, tf, out);
    if (*eval) return cmd_eval(run_dir, ks, split, out);
    if (*impute) return cmd_impute(run_dir, out_dir, out);
    if (*recommend) return cmd_recommend(run_dir, rec_users, top_k, rec_out, out);
    if (*report) return cmd_report(report_runs, reference, report_out, out);
    return kExitUsage;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: bad flag: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: bad flag: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "error: training aborted: " << e.what() << "\n";
    return kExitTraining;
  } catch (const FormatError& e) {
    err << "error: bad file: " << e.what() << "\n";
    return kExitFile;
  } catch (const DataError& e) {
    err << "error: bad file: " << e.what() << "\n";
    return kExitFile;
  } catch (const fs::filesystem_error& e) {
    err << "error: bad file: " << e.what() << "\n";
    return kExitFile;
  } catch (const nlohmann::json::exception& e) {
    err << "error: bad file: " << e.what() << "\n";
    return kExitFile;
  } catch (const std::invalid_argument& e) {
    err << "error: invalid argument: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFile;
  }
}

}  // namespace modicf::cli
