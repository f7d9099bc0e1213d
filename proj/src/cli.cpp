#include "wssod/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "wssod/checkpoint.hpp"
#include "wssod/config.hpp"
#include "wssod/log.hpp"
#include "wssod/pipeline.hpp"

namespace wssod {

namespace fs = std::filesystem;

namespace {

constexpr const char* kSnapshotName = "config.resolved.json";

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string preset;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  bool verbose = false;
};

class Session {
 public:
  Session(Common common, std::ostream& out) : common_(std::move(common)), out_(out) {}

  /// Extra `key=value` assignments contributed by subcommand flags; applied after --set.
  std::vector<std::string> extra;

  RunConfig& config() {
    if (!cfg_) {
      std::string file = common_.config;
      if (file.empty()) {
        if (const char* env = std::getenv(kConfigEnvVar); env && *env) file = env;
      }
      RunConfig base;
      if (common_.preset == "desk") {
        base = desk_preset();
      } else if (!common_.preset.empty()) {
        throw ConfigError("unknown preset '" + common_.preset + "' (known: desk)");
      }
      if (!file.empty() && !fs::exists(file)) throw ConfigError("config file not found: " + file);
      std::vector<std::string> ov = common_.overrides;
      if (common_.seed) ov.push_back("seed=" + std::to_string(*common_.seed));
      ov.insert(ov.end(), extra.begin(), extra.end());
      cfg_ = load_run_config(file, ov, base);
    }
    return *cfg_;
  }

  fs::path out_dir() const { return common_.out; }

  /// Class counts follow the data; the snapshot records what actually ran.
  void adopt_classes(const Manifest& m) {
    RunConfig& c = config();
    c.teacher.num_classes = m.num_classes();
    c.student.num_classes = m.num_classes();
    c.validate();
  }

  void snapshot() {
    fs::create_directories(out_dir());
    std::ofstream f(out_dir() / kSnapshotName);
    f << to_json(config()).dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + (out_dir() / kSnapshotName).string());
  }

  std::ostream& out() { return out_; }

 private:
  Common common_;
  std::ostream& out_;
  std::optional<RunConfig> cfg_;
};

std::string json_list(const std::vector<std::string>& items, bool quote) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : items) {
    if (quote) {
      arr.push_back(s);
    } else {
      try {
        arr.push_back(nlohmann::json::parse(s));
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("'" + s + "' is not a number");
      }
    }
  }
  return arr.dump();
}

Dataset load_dataset(const std::string& path) { return Dataset(load_manifest(path)); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void write_losses(const fs::path& path, const StageResult& r) {
  write_json(path, {{"epoch_losses", r.epoch_losses}});
}

std::string map_line(double map) {
  std::ostringstream os;
  os << "mAP " << std::fixed << std::setprecision(4) << map;
  return os.str();
}

std::optional<Checkpoint> maybe_checkpoint(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weakly semi-supervised detection with point annotations: teacher, student, evaluation, benchmark."};
  app.name("wssod");
  app.require_subcommand(1);

  Common common;
  app.add_option("-c,--config", common.config, std::string("JSON config file (default: $") + kConfigEnvVar + ")");
  app.add_option("-s,--set", common.overrides, "Override a config key, e.g. --set step1.epochs=5");
  app.add_option("--preset", common.preset, "Built-in base config: desk");
  app.add_option("--seed", common.seed, "Run seed (same as --set seed=N)");
  app.add_flag("-q,--quiet", common.quiet, "Only errors");
  app.add_flag("-v,--verbose", common.verbose, "Per-epoch progress");

  // Subcommand options. Data paths default to the config's manifest/split keys.
  std::string manifest, split_path, teacher_ck, student_ck, resume, pseudo_path, dets_path, gt_path, results_path, save_dets;
  double fraction = 0.1;
  std::vector<std::string> fractions, seeds, variants;
  std::optional<int> jobs;

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset (images + manifest.json)");
  auto* split = app.add_subcommand("split", "Partition a manifest into test / fully labeled / weak");
  auto* t1 = app.add_subcommand("train-teacher", "Step 1: teacher on fully labeled images");
  auto* t2 = app.add_subcommand("refine-teacher", "Step 2: symmetric-consistency refinement on weak images");
  auto* pl = app.add_subcommand("pseudo-label", "Pseudo boxes for weak images from a teacher");
  auto* st = app.add_subcommand("train-student", "Step 3: student on ground truth plus pseudo boxes");
  auto* ev = app.add_subcommand("eval", "mAP of a detections file, a student or a teacher");
  auto* bench = app.add_subcommand("bench", "Fraction x seed x variant sweep");
  auto* report = app.add_subcommand("report", "CSV table and SVG plot from a results store");

  for (auto* sub : {gen, split, t1, t2, pl, st, ev, bench, report}) {
    sub->add_option("-o,--out", common.out, "Output directory")->capture_default_str();
  }
  for (auto* sub : {split, t1, t2, pl, st, ev, bench}) sub->add_option("-m,--manifest", manifest, "Dataset manifest");
  for (auto* sub : {t1, t2, pl, st, ev}) sub->add_option("--split", split_path, "Split file");
  split->add_option("-f,--fraction", fraction, "Fully labeled share of the training images")->capture_default_str();
  for (auto* sub : {t1, t2, st}) sub->add_option("--resume", resume, "Stage checkpoint to continue from");
  for (auto* sub : {t2, pl, ev}) sub->add_option("--teacher", teacher_ck, "Teacher checkpoint");
  ev->add_option("--student", student_ck, "Student checkpoint");
  ev->add_option("--dets", dets_path, "Detections file");
  ev->add_option("--gt", gt_path, "Ground-truth manifest for --dets");
  ev->add_option("--save-dets", save_dets, "Write the student's test detections here");
  st->add_option("--pseudo", pseudo_path, "Pseudo-labeled manifest from pseudo-label");
  bench->add_option("--fractions", fractions, "Comma-separated labeled fractions")->delimiter(',');
  bench->add_option("--seeds", seeds, "Comma-separated seeds")->delimiter(',');
  bench->add_option("--variants", variants, "Comma-separated variants: box_only, point_detr, pbc")->delimiter(',');
  bench->add_option("-j,--jobs", jobs, "Cells run in parallel");
  report->add_option("--results", results_path, "Results store (default: <out>/results.jsonl)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  set_log_level(common.quiet ? LogLevel::kQuiet : common.verbose ? LogLevel::kInfo : LogLevel::kWarn);
  Session s(common, out);

  try {
    if (!fractions.empty()) s.extra.push_back("bench.fractions=" + json_list(fractions, false));
    if (!seeds.empty()) s.extra.push_back("bench.seeds=" + json_list(seeds, false));
    if (!variants.empty()) s.extra.push_back("bench.variants=" + json_list(variants, true));
    if (jobs) s.extra.push_back("bench.jobs=" + std::to_string(*jobs));
    RunConfig& cfg = s.config();
    const std::string mpath = manifest.empty() ? cfg.manifest : manifest;
    const std::string spath = split_path.empty() ? cfg.split : split_path;
    const fs::path od = s.out_dir();

    if (gen->parsed()) {
      s.snapshot();
      const Manifest m = generate_synthetic(cfg.synthetic, cfg.data_seed, od);
      out << "wrote " << m.entries.size() << " images to " << (od / "manifest.json").string() << '\n';
    } else if (split->parsed()) {
      s.snapshot();
      const Manifest m = load_manifest(mpath, {.check_images = false});
      const SplitPlan plan = make_split(m, fraction, cfg.seed);
      save_split(plan, od / "split.json");
      out << "test " << plan.test_ids.size() << ", fully labeled " << plan.fully_labeled_ids.size() << ", weak "
          << plan.weak_ids.size() << '\n';
    } else if (t1->parsed() || t2->parsed() || st->parsed()) {
      const Dataset data = load_dataset(mpath);
      s.adopt_classes(data.manifest());
      s.snapshot();
      const SplitPlan plan = load_split(spath);
      const std::optional<Checkpoint> res = maybe_checkpoint(resume);
      StageControl control{res ? &*res : nullptr, -1};
      StageResult r;
      std::string name;
      if (t1->parsed()) {
        r = train_teacher_step1(cfg, data, plan, control);
        name = "teacher_step1";
      } else if (t2->parsed()) {
        if (teacher_ck.empty()) throw CLI::RequiredError("--teacher");
        r = refine_teacher_step2(cfg, data, plan, load_checkpoint(teacher_ck), control);
        name = "teacher_step2";
      } else {
        std::optional<Manifest> pseudo;
        if (!pseudo_path.empty()) {
          pseudo = load_manifest(pseudo_path);
          // Back to ids of the training dataset.
          const fs::path root = fs::absolute(data.manifest().root);
          for (auto& e : pseudo->entries) e.image = fs::relative(fs::absolute(pseudo->image_path(e)), root).generic_string();
        }
        r = train_student_step3(cfg, data, plan, pseudo ? &*pseudo : nullptr, control);
        name = "student";
      }
      save_checkpoint(r.checkpoint, od / (name + ".ckpt"));
      write_losses(od / (name + "_losses.json"), r);
      out << "wrote " << (od / (name + ".ckpt")).string();
      if (!r.epoch_losses.empty()) out << " (final epoch loss " << r.epoch_losses.back() << ")";
      out << '\n';
    } else if (pl->parsed()) {
      if (teacher_ck.empty()) throw CLI::RequiredError("--teacher");
      const Dataset data = load_dataset(mpath);
      s.adopt_classes(data.manifest());
      s.snapshot();
      const SplitPlan plan = load_split(spath);
      const TeacherModel teacher = teacher_from_checkpoint(load_checkpoint(teacher_ck));
      Manifest pseudo = generate_pseudo_labels(teacher, data, plan.weak_ids);
      // Image paths stay relative to the source dataset.
      const fs::path target = od / "pseudo_manifest.json";
      for (auto& e : pseudo.entries) e.image = fs::relative(fs::absolute(data.manifest().image_path(e)), fs::absolute(od)).generic_string();
      save_manifest(pseudo, target);
      std::size_t boxes = 0;
      for (const auto& e : pseudo.entries) boxes += e.objects.size();
      out << "wrote " << boxes << " pseudo boxes on " << pseudo.entries.size() << " images to " << target.string() << '\n';
    } else if (ev->parsed()) {
      s.snapshot();
      EvalReport rep;
      if (!dets_path.empty()) {
        if (gt_path.empty()) throw CLI::RequiredError("--gt");
        const Manifest gt = load_manifest(gt_path, {.check_images = false});
        std::vector<ImageGroundTruth> gts;
        for (const auto& e : gt.entries) gts.push_back({e.image, e.objects});
        rep = evaluate(load_detections(dets_path), gts, cfg.eval, gt.num_classes());
      } else {
        if (student_ck.empty() == teacher_ck.empty()) {
          throw CLI::ValidationError("eval", "give exactly one of --dets, --student, --teacher");
        }
        const Dataset data = load_dataset(mpath);
        const SplitPlan plan = load_split(spath);
        if (!student_ck.empty()) {
          const StudentModel m = student_from_checkpoint(load_checkpoint(student_ck));
          const auto dets = student_detections(m, data, plan.test_ids);
          if (!save_dets.empty()) save_detections(dets, save_dets);
          rep = evaluate(dets, ground_truth(data, plan.test_ids), cfg.eval, data.manifest().num_classes());
        } else {
          const TeacherModel m = teacher_from_checkpoint(load_checkpoint(teacher_ck));
          rep = evaluate_teacher(m, data, plan.test_ids, cfg.eval);
        }
      }
      std::ofstream(od / "eval_report.json") << report_to_json(rep) << '\n';
      std::ofstream(od / "eval_report.csv") << report_to_csv(rep);
      out << map_line(rep.map) << '\n';
    } else if (bench->parsed()) {
      const Dataset data = load_dataset(mpath);
      s.adopt_classes(data.manifest());
      s.snapshot();
      const BenchmarkResult res = run_benchmark(cfg, data, od / "results.jsonl");
      emit_report(res, od);
      int failed = 0;
      for (const auto& c : res.cells) failed += c.ok ? 0 : 1;
      out << res.cells.size() << " cells (" << failed << " failed); report in " << od.string() << '\n';
      if (failed > 0) return kExitRuntime;
    } else if (report->parsed()) {
      s.snapshot();
      const fs::path store = results_path.empty() ? od / "results.jsonl" : fs::path(results_path);
      if (!fs::exists(store)) throw std::runtime_error("results store not found: " + store.string());
      BenchmarkResult res;
      // Last record per cell wins, as in a resumed sweep.
      for (CellResult& c : load_results(store)) {
        auto it = std::find_if(res.cells.begin(), res.cells.end(), [&](const CellResult& o) { return o.same_cell(c); });
        if (it != res.cells.end()) {
          *it = std::move(c);
        } else {
          res.cells.push_back(std::move(c));
        }
      }
      if (res.cells.empty()) throw std::runtime_error("results store is empty: " + store.string());
      emit_report(res, od);
      out << "wrote " << (od / "results.csv").string() << " and " << (od / "map_vs_fraction.svg").string() << '\n';
    }
  } catch (const CLI::Error& e) {
    err << "error: usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: config: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ManifestError& e) {
    err << "error: manifest: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const CheckpointError& e) {
    err << "error: checkpoint: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const EvalError& e) {
    err << "error: eval: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: runtime: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace wssod
