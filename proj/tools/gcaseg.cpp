#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gcaseg/checkpoint.hpp"
#include "gcaseg/data.hpp"
#include "gcaseg/gradsuite.hpp"
#include "gcaseg/inference.hpp"
#include "gcaseg/metrics.hpp"
#include "gcaseg/nifti.hpp"
#include "gcaseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace gcaseg;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Thrown for bad flag values detected after parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void banner(const std::string& command, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cerr << "# gcaseg " << command << " resolved configuration\n";
  for (const auto& [k, v] : kv) std::cerr << k << '=' << v << '\n';
  std::cerr << "# end configuration\n";
}

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

Spacing parse_spacing(const std::string& text) {
  // "z,y,x" or a single isotropic value
  std::vector<double> v;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("--spacing: cannot parse '" + text + "'");
    }
  }
  if (v.size() == 1) v = {v[0], v[0], v[0]};
  if (v.size() != 3 || !(v[0] > 0 && v[1] > 0 && v[2] > 0)) throw UsageError("--spacing needs z,y,x > 0");
  return {v[0], v[1], v[2]};
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  std::int64_t cases = 250, size = 32;
  std::uint64_t seed = 42;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  banner("synth", {{"out", a.out}, {"cases", std::to_string(a.cases)}, {"size", std::to_string(a.size)},
                   {"seed", std::to_string(a.seed)}, {"force", a.force ? "true" : "false"}});
  if (a.cases < 0) throw UsageError("--cases must be >= 0");
  const fs::path root(a.out);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!a.force) throw DataError(root.string() + ": directory exists and is not empty (use --force to overwrite)");
    fs::remove_all(root);
  }
  fs::create_directories(root);
  std::vector<std::string> ids;
  for (std::int64_t i = 0; i < a.cases; ++i) {
    const auto c = generate_synthetic_case(case_seed(a.seed, static_cast<std::uint64_t>(i)), a.size, {}, synthetic_case_id(i));
    write_case(root, c);
    ids.push_back(c.id);
  }
  write_manifest(root, ids);
  std::cerr << "wrote " << a.cases << " cases to " << root.string() << '\n';
  return kOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out;
  std::vector<std::string> overrides;
  bool resume = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config_file(a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  validate(cfg);
  std::cerr << "# gcaseg train resolved configuration\n" << to_text(cfg) << "# end configuration\n";
  std::cerr << "data=" << a.data << "\nout=" << a.out << '\n';

  const auto cases = load_dataset(a.data);
  Trainer trainer(cfg, cases, a.out, &std::cerr);
  std::cerr << "train cases " << trainer.train_size() << ", val cases " << trainer.val_size() << ", "
            << trainer.total_steps() << " optimizer steps (" << trainer.warmup() << " warmup)\n";
  if (a.resume) {
    const auto last = fs::path(a.out) / "last.ckpt";
    if (!fs::exists(last)) throw DataError(last.string() + ": nothing to resume from");
    trainer.resume(read_checkpoint(last));
    std::cerr << "resumed at epoch " << trainer.epoch() << ", step " << trainer.step() << '\n';
  }
  const auto r = trainer.run();
  std::cerr << "done: best mean dice " << num(r.best_metric) << " at epoch " << r.best_epoch << ", peak rss "
            << peak_rss_bytes() << " bytes\n";
  return kOk;
}

// -------------------------------------------------------------------- eval

// A label volume for `id` under `dir`: <dir>/<id>.nii or <dir>/<id>/seg.nii.
std::optional<fs::path> label_path(const fs::path& dir, const std::string& id) {
  for (const auto& p : {dir / (id + ".nii"), dir / id / "seg.nii"})
    if (fs::exists(p)) return p;
  return std::nullopt;
}

std::vector<std::string> reference_ids(const fs::path& dir) {
  if (fs::exists(dir / kManifestName)) return read_manifest(dir);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".nii") ids.push_back(e.path().stem().string());
    if (e.is_directory() && fs::exists(e.path() / "seg.nii")) ids.push_back(e.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct EvalArgs {
  std::string pred, gt, spacing, csv, fold, hd = "standard";
};

int cmd_eval(const EvalArgs& a) {
  const fs::path pred(a.pred), gt(a.gt);
  const auto csv = a.csv.empty() ? (pred / "metrics.csv").string() : a.csv;
  banner("eval", {{"pred", a.pred}, {"gt", a.gt}, {"spacing", a.spacing.empty() ? "from-reference-header" : a.spacing},
                  {"csv", csv}, {"fold", a.fold}, {"hd", a.hd}});
  if (a.hd != "standard" && a.hd != "paper-literal") throw UsageError("--hd must be standard or paper-literal");
  const auto variant = a.hd == "standard" ? HdVariant::kStandard : HdVariant::kPaperLiteral;
  for (const auto& d : {pred, gt})
    if (!fs::is_directory(d)) throw DataError(d.string() + ": directory not found");
  const auto ids = reference_ids(gt);
  if (ids.empty()) throw DataError(gt.string() + ": no reference label volumes");
  const std::optional<Spacing> forced = a.spacing.empty() ? std::nullopt : std::optional(parse_spacing(a.spacing));

  MetricsReport report;
  std::size_t missing = 0;
  for (const auto& id : ids) {
    const auto gp = label_path(gt, id);
    if (!gp) throw DataError(gt.string() + ": no labels for " + id);
    const auto pp = label_path(pred, id);
    if (!pp) {
      ++missing;
      for (auto r : {Region::kET, Region::kTC, Region::kWT}) report.rows.push_back(missing_case_row(id, a.fold, r));
      continue;
    }
    const auto spacing = forced ? *forced : read_volume(*gp).spacing;
    report.add(evaluate_case(read_labels(*pp), read_labels(*gp), spacing, id, a.fold, variant));
  }
  report.write_csv(std::cout);
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw DataError(csv + ": cannot write");
  report.write_csv(out);
  if (missing) {
    std::cerr << "error: " << missing << " case(s) have no prediction\n";
    return kData;
  }
  return kOk;
}

// ------------------------------------------------------------------- infer

struct InferArgs {
  std::string ckpt, out, blending;
  std::vector<std::string> inputs;
  double overlap = -1;
  std::int64_t workers = 1;
  bool no_postprocess = false;
};

// Each input is a case directory or a dataset root with a manifest.
std::vector<std::pair<std::string, fs::path>> inference_inputs(const std::vector<std::string>& inputs) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& s : inputs) {
    const fs::path p(s);
    if (fs::exists(p / kManifestName)) {
      for (const auto& id : read_manifest(p)) out.emplace_back(id, p / id);
    } else if (fs::is_directory(p)) {
      out.emplace_back(p.filename().string(), p);
    } else {
      throw DataError(s + ": not a case directory or dataset root");
    }
  }
  return out;
}

int cmd_infer(const InferArgs& a) {
  auto [cfg, model] = load_model(a.ckpt);
  const double overlap = a.overlap >= 0 ? a.overlap : cfg.infer_overlap;
  const auto blending = a.blending.empty() ? cfg.blending : a.blending;
  const SlidingWindowOptions sw{cfg.sw_batch_size, blending_from_string(blending), a.workers};
  std::cerr << "# gcaseg infer resolved configuration\n" << to_text(cfg);
  banner("infer", {{"ckpt", a.ckpt}, {"out", a.out}, {"overlap", num(overlap)}, {"blending", blending},
                   {"workers", std::to_string(a.workers)}, {"postprocess", a.no_postprocess ? "false" : "true"}});
  if (!(overlap >= 0 && overlap < 1)) throw UsageError("--overlap must be in [0, 1)");
  fs::create_directories(a.out);
  const auto cases = inference_inputs(a.inputs);
  const TileModel<float> tile = [&model](const Tensor<float>& x) { return model.forward(x).logits; };
  for (const auto& [id, dir] : cases) {
    const auto c = read_case(dir, id, false);
    const auto t0 = std::chrono::steady_clock::now();
    bool single = false;
    const auto logits = infer_case(model_input(c.image, cfg.binary_channel), tile, cfg.roi(), overlap, sw, &single);
    const Tensor<float> batched({1, logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3)}, logits.values());
    auto labels = predict_labels(batched)[0];
    if (!a.no_postprocess) labels = postprocess(labels, {cfg.min_component_voxels, true});
    write_volume(fs::path(a.out) / (id + ".nii"), labels, c.spacing);
    std::cerr << id << ": " << to_string(c.extents()) << (single ? " single-tile path" : " sliding window") << ", "
              << std::fixed << std::setprecision(2)
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n"
              << std::defaultfloat;
  }
  return kOk;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& scope, double tol) {
  banner("gradcheck", {{"scope", scope}, {"tolerance", num(tol)}, {"precision", "64"}});
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(scope);
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.result.max_relative_error < tol && r.result.checked > 0;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << std::left << std::setw(36) << r.name << " max_rel_err "
              << std::scientific << std::setprecision(3) << r.result.max_relative_error << std::defaultfloat
              << " checked " << r.result.checked << " skipped_kinks " << r.result.skipped_kinks << '\n';
  }
  std::cout << (ok ? "gradcheck " + scope + ": all passed" : "gradcheck " + scope + ": FAILED") << " in " << std::fixed
            << std::setprecision(1) << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
            << " s\n";
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"gcaseg: 3D brain-tumour segmentation with graph cross attention"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic dataset");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--cases", synth.cases, "number of cases")->capture_default_str();
  s->add_option("--size", synth.size, "cube edge in voxels")->check(CLI::IsMember({16, 32, 64}))->capture_default_str();
  s->add_option("--seed", synth.seed, "base seed")->capture_default_str();
  s->add_flag("--force", synth.force, "replace a non-empty output directory");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", train.config, "key=value config file (omitted keys take defaults)");
  t->add_option("--data", train.data, "dataset directory")->required();
  t->add_option("--out", train.out, "run directory for checkpoints and runlog.csv")->required();
  t->add_option("--set", train.overrides, "override a config key (key=value), repeatable");
  t->add_flag("--resume", train.resume, "continue from <out>/last.ckpt");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score predictions against references");
  e->add_option("--pred", ev.pred, "prediction directory")->required();
  e->add_option("--gt", ev.gt, "reference directory")->required();
  e->add_option("--spacing", ev.spacing, "voxel spacing z,y,x in mm (default: reference header)");
  e->add_option("--csv", ev.csv, "report file (default <pred>/metrics.csv)");
  e->add_option("--fold", ev.fold, "fold label for the report");
  e->add_option("--hd", ev.hd, "standard or paper-literal")->capture_default_str();

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "predict label volumes");
  i->add_option("--ckpt", inf.ckpt, "checkpoint")->required();
  i->add_option("--in", inf.inputs, "case directories or dataset roots")->required();
  i->add_option("--out", inf.out, "output directory")->required();
  i->add_option("--overlap", inf.overlap, "tile overlap (default: checkpoint config)");
  i->add_option("--blending", inf.blending, "constant or gaussian (default: checkpoint config)");
  i->add_option("--workers", inf.workers, "concurrent tile batches")->check(CLI::PositiveNumber)->capture_default_str();
  i->add_flag("--no-postprocess", inf.no_postprocess, "skip component filtering and closing");

  std::string scope = "ops";
  double tol = 1e-4;
  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  g->add_option("--scope", scope, "ops, gca or end2end")->check(CLI::IsMember({"ops", "gca", "end2end"}))->capture_default_str();
  g->add_option("--tol", tol, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (t->parsed()) return cmd_train(train);
    if (e->parsed()) return cmd_eval(ev);
    if (i->parsed()) return cmd_infer(inf);
    if (g->parsed()) return cmd_gradcheck(scope, tol);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << '\n';
    return kUsage;
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << '\n';
    return kUsage;
  } catch (const NumericalError& ex) {
    std::cerr << "numerical failure: " << ex.what() << '\n';
    return kNumerical;
  } catch (const std::exception& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kData;
  }
  return kUsage;
}
