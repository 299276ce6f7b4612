// ldet: synthesize data, train fine-tuning policies, analyze ranks, build
// and apply delta packages, and simulate uplink transfer times.

#include <cinttypes>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ldet/ldet.hpp"

namespace {

using namespace ldet;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitIntegrity = 4;

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 42;
  bool seed_set = false;
};

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = load_config(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  return cfg;
}

std::vector<SceneSample> mixed_dataset(const ExperimentConfig& cfg,
                                       std::uint64_t data_seed, std::size_t count) {
  const SynthOptions opt = cfg.synth_options();
  auto d1 = synth_dataset(Rng::derive_seed(data_seed, 1), Domain::kD1,
                          (count + 1) / 2, opt);
  auto d2 = synth_dataset(Rng::derive_seed(data_seed, 2), Domain::kD2, count / 2, opt);
  std::vector<SceneSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    if (i % 2 == 0)
      out.push_back(std::move(d1[i / 2]));
    else
      out.push_back(std::move(d2[i / 2]));
  }
  return out;
}

std::vector<SceneSample> load_or_synth(const std::string& data_path,
                                       const ExperimentConfig& cfg,
                                       std::size_t count) {
  if (!data_path.empty()) return archive_to_dataset(load_archive_file(data_path));
  return mixed_dataset(cfg, Rng::derive_seed(cfg.seed, 100), count);
}

DetectorModel load_or_init_model(const std::string& model_path,
                                 const ExperimentConfig& cfg) {
  Rng init_rng(Rng::derive_seed(cfg.seed, 200));
  DetectorModel model = make_detector(cfg.detector, init_rng);
  if (!model_path.empty()) archive_to_model(model, load_archive_file(model_path));
  return model;
}

int cmd_synth_data(const CommonArgs& common, const std::string& domain,
                   std::size_t count, const std::string& out_path) {
  const ExperimentConfig cfg = resolve_config(common);
  std::vector<SceneSample> samples;
  if (domain == "D1")
    samples = synth_dataset(Rng::derive_seed(cfg.seed, 100 + 1), Domain::kD1, count,
                            cfg.synth_options());
  else if (domain == "D2")
    samples = synth_dataset(Rng::derive_seed(cfg.seed, 100 + 2), Domain::kD2, count,
                            cfg.synth_options());
  else if (domain == "mix")
    samples = mixed_dataset(cfg, Rng::derive_seed(cfg.seed, 100), count);
  else
    throw ConfigError("synth-data: domain must be D1, D2 or mix");
  save_archive_file(dataset_to_archive(samples), out_path);
  std::printf("wrote %zu samples to %s\n", samples.size(), out_path.c_str());
  return kExitOk;
}

int cmd_pretrain(const CommonArgs& common, const std::string& data_path,
                 const std::string& out_path, std::size_t epochs_override) {
  const ExperimentConfig cfg = resolve_config(common);
  std::vector<SceneSample> data =
      data_path.empty()
          ? synth_dataset(Rng::derive_seed(cfg.seed, 100 + 1), Domain::kD1,
                          cfg.pretrain_count, cfg.synth_options())
          : archive_to_dataset(load_archive_file(data_path));
  DetectorModel model = load_or_init_model("", cfg);
  const std::size_t epochs = epochs_override ? epochs_override : cfg.epochs;
  const TrainLog log = train(model, FinetunePolicy{PolicyName::kFullFinetune}, data,
                             epochs, cfg.optimizer, Rng::derive_seed(cfg.seed, 300));
  fold_and_reset_adapters(model, cfg.seed);
  save_archive_file(model_to_archive(model), out_path);
  std::printf("pretrained %zu epochs, final loss %.6f, wrote %s\n", epochs,
              log.epoch_loss.back(), out_path.c_str());
  return kExitOk;
}

int cmd_finetune(const CommonArgs& common, const std::string& policy_name,
                 const std::string& model_path, const std::string& data_path,
                 const std::string& out_path, std::size_t epochs_override) {
  ExperimentConfig cfg = resolve_config(common);
  if (!policy_name.empty()) cfg.policy = policy_name;
  const FinetunePolicy policy{policy_from_name(cfg.policy)};
  DetectorModel model = load_or_init_model(model_path, cfg);
  const PolicyMask mask = apply_policy(model, policy);
  std::printf("policy %s: trainable %" PRIu64 " / %" PRIu64 " parameters (ratio %.6f)\n",
              policy_to_string(policy.name).c_str(), mask.counts.trainable,
              mask.counts.total, mask.counts.ratio);
  std::vector<SceneSample> data = load_or_synth(data_path, cfg, cfg.finetune_count);
  const std::size_t epochs = epochs_override ? epochs_override : cfg.epochs;
  const TrainLog log = train(model, policy, data, epochs, cfg.optimizer,
                             Rng::derive_seed(cfg.seed, 301));
  save_archive_file(model_to_archive(model), out_path);
  std::printf("finetuned %zu epochs, final loss %.6f, wrote %s\n", epochs,
              log.epoch_loss.back(), out_path.c_str());
  return kExitOk;
}

int cmd_analyze_rank(const CommonArgs& common, const std::string& weights_path,
                     const std::string& out_dir, double eps, double pmax) {
  (void)resolve_config(common);
  const TensorArchive archive = load_archive_file(weights_path);
  std::vector<RankCurve> curves;
  std::vector<RankSelection> selections;
  std::vector<const TensorEntry*> eligible;
  for (const auto& e : archive.entries)
    if (e.dims.size() == 2 && e.dims[0] >= 2 && e.dims[1] >= 2 &&
        e.role == TensorRole::kBase)
      eligible.push_back(&e);
  std::sort(eligible.begin(), eligible.end(),
            [](const TensorEntry* a, const TensorEntry* b) { return a->name < b->name; });
  curves.resize(eligible.size());
  parallel_for(eligible.size(), [&](std::size_t i) {
    const Matrix w = entry_to_matrix(*eligible[i]);
    curves[i] = analyze_matrix(w, default_rank_sweep(w.rows(), w.cols()),
                               eligible[i]->name);
  });
  for (const auto& c : curves) {
    if (eps > 0.0)
      selections.push_back(select_rank(c, RankCriterion::error_tolerance(eps)));
    else if (pmax > 0.0)
      selections.push_back(select_rank(c, RankCriterion::param_budget(pmax)));
  }
  const auto files = emit_report(curves, selections, out_dir);
  std::printf("analyzed %zu matrices, wrote %zu files to %s\n", curves.size(),
              files.size(), out_dir.c_str());
  return kExitOk;
}

int cmd_package(const CommonArgs& common, const std::string& model_path,
                const std::string& policy_name, const std::string& out_path) {
  ExperimentConfig cfg = resolve_config(common);
  if (!policy_name.empty()) cfg.policy = policy_name;
  const FinetunePolicy policy{policy_from_name(cfg.policy)};
  DetectorModel model = load_or_init_model(model_path, cfg);
  const TensorArchive pkg = build_package(model, policy);
  save_archive_file(pkg, out_path);
  std::printf("packaged %zu tensors (%" PRIu64 " payload bytes) to %s\n",
              pkg.entries.size(), payload_byte_size(pkg), out_path.c_str());
  return kExitOk;
}

int cmd_apply(const std::string& base_path, const std::string& pkg_path,
              const std::string& out_path) {
  const TensorArchive base = load_archive_file(base_path);
  const TensorArchive pkg = load_archive_file(pkg_path);
  const TensorArchive merged = apply_package(base, pkg);
  save_archive_file(merged, out_path);
  std::printf("applied %zu package tensors onto %s, wrote %s\n", pkg.entries.size(),
              base_path.c_str(), out_path.c_str());
  return kExitOk;
}

int cmd_uplink_sim(const std::string& pkg_path, double rate, double overhead) {
  const std::uint64_t bytes =
      pkg_path.empty() ? 0 : payload_byte_size(load_archive_file(pkg_path));
  const double seconds = uplink_time_seconds(bytes, UplinkBudget{rate, overhead});
  std::printf("%" PRIu64 " payload bytes at %.0f bps (overhead %.2fx): %.2f s\n",
              bytes, rate, overhead, seconds);
  return kExitOk;
}

int cmd_eval(const CommonArgs& common, const std::string& model_path,
             const std::string& data_path, double iou) {
  const ExperimentConfig cfg = resolve_config(common);
  DetectorModel model = load_or_init_model(model_path, cfg);
  std::vector<SceneSample> data = load_or_synth(data_path, cfg, cfg.eval_count);
  const EvalMetrics m = evaluate(model, data, iou);
  std::printf("AP50-lite %.4f  mean-matched-IoU %.4f  cls-accuracy %.4f  (%zu/%zu gt matched)\n",
              m.ap50, m.mean_matched_iou, m.cls_accuracy, m.matched_gt, m.total_gt);
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& common, std::size_t max_checks) {
  ExperimentConfig cfg = resolve_config(common);
  if (common.config_path.empty()) {
    // default to a small instance so the check finishes quickly
    cfg.detector.backbone.image_size = 32;
    cfg.detector.backbone.stages = {{4, 2, 2, 4}, {8, 2, 2, 4}, {16, 2, 2, 4}, {32, 2, 2, 4}};
    cfg.detector.backbone.lora_rank = {2, 2, 2, 2};
    cfg.detector.neck_channels = 6;
    cfg.detector.head_hidden = 12;
    cfg.detector.roi = 2;
    cfg.detector.head_rank_fc1 = 3;
    cfg.detector.head_rank_fc2 = 3;
  }
  Rng rng(Rng::derive_seed(cfg.seed, 200));
  DetectorModel model = make_detector(cfg.detector, rng);
  const SceneSample sample =
      synth_scene(cfg.seed, Domain::kD1, 0, cfg.synth_options());

  auto loss_value = [&]() {
    Tape t;
    const auto preds = detector_forward_tape(t, model, sample.image);
    const auto targets = build_targets(preds, sample, model.cfg.classes);
    return t.value(detection_loss_tape(t, preds, targets))(0, 0);
  };

  Tape t;
  const auto preds = detector_forward_tape(t, model, sample.image);
  const auto targets = build_targets(preds, sample, model.cfg.classes);
  t.backward(detection_loss_tape(t, preds, targets));

  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  Rng pick(Rng::derive_seed(cfg.seed, 201));
  for_each_param(model, [&](const std::string& name, Matrix* m, ParamKind) {
    if (checked >= max_checks) return;
    const Matrix g = t.grad_of(m);
    const std::size_t i = pick.next_below(m->size());
    const double h = 1e-5;
    const double keep = m->vec()[i];
    m->vec()[i] = keep + h;
    const double up = loss_value();
    m->vec()[i] = keep - h;
    const double dn = loss_value();
    m->vec()[i] = keep;
    const double fd = (up - dn) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(g.vec()[i]), 1e-6});
    const double rel = std::abs(fd - g.vec()[i]) / denom;
    if (rel > worst) {
      worst = rel;
      worst_name = name;
    }
    ++checked;
  });
  std::printf("gradcheck: %zu tensors sampled, worst relative error %.3e (%s)\n",
              checked, worst, worst_name.c_str());
  if (worst > 1e-4) {
    std::fprintf(stderr, "gradcheck failed: %.3e > 1e-4\n", worst);
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoRA fine-tuning toolkit for a toy oriented object detector"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string domain = "mix", out_path, model_path, data_path, policy_name;
  std::string base_path, pkg_path, out_dir = "rank_report";
  std::size_t count = 64, epochs_override = 0, max_checks = 64;
  double rate = 1e6, overhead = 1.0, iou = 0.5, eps = 0.0, pmax = 0.0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "experiment config file");
    sub->add_option("--seed", common.seed, "root random seed")
        ->each([&](const std::string&) { common.seed_set = true; });
  };

  CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic dataset");
  add_common(synth);
  synth->add_option("--domain", domain, "D1, D2 or mix");
  synth->add_option("--count", count, "number of scenes");
  synth->add_option("--out", out_path, "output archive")->required();

  CLI::App* pre = app.add_subcommand("pretrain", "full fine-tune from scratch on D1");
  add_common(pre);
  pre->add_option("--data", data_path, "dataset archive (default: synthesized D1)");
  pre->add_option("--epochs", epochs_override, "override config epochs");
  pre->add_option("--out", out_path, "output model archive")->required();

  CLI::App* fin = app.add_subcommand("finetune", "fine-tune under a policy");
  add_common(fin);
  fin->add_option("--policy", policy_name, "fine-tuning policy name");
  fin->add_option("--model", model_path, "base model archive (default: fresh init)");
  fin->add_option("--data", data_path, "dataset archive (default: synthesized mix)");
  fin->add_option("--epochs", epochs_override, "override config epochs");
  fin->add_option("--out", out_path, "output model archive")->required();

  CLI::App* ana = app.add_subcommand("analyze-rank", "SVD rank sweep over weights");
  add_common(ana);
  ana->add_option("--weights", model_path, "weight archive to analyze")->required();
  ana->add_option("--out-dir", out_dir, "report directory");
  ana->add_option("--error-tolerance", eps, "select smallest rank within relative error");
  ana->add_option("--param-budget", pmax, "select largest rank within ratio budget");

  CLI::App* pkg = app.add_subcommand("package", "build a delta package");
  add_common(pkg);
  pkg->add_option("--model", model_path, "trained model archive")->required();
  pkg->add_option("--policy", policy_name, "policy that was trained");
  pkg->add_option("--out", out_path, "output package")->required();

  CLI::App* apl = app.add_subcommand("apply", "merge a package into a base archive");
  apl->add_option("--base", base_path, "base weight archive")->required();
  apl->add_option("--package", pkg_path, "delta package")->required();
  apl->add_option("--out", out_path, "merged archive")->required();

  CLI::App* upl = app.add_subcommand("uplink-sim", "transfer-time accounting");
  upl->add_option("--package", pkg_path, "package file (omit for empty package)");
  upl->add_option("--rate", rate, "uplink rate in bits per second");
  upl->add_option("--overhead", overhead, "protocol overhead factor (>= 1)");

  CLI::App* evl = app.add_subcommand("eval", "evaluate a model on a dataset");
  add_common(evl);
  evl->add_option("--model", model_path, "model archive");
  evl->add_option("--data", data_path, "dataset archive (default: synthesized mix)");
  evl->add_option("--iou", iou, "IoU threshold");

  CLI::App* grd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(grd);
  grd->add_option("--checks", max_checks, "number of sampled tensors");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(common, domain, count, out_path);
    if (pre->parsed()) return cmd_pretrain(common, data_path, out_path, epochs_override);
    if (fin->parsed())
      return cmd_finetune(common, policy_name, model_path, data_path, out_path,
                          epochs_override);
    if (ana->parsed()) return cmd_analyze_rank(common, model_path, out_dir, eps, pmax);
    if (pkg->parsed()) return cmd_package(common, model_path, policy_name, out_path);
    if (apl->parsed()) return cmd_apply(base_path, pkg_path, out_path);
    if (upl->parsed()) return cmd_uplink_sim(pkg_path, rate, overhead);
    if (evl->parsed()) return cmd_eval(common, model_path, data_path, iou);
    if (grd->parsed()) return cmd_gradcheck(common, max_checks);
  } catch (const ldet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ldet::ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ldet::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kExitIntegrity;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
