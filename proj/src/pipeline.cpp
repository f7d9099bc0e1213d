#include "wssod/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "wssod/log.hpp"
#include "wssod/objectives.hpp"

namespace wssod {

namespace {

// Seed tags; none depends on the variant so that variants share initializations.
constexpr std::uint64_t kTeacherInitTag = 0x7465'6163;
constexpr std::uint64_t kStep1Tag = 0x7374'6570'31;
constexpr std::uint64_t kStep2Tag = 0x7374'6570'32;
constexpr std::uint64_t kStudentInitTag = 0x7374'7564;
constexpr std::uint64_t kStep3Tag = 0x7374'6570'33;

double schedule_lr(double base, const Schedule& s, int epoch) {
  if (!s.cosine || s.epochs <= 1) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / s.epochs));
}

/// Everything an epoch loop needs to pick up exactly where it stopped.
struct LoopState {
  int epoch = 0;
  std::vector<double> losses;
  Rng rng;
};

LoopState resume_state(const StageControl& control, const std::string& stage, std::uint64_t fresh_seed) {
  if (!control.resume) return {0, {}, Rng(fresh_seed)};
  const Checkpoint& ck = *control.resume;
  if (ck.meta.value("stage", std::string()) != stage) {
    throw CheckpointError("resume checkpoint belongs to stage '" + ck.meta.value("stage", std::string()) + "', not " + stage);
  }
  LoopState st;
  st.epoch = ck.meta.at("epoch").get<int>();
  st.losses = ck.meta.at("epoch_losses").get<std::vector<double>>();
  st.rng = Rng::deserialize(ck.rng_state);
  return st;
}

int last_epoch(const Schedule& s, const StageControl& control) {
  return control.stop_after_epochs >= 0 ? std::min(s.epochs, control.stop_after_epochs) : s.epochs;
}

template <class Opt>
Checkpoint stage_checkpoint(Checkpoint ck, const std::string& stage, const LoopState& st, const Opt& opt) {
  ck.meta = {{"stage", stage}, {"epoch", st.epoch}, {"epoch_losses", st.losses}};
  ck.step = opt.steps();
  ck.rng_state = st.rng.serialize();
  store_optimizer_state(ck, opt.state());
  return ck;
}

/// Runs epochs [st.epoch, stop) over `n` items. `batch_loss(indices, epoch_seed, first_position)` returns
/// the summed loss it back-propagated (already scaled by 1/batch) and the number of items it covered.
template <class Opt, class BatchFn>
void run_epochs(LoopState& st, int stop, int n, const Schedule& sched, double base_lr, Opt& opt, nn::ParameterSet& ps,
                const std::string& stage, BatchFn&& batch_loss) {
  for (; st.epoch < stop; ++st.epoch) {
    opt.set_lr(schedule_lr(base_lr, sched, st.epoch));
    const std::vector<int> perm = permutation(n, st.rng);
    const std::uint64_t epoch_seed = st.rng.next_u64();
    double total = 0.0;
    int counted = 0;
    for (int start = 0; start < n; start += sched.batch_size) {
      const int end = std::min(n, start + sched.batch_size);
      std::vector<int> idx(perm.begin() + start, perm.begin() + end);
      ps.zero_grad();
      const auto [loss, items] = batch_loss(idx, epoch_seed, start);
      total += loss;
      counted += items;
      if (sched.clip_norm > 0.0) optim::clip_grad_norm(ps, sched.clip_norm);
      opt.step();
    }
    if (!ps.all_finite()) throw std::runtime_error(stage + ": parameters became non-finite in epoch " + std::to_string(st.epoch));
    st.losses.push_back(counted > 0 ? total / counted : 0.0);
    log_info(stage + " epoch " + std::to_string(st.epoch + 1) + "/" + std::to_string(sched.epochs) + " loss " +
             std::to_string(st.losses.back()));
  }
}

std::vector<LabeledImage> labeled_images(const Dataset& data, std::span<const std::string> ids) {
  std::vector<LabeledImage> out;
  for (const auto& id : ids) {
    const ManifestEntry& e = data.entry(id);
    if (e.objects.empty()) continue;  // contributes nothing to the box loss
    out.push_back({&data.image(id), e.objects});
  }
  return out;
}

std::vector<WeakImage> weak_images(const Dataset& data, std::span<const std::string> ids) {
  std::vector<WeakImage> out;
  for (const auto& id : ids) {
    const ManifestEntry& e = data.entry(id);
    if (e.points.empty()) continue;
    out.push_back({&data.image(id), e.points});
  }
  return out;
}

}  // namespace

StageResult train_teacher_step1(const RunConfig& cfg, const Dataset& data, const SplitPlan& split, StageControl control) {
  const std::vector<LabeledImage> items = labeled_images(data, split.fully_labeled_ids);
  if (items.empty()) throw std::invalid_argument("step 1 needs at least one fully labeled image with objects");
  const LossWeights w = cfg.effective_loss();

  TeacherModel model = control.resume ? teacher_from_checkpoint(*control.resume)
                                      : TeacherModel(cfg.teacher, derive_seed(cfg.seed, kTeacherInitTag));
  optim::Adam opt(model.parameters(), cfg.teacher_optim);
  if (control.resume) opt.load_state(optimizer_state(*control.resume, "adam."), control.resume->step);
  LoopState st = resume_state(control, "step1", derive_seed(cfg.seed, kStep1Tag));

  const int n = static_cast<int>(items.size());
  run_epochs(st, last_epoch(cfg.step1, control), n, cfg.step1, cfg.teacher_optim.lr, opt, model.parameters(), "step1",
             [&](const std::vector<int>& idx, std::uint64_t epoch_seed, int start) {
               double sum = 0.0;
               const double scale = 1.0 / static_cast<double>(idx.size());
               for (std::size_t k = 0; k < idx.size(); ++k) {
                 Rng rng(derive_seed(epoch_seed, static_cast<std::uint64_t>(start) + k));
                 const LabeledImage& it = items[idx[k]];
                 ad::Var loss = loss_step1(model, *it.image, it.objects, rng, w, cfg.sampling);
                 ad::backward(loss, scale);
                 sum += loss.item();
               }
               return std::pair{sum, static_cast<int>(idx.size())};
             });
  return {stage_checkpoint(teacher_checkpoint(model), "step1", st, opt), st.losses};
}

StageResult refine_teacher_step2(const RunConfig& cfg, const Dataset& data, const SplitPlan& split,
                                 const Checkpoint& step1, StageControl control) {
  const std::vector<WeakImage> weak = weak_images(data, split.weak_ids);
  if (weak.empty()) {
    log_warn("step 2 has no weak images with points; keeping the step-1 teacher");
    return {step1, {}};
  }
  const std::vector<LabeledImage> labeled =
      cfg.step2_mix == Step2Mix::kMixed ? labeled_images(data, split.fully_labeled_ids) : std::vector<LabeledImage>{};
  const LossWeights w = cfg.effective_loss();

  TeacherModel model = teacher_from_checkpoint(control.resume ? *control.resume : step1);
  optim::Adam opt(model.parameters(), cfg.teacher_optim);
  if (control.resume) opt.load_state(optimizer_state(*control.resume, "adam."), control.resume->step);
  LoopState st = resume_state(control, "step2", derive_seed(cfg.seed, kStep2Tag));

  // An epoch is one pass over the weak images; labeled batches of the same size cycle alongside.
  const int n = static_cast<int>(weak.size());
  const int nl = static_cast<int>(labeled.size());
  run_epochs(st, last_epoch(cfg.step2, control), n, cfg.step2, cfg.teacher_optim.lr, opt, model.parameters(), "step2",
             [&](const std::vector<int>& idx, std::uint64_t epoch_seed, int start) {
               std::vector<WeakImage> wb;
               std::vector<LabeledImage> lb;
               for (std::size_t k = 0; k < idx.size(); ++k) {
                 wb.push_back(weak[idx[k]]);
                 if (nl > 0) lb.push_back(labeled[(static_cast<std::size_t>(start) + k + epoch_seed % nl) % nl]);
               }
               Rng rng(derive_seed(epoch_seed, static_cast<std::uint64_t>(start)));
               ad::Var loss = loss_step2_batch(model, lb, wb, rng, w, cfg.symmetric, cfg.sampling);
               ad::backward(loss);
               return std::pair{loss.item() * static_cast<double>(idx.size()), static_cast<int>(idx.size())};
             });
  return {stage_checkpoint(teacher_checkpoint(model), "step2", st, opt), st.losses};
}

Manifest generate_pseudo_labels(const BoxPredictor& teacher, const Dataset& data, std::span<const std::string> weak_ids) {
  Manifest out;
  out.classes = data.manifest().classes;
  out.root = data.manifest().root;
  std::vector<std::string> skipped;
  for (const auto& id : weak_ids) {
    const ManifestEntry& e = data.entry(id);
    if (e.points.empty()) {
      skipped.push_back(id);
      continue;
    }
    const std::vector<BoxCCWH> boxes = predict_boxes(teacher, data.image(id), e.points);
    ManifestEntry pe;
    pe.image = e.image;
    pe.width = e.width;
    pe.height = e.height;
    pe.points = e.points;
    for (std::size_t k = 0; k < boxes.size(); ++k) {
      pe.objects.push_back({e.points[k].class_id, boxes[k], Provenance::kPseudo});
      // Points now refer to the pseudo box they produced.
      pe.points[k].source_object = static_cast<int>(k);
    }
    out.entries.push_back(std::move(pe));
  }
  if (!skipped.empty()) {
    log_info("pseudo-label: skipped " + std::to_string(skipped.size()) + " weak images without points (first: " +
             skipped.front() + ")");
  }
  return out;
}

StageResult train_student_step3(const RunConfig& cfg, const Dataset& data, const SplitPlan& split,
                                const Manifest* pseudo, StageControl control) {
  struct Item {
    const ImageSample* image;
    TrainTarget targets;
  };
  std::vector<Item> items;
  for (const auto& id : split.fully_labeled_ids) items.push_back({&data.image(id), data.entry(id).objects});
  if (pseudo) {
    for (const auto& e : pseudo->entries) items.push_back({&data.image(e.image), e.objects});
  }
  if (items.empty()) throw std::invalid_argument("step 3 needs labeled or pseudo-labeled images");

  StudentModel model = control.resume ? student_from_checkpoint(*control.resume)
                                      : StudentModel(cfg.student, derive_seed(cfg.seed, kStudentInitTag));
  optim::Sgd opt(model.parameters(), cfg.student_optim);
  if (control.resume) opt.load_state(optimizer_state(*control.resume, "sgd."), control.resume->step);
  LoopState st = resume_state(control, "step3", derive_seed(cfg.seed, kStep3Tag));

  const int n = static_cast<int>(items.size());
  run_epochs(st, last_epoch(cfg.step3, control), n, cfg.step3, cfg.student_optim.lr, opt, model.parameters(), "step3",
             [&](const std::vector<int>& idx, std::uint64_t, int) {
               double sum = 0.0;
               const double scale = 1.0 / static_cast<double>(idx.size());
               for (int i : idx) {
                 ad::Var loss = loss_student(model.forward(*items[i].image), items[i].targets, model.config());
                 ad::backward(loss, scale);
                 sum += loss.item();
               }
               return std::pair{sum, static_cast<int>(idx.size())};
             });
  return {stage_checkpoint(student_checkpoint(model), "step3", st, opt), st.losses};
}

std::vector<ImageGroundTruth> ground_truth(const Dataset& data, std::span<const std::string> ids) {
  std::vector<ImageGroundTruth> out;
  for (const auto& id : ids) out.push_back({id, data.entry(id).objects});
  return out;
}

EvalReport evaluate_teacher(const BoxPredictor& teacher, const Dataset& data, std::span<const std::string> ids,
                            const EvalConfig& cfg) {
  std::vector<ImageDetections> dets;
  for (const auto& id : ids) {
    ImageDetections d{id, {}};
    const ManifestEntry& e = data.entry(id);
    if (!e.points.empty()) {
      const std::vector<BoxCCWH> boxes = predict_boxes(teacher, data.image(id), e.points);
      for (std::size_t k = 0; k < boxes.size(); ++k) d.detections.push_back({boxes[k], e.points[k].class_id, 1.0});
    }
    dets.push_back(std::move(d));
  }
  return evaluate(dets, ground_truth(data, ids), cfg, data.manifest().num_classes());
}

std::vector<ImageDetections> student_detections(const StudentModel& student, const Dataset& data,
                                                std::span<const std::string> ids) {
  std::vector<ImageDetections> dets;
  for (const auto& id : ids) dets.push_back({id, detect(student, data.image(id))});
  return dets;
}

EvalReport evaluate_student(const StudentModel& student, const Dataset& data, std::span<const std::string> ids,
                            const EvalConfig& cfg) {
  return evaluate(student_detections(student, data, ids), ground_truth(data, ids), cfg, data.manifest().num_classes());
}

CellResult run_cell(const RunConfig& base, const Dataset& data, Variant variant, double fraction, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  CellResult r;
  r.variant = variant;
  r.fraction = fraction;
  r.seed = seed;

  RunConfig cfg = base;
  cfg.variant = variant;
  cfg.seed = seed;
  cfg.teacher.num_classes = data.manifest().num_classes();
  cfg.student.num_classes = data.manifest().num_classes();
  cfg.validate();

  const SplitPlan split = make_split(data.manifest(), fraction, seed);
  std::optional<Manifest> pseudo;
  if (variant != Variant::kBoxOnly) {
    const StageResult s1 = train_teacher_step1(cfg, data, split);
    const StageResult s2 = refine_teacher_step2(cfg, data, split, s1.checkpoint);
    const TeacherModel teacher = teacher_from_checkpoint(s2.checkpoint);
    r.teacher_map = evaluate_teacher(teacher, data, split.test_ids, cfg.eval).map;
    if (!split.weak_ids.empty()) pseudo = generate_pseudo_labels(teacher, data, split.weak_ids);
  }
  const StageResult s3 = train_student_step3(cfg, data, split, pseudo ? &*pseudo : nullptr);
  r.student_map = evaluate_student(student_from_checkpoint(s3.checkpoint), data, split.test_ids, cfg.eval).map;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace wssod
