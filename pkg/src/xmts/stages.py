"""Stage chain orchestration: each stage reads its input artifacts from the
run directory, writes its outputs there, and records completion in a
manifest.  Completed stages are skipped on re-run (resumable) and their
outputs are never overwritten without ``force``.

Fixed chain: gen-data -> pretrain-asr -> pretrain-nlu -> finetune-nlu ->
distill -> eval-zero-shot -> fewshot -> report.  ``ablate-layers`` is an
optional extra that reuses the distill-stage inputs.
"""

from __future__ import annotations

import json
import logging
import os
import secrets
from pathlib import Path

import numpy as np

from . import asr as asr_mod
from . import evalkit, nlu, slu, synthdata
from .autodiff import XmtsError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .nnet import LrSchedule
from .synthdata import AcousticSpec, Vocab

log = logging.getLogger("xmts.stages")

STAGE_ORDER = ["gen-data", "pretrain-asr", "pretrain-nlu", "finetune-nlu",
               "distill", "eval-zero-shot", "fewshot", "report"]


class DependencyError(XmtsError):
    """A required input artifact is missing; exit code 3 at the CLI."""


class LockError(XmtsError):
    """Another process owns this run directory."""


ARTIFACTS = {
    "train_corpus": ("data/train.xmco", "gen-data"),
    "valid_corpus": ("data/valid.xmco", "gen-data"),
    "test_corpus": ("data/test.xmco", "gen-data"),
    "asr_ckpt": ("asr/asr.ckpt", "pretrain-asr"),
    "nlu_pretrained_ckpt": ("nlu/pretrained.ckpt", "pretrain-nlu"),
    "teacher_ckpt": ("nlu/teacher.ckpt", "finetune-nlu"),
    "student_init_ckpt": ("slu/student_init.ckpt", "distill"),
    "student_ckpt": ("slu/student.ckpt", "distill"),
    "distill_metrics": ("slu/distill_metrics.jsonl", "distill"),
    "classifier_ckpt": ("eval/classifier.ckpt", "eval-zero-shot"),
}


def artifact_path(out: Path, name: str) -> Path:
    return Path(out) / ARTIFACTS[name][0]


def require_artifact(out: Path, name: str) -> Path:
    path = artifact_path(out, name)
    if not path.exists():
        rel, stage = ARTIFACTS[name]
        raise DependencyError(
            f"missing artifact {rel} in {out}; run stage '{stage}' first")
    return path


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class OutputLock:
    """Exclusive ownership of a run directory while a stage executes."""

    def __init__(self, out: Path):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"run directory is locked by {self.path}; "
                            "remove the file if no other run is active") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _manifest_path(out: Path) -> Path:
    return Path(out) / "manifest.json"


def load_manifest(out: Path, cfg: ExperimentConfig, force: bool) -> dict:
    path = _manifest_path(out)
    fp = cfg.fingerprint()
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            man = json.load(fh)
        if man.get("fingerprint") != fp:
            if not force:
                raise ConfigError(
                    "configuration changed for an existing run directory; "
                    "use --force to reset it or pick a fresh --out")
            man = {"run_id": man.get("run_id", secrets.token_hex(8)),
                   "fingerprint": fp, "stages": {}}
        return man
    return {"run_id": secrets.token_hex(8), "fingerprint": fp, "stages": {}}


def save_manifest(out: Path, man: dict) -> None:
    with open(_manifest_path(out), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def vocab_from_cfg(cfg: ExperimentConfig) -> Vocab:
    return Vocab(content_size=cfg.get("data.content_tokens"),
                 with_markers=cfg.get("data.rich_markers"))


def acoustic_spec_from_cfg(cfg: ExperimentConfig, sigma: float | None = None) -> AcousticSpec:
    return AcousticSpec(
        frame_dim=cfg.get("data.frame_dim"),
        frames_per_token=(cfg.get("data.frames_per_token_min"),
                          cfg.get("data.frames_per_token_max")),
        noise_sigma=cfg.get("data.noise_sigma") if sigma is None else sigma,
        seed=cfg.get("run.seed"),
        num_prototypes=cfg.get("data.content_tokens"),
    )


def _generate(cfg: ExperimentConfig, split: str, size: int,
              sigma: float | None = None) -> synthdata.Corpus:
    return synthdata.generate_split(
        num_classes=cfg.get("data.num_classes"),
        total=size,
        spec=acoustic_spec_from_cfg(cfg, sigma),
        seed=cfg.get("run.seed"),
        vocab=vocab_from_cfg(cfg),
        split=split,
        min_tokens=cfg.get("data.min_tokens"),
        max_tokens=cfg.get("data.max_tokens"),
        rich_markers=cfg.get("data.rich_markers"),
    )


def asr_config_from_cfg(cfg: ExperimentConfig) -> asr_mod.AsrConfig:
    return asr_mod.AsrConfig(
        dim=cfg.get("asr.dim"), heads=cfg.get("asr.heads"),
        ffn_dim=cfg.get("asr.ffn_dim"), enc_layers=cfg.get("asr.enc_layers"),
        dec_layers=cfg.get("asr.dec_layers"))


def nlu_config_from_cfg(cfg: ExperimentConfig) -> nlu.NluConfig:
    return nlu.NluConfig(
        dim=cfg.get("nlu.dim"), heads=cfg.get("nlu.heads"),
        ffn_dim=cfg.get("nlu.ffn_dim"), layers=cfg.get("nlu.layers"))


def load_asr_model(cfg: ExperimentConfig, out: Path) -> asr_mod.AsrModel:
    ckpt = load_checkpoint(require_artifact(out, "asr_ckpt"))
    return asr_mod.AsrModel.from_checkpoint(
        asr_config_from_cfg(cfg), vocab_from_cfg(cfg).size,
        cfg.get("data.frame_dim"), ckpt)


def load_teacher(cfg: ExperimentConfig, out: Path) -> nlu.NluModel:
    ckpt = load_checkpoint(require_artifact(out, "teacher_ckpt"))
    return nlu.NluModel.from_checkpoint(nlu_config_from_cfg(cfg),
                                        vocab_from_cfg(cfg).size, ckpt)


def load_student(cfg: ExperimentConfig, out: Path, which: str = "student_ckpt") -> slu.StudentModel:
    ckpt = load_checkpoint(require_artifact(out, which))
    return slu.StudentModel.from_checkpoint(
        asr_config_from_cfg(cfg), nlu_config_from_cfg(cfg),
        cfg.get("data.frame_dim"), ckpt)


def load_classifier(out: Path) -> evalkit.Classifier:
    ckpt = load_checkpoint(require_artifact(out, "classifier_ckpt"))
    return evalkit.Classifier(ckpt.tensors["clf.w"], ckpt.tensors["clf.b"])


def stage_gen_data(cfg: ExperimentConfig, out: Path) -> dict:
    vocab = vocab_from_cfg(cfg)
    data_dir = Path(out) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for split, size_key in (("train", "data.train_size"),
                            ("valid", "data.valid_size"),
                            ("test", "data.test_size")):
        corpus = _generate(cfg, split, cfg.get(size_key))
        path = data_dir / f"{split}.xmco"
        synthdata.write_corpus(corpus, path, vocab)
        outputs[split] = str(path)
    return outputs


def stage_pretrain_asr(cfg: ExperimentConfig, out: Path) -> dict:
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    valid = synthdata.read_corpus(require_artifact(out, "valid_corpus"))
    vocab = vocab_from_cfg(cfg)
    seed = cfg.get("run.seed")
    model = asr_mod.AsrModel.create(asr_config_from_cfg(cfg), vocab.size,
                                    cfg.get("data.frame_dim"), seed=seed)
    tcfg = asr_mod.AsrTrainConfig(
        epochs=cfg.get("asr.epochs"),
        batch_size=cfg.get("asr.batch_size"),
        average_best=cfg.get("asr.average_best"),
        schedule=LrSchedule(cfg.get("asr.warmup_steps"),
                            cfg.get("asr.lr_coefficient"), cfg.get("asr.dim")),
        joint=asr_mod.JointLossConfig(cfg.get("asr.ctc_weight"),
                                      cfg.get("asr.label_smoothing")),
        augment=asr_mod.SpecAugmentPolicy(
            num_time_masks=cfg.get("asr.specaug_time_masks"),
            max_time_width=cfg.get("asr.specaug_time_width"),
            num_freq_masks=cfg.get("asr.specaug_freq_masks"),
            max_freq_width=cfg.get("asr.specaug_freq_width"),
            seed=seed),
        seed=seed)
    _, final, metrics = asr_mod.train_asr(model, train, valid, tcfg,
                                          vocab.blank_id, vocab.bos_id, vocab.eos_id)
    asr_dir = Path(out) / "asr"
    asr_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = asr_dir / "asr.ckpt"
    save_checkpoint(final.to_checkpoint(), ckpt_path)
    write_jsonl(asr_dir / "metrics.jsonl", metrics)
    return {"checkpoint": str(ckpt_path), "metrics": str(asr_dir / "metrics.jsonl")}


def stage_pretrain_nlu(cfg: ExperimentConfig, out: Path) -> dict:
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    vocab = vocab_from_cfg(cfg)
    seed = cfg.get("run.seed")
    texts = [synthdata.teacher_view(u, vocab) for u in train]
    model = nlu.NluModel.create(nlu_config_from_cfg(cfg), vocab.size, seed=seed)
    mcfg = nlu.MlmConfig(
        mask_prob=cfg.get("nlu.mask_prob"),
        steps=cfg.get("nlu.mlm_steps"),
        batch_size=cfg.get("nlu.mlm_batch"),
        schedule=LrSchedule(cfg.get("nlu.mlm_warmup"),
                            cfg.get("nlu.mlm_lr_coefficient"), cfg.get("nlu.dim")),
        seed=seed)
    model, metrics = nlu.mlm_pretrain(model, texts, vocab, mcfg)
    nlu_dir = Path(out) / "nlu"
    nlu_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = nlu_dir / "pretrained.ckpt"
    save_checkpoint(model.to_checkpoint(), ckpt_path)
    write_jsonl(nlu_dir / "mlm_metrics.jsonl", metrics)
    return {"checkpoint": str(ckpt_path)}


def stage_finetune_nlu(cfg: ExperimentConfig, out: Path) -> dict:
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    vocab = vocab_from_cfg(cfg)
    seed = cfg.get("run.seed")
    ckpt = load_checkpoint(require_artifact(out, "nlu_pretrained_ckpt"))
    model = nlu.NluModel.from_checkpoint(nlu_config_from_cfg(cfg), vocab.size, ckpt)
    pcfg = nlu.PairTrainConfig(
        steps=cfg.get("nlu.pair_steps"),
        batch_size=cfg.get("nlu.pair_batch"),
        schedule=LrSchedule(cfg.get("nlu.pair_warmup"),
                            cfg.get("nlu.pair_lr_coefficient"), cfg.get("nlu.dim")),
        seed=seed)
    nli = synthdata.make_nli_pairs(train, vocab, cfg.get("nlu.classify_pairs"), seed)
    model, metrics_a = nlu.finetune_pairs_classify(model, nli, pcfg)
    sim = synthdata.make_similarity_pairs(train, vocab,
                                          cfg.get("nlu.similarity_pairs"), seed)
    model, metrics_b = nlu.finetune_pairs_similarity(model, sim, pcfg)
    nlu_dir = Path(out) / "nlu"
    nlu_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = nlu_dir / "teacher.ckpt"
    save_checkpoint(model.to_checkpoint(), ckpt_path)
    write_jsonl(nlu_dir / "pair_metrics.jsonl", metrics_a + metrics_b)
    return {"checkpoint": str(ckpt_path)}


def distill_config_from_cfg(cfg: ExperimentConfig, epochs: int | None = None) -> slu.DistillConfig:
    return slu.DistillConfig(
        objective=cfg.get("slu.objective"),
        asr_layers_to_tune=cfg.get("slu.asr_layers"),
        nlu_layers_to_tune=cfg.get("slu.nlu_layers"),
        schedule=LrSchedule(cfg.get("slu.warmup_steps"),
                            cfg.get("slu.lr_coefficient"), cfg.get("nlu.dim")),
        epochs=cfg.get("slu.epochs") if epochs is None else epochs,
        batch_size=cfg.get("slu.batch_size"),
        seed=cfg.get("run.seed"))


def stage_distill(cfg: ExperimentConfig, out: Path) -> dict:
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    valid = synthdata.read_corpus(require_artifact(out, "valid_corpus"))
    vocab = vocab_from_cfg(cfg)
    asr_model = load_asr_model(cfg, out)
    teacher = load_teacher(cfg, out)
    student = slu.assemble_student(asr_model, teacher, seed=cfg.get("run.seed"))
    slu_dir = Path(out) / "slu"
    slu_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(student.to_checkpoint(), slu_dir / "student_init.ckpt")
    student, metrics = slu.distill(student, teacher, train, valid, vocab,
                                   distill_config_from_cfg(cfg))
    save_checkpoint(student.to_checkpoint(), slu_dir / "student.ckpt")
    write_jsonl(slu_dir / "distill_metrics.jsonl", metrics)
    return {"student": str(slu_dir / "student.ckpt"),
            "metrics": str(slu_dir / "distill_metrics.jsonl")}


def stage_eval_zero_shot(cfg: ExperimentConfig, out: Path) -> dict:
    vocab = vocab_from_cfg(cfg)
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    valid = synthdata.read_corpus(require_artifact(out, "valid_corpus"))
    test = synthdata.read_corpus(require_artifact(out, "test_corpus"))
    teacher = load_teacher(cfg, out)
    student = load_student(cfg, out, "student_ckpt")
    undistilled = load_student(cfg, out, "student_init_ckpt")
    asr_model = load_asr_model(cfg, out)
    num_classes = cfg.get("data.num_classes")

    train_emb = evalkit.teacher_corpus_embeddings(teacher, train, vocab)
    valid_emb = evalkit.teacher_corpus_embeddings(teacher, valid, vocab)
    test_emb = evalkit.teacher_corpus_embeddings(teacher, test, vocab)
    clf, clf_cfg, valid_acc = evalkit.classifier_grid_search(
        train_emb, train.labels(), valid_emb, valid.labels(), num_classes,
        cfg.get("eval.clf_lrs"), cfg.get("eval.clf_steps"),
        seed=cfg.get("run.seed"))
    clf = evalkit.Classifier(clf.weight.astype(np.float32),
                             clf.bias.astype(np.float32))

    eval_dir = Path(out) / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    from .autodiff import ModelCheckpoint
    save_checkpoint(ModelCheckpoint(
        tensors={"clf.w": clf.weight, "clf.b": clf.bias}, step=clf_cfg.steps,
        valid_loss=1.0 - valid_acc), eval_dir / "classifier.ckpt")

    ids = [u.id for u in test]
    zero_shot = evalkit.evaluate(clf, evalkit.student_corpus_embeddings(student, test),
                                 test.labels(), ids=ids)
    undist = evalkit.evaluate(clf, evalkit.student_corpus_embeddings(undistilled, test),
                              test.labels(), ids=ids)
    teacher_ceiling = evalkit.evaluate(clf, test_emb, test.labels(), ids=ids)
    pipeline = evalkit.pipeline_baseline(asr_model, teacher, clf, test, vocab)
    pipeline_wer = float(np.mean([r.wer_vs_baseline for r in pipeline.records]))

    zero_shot.to_jsonl(eval_dir / "zero_shot_records.jsonl")
    pipeline.to_jsonl(eval_dir / "pipeline_records.jsonl")
    summary = [
        {"name": "zero_shot_accuracy", "value": zero_shot.accuracy},
        {"name": "undistilled_accuracy", "value": undist.accuracy},
        {"name": "pipeline_accuracy", "value": pipeline.accuracy},
        {"name": "teacher_transcript_accuracy", "value": teacher_ceiling.accuracy},
        {"name": "pipeline_mean_wer", "value": pipeline_wer},
        {"name": "classifier_lr", "value": clf_cfg.lr},
        {"name": "classifier_steps", "value": clf_cfg.steps},
        {"name": "classifier_valid_accuracy", "value": valid_acc},
    ]
    write_jsonl(eval_dir / "summary.jsonl", summary)
    return {"summary": str(eval_dir / "summary.jsonl")}


def stage_fewshot(cfg: ExperimentConfig, out: Path) -> dict:
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    test = synthdata.read_corpus(require_artifact(out, "test_corpus"))
    student = load_student(cfg, out, "student_ckpt")
    clf = load_classifier(out)
    fcfg = evalkit.FewshotConfig(
        steps=cfg.get("eval.fewshot_steps"), lr=cfg.get("eval.fewshot_lr"),
        batch_size=cfg.get("eval.fewshot_batch"),
        encoder_layers=cfg.get("eval.fewshot_encoder_layers"),
        seed=cfg.get("run.seed"))
    ids = [u.id for u in test]
    rows = []
    for n in cfg.get("eval.fewshot_n"):
        for mode in evalkit.FEWSHOT_MODES:
            student_ft, clf_ft = evalkit.fewshot_finetune(student, clf, train,
                                                          int(n), mode, fcfg)
            acc = evalkit.evaluate(
                clf_ft, evalkit.student_corpus_embeddings(student_ft, test),
                test.labels(), ids=ids).accuracy
            rows.append({"n": int(n), "mode": mode, "accuracy": acc})
    fs_dir = Path(out) / "fewshot"
    fs_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(fs_dir / "fewshot_metrics.jsonl", rows)
    return {"metrics": str(fs_dir / "fewshot_metrics.jsonl")}


def build_noisy_test(cfg: ExperimentConfig, out: Path, asr_model) -> tuple:
    """Raise sigma along the configured ladder until the baseline ASR's
    corpus-level WER on the regenerated test split reaches the target."""
    vocab = vocab_from_cfg(cfg)
    target = cfg.get("eval.noisy_wer_target")
    chosen = None
    for sigma in cfg.get("eval.noisy_sigma_ladder"):
        noisy = _generate(cfg, "test", cfg.get("data.test_size"), sigma=sigma)
        decodes = evalkit.decode_corpus(asr_model, noisy, vocab)
        wer = evalkit.corpus_wer(noisy, decodes)
        chosen = (sigma, noisy, decodes, wer)
        if wer >= target:
            break
    sigma, noisy, decodes, wer = chosen
    if wer < target:
        log.warning("sigma ladder exhausted at corpus WER %.3f < target %.3f", wer, target)
    return sigma, noisy, decodes, wer


def stage_report(cfg: ExperimentConfig, out: Path) -> dict:
    vocab = vocab_from_cfg(cfg)
    asr_model = load_asr_model(cfg, out)
    teacher = load_teacher(cfg, out)
    student = load_student(cfg, out, "student_ckpt")
    clf = load_classifier(out)
    sigma, noisy, decodes, wer = build_noisy_test(cfg, out, asr_model)
    pipeline = evalkit.pipeline_baseline(asr_model, teacher, clf, noisy, vocab,
                                         decodes=decodes)
    ids = [u.id for u in noisy]
    e2e = evalkit.evaluate(clf, evalkit.student_corpus_embeddings(student, noisy),
                           noisy.labels(), ids=ids)
    report = evalkit.wer_bucket_report(pipeline, e2e, cfg.get("eval.bucket_width"))
    rep_dir = Path(out) / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(rep_dir / "bucket_report.csv")
    report.to_jsonl(rep_dir / "bucket_report.jsonl")
    write_jsonl(rep_dir / "report_summary.jsonl", [
        {"name": "noisy_sigma", "value": sigma},
        {"name": "noisy_corpus_wer", "value": wer},
        {"name": "noisy_pipeline_accuracy", "value": pipeline.accuracy},
        {"name": "noisy_e2e_accuracy", "value": e2e.accuracy},
        {"name": "excluded_over_100_pct", "value": report.excluded_count},
    ])
    render_bucket_figure(report, rep_dir / "wer_buckets.png")
    distill_metrics = artifact_path(out, "distill_metrics")
    if distill_metrics.exists():
        render_distill_curve(read_jsonl(distill_metrics), rep_dir / "distill_curve.png")
    return {"csv": str(rep_dir / "bucket_report.csv"),
            "figure": str(rep_dir / "wer_buckets.png")}


def stage_ablate_layers(cfg: ExperimentConfig, out: Path) -> dict:
    train = synthdata.read_corpus(require_artifact(out, "train_corpus"))
    valid = synthdata.read_corpus(require_artifact(out, "valid_corpus"))
    vocab = vocab_from_cfg(cfg)
    teacher = load_teacher(cfg, out)
    student = load_student(cfg, out, "student_init_ckpt")
    rows = slu.layer_ablation(
        student, teacher, train, valid, vocab,
        cfg.get("slu.ablate_asr_layers"), cfg.get("slu.ablate_nlu_layers"),
        distill_config_from_cfg(cfg, epochs=cfg.get("slu.ablate_epochs")))
    rep_dir = Path(out) / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(rep_dir / "ablation.jsonl", rows)
    import csv as csv_mod
    with open(rep_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["asr_layers", "nlu_layers", "valid_distance", "trainable_values"])
        for row in rows:
            writer.writerow([row["asr_layers"], row["nlu_layers"],
                             f"{row['valid_distance']:.6f}", row["trainable_values"]])
    return {"csv": str(rep_dir / "ablation.csv")}


def render_bucket_figure(report, path) -> None:
    """Grouped bar chart of pipeline vs end-to-end accuracy per WER bucket."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    occupied = [b for b in report.buckets if b.count > 0]
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    xs = np.arange(len(occupied))
    width = 0.38
    ax.bar(xs - width / 2, [b.pipeline_accuracy * 100 for b in occupied],
           width, label="Pipeline", color="#440154")
    ax.bar(xs + width / 2, [b.e2e_accuracy * 100 for b in occupied],
           width, label="End-to-end", color="#fde725")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{b.lo:.0f}" for b in occupied])
    for x, b in zip(xs, occupied):
        ax.annotate(str(b.count), (x, 1.5), ha="center", fontsize=7, color="0.25")
    ax.set_xlabel("WER bucket lower edge, %")
    ax.set_ylabel("Accuracy, %")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False)
    ax.set_title(f"Accuracy by baseline WER bucket "
                 f"(excluded >100%: {report.excluded_count})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_distill_curve(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    ax.plot(epochs, [r["train_distance"] for r in rows], marker="o",
            markersize=3, label="train")
    ax.plot(epochs, [r["valid_distance"] for r in rows], marker="s",
            markersize=3, label="valid")
    ax.set_xlabel("Epoch")
    ax.set_ylabel(f"{rows[0]['objective']} distance")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "pretrain-asr": stage_pretrain_asr,
    "pretrain-nlu": stage_pretrain_nlu,
    "finetune-nlu": stage_finetune_nlu,
    "distill": stage_distill,
    "eval-zero-shot": stage_eval_zero_shot,
    "fewshot": stage_fewshot,
    "report": stage_report,
    "ablate-layers": stage_ablate_layers,
}


def run_stage(name: str, cfg: ExperimentConfig, out, force: bool = False) -> dict:
    """Run one stage under the directory lock, honoring the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        man = load_manifest(out, cfg, force)
        resolved = out / "resolved.cfg"
        resolved.write_text(cfg.to_text(), encoding="utf-8")
        entry = man["stages"].get(name)
        if entry and entry.get("status") == "completed" and not force:
            log.info("stage %s already completed; skipping (use --force to redo)", name)
            return entry.get("outputs", {})
        outputs = STAGE_FUNCS[name](cfg, out)
        man["stages"][name] = {"status": "completed", "outputs": outputs}
        save_manifest(out, man)
    return outputs


def run_chain(cfg: ExperimentConfig, out, force: bool = False,
              stages: list[str] | None = None) -> dict:
    """Run the fixed stage chain in order; returns outputs per stage."""
    results = {}
    for name in (stages or STAGE_ORDER):
        results[name] = run_stage(name, cfg, out, force=force)
    return results
