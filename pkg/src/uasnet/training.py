"""Alternating adversarial training, five-fold cross-validation and reporting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .adversarial import (
    AdvConfig,
    AdversarialHeads,
    LossBreakdown,
    LossWeights,
    combine,
    gan_terms,
    l1_loss,
    seg_loss,
)
from .checkpoint import read_checkpoint, save_checkpoint
from .data import DatasetManifest, FoldSplit, stratified_five_fold
from .errors import DataError, InvalidInputError, TrainingDivergedError
from .masks import build_mcm, intersection, select_reference, union
from .metrics import dice, iou
from .model import ArchConfig, UASNet, normalize_hu, parse_placement

log = logging.getLogger(__name__)

TARGETS = ("r", "union", "inter")
ARMS = {True: "jap", False: "no_jap"}
METRICS_HEADER = ["arm", "fold", "epoch", "sample", "target", "metric", "value"]
LOSSES_HEADER = ["arm", "fold", "epoch", "term", "value"]

# reduced-width preset used for CPU desk-scale experiments
DESK_WIDTHS = (16, 32, 64, 128, 256)
DESK_GENERATOR_WIDTHS = (16, 32, 64, 128)


@dataclass
class TrainConfig:
    """Declarative training configuration (JSON file, keys = field names)."""

    name: str = "run"
    dataset: Optional[str] = None
    epochs: int = 20
    batch_size: int = 8
    lr_seg: float = 2e-4
    lr_d: float = 2e-4
    lr_c: float = 1e-4
    betas: tuple = (0.5, 0.999)
    weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    jap_enabled: bool = True
    compare_jap: bool = False
    fa_cat_placement: object = "high"
    widths: tuple = (32, 64, 128, 256, 512)
    otsu_mode: str = "binary"
    fusion_convs: int = 2
    generator_widths: tuple = (32, 64, 128, 256)
    discriminator_width: int = 32
    classifier_width: int = 16
    classifier_input: str = "mask"
    seed: int = 0
    split_seed: Optional[int] = None
    patch_size: int = 64
    folds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        for name in ("betas", "widths", "generator_widths", "folds"):
            setattr(self, name, tuple(getattr(self, name)))
        self.fa_cat_placement = parse_placement(self.fa_cat_placement)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if min(self.lr_seg, self.lr_d, self.lr_c) < 0:
            raise InvalidInputError("learning rates must be non-negative")
        if self.patch_size % 32:
            raise InvalidInputError(f"patch_size {self.patch_size} must be divisible by 32")
        if not self.folds or any(not 0 <= f < 5 for f in self.folds):
            raise InvalidInputError(f"folds must be a non-empty subset of 0..4, got {self.folds}")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def arch(self) -> ArchConfig:
        return ArchConfig(widths=self.widths, fa_cat_levels=self.fa_cat_placement, otsu_mode=self.otsu_mode,
                          fusion_convs=self.fusion_convs)

    def adv(self) -> AdvConfig:
        return AdvConfig(generator_widths=self.generator_widths, discriminator_width=self.discriminator_width,
                         classifier_width=self.classifier_width, classifier_input=self.classifier_input)

    def arms(self) -> list[bool]:
        return [True, False] if self.compare_jap else [self.jap_enabled]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized preset: narrower encoder/decoders, same topology."""
        values = dict(widths=DESK_WIDTHS, generator_widths=DESK_GENERATOR_WIDTHS, discriminator_width=16)
        values.update(overrides)
        return cls(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        values = json.loads(path.read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------------------
# tensors


@dataclass
class TensorSet:
    """Stacked, precomputed training tensors for a list of annotation sets."""

    ids: list
    hu: np.ndarray
    image: torch.Tensor
    union: torch.Tensor
    inter: torch.Tensor
    ref: torch.Tensor
    label: torch.Tensor

    @classmethod
    def from_samples(cls, samples) -> "TensorSet":
        if not samples:
            raise DataError("empty sample list")
        hu = np.stack([s.image for s in samples]).astype(np.float32)
        u = np.stack([union(s.masks) for s in samples]).astype(np.float32)
        i = np.stack([intersection(s.masks) for s in samples]).astype(np.float32)
        r = np.stack([select_reference(s.masks)[0] for s in samples]).astype(np.float32)
        labels = [-1 if s.malignancy_index is None else s.malignancy_index for s in samples]
        as_t = lambda a: torch.from_numpy(a)[:, None]
        return cls(
            ids=[s.sample_id for s in samples],
            hu=hu,
            image=as_t(normalize_hu(hu)),
            union=as_t(u),
            inter=as_t(i),
            ref=as_t(r),
            label=torch.tensor(labels, dtype=torch.long),
        )

    def __len__(self):
        return len(self.ids)

    def batch(self, index) -> dict:
        index = torch.as_tensor(index, dtype=torch.long)
        return {k: getattr(self, k)[index] for k in ("image", "union", "inter", "ref", "label")}


# ---------------------------------------------------------------------------
# models


@dataclass
class Models:
    seg: UASNet
    heads: Optional[AdversarialHeads]
    opt_seg: torch.optim.Optimizer
    opt_d: Optional[torch.optim.Optimizer]
    opt_c: Optional[torch.optim.Optimizer]

    def train(self):
        self.seg.train()
        if self.heads is not None:
            self.heads.train()

    def eval(self):
        self.seg.eval()
        if self.heads is not None:
            self.heads.eval()


def build_models(config: TrainConfig, with_heads: Optional[bool] = None) -> Models:
    """Initialise all players from ``config.seed``.

    The adversarial heads draw from a forked RNG, so building them never
    changes the segmentation network's initialisation.
    """
    if with_heads is None:
        with_heads = any(config.arms())
    torch.manual_seed(config.seed)
    seg = UASNet(config.arch())
    heads = None
    if with_heads:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + 1_000_003)
            heads = AdversarialHeads(config.adv())
    seg_params = list(seg.parameters())
    if heads is not None:
        seg_params += list(heads.generator.parameters())
    opt_seg = torch.optim.Adam(seg_params, lr=config.lr_seg, betas=config.betas)
    opt_d = opt_c = None
    if heads is not None:
        opt_d = torch.optim.Adam(heads.discriminator.parameters(), lr=config.lr_d, betas=config.betas)
        opt_c = torch.optim.Adam(heads.classifier.parameters(), lr=config.lr_c, betas=config.betas)
    return Models(seg, heads, opt_seg, opt_d, opt_c)


def _detached(b: LossBreakdown) -> LossBreakdown:
    d = lambda t: None if t is None else t.detach()
    return LossBreakdown(
        seg_bce=b.seg_bce.detach(),
        seg_parts={k: v.detach() for k, v in b.seg_parts.items()},
        l1_gen=d(b.l1_gen),
        gan_g=d(b.gan_g),
        gan_d=d(b.gan_d),
        malig_ce=d(b.malig_ce),
        total=d(b.total),
    )


def _check(breakdown: LossBreakdown):
    try:
        breakdown.check_finite()
    except TrainingDivergedError as exc:
        log.error("training diverged; loss terms: %s", json.dumps(exc.terms))
        raise


def train_step(models: Models, batch: dict, config: TrainConfig) -> LossBreakdown:
    """One optimisation step.

    With the joint adversarial process on: update D on detached synthesis,
    then update the segmentation net, G and C together on
    seg + L1 + GAN(generator) + malignancy. Otherwise only the segmentation
    loss is descended.
    """
    weights = config.loss_weights()
    models.train()
    out = models.seg(batch["image"])
    parts = seg_loss(out, batch)
    seg_total = parts.pop("total")
    if not config.jap_enabled:
        b = LossBreakdown(seg_bce=seg_total, seg_parts=parts, total=combine(seg_total, weights=weights))
        _check(b)
        models.opt_seg.zero_grad(set_to_none=True)
        b.total.backward()
        models.opt_seg.step()
        return _detached(b)

    if models.heads is None:
        raise InvalidInputError("jap_enabled requires adversarial heads")
    heads = models.heads
    image = batch["image"]
    mcm = out.mcm_soft
    x_syn = heads.generate(image, mcm)

    d_real = heads.realness(image, mcm.detach())
    d_fake = heads.realness(x_syn.detach(), mcm.detach())
    gan_d, _ = gan_terms(d_real, d_fake)
    if not torch.isfinite(gan_d):
        terms = {"seg_bce": float(seg_total), "gan_d": float(gan_d)}
        log.error("training diverged; loss terms: %s", json.dumps(terms))
        raise TrainingDivergedError("non-finite loss terms: gan_d", terms)
    models.opt_d.zero_grad(set_to_none=True)
    (weights.gan * gan_d).backward()
    models.opt_d.step()

    # the MCM steers synthesis through G only; as D's condition it is held fixed
    _, gan_g = gan_terms(d_real.detach(), heads.realness(x_syn, mcm.detach()))
    l1 = l1_loss(x_syn, image)
    malig = heads.malignancy_loss(out.r_pred, batch["label"], image)
    total = combine(seg_total, l1, gan_g, malig, weights)
    b = LossBreakdown(seg_bce=seg_total, seg_parts=parts, l1_gen=l1, gan_g=gan_g, gan_d=gan_d, malig_ce=malig,
                      total=total)
    _check(b)
    models.opt_seg.zero_grad(set_to_none=True)
    models.opt_c.zero_grad(set_to_none=True)
    total.backward()
    models.opt_seg.step()
    models.opt_c.step()
    # D gradients from the generator pass are discarded before its next update
    models.opt_d.zero_grad(set_to_none=True)
    return _detached(b)


# ---------------------------------------------------------------------------
# evaluation


def predict_tensors(seg: UASNet, data: TensorSet, batch_size: int = 16) -> dict:
    """Probability maps (N, H, W) for every target plus the soft MCM."""
    was_training = seg.training
    seg.eval()
    outs = {"union": [], "inter": [], "r": [], "mcm": []}
    try:
        with torch.no_grad():
            for start in range(0, len(data), batch_size):
                o = seg(data.image[start:start + batch_size])
                outs["union"].append(o.union_pred[:, 0])
                outs["inter"].append(o.inter_pred[:, 0])
                outs["r"].append(o.r_pred[:, 0])
                outs["mcm"].append(o.mcm_soft[:, 0])
    finally:
        seg.train(was_training)
    return {k: torch.cat(v).numpy() for k, v in outs.items()}


def evaluate(seg: UASNet, data: TensorSet, batch_size: int = 16) -> dict:
    """Per-sample Dice/IoU for each target, predictions binarised at 0.5."""
    pred = predict_tensors(seg, data, batch_size)
    truth = {"r": data.ref, "union": data.union, "inter": data.inter}
    result = {t: {"dice": [], "iou": []} for t in TARGETS}
    for t in TARGETS:
        gt = truth[t][:, 0].numpy()
        for k in range(len(data)):
            p = pred[t][k] >= 0.5
            result[t]["dice"].append(dice(p, gt[k]))
            result[t]["iou"].append(iou(p, gt[k]))
    return result


def _mean(values) -> float:
    return float(math.fsum(values) / len(values))


# ---------------------------------------------------------------------------
# fold / cross-validation runs


@dataclass
class FoldResult:
    arm: str
    fold: int
    epochs: list  # one dict per epoch: losses and mean val metrics
    best_epoch: int
    best_dice: float
    per_sample: dict  # target -> metric -> list aligned with val_ids
    val_ids: list

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(**d)

    def final(self, target: str, metric: str) -> float:
        return _mean(self.per_sample[target][metric])


def _rng_from_state(state) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def _train_state(models: Models, epoch: int, rng, history, best) -> dict:
    return {
        "epoch": epoch,
        "rng": rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "opt_seg": models.opt_seg.state_dict(),
        "opt_d": models.opt_d.state_dict() if models.opt_d is not None else None,
        "opt_c": models.opt_c.state_dict() if models.opt_c is not None else None,
        "history": history,
        "best": best,
    }


def run_fold(train_samples, val_samples, config: TrainConfig, run_dir=None, fold: int = 0,
             resume: bool = True) -> FoldResult:
    """Train on ``train_samples`` and track validation Dice/IoU every epoch.

    When ``run_dir`` is given, ``last.pt`` is written after every epoch and
    ``best.pt`` whenever validation Dice on R improves; an interrupted run
    resumes from ``last.pt`` and finishes with identical metrics.
    """
    if not train_samples or not val_samples:
        raise DataError("train and validation splits must both be non-empty")
    arm = ARMS[config.jap_enabled]
    ckpt_dir = Path(run_dir) / "checkpoints" / arm / f"fold{fold}" if run_dir is not None else None
    if ckpt_dir is not None and resume and (ckpt_dir / "result.json").exists():
        return FoldResult.from_dict(json.loads((ckpt_dir / "result.json").read_text()))

    train = TensorSet.from_samples(train_samples)
    val = TensorSet.from_samples(val_samples)
    models = build_models(config, with_heads=config.jap_enabled)
    rng = np.random.default_rng(config.seed)
    history: list = []
    best = {"epoch": -1, "dice": -1.0}
    best_state = None
    start_epoch = 0

    if ckpt_dir is not None and resume and (ckpt_dir / "last.pt").exists():
        payload = read_checkpoint(ckpt_dir / "last.pt")
        models.seg.load_state_dict(payload["seg_state"])
        if models.heads is not None:
            models.heads.load_state_dict(payload["adv_state"])
        ts = payload["train_state"]
        models.opt_seg.load_state_dict(ts["opt_seg"])
        if models.opt_d is not None:
            models.opt_d.load_state_dict(ts["opt_d"])
            models.opt_c.load_state_dict(ts["opt_c"])
        rng = _rng_from_state(ts["rng"])
        torch.set_rng_state(ts["torch_rng"])
        history, best = ts["history"], ts["best"]
        start_epoch = ts["epoch"] + 1
        if (ckpt_dir / "best.pt").exists():
            best_state = read_checkpoint(ckpt_dir / "best.pt")["seg_state"]
        log.info("resuming %s fold %d at epoch %d", arm, fold, start_epoch)

    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(train))
        sums: dict = {}
        steps = 0
        for start in range(0, len(order), config.batch_size):
            b = train_step(models, train.batch(order[start:start + config.batch_size]), config)
            for k, v in b.as_floats().items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
            steps += 1
        scores = evaluate(models.seg, val)
        record = {"epoch": epoch, "losses": {k: v / steps for k, v in sums.items()},
                  "val": {t: {m: _mean(scores[t][m]) for m in ("dice", "iou")} for t in TARGETS}}
        history.append(record)
        log.info("%s fold %d epoch %d: loss %.4f val dice r %.4f", arm, fold, epoch,
                 record["losses"]["total"], record["val"]["r"]["dice"])
        if record["val"]["r"]["dice"] > best["dice"]:
            best = {"epoch": epoch, "dice": record["val"]["r"]["dice"]}
            best_state = {k: v.clone() for k, v in models.seg.state_dict().items()}
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "best.pt", models.seg, models.heads)
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "last.pt", models.seg, models.heads,
                            _train_state(models, epoch, rng, history, best))

    models.seg.load_state_dict(best_state)
    final = evaluate(models.seg, val)
    result = FoldResult(arm, fold, history, best["epoch"], best["dice"], final, val.ids)
    if ckpt_dir is not None:
        (ckpt_dir / "result.json").write_text(json.dumps(result.to_dict()) + "\n")
    return result


@dataclass
class CVReport:
    """Per-fold and averaged validation scores, one table per arm."""

    folds: dict  # arm -> {fold: FoldResult}
    split: Optional[FoldSplit] = None

    def table(self, arm: str, target: str = "r", metric: str = "dice") -> dict:
        per_fold = {f: r.final(target, metric) for f, r in sorted(self.folds[arm].items())}
        return {"folds": per_fold, "average": _mean(list(per_fold.values()))}

    def rows(self) -> list[dict]:
        rows = []
        for arm in self.folds:
            for target in TARGETS:
                for metric in ("dice", "iou"):
                    t = self.table(arm, target, metric)
                    rows.append({"arm": arm, "target": target, "metric": metric,
                                 **{f"fold{f + 1}": v for f, v in t["folds"].items()}, "average": t["average"]})
        return rows

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        rows = self.rows()
        fold_cols = sorted({k for r in rows for k in r if k.startswith("fold")})
        header = ["arm", "target", "metric"] + fold_cols + ["average"]
        csv_path = out_dir / "report.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header)
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        md = ["| Arm | Target | Metric | " + " | ".join(c.capitalize() for c in fold_cols) + " | Average |",
              "|" + "---|" * (len(fold_cols) + 4)]
        for r in rows:
            md.append(f"| {r['arm']} | {r['target']} | {r['metric']} | "
                      + " | ".join(f"{r[c]:.4f}" for c in fold_cols) + f" | {r['average']:.4f} |")
        md_path = out_dir / "report.md"
        md_path.write_text("\n".join(md) + "\n")
        return [csv_path, md_path]


def write_metrics_csv(report: CVReport, path) -> Path:
    """Long-format metrics: per-epoch aggregates (sample ``ALL``) and per-sample best-checkpoint scores."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for arm, folds in report.folds.items():
            for fold, res in sorted(folds.items()):
                for rec in res.epochs:
                    for t in TARGETS:
                        for m in ("dice", "iou"):
                            w.writerow([arm, fold, rec["epoch"], "ALL", t, m, repr(rec["val"][t][m])])
                for t in TARGETS:
                    for m in ("dice", "iou"):
                        for sid, v in zip(res.val_ids, res.per_sample[t][m]):
                            w.writerow([arm, fold, "best", sid, t, m, repr(v)])
    return path


def write_losses_csv(report: CVReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSSES_HEADER)
        for arm, folds in report.folds.items():
            for fold, res in sorted(folds.items()):
                for rec in res.epochs:
                    for term, v in sorted(rec["losses"].items()):
                        w.writerow([arm, fold, rec["epoch"], term, repr(v)])
    return path


def audit_partition(all_ids, train_ids, val_ids):
    """Raise unless train/val are disjoint and together cover every sample."""
    tr, va = set(train_ids), set(val_ids)
    leaked = tr & va
    if leaked:
        raise DataError(f"validation samples leaked into training: {sorted(leaked)[:5]}")
    if tr | va != set(all_ids):
        raise DataError("fold split does not cover the dataset")


def run_cv(manifest: DatasetManifest, config: TrainConfig, run_dir=None, samples=None) -> CVReport:
    """Cross-validate every requested fold and arm; write CSVs when ``run_dir`` is set."""
    if not manifest.samples:
        raise DataError("manifest contains no samples")
    if samples is None:
        samples = {s.sample_id: s for s in manifest.load_all()}
    split = stratified_five_fold(manifest, config.split_seed if config.split_seed is not None else config.seed)
    folds: dict = {}
    for jap in config.arms():
        arm_config = TrainConfig.from_dict({**config.to_dict(), "jap_enabled": jap})
        arm = ARMS[jap]
        folds[arm] = {}
        for fold in config.folds:
            train_ids, val_ids = split.split(fold)
            audit_partition(manifest.ids, train_ids, val_ids)
            folds[arm][fold] = run_fold([samples[i] for i in train_ids], [samples[i] for i in val_ids],
                                        arm_config, run_dir, fold)
            if run_dir is not None:
                partial = CVReport(folds, split)
                write_metrics_csv(partial, Path(run_dir) / "metrics.csv")
                write_losses_csv(partial, Path(run_dir) / "losses.csv")
    report = CVReport(folds, split)
    if run_dir is not None:
        report.write(run_dir)
    return report


def fold_checkpoint(run_dir, arm: str, fold: int, which: str = "best") -> Path:
    return Path(run_dir) / "checkpoints" / arm / f"fold{fold}" / f"{which}.pt"


def out_of_fold_predictions(run_dir, report: CVReport, samples: dict, arm: Optional[str] = None) -> dict:
    """Predict every validation sample with its own fold's best checkpoint.

    Returns ``sample_id -> MultiConfidenceMask``.
    """
    from .checkpoint import load_models

    arm = arm or next(iter(report.folds))
    preds = {}
    for fold, res in sorted(report.folds[arm].items()):
        seg, _, _ = load_models(fold_checkpoint(run_dir, arm, fold))
        data = TensorSet.from_samples([samples[i] for i in res.val_ids])
        maps = predict_tensors(seg, data)
        for k, sid in enumerate(res.val_ids):
            preds[sid] = build_mcm(maps["union"][k], maps["inter"][k])
    return preds
