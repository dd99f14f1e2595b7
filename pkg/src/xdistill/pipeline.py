"""Pretraining, linear probing, limited-label fine-tuning and ablation grids.

Every random draw is keyed on (seed, epoch, step, slot) so a run is a pure
function of its config and dataset: two runs with the same hashes produce
bitwise-identical logs, and a run resumed from a checkpoint continues exactly
where the original would have gone.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import __version__
from . import autograd as ag
from .augment import AugmentConfig, Sample, apply_augmentations, maybe_mix3d, mix3d, voxel_downsample
from .autograd import NonFiniteError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import file_hash, read_dataset
from .losses import LossBreakdown, LossWeights, multiview_distillation_loss, occupancy_loss, temporal_loss, total_loss
from .metrics import RankReport, SegReport, rankme, segmentation_report
from .models import OccupancyDecoder, PointEncoder, ProbeHead, ProjectionHead, knn_indices, prefixed
from .occupancy import OccupancyQuerySet, QueryConfig, generate_queries, temporal_pairs
from .optim import AdamW, one_cycle_lr
from .synthworld import Frame

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epoch", "lr", "distill", "occ_bce", "occ_intensity", "temporal", "total",
              "pairs", "queries", "temporal_pairs"]


class TrainingAborted(RuntimeError):
    """Non-finite loss or activation; carries the diagnostics that were dumped."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    model_seed: int = 0
    shuffle_seed: int = 0
    data_seed: int = 0
    epochs: int = 20
    batch_size: int = 8
    max_lr: float = 1e-3
    weight_decay: float = 0.005
    warmup_fraction: float = 0.1
    div_factor: float = 25.0
    final_div: float = 1e4
    head_layers: int = 3
    head_hidden: int = 128
    w_occ: float = 0.05
    lam: float = 1.0
    w_temp: float = 0.0
    distill_norm: str = "l2sq"
    per_view: bool = True
    relative_queries: bool = True
    encoder_width: int = 64
    feature_dim: int = 32
    k: int = 8
    decoder_hidden: tuple = (128, 128)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    r_match: float = 0.1
    z_ground: float = 0.2
    eval_every: int = 5
    rankme_samples: int = 4096
    dataset: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            for key in ("scale", "flip"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            self.augment = AugmentConfig(**aug)
        if isinstance(self.query, dict):
            self.query = QueryConfig(**self.query)
        self.decoder_hidden = tuple(self.decoder_hidden)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.distill_norm not in ("l2", "l2sq"):
            raise ValueError(f"distill_norm must be l2 or l2sq, got {self.distill_norm!r}")
        if self.head_layers < 1:
            raise ValueError("head_layers must be >= 1")
        self.weights  # raises on negative weights
        self.augment.validate()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_occ, self.lam, self.w_temp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("dataset", None)
        return config_hash(d)

    def head_label(self) -> str:
        return "linear" if self.head_layers == 1 else f"mlp{self.head_layers}x{self.head_hidden}"


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS = {
    "desk": {},
    "paper": {"epochs": 100, "batch_size": 16, "head_layers": 3, "head_hidden": 2048, "max_lr": 1e-3},
}


def preset(name: str, **overrides) -> TrainConfig:
    base = dict(PRESETS[name])
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ProbeConfig:
    """Linear probe settings.

    ``solver="lbfgs"`` runs full-batch L-BFGS on the (convex) cross-entropy and
    treats ``epochs`` as its iteration cap; ``"adamw"`` runs minibatch AdamW
    for ``epochs`` passes. ``lr`` and ``batch_points`` only apply to AdamW.
    """
    solver: str = "lbfgs"
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.0
    batch_points: int = 8192
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("lbfgs", "adamw"):
            raise ValueError(f"probe solver must be lbfgs or adamw, got {self.solver!r}")
        if self.epochs < 0:
            raise ValueError("probe epochs must be >= 0")


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 4
    max_lr: float = 1e-3
    weight_decay: float = 0.005
    seed: int = 0
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(mix3d_prob=0.0))


# ------------------------------------------------------------------ model

class Student:
    """Backbone + projection head + occupancy decoder, seeded from ``cfg.model_seed``."""

    def __init__(self, cfg: TrainConfig, teacher_dim: int):
        rng = np.random.default_rng([cfg.model_seed, 101])
        self.encoder = PointEncoder(rng, 4, cfg.encoder_width, cfg.feature_dim, cfg.k)
        self.head = ProjectionHead(rng, cfg.feature_dim, teacher_dim, cfg.head_layers, cfg.head_hidden)
        self.decoder = OccupancyDecoder(rng, cfg.feature_dim, cfg.decoder_hidden)

    def params(self, with_decoder: bool = True) -> dict[str, Tensor]:
        out = {**prefixed("encoder", self.encoder), **prefixed("head", self.head)}
        if with_decoder:
            out.update(prefixed("decoder", self.decoder))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params().items():
            p.data = np.array(state[name], dtype=np.float64)
            p.grad = np.zeros_like(p.data)


def encoder_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}


def make_encoder(cfg: TrainConfig, state: dict[str, np.ndarray] | None = None) -> PointEncoder:
    enc = PointEncoder(np.random.default_rng([cfg.model_seed, 101]), 4, cfg.encoder_width, cfg.feature_dim, cfg.k)
    if state is not None:
        enc.load_state(state)
    return enc


# ------------------------------------------------------------------ data

def split_frames(frames: Sequence[Frame], split: str) -> list[Frame]:
    return [f for f in frames if f.split == split]


def frames_hash(frames: Sequence[Frame]) -> str:
    h = hashlib.sha256()
    for f in frames:
        h.update(np.int64(f.frame_id).tobytes())
        h.update(f.cloud.points.tobytes())
        if f.cloud.labels is not None:
            h.update(f.cloud.labels.tobytes())
        for t in f.teacher:
            h.update(t.tobytes())
        h.update(f.pose.tobytes())
    return h.hexdigest()[:16]


def load_frames(dataset) -> tuple[list[Frame], str]:
    """Accept a path or an in-memory frame list; return (frames, dataset hash)."""
    if isinstance(dataset, (str, Path)):
        return read_dataset(dataset), file_hash(dataset)[:16]
    frames = list(dataset)
    return frames, frames_hash(frames)


def voxelize_frames(frames: Sequence[Frame], grid_size: float) -> list[Frame]:
    if not grid_size:
        return list(frames)
    return [replace(f, cloud=voxel_downsample(f.cloud, grid_size)) for f in frames]


def temporal_partner(frame: Frame, by_id: dict[int, Frame]) -> Optional[Frame]:
    for fid in (frame.frame_id + 1, frame.frame_id - 1):
        other = by_id.get(fid)
        if other is not None and other.scene_id == frame.scene_id:
            return other
    return None


@dataclass
class Batch:
    points: np.ndarray
    labels: np.ndarray
    neighbors: np.ndarray
    view_rows: np.ndarray  # backbone rows with a teacher target (one per pairing)
    teacher: np.ndarray
    view_ids: np.ndarray
    queries: OccupancyQuerySet
    query_coords: np.ndarray
    temporal_rows: np.ndarray  # (P, 2) backbone rows
    frame_ids: list


def assemble_batch(samples: Sequence[Sample], k: int, cfg: TrainConfig | None = None,
                   rng: np.random.Generator | None = None, companions: Sequence | None = None) -> Batch:
    """Stack samples row-wise; neighbourhoods, views and queries are offset per sample.

    ``companions`` optionally holds (sample, pairs) for temporal consistency,
    where ``pairs`` index (row in the main sample, row in the companion).
    """
    with_queries = cfg is not None and cfg.w_occ > 0
    pts, labels, nbrs, rows, teach, vids, qsets, tpairs, fids = [], [], [], [], [], [], [], [], []
    off = 0
    view_counter = 0
    extra = []
    if companions:
        extra = [c[0] for c in companions]
    all_samples = list(samples) + extra
    starts = []
    for s in all_samples:
        starts.append(off)
        pts.append(s.points)
        labels.append(s.labels)
        nbrs.append(knn_indices(s.points[:, :3], k) + off)
        off += s.num_points
    for si, s in enumerate(samples):
        base = starts[si]
        for v in s.views:
            if len(v.point_index):
                rows.append(v.point_index + base)
                teach.append(v.teacher)
                vids.append(np.full(len(v.point_index), view_counter))
            view_counter += 1
        if with_queries:
            for seg in s.segments:
                qs = generate_queries(s.segment_cloud(seg), cfg.query.delta, rng, cfg.query.t_min,
                                      cfg.query.t_margin, index_offset=base + seg.start,
                                      point_fraction=cfg.query.point_fraction)
                qsets.append(qs)
        fids.extend(seg.frame_id for seg in s.segments)
    if companions:
        for ci, (_, pairs) in enumerate(companions):
            if len(pairs):
                tpairs.append(np.column_stack([pairs[:, 0] + starts[ci], pairs[:, 1] + starts[len(samples) + ci]]))
    points = np.concatenate(pts)
    qs = OccupancyQuerySet.concat(qsets)
    if qs.num_queries and cfg is not None:
        coords = qs.queries - points[qs.parent_index, :3] if cfg.relative_queries else qs.queries
    else:
        coords = np.zeros((0, 3))
    dv = teach[0].shape[1] if teach else 0
    return Batch(points, np.concatenate(labels), np.concatenate(nbrs),
                 np.concatenate(rows) if rows else np.zeros(0, np.int64),
                 np.concatenate(teach) if teach else np.zeros((0, dv)),
                 np.concatenate(vids) if vids else np.zeros(0, np.int64),
                 qs, coords, np.concatenate(tpairs) if tpairs else np.zeros((0, 2), np.int64), fids)


def compute_losses(student: Student, batch: Batch, cfg: TrainConfig) -> LossBreakdown:
    feats = student.encoder(batch.points, batch.neighbors)
    distill = None
    if len(batch.view_rows):
        uniq, pos = np.unique(batch.view_rows, return_inverse=True)
        proj = student.head(ag.gather_rows(feats, uniq))
        distill = multiview_distillation_loss(ag.gather_rows(proj, pos), batch.teacher, batch.view_ids,
                                              cfg.distill_norm, cfg.per_view)
    bce = inten = None
    if cfg.w_occ > 0 and batch.queries.num_queries:
        out = student.decoder(ag.gather_rows(feats, batch.queries.parent_index), batch.query_coords)
        bce, inten = occupancy_loss(out, batch.queries)
    temp = None
    if cfg.w_temp > 0 and len(batch.temporal_rows):
        temp = temporal_loss(ag.gather_rows(feats, batch.temporal_rows[:, 0]),
                             ag.gather_rows(feats, batch.temporal_rows[:, 1]))
    counts = {"pairs": int(len(batch.view_rows)), "queries": int(batch.queries.num_queries),
              "temporal_pairs": int(len(batch.temporal_rows))}
    return total_loss(distill, bce, inten, temp, cfg.weights, counts)


# ------------------------------------------------------------------ records

@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    dataset_hash: str
    steps: int
    steps_per_epoch: int
    epochs: list = field(default_factory=list)  # per-epoch mean LossBreakdown rows
    rank_reports: list = field(default_factory=list)
    checkpoint: Optional[str] = None
    wall_time: float = 0.0
    skipped_steps: int = 0
    initial_distill: Optional[float] = None
    final_distill: Optional[float] = None
    log_rows: list = field(default_factory=list, repr=False)
    state: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        skip = ("log_rows", "state")
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self) if f.name not in skip}


def _param_norms(params: dict[str, Tensor]) -> dict[str, float]:
    return {k: float(np.linalg.norm(v.data)) for k, v in params.items()}


def step_rng(cfg: TrainConfig, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.data_seed, epoch, step, 17])


def epoch_order(cfg: TrainConfig, n: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([cfg.shuffle_seed, epoch, 23]).permutation(n)


def backbone_features(encoder: PointEncoder, frames: Sequence[Frame]) -> list[np.ndarray]:
    return [encoder(f.cloud.points, knn_indices(f.cloud.xyz, encoder.k)).data for f in frames]


def rank_report_for(encoder: PointEncoder, frames: Sequence[Frame], samples: int, seed: int = 0) -> RankReport:
    feats = np.concatenate(backbone_features(encoder, frames))
    if samples and len(feats) > samples:
        idx = np.sort(np.random.default_rng([seed, 31]).choice(len(feats), samples, replace=False))
        feats = feats[idx]
    return rankme(feats)


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def pretrain(cfg: TrainConfig, dataset, run_dir=None, resume_from=None, stop_after: int | None = None) -> RunRecord:
    """Distil the frozen teacher into the student; optionally write a run directory.

    ``stop_after`` ends the run early after that many optimizer steps (the
    schedule still spans the full configured length), which is how resume
    behaviour is exercised.
    """
    cfg.validate()
    t0 = time.perf_counter()
    frames, dhash = load_frames(dataset)
    frames = voxelize_frames(frames, cfg.augment.grid_size)
    train = split_frames(frames, "train")
    val = split_frames(frames, "val") or train
    if not train:
        raise ValueError("dataset has no training frames")
    teacher_dim = train[0].teacher[0].shape[-1]
    student = Student(cfg, teacher_dim)
    params = student.params(with_decoder=cfg.w_occ > 0)
    opt = AdamW(params, cfg.max_lr, cfg.weight_decay)
    chash = cfg.hash()
    run_id = f"{chash}-{dhash}"

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    start_step = 0
    if resume_from is not None:
        arrays, manifest = load_checkpoint(resume_from)
        if manifest.get("config_hash") != chash:
            raise ValueError("checkpoint was produced by a different config")
        student.load_state({k: v for k, v in arrays.items() if not k.startswith("adamw.")})
        start_step = int(manifest["step"])
        opt.load_state_arrays(arrays, start_step)

    base_samples = [Sample.from_frame(f) for f in train]
    by_id = {f.frame_id: f for f in train}
    pair_cache: dict[tuple[int, int], np.ndarray] = {}

    record = RunRecord(run_id, chash, dhash, 0, steps_per_epoch)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    def save(step: int) -> str | None:
        if run_dir is None:
            return None
        arrays = {**student.state(), **opt.state_arrays()}
        path = run_dir / "checkpoints" / f"step_{step:06d}.bin"
        save_checkpoint(path, arrays, {"config_hash": chash, "dataset_hash": dhash, "step": step,
                                       "tool_version": __version__, "config": cfg.to_dict(),
                                       "teacher_dim": teacher_dim})
        return str(path)

    def evaluate(step: int, epoch: int) -> None:
        rep = rank_report_for(student.encoder, val, cfg.rankme_samples, cfg.data_seed)
        entry = {"step": step, "epoch": epoch, **rep.to_dict()}
        record.rank_reports.append(entry)
        if run_dir is not None:
            with open(run_dir / "rank_reports.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")

    if run_dir is not None and (run_dir / "rank_reports.jsonl").exists() and resume_from is None:
        (run_dir / "rank_reports.jsonl").unlink()

    step = start_step
    epoch_rows: dict[int, list] = {}
    end_step = total_steps if stop_after is None else min(total_steps, start_step + stop_after)
    while step < end_step:
        epoch, within = divmod(step, steps_per_epoch)
        order = epoch_order(cfg, len(train), epoch)
        idx = order[within * cfg.batch_size:(within + 1) * cfg.batch_size]
        rng = step_rng(cfg, epoch, within)
        samples, companions = [], []
        for j, i in enumerate(idx):
            s = base_samples[i]
            aug_state = rng.bit_generator.state
            if cfg.augment.mix3d_prob > 0 and len(idx) > 1:
                s, _ = maybe_mix3d(s, base_samples[idx[(j + 1) % len(idx)]], cfg.augment.mix3d_prob, rng)
            aug_state = rng.bit_generator.state
            s, _ = apply_augmentations(s, cfg.augment, rng)
            samples.append(s)
            if cfg.w_temp > 0:
                partner = temporal_partner(train[i], by_id)
                if partner is not None:
                    key = (train[i].frame_id, partner.frame_id)
                    if key not in pair_cache:
                        pair_cache[key] = temporal_pairs(train[i], partner, cfg.r_match, cfg.z_ground).pairs
                    # companion sees the same augmentation as the primary sample
                    replay = np.random.default_rng()
                    replay.bit_generator.state = aug_state
                    comp, _ = apply_augmentations(base_samples[train.index(partner)], cfg.augment, replay)
                    companions.append((comp, pair_cache[key]))
                else:
                    companions.append((base_samples[i], np.zeros((0, 2), np.int64)))
        batch = assemble_batch(samples, cfg.k, cfg, rng, companions if cfg.w_temp > 0 else None)
        lr = one_cycle_lr(step, total_steps, cfg.max_lr, cfg.warmup_fraction, cfg.div_factor, cfg.final_div)
        opt.zero_grad()
        try:
            br = compute_losses(student, batch, cfg)
            if br.counts["pairs"] == 0 and br.counts["queries"] == 0:
                record.skipped_steps += 1
                step += 1
                continue
            ag.backward(br.total_tensor)
            for name, p in params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"non-finite gradient for {name}")
        except NonFiniteError as exc:
            diag = {"step": step, "frame_ids": batch.frame_ids, "param_norms": _param_norms(params)}
            if run_dir is not None:
                (run_dir / "abort.json").write_text(json.dumps(diag, indent=2))
            raise TrainingAborted(f"training aborted at step {step}: {exc}", diag) from exc
        opt.step(lr)
        row = {"step": step, "epoch": epoch, "lr": lr, **br.row(), **br.counts}
        record.log_rows.append(row)
        epoch_rows.setdefault(epoch, []).append(row)
        if record.initial_distill is None:
            record.initial_distill = br.distill
        step += 1
        if within == steps_per_epoch - 1 or step == end_step:
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and within == steps_per_epoch - 1:
                evaluate(step, epoch + 1)
                save(step)
    for ep, rows in sorted(epoch_rows.items()):
        record.epochs.append({"epoch": ep, **{k: float(np.mean([r[k] for r in rows]))
                                              for k in ("distill", "occ_bce", "occ_intensity", "temporal", "total")}})
    if record.epochs:
        record.final_distill = record.epochs[-1]["distill"]
    record.steps = step
    if not record.rank_reports or record.rank_reports[-1]["step"] != step:
        evaluate(step, step // steps_per_epoch if steps_per_epoch else 0)
    record.checkpoint = save(step)
    record.state = student.state()
    record.wall_time = time.perf_counter() - t0
    record.log_rows = record.log_rows
    if run_dir is not None:
        _write_log(run_dir / "train_log.csv", record.log_rows)
        report = record.summary()
        report.update({"effective_steps": steps_per_epoch * cfg.epochs, "tool_version": __version__})
        report.pop("wall_time")
        # relative so that identical runs in different directories report identical bytes
        report["checkpoint"] = str(Path(record.checkpoint).relative_to(run_dir))
        (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return record


def resolve_backbone(source, cfg: TrainConfig | None = None):
    """(encoder, cfg) from a RunRecord, a checkpoint path or a raw state dict."""
    if isinstance(source, RunRecord):
        state = source.state
    elif isinstance(source, (str, Path)):
        arrays, manifest = load_checkpoint(source)
        state = {k: v for k, v in arrays.items() if not k.startswith("adamw.")}
        if cfg is None and "config" in manifest:
            cfg = TrainConfig.from_dict(manifest["config"])
    else:
        state = source
    cfg = cfg or TrainConfig()
    enc_state = encoder_state(state) if any(k.startswith("encoder.") for k in state) else state
    return make_encoder(cfg, enc_state), cfg


def random_backbone(cfg: TrainConfig) -> PointEncoder:
    return make_encoder(cfg)


# ------------------------------------------------------------------ evaluation

PROBE_STD_FLOOR = 1e-8


def _num_classes(frames: Sequence[Frame]) -> int:
    return int(max(f.cloud.labels.max() for f in frames)) + 1


def _probe_loss(head: ProbeHead, X: np.ndarray, y: np.ndarray, weight_decay: float) -> Tensor:
    loss = ag.cross_entropy(head(Tensor(X)), y)
    if weight_decay:
        W = head.params["fc.W"]
        loss = ag.add(loss, ag.multiply_scalar(ag.sum(ag.mul(W, W)), 0.5 * weight_decay))
    return loss


def _fit_probe_lbfgs(head: ProbeHead, X: np.ndarray, y: np.ndarray, cfg: ProbeConfig) -> None:
    names = sorted(head.params)
    shapes = [head.params[k].data.shape for k in names]
    sizes = [int(np.prod(sh)) for sh in shapes]

    def unpack(theta):
        out, off = {}, 0
        for k, sh, n in zip(names, shapes, sizes):
            out[k] = theta[off:off + n].reshape(sh)
            off += n
        return out

    def objective(theta):
        for k, v in unpack(theta).items():
            head.params[k].data = v.copy()
            head.params[k].grad = np.zeros_like(v)
        loss = _probe_loss(head, X, y, cfg.weight_decay)
        ag.backward(loss)
        return loss.item(), np.concatenate([head.params[k].grad.ravel() for k in names])

    theta0 = np.concatenate([head.params[k].data.ravel() for k in names])
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.epochs, "gtol": 1e-10, "ftol": 1e-14})
    for k, v in unpack(res.x).items():
        head.params[k].data = v.copy()


def _fit_probe_adamw(head: ProbeHead, X: np.ndarray, y: np.ndarray, cfg: ProbeConfig) -> None:
    opt = AdamW(head.params, cfg.lr, 0.0)
    rng = np.random.default_rng([cfg.seed, 43])
    n = len(X)
    steps_per_epoch = math.ceil(n / cfg.batch_points)
    total = cfg.epochs * steps_per_epoch
    t = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_points:(s + 1) * cfg.batch_points]
            opt.zero_grad()
            ag.backward(_probe_loss(head, X[idx], y[idx], cfg.weight_decay))
            opt.step(one_cycle_lr(t, total, cfg.lr))
            t += 1


def linear_probe(backbone, dataset, probe_cfg: ProbeConfig | None = None, cfg: TrainConfig | None = None,
                 num_classes: int | None = None) -> SegReport:
    """Train one affine layer on frozen backbone features; score on the validation split."""
    probe_cfg = probe_cfg or ProbeConfig()
    encoder, cfg = backbone if isinstance(backbone, tuple) else resolve_backbone(backbone, cfg)
    frames, _ = load_frames(dataset)
    if any(f.cloud.labels is None for f in frames):
        raise ValueError("linear probing needs per-point labels")
    frames = voxelize_frames(frames, cfg.augment.grid_size)
    train, val = split_frames(frames, "train"), split_frames(frames, "val") or split_frames(frames, "train")
    C = num_classes or _num_classes(frames)
    before = encoder.state()
    Xtr = np.concatenate(backbone_features(encoder, train))
    ytr = np.concatenate([f.cloud.labels for f in train])
    Xva = np.concatenate(backbone_features(encoder, val))
    yva = np.concatenate([f.cloud.labels for f in val])
    # per-dimension standardisation with train statistics; the backbone itself is untouched
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd = np.where(sd > PROBE_STD_FLOOR, sd, 1.0)
    Xtr, Xva = (Xtr - mu) / sd, (Xva - mu) / sd
    head = ProbeHead(np.random.default_rng([probe_cfg.seed, 41]), Xtr.shape[1], C)
    if probe_cfg.epochs > 0:
        fit = _fit_probe_lbfgs if probe_cfg.solver == "lbfgs" else _fit_probe_adamw
        fit(head, Xtr, ytr, probe_cfg)
    after = encoder.state()
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise AssertionError("backbone changed during linear probing")
    pred = head(Tensor(Xva)).data.argmax(axis=1)
    return segmentation_report(pred, yva, C)


def finetune_subset(n_train: int, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = int(round(fraction * n_train))
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n_train} frames selects no frame")
    return np.sort(np.random.default_rng([seed, 47]).choice(n_train, k, replace=False))


def finetune(backbone, dataset, fraction: float, ft_cfg: FinetuneConfig | None = None,
             cfg: TrainConfig | None = None, num_classes: int | None = None) -> SegReport:
    """Train backbone + segmentation head on a uniform subsample of labelled train frames."""
    ft_cfg = ft_cfg or FinetuneConfig()
    encoder, cfg = backbone if isinstance(backbone, tuple) else resolve_backbone(backbone, cfg)
    encoder = make_encoder(cfg, encoder.state())  # never mutate the caller's backbone
    frames, _ = load_frames(dataset)
    frames = voxelize_frames(frames, cfg.augment.grid_size)
    train, val = split_frames(frames, "train"), split_frames(frames, "val") or split_frames(frames, "train")
    C = num_classes or _num_classes(frames)
    chosen = [train[i] for i in finetune_subset(len(train), fraction, ft_cfg.seed)]
    head = ProbeHead(np.random.default_rng([ft_cfg.seed, 53]), cfg.feature_dim, C)
    params = {**prefixed("encoder", encoder), **prefixed("seg", head)}
    opt = AdamW(params, ft_cfg.max_lr, ft_cfg.weight_decay)
    samples = [Sample.from_frame(f) for f in chosen]
    spe = math.ceil(len(samples) / ft_cfg.batch_size)
    total = ft_cfg.epochs * spe
    step = 0
    for epoch in range(ft_cfg.epochs):
        order = np.random.default_rng([ft_cfg.seed, epoch, 59]).permutation(len(samples))
        for b in range(spe):
            rng = np.random.default_rng([ft_cfg.seed, epoch, b, 61])
            idx = order[b * ft_cfg.batch_size:(b + 1) * ft_cfg.batch_size]
            batch_samples = []
            for j, i in enumerate(idx):
                s = samples[i]
                if ft_cfg.augment.mix3d_prob > 0 and len(idx) > 1:
                    s, _ = maybe_mix3d(s, samples[idx[(j + 1) % len(idx)]], ft_cfg.augment.mix3d_prob, rng)
                s, _ = apply_augmentations(s, ft_cfg.augment, rng)
                batch_samples.append(s)
            batch = assemble_batch(batch_samples, cfg.k)
            opt.zero_grad()
            loss = ag.cross_entropy(head(encoder(batch.points, batch.neighbors)), batch.labels)
            ag.backward(loss)
            opt.step(one_cycle_lr(step, total, ft_cfg.max_lr))
            step += 1
    preds = [head(encoder(f.cloud.points, knn_indices(f.cloud.xyz, cfg.k))).data.argmax(axis=1) for f in val]
    return segmentation_report(np.concatenate(preds), np.concatenate([f.cloud.labels for f in val]), C)


# ------------------------------------------------------------------ grids

GRID_COLUMNS = ["table", "cell", "seed", "head", "mlp", "occ", "w_occ", "temporal", "mix3d",
                "rank", "rankme", "lp_miou", "ft_miou", "config_hash", "status"]


def grid_cells(table: str, base: TrainConfig) -> list[tuple[str, dict]]:
    mlp = {"head_layers": base.head_layers, "head_hidden": base.head_hidden}
    lin = {"head_layers": 1}
    occ_on = base.w_occ if base.w_occ > 0 else 0.05
    table = str(table).upper()
    if table == "5":
        return [("a", {**lin, "w_occ": 0.0}), ("b", {**lin, "w_occ": occ_on}),
                ("c", {**mlp, "w_occ": 0.0}), ("d", {**mlp, "w_occ": occ_on})]
    if table == "2":
        return [("linear", {**lin, "w_occ": 0.0}),
                ("mlp2x2048", {"head_layers": 2, "head_hidden": 2048, "w_occ": 0.0}),
                ("mlp3x256", {"head_layers": 3, "head_hidden": 256, "w_occ": 0.0}),
                ("mlp3x2048", {"head_layers": 3, "head_hidden": 2048, "w_occ": 0.0})]
    if table == "3":
        return [(f"w{w:g}", {**mlp, "w_occ": w}) for w in (0.0, 0.01, 0.05, 0.2, 1.0)]
    if table == "A2":
        mix = base.augment.mix3d_prob if base.augment.mix3d_prob > 0 else 0.8
        return [("nomix", {**mlp, "w_occ": occ_on, "augment": replace(base.augment, mix3d_prob=0.0)}),
                ("mix", {**mlp, "w_occ": occ_on, "augment": replace(base.augment, mix3d_prob=mix)})]
    if table == "A5":
        wt = base.w_temp if base.w_temp > 0 else 0.05
        return [("none", {**mlp, "w_occ": 0.0, "w_temp": 0.0}), ("temporal", {**mlp, "w_occ": 0.0, "w_temp": wt}),
                ("occ", {**mlp, "w_occ": occ_on, "w_temp": 0.0}), ("both", {**mlp, "w_occ": occ_on, "w_temp": wt})]
    raise ValueError(f"unknown table {table!r}; choose from 2, 3, 5, A2, A5")


@dataclass
class EvalPlan:
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: Optional[FinetuneConfig] = None
    fraction: float = 0.1


def evaluate_cell(cfg: TrainConfig, dataset, plan: EvalPlan, cache_dir=None) -> dict:
    """Pretrain + rank + probe (+ fine-tune) for one config; cached by (config, dataset, plan)."""
    frames, dhash = load_frames(dataset)
    key = config_hash({"cfg": cfg.hash(), "data": dhash, "plan": asdict(plan)})
    cache = Path(cache_dir) / f"{key}.json" if cache_dir else None
    if cache is not None and cache.exists():
        return json.loads(cache.read_text())
    rec = pretrain(cfg, frames, None if cache is None else cache.with_suffix(""))
    rep = rec.rank_reports[-1]
    lp = linear_probe(rec, frames, plan.probe, cfg)
    ft = finetune(rec, frames, plan.fraction, plan.finetune, cfg) if plan.finetune else None
    out = {"config_hash": rec.config_hash, "dataset_hash": dhash, "rank": rep["numerical_rank"],
           "rankme": rep["rankme"], "lp_miou": lp.miou, "ft_miou": None if ft is None else ft.miou,
           "initial_distill": rec.initial_distill, "final_distill": rec.final_distill,
           "checkpoint": None if rec.checkpoint is None else str(rec.checkpoint)}
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(out, sort_keys=True))
    return out


def ablation_grid(base_cfg: TrainConfig, dataset, table: str = "5", seeds: Iterable[int] = (0,),
                  plan: EvalPlan | None = None, cache_dir=None, out_csv=None,
                  cells: Iterable[str] | None = None) -> list[dict]:
    """Run every cell of a named ablation table for each seed.

    ``cells`` restricts the run to the named cells. A failing cell is reported
    with ``status`` set to the error instead of aborting the grid.
    """
    plan = plan or EvalPlan()
    frames, _ = load_frames(dataset)
    table_cells = grid_cells(table, base_cfg)
    if cells is not None:
        wanted = list(cells)
        unknown = set(wanted) - {n for n, _ in table_cells}
        if unknown:
            raise ValueError(f"table {table} has no cells {sorted(unknown)}")
        table_cells = [c for c in table_cells if c[0] in wanted]
    rows = []
    for seed in seeds:
        for name, overrides in table_cells:
            cfg = replace(base_cfg, model_seed=seed, shuffle_seed=seed, data_seed=seed, **overrides)
            row = {"table": str(table), "cell": name, "seed": seed, "head": cfg.head_label(),
                   "mlp": cfg.head_layers > 1, "occ": cfg.w_occ > 0, "w_occ": cfg.w_occ,
                   "temporal": cfg.w_temp > 0, "mix3d": cfg.augment.mix3d_prob > 0,
                   "config_hash": cfg.hash()}
            try:
                res = evaluate_cell(cfg, frames, plan, cache_dir)
                row.update({k: res.get(k) for k in ("rank", "rankme", "lp_miou", "ft_miou", "initial_distill",
                                                    "final_distill", "checkpoint")}, status="ok")
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.exception("grid cell %s/%s failed", table, name)
                row.update(rank=None, rankme=None, lp_miou=None, ft_miou=None, status=f"error: {exc}")
            rows.append(row)
    if out_csv is not None:
        write_grid_csv(rows, out_csv)
    return rows


def write_grid_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in GRID_COLUMNS})


def seed_means(rows: list[dict], metric: str) -> dict[str, float]:
    by: dict[str, list] = {}
    for r in rows:
        if r.get(metric) is not None:
            by.setdefault(r["cell"], []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in by.items()}
