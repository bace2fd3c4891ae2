"""Desk-scale training harness with hand-coded chain rule.

Two model families: free per-sample logit tables, and a linear map from
sample features to heatmap logits (bias folded in as a constant feature).
Losses plug in through their per-cell gradients (analytic for MSE/KL,
error-driven for the ranking losses); plain gradient descent keeps the
positive/negative gradient-mass measurements uncontaminated by adaptive
per-parameter scaling, with Adam available behind a flag.  Everything is
deterministic for a fixed seed: one RNG stream drives initialization,
the train/holdout split and per-epoch shuffling, and all reductions run
in a fixed order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .heatmap import Annotation, GridShape, Mode, PixelPartition, normalize_to_distribution, partition
from .losses import (
    LossConfig,
    instance_sort_scores,
    kl_loss,
    spatial_rank_many,
    spatial_sort_many,
)
from .metrics import InstanceRecord, KeypointCatalog, mean_ap, oks, spearman
from .synth import SynthDataset, labels_for, labels_for_1d

__all__ = [
    "ModelKind",
    "LossKind",
    "OptimizerKind",
    "TrainConfig",
    "EpochStats",
    "TrainLog",
    "TrainResult",
    "TrainingDiverged",
    "TrainingProblem",
    "train",
    "gradient_mass_probe",
    "learning_rate_at",
]


class ModelKind(enum.Enum):
    FREE_LOGITS = "free_logits"
    LINEAR = "linear"


class LossKind(enum.Enum):
    MSE = "mse"
    KL = "kl"
    SPATIAL_RANK = "spatial_rank"
    SPATIAL_RS = "spatial_rs"
    SPATIAL_RS_ISORT = "spatial_rs_isort"


class OptimizerKind(enum.Enum):
    GD = "gd"
    ADAM = "adam"


_RANKING = (LossKind.SPATIAL_RANK, LossKind.SPATIAL_RS, LossKind.SPATIAL_RS_ISORT)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    model: ModelKind = ModelKind.LINEAR
    loss: LossKind = LossKind.MSE
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    lr: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    lr_decay_epochs: tuple[int, ...] = ()
    lr_gamma: float = 0.1
    seed: int = 0
    annotation: Annotation = Annotation("gaussian", 2.0, 6)
    holdout_fraction: float = 0.2
    mode: Mode = Mode.TWO_D
    split_factor: int = 1
    kl_beta: float = 1.0
    optimizer: OptimizerKind = OptimizerKind.GD

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.loss is LossKind.KL and self.mode is Mode.TWO_D:
            raise ValueError("KL loss needs the 1D bin representation (mode='1d')")

    def to_dict(self) -> dict:
        return {
            "model": self.model.value,
            "loss": self.loss.value,
            "loss_cfg": {
                "rank_delta": self.loss_cfg.rank_delta,
                "rank_coeff": self.loss_cfg.rank_coeff,
                "sort_delta": self.loss_cfg.sort_delta,
                "sort_coeff": self.loss_cfg.sort_coeff,
                "isort_delta": self.loss_cfg.isort_delta,
                "isort_coeff": self.loss_cfg.isort_coeff,
                "positivity_threshold": self.loss_cfg.positivity_threshold,
            },
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_gamma": self.lr_gamma,
            "seed": self.seed,
            "annotation": {
                "kind": self.annotation.kind,
                "sigma": self.annotation.sigma,
                "truncation_radius": self.annotation.truncation_radius,
            },
            "holdout_fraction": self.holdout_fraction,
            "mode": self.mode.value,
            "split_factor": self.split_factor,
            "kl_beta": self.kl_beta,
            "optimizer": self.optimizer.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        ann = d.get("annotation", {"kind": "gaussian", "sigma": 2.0, "truncation_radius": 6})
        return cls(
            model=ModelKind(d.get("model", "linear")),
            loss=LossKind(d.get("loss", "mse")),
            loss_cfg=LossConfig(**d.get("loss_cfg", {})),
            lr=float(d.get("lr", 0.1)),
            epochs=int(d.get("epochs", 100)),
            batch_size=int(d.get("batch_size", 64)),
            lr_decay_epochs=tuple(int(e) for e in d.get("lr_decay_epochs", ())),
            lr_gamma=float(d.get("lr_gamma", 0.1)),
            seed=int(d.get("seed", 0)),
            annotation=Annotation(ann.get("kind", "gaussian"), float(ann.get("sigma", 0.0)),
                                  int(ann.get("truncation_radius", 0))),
            holdout_fraction=float(d.get("holdout_fraction", 0.2)),
            mode=Mode(d.get("mode", "2d")),
            split_factor=int(d.get("split_factor", 1)),
            kl_beta=float(d.get("kl_beta", 1.0)),
            optimizer=OptimizerKind(d.get("optimizer", "gd")),
        )


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """Multi-step schedule: base lr times gamma^(number of decay epochs <= epoch)."""
    decays = sum(1 for d in cfg.lr_decay_epochs if d <= epoch)
    return cfg.lr * cfg.lr_gamma**decays


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    pos_grad_mass: float
    neg_grad_mass: float
    mean_ks: float | None
    spearman_conf_ks: float | None
    spearman_instance: float | None
    map_holdout: float | None
    mean_loc_error: float | None

    CSV_COLUMNS = ("epoch", "lr", "loss", "pos_grad_mass", "neg_grad_mass", "mean_ks",
                   "spearman_conf_ks", "spearman_instance", "map_holdout", "mean_loc_error")

    def csv_row(self) -> list[str]:
        out = []
        for name in self.CSV_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else repr(v))
        return out


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.epochs]

    def to_rows(self) -> list[list[str]]:
        return [list(EpochStats.CSV_COLUMNS)] + [e.csv_row() for e in self.epochs]


@dataclass
class TrainResult:
    params: np.ndarray
    log: TrainLog
    train_indices: np.ndarray
    holdout_indices: np.ndarray
    final_metrics: dict


class TrainingProblem:
    """Prepared training state: labels, partitions, features and geometry."""

    def __init__(self, dataset: SynthDataset, cfg: TrainConfig,
                 catalog: KeypointCatalog | None = None):
        self.dataset = dataset
        self.cfg = cfg
        spec = dataset.spec
        self.grid = spec.grid
        self.num_samples = len(dataset)
        self.num_keypoints = spec.num_keypoints
        self.catalog = catalog or KeypointCatalog.uniform(spec.num_keypoints, 0.7)
        if len(self.catalog) < spec.num_keypoints:
            raise ValueError("catalog has fewer keypoint types than the dataset")
        self.visibility = np.stack([s.visibility for s in dataset.samples])
        self.areas = np.array([s.area for s in dataset.samples])
        self.gt_cells = [s.gt_cells for s in dataset.samples]
        feats = np.stack([s.features for s in dataset.samples])
        self.features = np.concatenate([feats, np.ones((self.num_samples, 1))], axis=1)

        tau = cfg.loss_cfg.positivity_threshold
        if cfg.mode is Mode.TWO_D:
            self.axis_shapes = [self.grid]
        else:
            self.axis_shapes = [
                GridShape(self.grid.height, self.grid.width, Mode.ONE_D_X, cfg.split_factor),
                GridShape(self.grid.height, self.grid.width, Mode.ONE_D_Y, cfg.split_factor),
            ]
        self.axis_cells = [s.num_cells for s in self.axis_shapes]
        self.total_cells = sum(self.axis_cells)

        # labels[axis][sample][keypoint] -> label vector; parts likewise (None if occluded)
        self.labels: list[list[list[np.ndarray]]] = [[] for _ in self.axis_shapes]
        self.parts: list[list[list[PixelPartition | None]]] = [[] for _ in self.axis_shapes]
        normalize = cfg.loss is LossKind.KL
        for sample in dataset.samples:
            if cfg.mode is Mode.TWO_D:
                per_axis = [labels_for(sample, self.grid, cfg.annotation)]
            else:
                pairs = labels_for_1d(sample, self.grid, cfg.annotation, cfg.split_factor)
                per_axis = [[p[0] for p in pairs], [p[1] for p in pairs]]
            for ax, fields_ in enumerate(per_axis):
                if normalize:
                    fields_ = [normalize_to_distribution(f) if f.labels.sum() > 0 else f
                               for f in fields_]
                self.labels[ax].append([f.labels for f in fields_])
                self.parts[ax].append([
                    partition(f, tau) if f.labels.sum() > 0 else None for f in fields_
                ])
        self._label_fields_cache = None

    # -- model ---------------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.model is ModelKind.FREE_LOGITS:
            return rng.normal(0.0, 0.5, (self.num_samples, self.num_keypoints, self.total_cells))
        return np.zeros((self.num_keypoints, self.features.shape[1], self.total_cells))

    def predict(self, params: np.ndarray, idx: np.ndarray) -> np.ndarray:
        if self.cfg.model is ModelKind.FREE_LOGITS:
            return params[idx]
        return np.einsum("bd,kdc->bkc", self.features[idx], params)

    def apply_gradient(self, params: np.ndarray, idx: np.ndarray,
                       logit_grads: np.ndarray, lr: float, state: dict | None) -> None:
        if self.cfg.model is ModelKind.FREE_LOGITS:
            step = self._optimizer_step(logit_grads, state, key=None)
            params[idx] -= lr * step
            return
        wgrad = np.einsum("bd,bkc->kdc", self.features[idx], logit_grads)
        params -= lr * self._optimizer_step(wgrad, state, key="w")

    def _optimizer_step(self, grad: np.ndarray, state: dict | None, key):
        if self.cfg.optimizer is OptimizerKind.GD or state is None:
            return grad
        # Adam; FreeLogits uses per-sample slices so moments key on sample rows.
        if key is None:
            return grad  # free-logit Adam degenerates to GD on sparse row updates
        m = state.setdefault("m", np.zeros_like(grad))
        v = state.setdefault("v", np.zeros_like(grad))
        state["t"] = state.get("t", 0) + 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** state["t"])
        vhat = v / (1 - b2 ** state["t"])
        return mhat / (np.sqrt(vhat) + eps)

    # -- loss ----------------------------------------------------------------

    def _axis_slices(self) -> list[slice]:
        out, lo = [], 0
        for c in self.axis_cells:
            out.append(slice(lo, lo + c))
            lo += c
        return out

    def batch_loss(self, logits: np.ndarray, idx: np.ndarray):
        """Mean loss over the batch's visible axis-fields plus (optionally) the
        per-keypoint-type Instance Sort term; returns (value, dL/dlogits)."""
        cfg = self.cfg
        lc = cfg.loss_cfg
        b = len(idx)
        grads = np.zeros_like(logits)
        slices = self._axis_slices()

        field_keys = [(bi, k) for bi in range(b) for k in range(self.num_keypoints)
                      if self.visibility[idx[bi], k]]
        nfields = len(field_keys) * len(self.axis_shapes)
        if nfields == 0:
            return 0.0, grads
        value = 0.0
        for ax, sl in enumerate(slices):
            stack = np.stack([logits[bi, k, sl] for bi, k in field_keys])
            if cfg.loss is LossKind.MSE:
                target = np.stack([self.labels[ax][idx[bi]][k] for bi, k in field_keys])
                diff = stack - target
                value += float((diff * diff).mean(axis=1).sum()) / nfields
                gstack = 2.0 * diff / diff.shape[1] / nfields
            elif cfg.loss is LossKind.KL:
                gstack = np.zeros_like(stack)
                if ax == 0:
                    # kl_loss consumes both axes at once; fold its value/grad here
                    from .heatmap import HeatmapField, LabelField
                    sx, sy = self.axis_shapes
                    nx = self.axis_cells[0]
                    for row, (bi, k) in enumerate(field_keys):
                        fx = HeatmapField(sx, logits[bi, k, slices[0]], k)
                        fy = HeatmapField(sy, logits[bi, k, slices[1]], k)
                        tx = LabelField(sx, self.labels[0][idx[bi]][k], cfg.annotation, k)
                        ty = LabelField(sy, self.labels[1][idx[bi]][k], cfg.annotation, k)
                        out = kl_loss(fx, fy, tx, ty, cfg.kl_beta)
                        value += out.value / len(field_keys)
                        grads[bi, k, slices[0]] += out.grad[:nx] / len(field_keys)
                        grads[bi, k, slices[1]] += out.grad[nx:] / len(field_keys)
                continue
            else:
                parts = [self.parts[ax][idx[bi]][k] for bi, k in field_keys]
                rvals, rgrads, _ = spatial_rank_many(stack, parts, lc.rank_delta)
                value += lc.rank_coeff * float(rvals.sum()) / nfields
                gstack = lc.rank_coeff * rgrads / nfields
                if cfg.loss in (LossKind.SPATIAL_RS, LossKind.SPATIAL_RS_ISORT):
                    svals, sgrads, _ = spatial_sort_many(stack, parts, lc.sort_delta)
                    value += lc.sort_coeff * float(svals.sum()) / nfields
                    gstack = gstack + lc.sort_coeff * sgrads / nfields
            for row, (bi, k) in enumerate(field_keys):
                grads[bi, k, sl] += gstack[row]

        if cfg.loss is LossKind.SPATIAL_RS_ISORT:
            value += self._add_instance_sort(logits, idx, grads)
        return value, grads

    def _instance_view(self, logits_bk: np.ndarray):
        """Argmax cell, confidence and predicted (row, col) for one field's logits."""
        slices = self._axis_slices()
        if self.cfg.mode is Mode.TWO_D:
            arg = int(np.argmax(logits_bk))
            conf = float(logits_bk[arg])
            coord = self.grid.cell_coords(arg)
            return conf, coord, (arg,)
        k = self.cfg.split_factor
        ax_bins = []
        for sl in slices:
            seg = logits_bk[sl]
            ax_bins.append(int(np.argmax(seg)) + sl.start)
        conf = float((logits_bk[ax_bins[0]] + logits_bk[ax_bins[1]]) / 2.0)
        bx = ax_bins[0] - slices[0].start
        by = ax_bins[1] - slices[1].start
        coord = (by / k, bx / k)
        return conf, coord, tuple(ax_bins)

    def _keypoint_similarity(self, coord, gt_cell, area: float, keypoint: int) -> float:
        d2 = (coord[0] - gt_cell[0]) ** 2 + (coord[1] - gt_cell[1]) ** 2
        falloff = self.catalog.falloff_for(keypoint)
        return math.exp(-d2 / (2.0 * area * area * falloff * falloff))

    def _add_instance_sort(self, logits: np.ndarray, idx: np.ndarray,
                           grads: np.ndarray) -> float:
        cfg = self.cfg
        lc = cfg.loss_cfg
        contributions = []
        per_type = []
        for k in range(self.num_keypoints):
            rows = [bi for bi in range(len(idx)) if self.visibility[idx[bi], k]]
            if len(rows) < 2:
                continue
            confs, cells = [], []
            ks = []
            for bi in rows:
                conf, coord, arg_cells = self._instance_view(logits[bi, k])
                confs.append(conf)
                cells.append(arg_cells)
                ks.append(self._keypoint_similarity(coord, self.gt_cells[idx[bi]][k],
                                                    self.areas[idx[bi]], k))
            out = instance_sort_scores(np.array(confs), np.array(ks), lc.isort_delta)
            per_type.append((k, rows, cells, out))
            contributions.append(out.value)
        if not per_type:
            return 0.0
        scale = lc.isort_coeff / len(per_type)
        for k, rows, cells, out in per_type:
            for j, bi in enumerate(rows):
                share = scale * out.grad[j] / len(cells[j])
                for cell in cells[j]:
                    grads[bi, k, cell] += share
        return lc.isort_coeff * float(np.mean(contributions))

    def grad_masses(self, grads: np.ndarray, idx: np.ndarray) -> tuple[float, float]:
        """Absolute gradient mass over positive vs negative cells."""
        slices = self._axis_slices()
        pos = 0.0
        total = 0.0
        for bi in range(len(idx)):
            for k in range(self.num_keypoints):
                if not self.visibility[idx[bi], k]:
                    continue
                for ax, sl in enumerate(slices):
                    g = np.abs(grads[bi, k, sl])
                    part = self.parts[ax][idx[bi]][k]
                    total += float(g.sum())
                    if part is not None:
                        pos += float(g[part.positives].sum())
        return pos, total - pos

    # -- evaluation ----------------------------------------------------------

    def holdout_records(self, params: np.ndarray, idx: np.ndarray) -> list[InstanceRecord]:
        logits = self.predict(params, idx)
        records = []
        for bi, s in enumerate(idx):
            for k in range(self.num_keypoints):
                if not self.visibility[s, k]:
                    continue
                conf, coord, _ = self._instance_view(logits[bi, k])
                records.append(InstanceRecord(
                    instance_id=int(s), keypoint_id=k, confidence=conf,
                    pred_coord=coord, gt_coord=tuple(map(float, self.gt_cells[s][k])),
                    area=float(self.areas[s]), falloff=self.catalog.falloff_for(k),
                ))
        return records

    def split_metrics(self, params: np.ndarray, idx: np.ndarray) -> dict:
        records = self.holdout_records(params, idx)
        if not records:
            return {"mean_ks": None, "spearman_conf_ks": None, "spearman_instance": None,
                    "map": None, "mean_loc_error": None}
        from .metrics import keypoint_similarity
        ks_all = [keypoint_similarity(r) for r in records]
        # per-type Spearman between argmax confidence and KS, averaged over types
        per_type = []
        for k in range(self.num_keypoints):
            sub = [(r.confidence, q) for r, q in zip(records, ks_all) if r.keypoint_id == k]
            if len(sub) < 2:
                continue
            arr = np.array(sub)
            try:
                per_type.append(spearman(arr[:, 0], arr[:, 1]))
            except ValueError:
                pass
        by_inst: dict[int, list[InstanceRecord]] = {}
        for r in records:
            by_inst.setdefault(r.instance_id, []).append(r)
        scored = []
        for iid in sorted(by_inst):
            recs = by_inst[iid]
            scored.append((sum(r.confidence for r in recs) / len(recs), oks(recs)))
        scored_arr = np.array(scored)
        inst_rho = None
        if len(scored) >= 2:
            try:
                inst_rho = spearman(scored_arr[:, 0], scored_arr[:, 1])
            except ValueError:
                inst_rho = None
        return {
            "mean_ks": float(np.mean(ks_all)),
            "spearman_conf_ks": float(np.mean(per_type)) if per_type else None,
            "spearman_instance": inst_rho,
            "map": float(mean_ap(scored_arr).map) if len(scored) >= 1 else None,
            "mean_loc_error": float(np.mean([r.distance for r in records])),
        }


def _split_indices(rng: np.random.Generator, n: int, holdout_fraction: float):
    perm = rng.permutation(n)
    n_hold = int(round(n * holdout_fraction))
    return perm[n_hold:], perm[:n_hold]


def train(dataset: SynthDataset, cfg: TrainConfig,
          catalog: KeypointCatalog | None = None,
          init_params: np.ndarray | None = None) -> TrainResult:
    """Run the full schedule; deterministic for a fixed (dataset, cfg).

    Raises ``TrainingDiverged`` if a loss or gradient goes non-finite,
    with the offending epoch in the message.
    """
    problem = TrainingProblem(dataset, cfg, catalog)
    rng = np.random.default_rng(cfg.seed)
    params = problem.init_params(rng) if init_params is None else np.array(init_params, dtype=np.float64)
    train_idx, hold_idx = _split_indices(rng, problem.num_samples, cfg.holdout_fraction)
    if train_idx.size == 0:
        raise ValueError("empty training split")
    opt_state: dict = {}

    log = TrainLog()
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        nbatches = 0
        pos_mass = 0.0
        neg_mass = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            logits = problem.predict(params, idx)
            value, grads = problem.batch_loss(logits, idx)
            if not (math.isfinite(value) and np.all(np.isfinite(grads))):
                raise TrainingDiverged(epoch, f"non-finite loss or gradient (loss={value})")
            pm, nm = problem.grad_masses(grads, idx)
            pos_mass += pm
            neg_mass += nm
            epoch_loss += value
            nbatches += 1
            problem.apply_gradient(params, idx, grads, lr, opt_state)
        stats = problem.split_metrics(params, hold_idx) if hold_idx.size else {
            "mean_ks": None, "spearman_conf_ks": None, "spearman_instance": None,
            "map": None, "mean_loc_error": None}
        log.epochs.append(EpochStats(
            epoch=epoch, lr=lr, loss=epoch_loss / max(nbatches, 1),
            pos_grad_mass=pos_mass, neg_grad_mass=neg_mass,
            mean_ks=stats["mean_ks"], spearman_conf_ks=stats["spearman_conf_ks"],
            spearman_instance=stats["spearman_instance"], map_holdout=stats["map"],
            mean_loc_error=stats["mean_loc_error"],
        ))
    final = problem.split_metrics(params, hold_idx if hold_idx.size else train_idx)
    return TrainResult(params, log, train_idx, hold_idx, final)


def gradient_mass_probe(dataset: SynthDataset, cfg: TrainConfig, params: np.ndarray,
                        catalog: KeypointCatalog | None = None,
                        indices: np.ndarray | None = None) -> tuple[float, float]:
    """Sum of |dLoss/dlogit| over positive cells vs negative cells."""
    problem = TrainingProblem(dataset, cfg, catalog)
    idx = np.arange(problem.num_samples) if indices is None else np.asarray(indices)
    logits = problem.predict(params, idx)
    _, grads = problem.batch_loss(logits, idx)
    return problem.grad_masses(grads, idx)
