"""Two-stage semi-supervised training engine.

Stage 1 trains the segmenter on labeled slices only, then pseudo-annotates a
seeded selection of unlabeled volumes; the pseudo-annotated volumes join the
labeled set. Stage 2 continues training on the merged set while unlabeled
slices contribute a consistency loss: the confident pixels of a weak view
(identity or flip) supervise two spectrally-augmented strong views and one
feature-perturbed view, gated by a self-adaptive confidence threshold
tracked as an EMA of batch confidence.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .fourier import FtaConfig, fta_augment_pair
from .metrics import MetricsReport, evaluate_masks, mean_report
from .model import (
    BCE_EPS,
    AdamWState,
    ModelShape,
    PatchMLP,
    Perturbation,
    TrainSchedule,
    adamw_step,
    alpha_dropout as feature_perturb,  # noqa: F401  (public SSL-level name)
    poly_lr,
)
from .preprocess import Slice2D
from .volume import MaskVolume, Volume


@dataclass(frozen=True)
class ThresholdState:
    """Self-adaptive confidence threshold, clamped to [1/C, 1]."""

    tau: float = 0.5
    momentum: float = 0.999
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.floor <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [{self.floor}, 1], got {self.tau}")

    @property
    def floor(self) -> float:
        return 1.0 / self.n_classes


def update_threshold(state: ThresholdState, confidences: np.ndarray) -> ThresholdState:
    """EMA step toward the batch mean confidence; empty batches are no-ops."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    if conf.size == 0:
        return state
    if bool((conf < 0.0).any()) or bool((conf > 1.0).any()):
        raise DataError("confidences must lie in [0, 1]")
    tau = state.momentum * state.tau + (1.0 - state.momentum) * float(conf.mean())
    tau = min(1.0, max(state.floor, tau))
    return replace(state, tau=tau)


@dataclass(frozen=True)
class PseudoSample:
    """One pseudo-annotated plane of an unlabeled volume."""

    source_id: str
    axis: str
    index: int
    mask: np.ndarray        # (H, W) uint8 argmax labels
    confidence: np.ndarray  # (H, W) max-class confidence
    provenance: str = "stage1"

    def __post_init__(self) -> None:
        if self.mask.shape != self.confidence.shape:
            raise DataError("pseudo mask and confidence shapes differ")
        if bool((self.confidence < 0).any()) or bool((self.confidence > 1).any()):
            raise DataError("confidence must lie in [0, 1]")


def generate_pseudo_labels(
    model: PatchMLP,
    volumes: list[tuple[str, Volume]],
    count: int,
    seed,
    provenance: str = "stage1",
) -> list[PseudoSample]:
    """Argmax pseudo-annotations for a seeded selection of volumes.

    Selection is uniform without replacement; each selected volume is
    annotated plane by plane along z.
    """
    if count > len(volumes):
        raise DataError(
            f"requested {count} pseudo-labeled volumes, only {len(volumes)} available"
        )
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(volumes), size=count, replace=False).tolist())
    samples: list[PseudoSample] = []
    for vi in chosen:
        source_id, vol = volumes[vi]
        probs = np.clip(_volume_probs(model, vol, source_id), 1e-15, 1.0 - 1e-15)
        for z in range(vol.dims[0]):
            samples.append(
                PseudoSample(
                    source_id=source_id,
                    axis="z",
                    index=z,
                    mask=(probs[z] >= 0.5).astype(np.uint8),
                    confidence=np.maximum(probs[z], 1.0 - probs[z]),
                    provenance=provenance,
                )
            )
    return samples


def pseudo_masks_by_volume(samples: list[PseudoSample]) -> dict[str, MaskVolume]:
    """Stack per-plane pseudo-annotations back into full masks."""
    groups: dict[str, list[PseudoSample]] = {}
    for s in samples:
        groups.setdefault(s.source_id, []).append(s)
    out: dict[str, MaskVolume] = {}
    for source_id, planes in groups.items():
        planes = sorted(planes, key=lambda s: s.index)
        out[source_id] = MaskVolume(np.stack([s.mask for s in planes]))
    return out


def consistency_loss(
    weak_probs: np.ndarray,
    views_probs: list[np.ndarray],
    tau: float,
    eps: float = BCE_EPS,
) -> tuple[float, list[np.ndarray]]:
    """Masked cross-entropy of each view against the weak view's hard labels.

    Averaged over confident pixels and views; returns the loss and the
    per-view gradient dL/dp. Zero everywhere when no pixel is confident.
    """
    weak = np.asarray(weak_probs, dtype=np.float64)
    views = [np.asarray(v, dtype=np.float64) for v in views_probs]
    for v in views:
        if v.shape != weak.shape:
            raise DataError(f"view shape {v.shape} does not match weak {weak.shape}")
    labels = (weak >= 0.5).astype(np.float64)
    confident = np.maximum(weak, 1.0 - weak) >= tau
    n_conf = int(confident.sum())
    if n_conf == 0 or not views:
        return 0.0, [np.zeros_like(weak) for _ in views]
    denom = n_conf * len(views)
    total = 0.0
    grads: list[np.ndarray] = []
    for v in views:
        p = np.clip(v, eps, 1.0 - eps)
        ce = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
        total += float(ce[confident].sum())
        g = np.zeros_like(weak)
        inside = confident & (v > eps) & (v < 1.0 - eps)
        g[inside] = (v[inside] - labels[inside]) / (v[inside] * (1.0 - v[inside])) / denom
        grads.append(g)
    return total / denom, grads


@dataclass(frozen=True)
class StageConfig:
    """Knobs of the two-stage protocol."""

    stage1_epochs: int = 20
    stage1_pseudo_count: int = 10
    perturb_rate: float = 0.1
    strong_views: int = 2
    batch_size: int = 8
    pseudo_weight: float = 1.0
    unsup_weight: float = 0.5
    threshold_momentum: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage1_epochs < 1:
            raise ConfigError("stage1_epochs must be >= 1")
        if self.stage1_pseudo_count < 0:
            raise ConfigError("stage1_pseudo_count must be >= 0")
        if not 0.0 < self.perturb_rate < 1.0:
            raise ConfigError("perturb_rate must be in (0, 1)")
        if self.strong_views < 1 or self.batch_size < 1:
            raise ConfigError("strong_views and batch_size must be >= 1")
        if self.pseudo_weight < 0 or self.unsup_weight < 0:
            raise ConfigError("pseudo_weight and unsup_weight must be >= 0")
        if not 0.0 <= self.threshold_momentum < 1.0:
            raise ConfigError("threshold_momentum must be in [0, 1)")


@dataclass(frozen=True)
class TrainSlice:
    """A supervised training plane: image, binary target, loss weight."""

    image: Slice2D
    target: np.ndarray
    weight: float = 1.0
    provenance: str = "labeled"

    def __post_init__(self) -> None:
        if self.target.shape != self.image.data.shape:
            raise DataError(
                f"target shape {self.target.shape} does not match slice "
                f"{self.image.data.shape}"
            )


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    split: str
    dice: float
    iou: float
    hd_norm: float
    score: float
    tau: float

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.split},{self.dice:.6f},{self.iou:.6f},"
            f"{self.hd_norm:.6f},{self.score:.6f},{self.tau:.6f}"
        )


HISTORY_HEADER = "epoch,split,dice,iou,hd_norm,score,tau"


@dataclass
class Stage1Result:
    model: PatchMLP
    opt_state: AdamWState
    pseudo_samples: list[PseudoSample]
    pseudo_masks: dict[str, MaskVolume]
    selected_ids: list[str]
    epoch_losses: list[float]
    warnings: list[str]


@dataclass
class Stage2Result:
    model: PatchMLP
    opt_state: AdamWState
    history: list[HistoryRow]
    threshold: ThresholdState
    iteration_losses: list[float]
    warnings: list[str]


def _volume_probs(model: PatchMLP, v: Volume, source_id: str) -> np.ndarray:
    slices = [Slice2D(v.data[z], "z", z, source_id) for z in range(v.dims[0])]
    cache = model.forward_cache_multi(slices)
    return cache["probs"].reshape(v.dims)


def predict_volume(model: PatchMLP, v: Volume, source_id: str = "vol") -> MaskVolume:
    """Segment a volume plane by plane along z."""
    probs = _volume_probs(model, v, source_id)
    return MaskVolume((probs >= 0.5).astype(np.uint8))


def evaluate_volumes(
    model: PatchMLP,
    cases: list[tuple[str, Volume, MaskVolume]],
    use_min_separation: bool = False,
) -> tuple[MetricsReport, list[tuple[str, MetricsReport]]]:
    """Mean metrics over validation volumes, case reports in case-id order."""
    per_case = [
        (cid, evaluate_masks(predict_volume(model, vol, cid), gt, use_min_separation))
        for cid, vol, gt in sorted(cases, key=lambda c: c[0])
    ]
    return mean_report([r for _, r in per_case]), per_case


def _supervised_batch(
    model: PatchMLP, batch: list[TrainSlice]
) -> tuple[float, np.ndarray]:
    # Mean of per-slice weighted BCE, computed in one stacked pass.
    cache = model.forward_cache_multi([ts.image for ts in batch])
    probs = cache["probs"]
    targets = np.concatenate([ts.target.ravel() for ts in batch]).astype(np.float64)
    pixel_w = np.concatenate(
        [np.full(ts.target.size, ts.weight / ts.target.size) for ts in batch]
    )
    p = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    ce = -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p))
    loss = float((pixel_w * ce).sum() / len(batch))
    inside = (probs > BCE_EPS) & (probs < 1.0 - BCE_EPS)
    dz3 = np.where(inside, probs - targets, 0.0) * pixel_w / len(batch)
    return loss, model.grad_from_logit_grad(cache, dz3)


def run_stage1(
    labeled: list[TrainSlice],
    unlabeled_volumes: list[tuple[str, Volume]],
    cfg: StageConfig,
    shape: ModelShape = ModelShape(),
    base_lr: float = 1e-4,
) -> Stage1Result:
    """Supervised bootstrap followed by pseudo-annotation.

    The pseudo count is clamped to the available unlabeled volumes (with a
    warning), so the merged set always holds |labeled| + min(count, pool)
    volumes worth of annotations.
    """
    if not labeled:
        raise DataError("stage 1 requires a nonempty labeled set")
    init_ss, shuffle_ss, pseudo_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    model = PatchMLP.init_random(shape, init_ss)
    opt = AdamWState.fresh(shape.n_params)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    n = len(labeled)
    per_epoch = -(-n // cfg.batch_size)
    sched = TrainSchedule(base_lr, cfg.stage1_epochs * per_epoch)
    epoch_losses: list[float] = []
    it = 0
    for _ in range(cfg.stage1_epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [labeled[i] for i in order[start:start + cfg.batch_size]]
            loss, grad = _supervised_batch(model, batch)
            model.params, opt = adamw_step(model.params, grad, opt, poly_lr(sched, it))
            epoch_loss += loss
            it += 1
        epoch_losses.append(epoch_loss / per_epoch)

    warnings: list[str] = []
    count = cfg.stage1_pseudo_count
    if count > len(unlabeled_volumes):
        warnings.append(
            f"pseudo count clamped from {count} to {len(unlabeled_volumes)}"
        )
        count = len(unlabeled_volumes)
    samples = generate_pseudo_labels(model, unlabeled_volumes, count, pseudo_ss)
    masks = pseudo_masks_by_volume(samples)
    return Stage1Result(
        model=model,
        opt_state=opt,
        pseudo_samples=samples,
        pseudo_masks=masks,
        selected_ids=sorted(masks),
        epoch_losses=epoch_losses,
        warnings=warnings,
    )


def _by_shape(shapes: list[tuple[int, int]]) -> dict[tuple[int, int], list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(shapes):
        groups.setdefault(s, []).append(i)
    return groups


def _flip(s: Slice2D, do_flip: bool) -> Slice2D:
    if not do_flip:
        return s
    return Slice2D(s.data[:, ::-1], s.axis_tag, s.index, s.source_id)


def run_stage2(
    model: PatchMLP,
    labeled: list[TrainSlice],
    unlabeled: list[Slice2D],
    val_cases: list[tuple[str, Volume, MaskVolume]],
    cfg: StageConfig,
    sched: TrainSchedule,
    fta_cfg: FtaConfig,
    val_points: int = 10,
    use_min_separation: bool = False,
) -> Stage2Result:
    """Consistency training on spectrally-augmented views.

    Each iteration pairs a labeled batch with an unlabeled batch; every pair
    is augmented in both directions at once, the labeled half feeding the
    supervised loss and the unlabeled half serving as a strong view. With an
    empty unlabeled pool the loop degrades to supervised-only training and
    records a warning. Validation metrics are logged ``val_points`` times.
    """
    if not labeled:
        raise DataError("stage 2 requires a nonempty labeled set")
    warnings: list[str] = []
    supervised_only = not unlabeled
    if supervised_only:
        warnings.append("empty unlabeled pool: degrading to supervised-only training")

    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    batch_rng = np.random.default_rng(streams[0])
    flip_rng = np.random.default_rng(streams[1])
    lam_rng = np.random.default_rng(streams[2])
    donor_rng = np.random.default_rng(streams[3])
    perturb_rng = np.random.default_rng(streams[4])

    opt = AdamWState.fresh(model.shape.n_params)
    tau_state = ThresholdState(momentum=cfg.threshold_momentum)
    n_lab, n_unl = len(labeled), len(unlabeled)
    labeled_by_shape = _by_shape([ts.image.data.shape for ts in labeled])
    unlabeled_by_shape = _by_shape([s.data.shape for s in unlabeled])

    def pick_donor(shape: tuple[int, int], exclude: int) -> Slice2D | None:
        pool = labeled_by_shape.get(shape)
        if pool:
            return labeled[pool[int(donor_rng.integers(len(pool)))]].image
        pool = [i for i in unlabeled_by_shape.get(shape, []) if i != exclude]
        if pool:
            return unlabeled[pool[int(donor_rng.integers(len(pool)))]]
        return None

    history: list[HistoryRow] = []
    iteration_losses: list[float] = []
    val_every = max(1, sched.total_iters // max(1, val_points))
    epoch = 0

    for it in range(sched.total_iters):
        lr = poly_lr(sched, it)
        l_idx = batch_rng.choice(n_lab, size=cfg.batch_size, replace=n_lab < cfg.batch_size)
        if supervised_only:
            loss, grad = _supervised_batch(model, [labeled[i] for i in l_idx])
            model.params, opt = adamw_step(model.params, grad, opt, lr)
            iteration_losses.append(loss)
        else:
            u_idx = batch_rng.choice(
                n_unl, size=cfg.batch_size, replace=n_unl < cfg.batch_size
            )
            flips = flip_rng.integers(0, 2, size=cfg.batch_size)
            weak_slices = [
                _flip(unlabeled[int(u)], bool(f)) for u, f in zip(u_idx, flips)
            ]
            weak_cache = model.forward_cache_multi(weak_slices)
            weak_probs = np.clip(weak_cache["probs"], 1e-15, 1.0 - 1e-15)
            tau_state = update_threshold(
                tau_state, np.maximum(weak_probs, 1.0 - weak_probs)
            )

            # Mutual spectral augmentation: the first strong view of each
            # unlabeled slice is produced by the same call that augments its
            # paired labeled slice, and that augmented labeled slice joins
            # the clean one in the supervised batch.
            sup_batch: list[TrainSlice] = [labeled[int(i)] for i in l_idx]
            strong_slices: list[Slice2D] = []
            strong_owner: list[int] = []
            for j in range(cfg.batch_size):
                ts = labeled[int(l_idx[j])]
                weak = weak_slices[j]
                for v in range(cfg.strong_views):
                    lam = (
                        fta_cfg.lambda_value
                        if fta_cfg.lambda_value is not None
                        else float(lam_rng.uniform(0.0, fta_cfg.lambda_max))
                    )
                    if v == 0 and ts.image.data.shape == weak.data.shape:
                        donor = ts.image
                    else:
                        donor = pick_donor(weak.data.shape, int(u_idx[j]))
                    if donor is None:
                        continue
                    pair = fta_augment_pair(
                        donor, weak, replace(fta_cfg, lambda_value=lam)
                    )
                    if v == 0 and donor is ts.image:
                        sup_batch.append(replace(ts, image=pair.z_w))
                    strong_slices.append(pair.z_u)
                    strong_owner.append(j)

            perturb = Perturbation(cfg.perturb_rate, int(perturb_rng.integers(2**32)))
            fp_cache = model.forward_cache_multi(weak_slices, perturb)
            strong_cache = (
                model.forward_cache_multi(strong_slices) if strong_slices else None
            )

            weak_off = np.cumsum([0] + weak_cache["sizes"])
            fp_grad_flat = np.zeros_like(fp_cache["probs"])
            strong_grad_flat = (
                np.zeros_like(strong_cache["probs"]) if strong_cache else None
            )
            strong_off = (
                np.cumsum([0] + strong_cache["sizes"]) if strong_cache else None
            )
            unsup_loss = 0.0
            for j in range(cfg.batch_size):
                segs = [k for k, owner in enumerate(strong_owner) if owner == j]
                views = [
                    strong_cache["probs"][strong_off[k]:strong_off[k + 1]]
                    for k in segs
                ]
                lo, hi = weak_off[j], weak_off[j + 1]
                views.append(fp_cache["probs"][lo:hi])
                loss_j, view_grads = consistency_loss(
                    weak_probs[lo:hi], views, tau_state.tau
                )
                unsup_loss += loss_j
                for k, g in zip(segs, view_grads[:-1]):
                    strong_grad_flat[strong_off[k]:strong_off[k + 1]] = g
                fp_grad_flat[lo:hi] = view_grads[-1]

            sup_loss, grad = _supervised_batch(model, sup_batch)
            w_u = cfg.unsup_weight / cfg.batch_size
            grad += w_u * model.grad_from_prob_grad(fp_cache, fp_grad_flat)
            if strong_cache is not None:
                grad += w_u * model.grad_from_prob_grad(strong_cache, strong_grad_flat)
            model.params, opt = adamw_step(model.params, grad, opt, lr)
            iteration_losses.append(
                sup_loss + cfg.unsup_weight * unsup_loss / cfg.batch_size
            )

        if val_cases and (it + 1) % val_every == 0:
            epoch += 1
            mean, _ = evaluate_volumes(model, val_cases, use_min_separation)
            history.append(
                HistoryRow(
                    epoch, "val", mean.dice, mean.iou, mean.hd_norm,
                    mean.score, tau_state.tau,
                )
            )

    return Stage2Result(
        model=model,
        opt_state=opt,
        history=history,
        threshold=tau_state,
        iteration_losses=iteration_losses,
        warnings=warnings,
    )
