"""File-level pipeline: config, stage orchestration, and result rendering.

Every stage reads and writes the on-disk formats (VOL1 volumes, slice
manifests, SEG1 checkpoints, CSV metrics), so composing the CLI subcommands
through files reproduces ``run_pipeline`` byte for byte at equal seeds. A run
directory holds the resolved config snapshot, the run log, all stage
manifests, and the metrics/scores CSVs.
"""

from __future__ import annotations

import dataclasses
import shutil
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FtasegError
from .fourier import MODES, FtaConfig
from .metrics import CSV_HEADER, evaluate_masks, mean_report
from .model import (
    ModelShape,
    TrainSchedule,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import PhantomSpec, ShiftSpec, apply_domain_shift, gen_phantom
from .preprocess import (
    Slice2D,
    SliceManifest,
    WindowSpec,
    build_manifest,
    read_manifest,
    slice_filename,
    slice_volume,
    split_train_val,
    window_normalize,
    write_manifest,
)
from .ssl import (
    HISTORY_HEADER,
    StageConfig,
    TrainSlice,
    run_stage1,
    run_stage2,
)
from .volume import (
    NORMALIZED,
    MaskVolume,
    Volume,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)

MASK_SUFFIX = "_mask"


# ---------------------------------------------------------------------------
# Flat key = value configs


def _parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


_OPTIONAL_FLOATS = {"fta_lambda"}


def _coerce(name: str, raw: str, default) -> object:
    if name in _OPTIONAL_FLOATS:
        return None if raw == "" else float(raw)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _build_config(cls, kv: dict[str, str]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in kv.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        default = fields[key].default
        values[key] = _coerce(key, raw, default)
    return cls(**values)


def _format_kv(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if val is None:
            val = ""
        elif isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BenchmarkSpec:
    """Synthetic benchmark: source-domain labeled data, shifted-domain
    unlabeled and validation data."""

    dim: int = 32
    labeled: int = 12
    unlabeled: int = 40
    val: int = 10
    ellipsoids: int = 3
    radius_min: float = 3.0
    radius_max: float = 6.0
    fg_mean: float = 1400.0
    fg_spread: float = 0.0
    fg_std: float = 40.0
    bg_mean: float = 300.0
    bg_std: float = 40.0
    shift_gain: float = 0.82
    shift_bias: float = 150.0
    shift_gamma: float = 1.0
    shift_field: float = 140.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.labeled, self.unlabeled, self.val) < 0:
            raise ConfigError("volume counts must be >= 0")
        if self.fg_spread < 0:
            raise ConfigError("fg_spread must be >= 0")

    def phantom_spec(self, seed: int) -> PhantomSpec:
        # Per-volume foreground level drawn around fg_mean: each scan gets
        # its own contrast, so 12 labeled volumes undersample the range.
        r = (self.radius_min, self.radius_max)
        fg = self.fg_mean
        if self.fg_spread > 0:
            rng = np.random.default_rng(seed)
            fg = float(rng.uniform(fg - self.fg_spread, fg + self.fg_spread))
        return PhantomSpec(
            dims=(self.dim, self.dim, self.dim),
            ellipsoids=self.ellipsoids,
            radius_x=r, radius_y=r, radius_z=r,
            fg_mean=fg, fg_std=self.fg_std,
            bg_mean=self.bg_mean, bg_std=self.bg_std,
            seed=seed,
        )

    def shift_spec(self, seed: int) -> ShiftSpec:
        return ShiftSpec(
            gain=self.shift_gain, bias=self.shift_bias,
            gamma=self.shift_gamma, field_amplitude=self.shift_field,
            seed=seed,
        )


def parse_benchmark_spec(path: Path | str) -> BenchmarkSpec:
    return _build_config(BenchmarkSpec, _parse_kv(Path(path).read_text()))


@dataclass(frozen=True)
class PipelineConfig:
    """Full pipeline configuration; every field has a runnable default.

    Empty ``labeled_dir`` synthesizes the bundled benchmark into the run
    directory first.
    """

    labeled_dir: str = ""
    unlabeled_dir: str = ""
    val_dir: str = ""
    seed: int = 0
    window_bottom: float = 500.0
    window_top: float = 2000.0
    val_fraction: float = 0.1
    split_by_volume: bool = False
    fta_lambda: float | None = None
    fta_lambda_max: float = 1.0
    fta_beta: float = 0.25
    fta_mode: str = "paper-literal"
    stage1_epochs: int = 20
    stage1_pseudo_count: int = 10
    stage2_iters: int = 1500
    batch_size: int = 8
    lr: float = 1e-4
    patch: int = 5
    hidden1: int = 32
    hidden2: int = 16
    perturb_rate: float = 0.1
    threshold_momentum: float = 0.999
    pseudo_weight: float = 1.0
    unsup_weight: float = 0.5
    supervised_only: bool = False
    use_min_separation: bool = False
    val_points: int = 10
    synth_dim: int = 32
    synth_labeled: int = 12
    synth_unlabeled: int = 40
    synth_val: int = 10
    synth_ellipsoids: int = 3
    synth_radius_min: float = 3.0
    synth_radius_max: float = 6.0
    synth_fg_mean: float = 1400.0
    synth_fg_spread: float = 0.0
    synth_fg_std: float = 40.0
    synth_bg_mean: float = 300.0
    synth_bg_std: float = 40.0
    shift_gain: float = 0.82
    shift_bias: float = 150.0
    shift_gamma: float = 1.0
    shift_field: float = 140.0

    def __post_init__(self) -> None:
        if self.fta_mode not in MODES:
            raise ConfigError(f"fta_mode must be one of {MODES}")
        if self.stage2_iters < 1 or self.val_points < 1:
            raise ConfigError("stage2_iters and val_points must be >= 1")
        # Construct the derived configs so bad values fail at parse time.
        self.window()
        self.fta_config()
        self.stage_config()
        self.model_shape()

    def window(self) -> WindowSpec:
        return WindowSpec(self.window_bottom, self.window_top)

    def fta_config(self) -> FtaConfig:
        return FtaConfig(
            lambda_value=self.fta_lambda,
            lambda_max=self.fta_lambda_max,
            mask_fraction=self.fta_beta,
            mode=self.fta_mode,
            seed=self.seed,
        )

    def stage_config(self) -> StageConfig:
        return StageConfig(
            stage1_epochs=self.stage1_epochs,
            stage1_pseudo_count=self.stage1_pseudo_count,
            perturb_rate=self.perturb_rate,
            batch_size=self.batch_size,
            pseudo_weight=self.pseudo_weight,
            unsup_weight=self.unsup_weight,
            threshold_momentum=self.threshold_momentum,
            seed=self.seed,
        )

    def model_shape(self) -> ModelShape:
        return ModelShape(self.patch, self.hidden1, self.hidden2)

    def benchmark_spec(self) -> BenchmarkSpec:
        return BenchmarkSpec(
            dim=self.synth_dim,
            labeled=self.synth_labeled,
            unlabeled=self.synth_unlabeled,
            val=self.synth_val,
            ellipsoids=self.synth_ellipsoids,
            radius_min=self.synth_radius_min,
            radius_max=self.synth_radius_max,
            fg_mean=self.synth_fg_mean,
            fg_spread=self.synth_fg_spread,
            fg_std=self.synth_fg_std,
            bg_mean=self.synth_bg_mean,
            bg_std=self.synth_bg_std,
            shift_gain=self.shift_gain,
            shift_bias=self.shift_bias,
            shift_gamma=self.shift_gamma,
            shift_field=self.shift_field,
            seed=self.seed,
        )


def parse_pipeline_config(path: Path | str) -> PipelineConfig:
    return _build_config(PipelineConfig, _parse_kv(Path(path).read_text()))


def write_kv_config(cfg, path: Path | str) -> None:
    Path(path).write_text(_format_kv(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# Run logging


class RunLog:
    """Line-oriented UTF-8 log with ISO-8601 timestamps."""

    def __init__(self, path: Path | None, echo: bool = False):
        self.path = path
        self.echo = echo
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def __call__(self, msg: str) -> None:
        line = f"{datetime.now().isoformat(timespec='seconds')} {msg}"
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
        if self.echo:
            print(line)


# ---------------------------------------------------------------------------
# Synthetic benchmark generation


def generate_benchmark(spec: BenchmarkSpec, out_dir: Path | str) -> None:
    """Write labeled/, unlabeled/ and val/ volume sets plus a manifest."""
    out = Path(out_dir)
    children = np.random.SeedSequence(spec.seed).spawn(
        spec.labeled + 2 * (spec.unlabeled + spec.val)
    )
    seeds = [int(c.generate_state(1)[0]) for c in children]
    rows = ["id,split,file,mask_file"]

    def emit(split: str, idx: int, shifted: bool, with_mask: bool, si: int) -> int:
        vid = f"{split[:3]}_{idx:03d}"
        vol, mask = gen_phantom(spec.phantom_spec(seeds[si]))
        si += 1
        if shifted:
            vol = apply_domain_shift(vol, spec.shift_spec(seeds[si]))
            si += 1
        sub = out / split
        sub.mkdir(parents=True, exist_ok=True)
        save_volume(vol, sub / f"{vid}.vol")
        mask_name = ""
        if with_mask:
            mask_name = f"{vid}{MASK_SUFFIX}.vol"
            save_mask(mask, sub / mask_name)
        rows.append(f"{vid},{split},{vid}.vol,{mask_name}")
        return si

    si = 0
    for i in range(spec.labeled):
        si = emit("labeled", i, shifted=False, with_mask=True, si=si)
    for i in range(spec.unlabeled):
        si = emit("unlabeled", i, shifted=True, with_mask=False, si=si)
    for i in range(spec.val):
        si = emit("val", i, shifted=True, with_mask=True, si=si)
    (out / "benchmark.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Windowing and slicing over directories


def _volume_files(directory: Path) -> list[Path]:
    files = sorted(
        p for p in directory.glob("*.vol") if not p.stem.endswith(MASK_SUFFIX)
    )
    if not files:
        raise DataError(f"no volumes found in {directory}")
    return files


def _mask_path(vol_path: Path) -> Path:
    return vol_path.with_name(f"{vol_path.stem}{MASK_SUFFIX}.vol")


def window_dir(in_dir: Path | str, out_dir: Path | str, w: WindowSpec) -> int:
    """Window-normalize every volume; companion masks are copied verbatim."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in _volume_files(in_dir):
        save_volume(window_normalize(load_volume(path), w), out_dir / path.name)
        mask = _mask_path(path)
        if mask.exists():
            shutil.copyfile(mask, out_dir / mask.name)
        count += 1
    return count


def _save_slice(s: Slice2D, directory: Path) -> None:
    vol = Volume(s.data.reshape(1, *s.data.shape), NORMALIZED)
    save_volume(vol, directory / slice_filename(s.source_id, s.index, s.axis_tag))


def _save_mask_slices(mask: MaskVolume, source_id: str, directory: Path) -> None:
    # Mask planes follow the image-slice naming with a _mask-tagged source id.
    d, h, w = mask.dims
    planes = (
        [("x", i, mask.data[:, :, i]) for i in range(w)]
        + [("y", i, mask.data[:, i, :]) for i in range(h)]
        + [("z", i, mask.data[i, :, :]) for i in range(d)]
    )
    for axis, i, plane in planes:
        name = slice_filename(f"{source_id}{MASK_SUFFIX}", i, axis)
        save_mask(MaskVolume(plane.reshape(1, *plane.shape)), directory / name)


def slice_dir(
    in_dir: Path | str,
    out_dir: Path | str,
    val_fraction: float | None = None,
    seed: int = 0,
    by_volume: bool = False,
) -> SliceManifest:
    """Slice every windowed volume (and companion mask) along all three axes.

    ``val_fraction`` marks a seeded validation split in the manifest; None
    leaves every slice in the train split.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    for path in _volume_files(in_dir):
        vol = load_volume(path, NORMALIZED)
        slices = slice_volume(vol, path.stem)
        for s in slices:
            _save_slice(s, out_dir)
        manifests.append(build_manifest(slices))
        mask = _mask_path(path)
        if mask.exists():
            _save_mask_slices(load_mask(mask), path.stem, out_dir)
    manifest = SliceManifest(
        tuple(e for m in manifests for e in m.entries)
    )
    if val_fraction is not None:
        manifest = split_train_val(manifest, val_fraction, seed, by_volume)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# Slice set loading


def load_train_slices(
    slices_dir: Path | str,
    manifest: SliceManifest,
    split: str = "train",
    pseudo_ids: frozenset[str] = frozenset(),
    pseudo_weight: float = 1.0,
) -> list[TrainSlice]:
    slices_dir = Path(slices_dir)
    out: list[TrainSlice] = []
    for e in manifest.entries:
        if e.split != split:
            continue
        img = load_volume(slices_dir / e.file, NORMALIZED)
        mask_file = slice_filename(f"{e.source_id}{MASK_SUFFIX}", e.index, e.axis)
        target = load_mask(slices_dir / mask_file).data[0]
        pseudo = e.source_id in pseudo_ids
        out.append(
            TrainSlice(
                image=Slice2D(img.data[0], e.axis, e.index, e.source_id),
                target=target,
                weight=pseudo_weight if pseudo else 1.0,
                provenance="pseudo" if pseudo else "labeled",
            )
        )
    return out


def load_unlabeled_slices(
    slices_dir: Path | str,
    manifest: SliceManifest,
    exclude_ids: frozenset[str] = frozenset(),
) -> list[Slice2D]:
    slices_dir = Path(slices_dir)
    out = []
    for e in manifest.entries:
        if e.source_id in exclude_ids:
            continue
        img = load_volume(slices_dir / e.file, NORMALIZED)
        out.append(Slice2D(img.data[0], e.axis, e.index, e.source_id))
    return out


def load_val_cases(
    windowed_dir: Path | str,
) -> list[tuple[str, Volume, MaskVolume]]:
    """Validation volumes with ground-truth masks from a windowed directory."""
    windowed_dir = Path(windowed_dir)
    cases = []
    for path in _volume_files(windowed_dir):
        mask = _mask_path(path)
        if not mask.exists():
            raise DataError(f"validation volume {path.name} has no mask")
        cases.append((path.stem, load_volume(path, NORMALIZED), load_mask(mask)))
    return cases


# ---------------------------------------------------------------------------
# Training stages over files


def train_stage1_files(
    slices_dir: Path | str,
    unlabeled_windowed_dir: Path | str | None,
    out_dir: Path | str,
    pseudo_slices_dir: Path | str,
    cfg: StageConfig,
    shape: ModelShape,
    base_lr: float,
) -> tuple[Path, frozenset[str]]:
    """Train on labeled slices, pseudo-annotate unlabeled volumes, and slice
    the pseudo-annotated volumes into a second training source.

    Returns the checkpoint path and the pseudo-annotated volume ids.
    """
    slices_dir, out_dir = Path(slices_dir), Path(out_dir)
    pseudo_slices_dir = Path(pseudo_slices_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(slices_dir / "manifest.csv")
    labeled = load_train_slices(slices_dir, manifest, "train")

    unlabeled_volumes: list[tuple[str, Volume]] = []
    if unlabeled_windowed_dir is not None:
        for path in _volume_files(Path(unlabeled_windowed_dir)):
            unlabeled_volumes.append((path.stem, load_volume(path, NORMALIZED)))

    result = run_stage1(labeled, unlabeled_volumes, cfg, shape, base_lr)
    ckpt = out_dir / "checkpoint.seg"
    save_checkpoint(result.model, result.opt_state, ckpt)

    pseudo_dir = out_dir / "pseudo"
    pseudo_dir.mkdir(exist_ok=True)
    pseudo_slices_dir.mkdir(parents=True, exist_ok=True)
    by_id = dict(unlabeled_volumes)
    pseudo_manifests = []
    for vid in result.selected_ids:
        mask = result.pseudo_masks[vid]
        save_mask(mask, pseudo_dir / f"{vid}{MASK_SUFFIX}.vol")
        slices = slice_volume(by_id[vid], vid)
        for s in slices:
            _save_slice(s, pseudo_slices_dir)
        _save_mask_slices(mask, vid, pseudo_slices_dir)
        pseudo_manifests.append(build_manifest(slices))
    if pseudo_manifests:
        merged = SliceManifest(
            tuple(e for m in pseudo_manifests for e in m.entries)
        )
    else:
        merged = SliceManifest(())
    write_manifest(merged, pseudo_slices_dir / "manifest.csv")

    labeled_ids = {e.source_id for e in manifest.entries}
    lines = [
        "stage = stage1",
        f"seed = {cfg.seed}",
        f"epochs = {cfg.stage1_epochs}",
        f"batch_size = {cfg.batch_size}",
        f"base_lr = {base_lr}",
        f"labeled_volumes = {','.join(sorted(labeled_ids))}",
        f"unlabeled_volumes = {','.join(vid for vid, _ in unlabeled_volumes)}",
        f"pseudo_selected = {','.join(result.selected_ids)}",
        f"merged_volume_count = {len(labeled_ids) + len(result.selected_ids)}",
        f"final_epoch_loss = {result.epoch_losses[-1]:.6f}",
    ]
    lines += [f"warning = {w}" for w in result.warnings]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ckpt, frozenset(result.selected_ids)


def _read_stage1_pseudo_ids(stage1_dir: Path) -> frozenset[str]:
    kv = _parse_kv((stage1_dir / "manifest.txt").read_text(encoding="utf-8"))
    sel = kv.get("pseudo_selected", "")
    return frozenset(s for s in sel.split(",") if s)


def train_stage2_files(
    slices_dir: Path | str,
    pseudo_slices_dir: Path | str | None,
    unlabeled_slices_dir: Path | str | None,
    val_windowed_dir: Path | str | None,
    init_checkpoint: Path | str,
    out_dir: Path | str,
    cfg: StageConfig,
    sched: TrainSchedule,
    fta_cfg: FtaConfig,
    val_points: int = 10,
    use_min_separation: bool = False,
) -> Path:
    """Consistency training from files; writes checkpoint, metrics history,
    and the stage manifest. Returns the checkpoint path.

    The pseudo-annotated volume ids come from the pseudo slices manifest;
    those volumes are excluded from the unlabeled pool.
    """
    slices_dir, out_dir = Path(slices_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = read_manifest(slices_dir / "manifest.csv")
    labeled = load_train_slices(slices_dir, manifest, "train")
    pseudo_ids: frozenset[str] = frozenset()
    if pseudo_slices_dir is not None:
        pdir = Path(pseudo_slices_dir)
        pmanifest = read_manifest(pdir / "manifest.csv")
        pseudo_ids = frozenset(pmanifest.source_ids())
        labeled += load_train_slices(
            pdir, pmanifest, "train", pseudo_ids, cfg.pseudo_weight
        )

    unlabeled: list[Slice2D] = []
    if unlabeled_slices_dir is not None:
        udir = Path(unlabeled_slices_dir)
        umanifest = read_manifest(udir / "manifest.csv")
        unlabeled = load_unlabeled_slices(udir, umanifest, exclude_ids=pseudo_ids)

    val_cases = [] if val_windowed_dir is None else load_val_cases(val_windowed_dir)

    model, _ = load_checkpoint(init_checkpoint)
    result = run_stage2(
        model, labeled, unlabeled, val_cases, cfg, sched, fta_cfg,
        val_points=val_points, use_min_separation=use_min_separation,
    )

    ckpt = out_dir / "checkpoint.seg"
    save_checkpoint(result.model, result.opt_state, ckpt)
    history = [HISTORY_HEADER] + [row.csv_row() for row in result.history]
    (out_dir / "metrics.csv").write_text("\n".join(history) + "\n", encoding="utf-8")

    lines = [
        "stage = stage2",
        f"seed = {cfg.seed}",
        f"iterations = {sched.total_iters}",
        f"base_lr = {sched.base_lr}",
        f"batch_size = {cfg.batch_size}",
        f"fta_mode = {fta_cfg.mode}",
        f"fta_beta = {fta_cfg.mask_fraction}",
        f"labeled_slices = {len(labeled)}",
        f"unlabeled_slices = {len(unlabeled)}",
        f"pseudo_ids = {','.join(sorted(pseudo_ids))}",
        f"val_split_source = original labeled set only",
        f"final_tau = {result.threshold.tau:.6f}",
    ]
    lines += [f"warning = {w}" for w in result.warnings]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ckpt


def score_files(
    model_ckpt: Path | str,
    val_windowed_dir: Path | str,
    out_csv: Path | str,
    use_min_separation: bool = False,
) -> None:
    """Per-case metric rows plus a mean row for every validation volume."""
    from .ssl import evaluate_volumes

    model, _ = load_checkpoint(model_ckpt)
    cases = load_val_cases(val_windowed_dir)
    mean, per_case = evaluate_volumes(model, cases, use_min_separation)
    rows = [CSV_HEADER]
    rows += [report.csv_row(cid) for cid, report in per_case]
    rows.append(mean.csv_row("mean"))
    Path(out_csv).write_text("\n".join(rows) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Overlay rendering


def render_overlay(
    slc: Slice2D, pred: np.ndarray, gt: np.ndarray, path: Path | str
) -> None:
    """Binary PPM (P6): grayscale base; prediction, ground truth and their
    overlap tinted in red, green and blue respectively."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != slc.data.shape or gt.shape != slc.data.shape:
        raise DataError(
            f"overlay shapes differ: slice {slc.data.shape}, pred {pred.shape}, "
            f"gt {gt.shape}"
        )
    g = np.round(np.clip(slc.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    half = (g // 2).astype(np.uint8)
    for tint, region in (
        (0, pred & ~gt),
        (1, gt & ~pred),
        (2, pred & gt),
    ):
        for ch in range(3):
            rgb[..., ch] = np.where(region, 255 if ch == tint else half, rgb[..., ch])
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


# ---------------------------------------------------------------------------
# End-to-end pipeline


@dataclass
class PipelinePaths:
    out: Path
    data_labeled: Path
    data_unlabeled: Path
    data_val: Path | None
    scores_csv: Path
    stage2_metrics: Path
    stage1_ckpt: Path
    stage2_ckpt: Path


def run_pipeline(cfg: PipelineConfig, out_dir: Path | str, echo: bool = False) -> PipelinePaths:
    """Preprocess -> stage 1 -> stage 2 -> final scoring, all through files.

    Raises ConfigError/DataError/NumericError with the failing stage named in
    the run log and in the exception message.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "run.log", echo=echo)
    write_kv_config(cfg, out / "config.txt")
    log(f"run started, seed={cfg.seed}")

    def stage(name: str, fn):
        log(f"stage {name} started")
        try:
            result = fn()
        except FtasegError as exc:
            log(f"stage {name} failed: {exc}")
            raise type(exc)(f"[{name}] {exc}") from exc
        log(f"stage {name} finished")
        return result

    # Resolve data sources, synthesizing the bundled benchmark if needed.
    if cfg.labeled_dir:
        labeled_dir = Path(cfg.labeled_dir)
        unlabeled_dir = Path(cfg.unlabeled_dir) if cfg.unlabeled_dir else None
        val_dir = Path(cfg.val_dir) if cfg.val_dir else None
    else:
        data = out / "data"

        def synth():
            generate_benchmark(cfg.benchmark_spec(), data)

        stage("synth", synth)
        labeled_dir = data / "labeled"
        unlabeled_dir = data / "unlabeled"
        val_dir = data / "val"

    windowed = out / "windowed"
    slices = out / "slices"

    def preprocess():
        for name, src in (
            ("labeled", labeled_dir),
            ("unlabeled", unlabeled_dir),
            ("val", val_dir),
        ):
            if src is None:
                continue
            if not src.is_dir():
                raise DataError(f"{name} directory {src} does not exist")
            window_dir(src, windowed / name, cfg.window())
        slice_dir(
            windowed / "labeled", slices / "labeled",
            cfg.val_fraction, cfg.seed, cfg.split_by_volume,
        )
        if unlabeled_dir is not None:
            slice_dir(windowed / "unlabeled", slices / "unlabeled")

    stage("preprocess", preprocess)

    stage_cfg = cfg.stage_config()
    if cfg.supervised_only:
        stage_cfg = replace(stage_cfg, stage1_pseudo_count=0)

    def stage1():
        return train_stage1_files(
            slices / "labeled",
            (windowed / "unlabeled")
            if unlabeled_dir is not None and not cfg.supervised_only
            else None,
            out / "stage1",
            slices / "pseudo",
            stage_cfg,
            cfg.model_shape(),
            cfg.lr,
        )

    stage1_ckpt, _pseudo_ids = stage("stage1", stage1)

    def stage2():
        return train_stage2_files(
            slices / "labeled",
            slices / "pseudo",
            (slices / "unlabeled")
            if unlabeled_dir is not None and not cfg.supervised_only
            else None,
            (windowed / "val") if val_dir is not None else None,
            stage1_ckpt,
            out / "stage2",
            stage_cfg,
            TrainSchedule(cfg.lr, cfg.stage2_iters),
            cfg.fta_config(),
            val_points=cfg.val_points,
            use_min_separation=cfg.use_min_separation,
        )

    stage2_ckpt = stage("stage2", stage2)

    scores_csv = out / "scores.csv"

    def score():
        if val_dir is not None:
            score_files(
                stage2_ckpt, windowed / "val", scores_csv, cfg.use_min_separation
            )
        else:
            _score_on_slice_split(stage2_ckpt, slices / "labeled", scores_csv,
                                  cfg.use_min_separation)

    stage("score", score)
    log("run finished")
    return PipelinePaths(
        out=out,
        data_labeled=labeled_dir,
        data_unlabeled=unlabeled_dir if unlabeled_dir is not None else out,
        data_val=val_dir,
        scores_csv=scores_csv,
        stage2_metrics=out / "stage2" / "metrics.csv",
        stage1_ckpt=stage1_ckpt,
        stage2_ckpt=stage2_ckpt,
    )


def _score_on_slice_split(
    ckpt: Path, slices_dir: Path, out_csv: Path, use_min_separation: bool
) -> None:
    # Fallback scorer when no validation volumes exist: every held-out slice
    # is treated as a 1-deep volume.
    model, _ = load_checkpoint(ckpt)
    manifest = read_manifest(slices_dir / "manifest.csv")
    val = load_train_slices(slices_dir, manifest, "val")
    if not val:
        raise DataError("no validation slices in the split")
    reports = []
    rows = [CSV_HEADER]
    for ts in sorted(val, key=lambda t: (t.image.source_id, t.image.axis_tag, t.image.index)):
        probs = model.predict_probs(ts.image)
        pred = MaskVolume((probs >= 0.5).astype(np.uint8).reshape(1, *probs.shape))
        gt = MaskVolume(ts.target.reshape(1, *ts.target.shape))
        report = evaluate_masks(pred, gt, use_min_separation)
        case = slice_filename(ts.image.source_id, ts.image.index, ts.image.axis_tag)
        rows.append(report.csv_row(case))
        reports.append(report)
    rows.append(mean_report(reports).csv_row("mean"))
    out_csv.write_text("\n".join(rows) + "\n", encoding="utf-8")
