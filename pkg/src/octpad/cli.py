"""Command-line entry point.

Subcommands cover the whole desk-scale loop: ``synth`` writes phantom
volumes with masks and a manifest, ``extract`` builds the patch dataset,
``train`` fits a classifier variant under one of the training strategies,
``score`` produces B-scan- or instance-level PAD scores, ``eval`` turns
scores into DET/EER/HTER/AUC reports (optionally grouped k-fold), and
``viz`` exports class-activation heatmaps or pooled feature matrices.

Runs are driven by a YAML config whose defaults equal the package-wide
constants (strides 256/64, foreground threshold 0.01, attention weights
1/0.5, loss weights 0.001/1, sampling counts 10/2/10, lr 1e-4 -> 1e-5).
Every subcommand drops a ``run.json`` sidecar recording the config checksum
and seed, never mutates its inputs, and reports failures as a single
``ERROR <code>: <message>`` line on stderr with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dual_branch import AblationVariant, NetConfig, export_features, grad_cam, make_variant, upsample_heatmap
from .errors import ConfigError, NoForegroundError, OctPadError
from .oct_core import (
    Label,
    Manifest,
    ManifestEntry,
    OctVolume,
    SampleMeta,
    VolumeFormat,
    get_bscan,
    load_manifest,
    load_mask_stack,
    load_volume,
    save_manifest,
    save_mask_stack,
    save_volume,
    to_u8,
)
from .patch_extract import (
    ExtractionConfig,
    PatchRecord,
    append_index,
    extract_patches,
    load_mask_png,
    load_patch_png,
    read_index,
    save_mask_png,
    save_patch_png,
)
from .score_eval import (
    ScoreConfig,
    bscan_score,
    crossval_folds,
    det_curve,
    eer,
    instance_score,
    metrics_report,
    read_scores_csv,
    score_set_from_rows,
    write_det_csv,
    write_report,
    write_scores_csv,
)
from .synth_phantom import PaKind, PhantomConfig, gen_bonafide, gen_pa
from .train import Strategy, TrainConfig, TrainPatch, run_training, write_history

log = logging.getLogger("octpad")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_bonafide: int = 40
    n_pa: int = 40
    n_subjects: int = 5
    materials_per_kind: int = 2
    format: VolumeFormat = VolumeFormat.PNG_STACK

    def __post_init__(self) -> None:
        if self.n_bonafide < 0 or self.n_pa < 0:
            raise ConfigError("volume counts must be >= 0")
        if self.n_subjects < 1 or self.materials_per_kind < 1:
            raise ConfigError("n_subjects and materials_per_kind must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)


def _build_section(cls, data: dict, casts: dict | None = None):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    for key, cast in (casts or {}).items():
        if key in kwargs:
            kwargs[key] = cast(kwargs[key])
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a YAML run config; missing sections fall back to defaults and
    the top-level seed cascades into every stochastic component."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")

    seed = int(data.get("seed", 0))
    phantom = dict(data.get("phantom", {}))
    phantom.setdefault("seed", seed)
    if "dims" in phantom:
        phantom["dims"] = tuple(phantom["dims"])
    train = dict(data.get("train", {}))
    train.setdefault("seed", seed)
    score = dict(data.get("score", {}))
    score.setdefault("seed", seed)
    extraction = dict(data.get("extraction", {}))
    if "kernel" in extraction:
        extraction["kernel"] = tuple(extraction["kernel"])

    known_top = {"seed", "phantom", "synth", "extraction", "train", "score"}
    unknown = set(data) - known_top
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    return RunConfig(
        seed=seed,
        phantom=_build_section(PhantomConfig, phantom),
        synth=_build_section(SynthConfig, dict(data.get("synth", {})), {"format": VolumeFormat}),
        extraction=_build_section(ExtractionConfig, extraction),
        train=_build_section(TrainConfig, train, {"strategy": Strategy}),
        score=_build_section(ScoreConfig, score),
    )


def _write_run_sidecar(out_dir: Path, command: str, seed: int, config_path: str | None) -> None:
    digest = ""
    if config_path:
        digest = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps(
            {
                "config_sha256": digest,
                "seed": seed,
                "command": command,
                "version": __version__,
            },
            indent=2,
        )
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = list(PaKind)
    entries: list[ManifestEntry] = []

    for i in range(cfg.synth.n_bonafide):
        pcfg = replace(cfg.phantom, seed=cfg.seed + i)
        meta = SampleMeta(
            sample_id=f"bona-{i:04d}",
            label=Label.BONAFIDE,
            subject_id=f"subj-{i % cfg.synth.n_subjects:02d}",
        )
        vol, mask = gen_bonafide(pcfg, meta)
        name = f"vol_{meta.sample_id}"
        _save_vol(vol, out, name, cfg.synth.format)
        save_mask_stack(mask, out / f"{name}_mask")
        entries.append(ManifestEntry(path=_vol_rel(name, cfg.synth.format), meta=meta))

    for i in range(cfg.synth.n_pa):
        kind = kinds[i % len(kinds)]
        pcfg = replace(cfg.phantom, seed=cfg.seed + 100_000 + i)
        meta = SampleMeta(
            sample_id=f"pa-{i:04d}",
            label=Label.PA,
            material=f"{kind.value}-m{i % cfg.synth.materials_per_kind}",
            pa_category=kind.pa_category,
            subject_id=f"pasubj-{i:03d}",
        )
        vol = gen_pa(pcfg, kind, meta)
        name = f"vol_{meta.sample_id}"
        _save_vol(vol, out, name, cfg.synth.format)
        entries.append(ManifestEntry(path=_vol_rel(name, cfg.synth.format), meta=meta))

    save_manifest(Manifest(entries=tuple(entries)), out / "manifest.json")
    _write_run_sidecar(out, "synth", cfg.seed, args.config)
    print(f"wrote {len(entries)} volumes + manifest to {out}")
    return 0


def _vol_rel(name: str, fmt: VolumeFormat) -> str:
    return name if fmt is VolumeFormat.PNG_STACK else f"{name}.octv"


def _save_vol(vol: OctVolume, out: Path, name: str, fmt: VolumeFormat) -> None:
    save_volume(vol, out / _vol_rel(name, fmt), fmt)


def _load_vol(path: Path) -> OctVolume:
    fmt = VolumeFormat.PNG_STACK if path.is_dir() else VolumeFormat.RAW_BINARY
    return load_volume(path, fmt)


def _mask_dir_for(path: Path) -> Path:
    stem = path.name[: -len(".octv")] if path.name.endswith(".octv") else path.name
    return path.with_name(f"{stem}_mask")


def cmd_extract(args) -> int:
    cfg = load_config(args.config)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "index.jsonl"
    if index_path.exists():
        index_path.unlink()

    half = cfg.extraction.half
    n_patches = 0
    for entry in manifest.entries:
        vol = _load_vol(entry.resolved)
        mask_dir = _mask_dir_for(entry.resolved)
        mask = load_mask_stack(mask_dir, vol.n_bscans) if mask_dir.is_dir() else None
        for y in range(vol.n_bscans):
            for patch in extract_patches(get_bscan(vol, y), cfg.extraction):
                stem = f"{entry.meta.sample_id}_y{y:03d}_z{patch.z:04d}_x{patch.x:04d}"
                save_patch_png(patch.data, out / f"{stem}.png")
                mask_file = None
                if mask is not None:
                    crop = mask[:, patch.z - half : patch.z + half, y, patch.x - half : patch.x + half]
                    mask_file = f"{stem}_mask.png"
                    save_mask_png(crop, out / mask_file)
                append_index(
                    out,
                    PatchRecord(
                        file=f"{stem}.png",
                        sample_id=entry.meta.sample_id,
                        y=y,
                        x=patch.x,
                        z=patch.z,
                        label=entry.meta.label.value,
                        mask_file=mask_file,
                    ),
                )
                n_patches += 1
    _write_run_sidecar(out, "extract", cfg.seed, args.config)
    print(f"wrote {n_patches} patches to {out}")
    return 0


def load_train_patches(patches_dir: str | Path) -> list[TrainPatch]:
    """Materialize a patch dataset directory into training samples."""
    patches_dir = Path(patches_dir)
    samples = []
    for rec in read_index(patches_dir):
        image = load_patch_png(patches_dir / rec.file)
        mask = load_mask_png(patches_dir / rec.mask_file) if rec.mask_file else None
        label = 1 if rec.label == Label.BONAFIDE.value else 0
        samples.append(TrainPatch(image=image, label=label, mask=mask, sample_id=rec.sample_id))
    return samples


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_cfg = replace(
        cfg.train,
        strategy=Strategy(args.strategy) if args.strategy else cfg.train.strategy,
    )
    variant = AblationVariant(args.variant)
    samples = load_train_patches(args.patches)
    net = make_variant(
        variant,
        NetConfig(width_multiplier=train_cfg.width_multiplier),
        seed=train_cfg.seed,
    )
    net, history = run_training(net, samples, train_cfg)

    out = Path(args.out)
    save_checkpoint(
        net,
        out,
        extra={"strategy": train_cfg.strategy.value, "seed": train_cfg.seed},
    )
    write_history(history, out.with_suffix(".history.csv"))
    _write_run_sidecar(out.parent, "train", train_cfg.seed, args.config)
    final = history[-1] if history else None
    acc = f", final train_acc {final.train_acc:.3f}" if final and final.train_acc is not None else ""
    print(f"trained {variant.value} [{train_cfg.strategy.value}] -> {out}{acc}")
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    net, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    rng = np.random.default_rng(cfg.score.seed)
    rows: list[tuple[str, str, float]] = []

    for entry in manifest.entries:
        vol = _load_vol(entry.resolved)
        if args.level == "instance":
            try:
                s = instance_score(net, vol, cfg.extraction, cfg.score, rng)
            except NoForegroundError:
                log.warning("no foreground in %s; scoring 0.0", entry.meta.sample_id)
                s = 0.0
            rows.append((entry.meta.sample_id, entry.meta.label.value, s))
        else:
            for y in range(vol.n_bscans):
                try:
                    s = bscan_score(net, get_bscan(vol, y), cfg.extraction, cfg.score, rng)
                except NoForegroundError:
                    log.warning("no foreground in %s bscan %d; scoring 0.0", entry.meta.sample_id, y)
                    s = 0.0
                rows.append((f"{entry.meta.sample_id}#b{y:04d}", entry.meta.label.value, s))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(rows, out)
    _write_run_sidecar(out.parent, "score", cfg.score.seed, args.config)
    print(f"wrote {len(rows)} {args.level} scores to {out}")
    return 0


def cmd_eval(args) -> int:
    rows = read_scores_csv(args.scores)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.folds:
        if not args.manifest:
            raise ConfigError("--folds needs --manifest for material/subject grouping")
        manifest = load_manifest(args.manifest, check_paths=False)
        by_sample = {}
        for sample_id, label, score in rows:
            by_sample.setdefault(sample_id.split("#")[0], []).append((sample_id, label, score))
        fold_reports = []
        for i, fold in enumerate(crossval_folds(manifest, k=args.folds, seed=args.seed)):
            train_rows = [r for e in fold.train for r in by_sample.get(e.meta.sample_id, [])]
            test_rows = [r for e in fold.test for r in by_sample.get(e.meta.sample_id, [])]
            train_set = score_set_from_rows(train_rows)
            test_set = score_set_from_rows(test_rows)
            _, val_thr = eer(train_set)
            report = metrics_report(test_set, threshold=val_thr, fold=i)
            fold_reports.append(report)
            write_report(report, out.with_name(f"{out.stem}_fold{i}{out.suffix}"))
        mean = {
            k: float(np.mean([r[k] for r in fold_reports]))
            for k in ("eer", "hter", "auc")
        }
        summary = {
            **mean,
            "n_bona": sum(r["n_bona"] for r in fold_reports),
            "n_pa": sum(r["n_pa"] for r in fold_reports),
            "fold": -1,
            "folds": fold_reports,
        }
        write_report(summary, out)
    else:
        scores = score_set_from_rows(rows)
        report = metrics_report(scores)
        write_report(report, out)
        if args.det:
            write_det_csv(det_curve(scores), args.det)

    _write_run_sidecar(out.parent, "eval", args.seed, None)
    print(f"wrote report to {out}")
    return 0


def cmd_viz(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.features:
        patches_dir = Path(args.patches)
        records = read_index(patches_dir)
        images = [load_patch_png(patches_dir / r.file) for r in records]
        feats = export_features(net, images)
        with open(out, "w") as f:
            f.write("sample_id,label," + ",".join(f"f{i}" for i in range(feats.shape[1])) + "\n")
            for rec, row in zip(records, feats):
                f.write(f"{rec.sample_id},{rec.label}," + ",".join(f"{v:.6f}" for v in row) + "\n")
        print(f"wrote {feats.shape[0]}x{feats.shape[1]} feature matrix to {out}")
        return 0

    import torch

    if not args.patch:
        raise ConfigError("viz needs --patch (or --features with --patches)")
    patch = load_patch_png(Path(args.patch))
    cam = grad_cam(net, torch.as_tensor(patch), target_class=args.target_class)
    heat = upsample_heatmap(cam, patch.shape)
    overlay = _heat_overlay(patch, heat)
    Image.fromarray(overlay, mode="RGB").save(out)
    print(f"wrote heatmap overlay to {out}")
    return 0


def _heat_overlay(gray: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Blend a [0,1] heatmap (red warm / blue cold) over a grayscale patch."""
    g = to_u8(gray).astype(np.float32)
    r = np.clip(heat, 0, 1) * 255.0
    b = (1.0 - np.clip(heat, 0, 1)) * 255.0
    rgb = np.stack(
        [0.5 * g + 0.5 * r, 0.5 * g, 0.5 * g + 0.5 * b], axis=-1
    )
    return np.clip(rgb, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octpad",
        description="OCT fingerprint presentation-attack detection laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate phantom volumes, masks and a manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="build a patch dataset from a manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a classifier variant")
    p.add_argument("--config", default=None)
    p.add_argument("--patches", required=True)
    p.add_argument("--variant", default=AblationVariant.FULL_ISAPAD.value,
                   choices=[v.value for v in AblationVariant])
    p.add_argument("--strategy", default=None, choices=[s.value for s in Strategy])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a manifest with a trained checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--level", default="instance", choices=["bscan", "instance"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute EER/HTER/AUC (optionally k-fold) from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--det", default=None)
    p.add_argument("--folds", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="Grad-CAM overlays or feature matrix export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--patch", default=None)
    p.add_argument("--target-class", type=int, default=1)
    p.add_argument("--features", action="store_true")
    p.add_argument("--patches", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OctPadError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR IOError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
