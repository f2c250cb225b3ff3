"""Operator surface: subcommands for each pipeline stage.

Artifact layout under one run directory:
  manifest/     manifest.json, summary.json
  cache/        embedding entries + index.tsv (AQUASEG_CACHE overrides)
  checkpoints/  step_*.ckpt, final.ckpt, best.ckpt, loss_history.csv
  reports/      rows.json, targets.csv, report.csv, report.md
  runrecords/   <stage>.json with input checksums, seed, wall time

Exit codes: 0 success, 1 validation failure, 2 missing upstream artifact,
3 runtime divergence (non-finite loss).
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import click
import torch

from . import __version__
from .config import PipelineConfig, config_to_dict, load_config
from .decoder import load_checkpoint
from .embed_cache import CacheIndex, EmbeddingReader, import_external_embeddings, precompute_embeddings
from .encoder import build_toy_encoder, encode_image
from .errors import AquasegError, DivergenceError, MissingArtifactError, ValidationError
from .manifest import Manifest, TargetLoader, build_manifest
from .metrics import MetricsRow, evaluate, load_baseline_csv, render_report
from .pipeline import SegPipeline, build_pipeline
from .synth import generate_synthetic_dataset
from .training import train as run_training

_EXIT_CODES = [
    (DivergenceError, 3),
    (MissingArtifactError, 2),
    (AquasegError, 1),
]


def _stage(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AquasegError as exc:
            click.echo(f"error: {exc}", err=True)
            for klass, code in _EXIT_CODES:
                if isinstance(exc, klass):
                    sys.exit(code)
            sys.exit(1)

    return wrapper


@contextmanager
def _run_lock(run_dir: Path):
    """One writer per output directory; stale locks from dead pids are stolen."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise ValidationError(f"{run_dir} is locked by running process {pid}") from None
            lock.unlink(missing_ok=True)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_runrecord(
    run_dir: Path,
    stage: str,
    cfg: PipelineConfig,
    inputs: dict[str, Path],
    outputs: list[Path],
    started: float,
) -> None:
    record = {
        "stage": stage,
        "version": __version__,
        "config": config_to_dict(cfg),
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p.is_file()},
        "outputs": [str(p) for p in outputs],
        "started_unix": started,
        "wall_time_s": time.time() - started,
    }
    rec_dir = run_dir / "runrecords"
    rec_dir.mkdir(parents=True, exist_ok=True)
    (rec_dir / f"{stage}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load(config_path: str, run_dir_override: str | None) -> tuple[PipelineConfig, Path]:
    cfg = load_config(config_path)
    run_dir = Path(run_dir_override) if run_dir_override else Path(cfg.output.run_dir)
    cfg.output.run_dir = str(run_dir)
    return cfg, run_dir


def _cache_dir(run_dir: Path) -> Path:
    env = os.environ.get("AQUASEG_CACHE")
    return Path(env) if env else run_dir / "cache"


def _build_pipeline(cfg: PipelineConfig) -> SegPipeline:
    return build_pipeline(
        cfg.encoder.to_spec(),
        cfg.decoder.to_config(cfg.encoder.embed_dim),
        prompt_seed=cfg.prompt.seed,
        num_frequencies=cfg.prompt.num_frequencies,
        prompt_scale=cfg.prompt.scale,
    )


def _manifest_path(run_dir: Path) -> Path:
    return run_dir / "manifest" / "manifest.json"


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Box-prompted underwater segmentation: preprocess, embed, train, eval, report."""
    # Single-threaded torch keeps artifact bytes reproducible across machines
    # with different core counts; the workloads here are desk-scale.
    torch.set_num_threads(1)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Config file (defaults used if omitted).")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Override the dataset output directory.")
@click.option("--seed", type=int, default=None, help="Override synth.seed.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@_stage
def synth(config_path: str | None, out_dir: str | None, seed: int | None, force: bool) -> None:
    """Generate a synthetic color-coded mini-dataset."""
    cfg = load_config(config_path) if config_path else PipelineConfig()
    target = Path(out_dir) if out_dir else Path(cfg.dataset.root)
    ids = generate_synthetic_dataset(
        target,
        cfg.synth.n_images,
        seed if seed is not None else cfg.synth.seed,
        class_map=cfg.dataset.classes,
        canvas=cfg.synth.canvas,
        force=force,
    )
    click.echo(f"wrote {len(ids)} image/mask pairs to {target}")


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Override output.run_dir.")
@click.option("--seed", type=int, default=None, help="Override split.seed.")
@_stage
def preprocess(config_path: str, out_dir: str | None, seed: int | None) -> None:
    """Parse masks into per-class targets, apply exclusions, split train/test."""
    started = time.time()
    cfg, run_dir = _load(config_path, out_dir)
    if seed is not None:
        cfg.split.seed = seed
    with _run_lock(run_dir):
        manifest = build_manifest(
            cfg.dataset.root,
            class_map=cfg.dataset.classes,
            min_pixels=cfg.dataset.min_pixels,
            channel_threshold=cfg.dataset.channel_threshold,
            exclusion_scope=cfg.dataset.exclusion_scope,
            split_ratio=cfg.split.ratio,
            split_seed=cfg.split.seed,
            input_side=cfg.encoder.input_side,
        )
        path = manifest.save(_manifest_path(run_dir))
        summary_path = run_dir / "manifest" / "summary.json"
        summary_path.write_text(json.dumps(manifest.summary, indent=2, sort_keys=True) + "\n")
        _write_runrecord(run_dir, "preprocess", cfg, {"config": Path(config_path)}, [path, summary_path], started)
    click.echo(
        f"manifest: {manifest.summary['n_targets']} targets over "
        f"{manifest.summary['n_images']} images "
        f"({manifest.summary['n_train']} train / {manifest.summary['n_test']} test), "
        f"{manifest.summary['n_excluded_small']} excluded below "
        f"{cfg.dataset.min_pixels}px"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Override output.run_dir.")
@click.option("--seed", type=int, default=None, help="Override encoder.seed (toy encoder only).")
@_stage
def embed(config_path: str, out_dir: str | None, seed: int | None) -> None:
    """Precompute (or import) one frozen embedding per image."""
    started = time.time()
    cfg, run_dir = _load(config_path, out_dir)
    if seed is not None:
        cfg.encoder = dataclasses.replace(cfg.encoder, seed=seed)
    manifest = Manifest.load(_manifest_path(run_dir))
    cache_dir = _cache_dir(run_dir)
    ids = sorted({t["image_id"] for t in manifest.targets})

    with _run_lock(run_dir):
        spec = cfg.encoder.to_spec()
        if spec.kind == "external":
            if not cfg.encoder.external_dir:
                raise MissingArtifactError(
                    "encoder.kind is 'external' but encoder.external_dir is not set; "
                    "point it at a directory of offline-computed embedding entries"
                )
            index = import_external_embeddings(
                cfg.encoder.external_dir, ids, cache_dir, spec.embed_dim, spec.grid_side
            )
            click.echo(f"imported {len(index.entries)} external embeddings into {cache_dir}")
        else:
            loader = TargetLoader(manifest, spec.input_side)
            encoder = build_toy_encoder(spec)

            def encode_one(image_id: str):
                image = loader.normalized_image(image_id, cfg.encoder.mean, cfg.encoder.std)
                return encode_image(image, spec, encoder, image_id)

            index = precompute_embeddings(ids, encode_one, cache_dir)
            for image_id, reason in index.skipped:
                click.echo(f"skipped {image_id}: {reason}", err=True)
            click.echo(
                f"cache: {len(index.entries)} entries ({index.encoded} newly encoded, "
                f"{len(index.entries) - index.encoded} reused, {len(index.skipped)} skipped)"
            )
        _write_runrecord(
            run_dir, "embed", cfg,
            {"config": Path(config_path), "manifest": _manifest_path(run_dir)},
            [cache_dir / "index.tsv"], started,
        )


@main.command(name="train")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Override output.run_dir.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@_stage
def train_cmd(config_path: str, out_dir: str | None, seed: int | None) -> None:
    """Fine-tune the mask decoder on cached embeddings."""
    started = time.time()
    cfg, run_dir = _load(config_path, out_dir)
    manifest = Manifest.load(_manifest_path(run_dir))
    cache_dir = _cache_dir(run_dir)
    index = CacheIndex.load(cache_dir)

    train_config = cfg.train.to_config(cfg.prompt)
    if seed is not None:
        train_config = dataclasses.replace(train_config, seed=seed)

    with _run_lock(run_dir):
        pipeline = _build_pipeline(cfg)
        loader = TargetLoader(manifest, pipeline.input_side)
        result = run_training(
            manifest.train_keys,
            loader.resized_mask,
            EmbeddingReader(index),
            pipeline,
            train_config,
            checkpoint_dir=run_dir / "checkpoints",
        )
        _write_runrecord(
            run_dir, "train", cfg,
            {
                "config": Path(config_path),
                "manifest": _manifest_path(run_dir),
                "cache_index": cache_dir / "index.tsv",
            },
            [p for p in (result.final_path, result.best_path) if p is not None],
            started,
        )
    last = result.history[-1] if result.history else None
    click.echo(
        f"trained {len(result.history)} steps"
        + (f", final loss {last.total:.4f}" if last else "")
        + (f", best holdout DSC {result.best_holdout_dsc:.4f} @ step {result.best_step}"
           if result.best_holdout_dsc is not None else "")
    )


def _resolve_checkpoint(cfg: PipelineConfig, run_dir: Path) -> Path:
    choice = cfg.eval.checkpoint
    ckpt_dir = run_dir / "checkpoints"
    if choice == "auto":
        best = ckpt_dir / "best.ckpt"
        return best if best.is_file() else ckpt_dir / "final.ckpt"
    if choice in ("final", "best"):
        return ckpt_dir / f"{choice}.ckpt"
    return Path(choice)


@main.command(name="eval")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Override output.run_dir.")
@_stage
def eval_cmd(config_path: str, out_dir: str | None) -> None:
    """Score the test split with unperturbed tight-box prompts."""
    started = time.time()
    cfg, run_dir = _load(config_path, out_dir)
    manifest = Manifest.load(_manifest_path(run_dir))
    cache_dir = _cache_dir(run_dir)
    index = CacheIndex.load(cache_dir)
    ckpt_path = _resolve_checkpoint(cfg, run_dir)
    decoder, ckpt_meta = load_checkpoint(ckpt_path)

    with _run_lock(run_dir):
        pipeline = _build_pipeline(cfg)
        if decoder.config != pipeline.decoder.config:
            raise ValidationError(
                f"checkpoint decoder config {decoder.config} does not match the "
                f"configured decoder {pipeline.decoder.config}"
            )
        pipeline.decoder = decoder
        loader = TargetLoader(manifest, pipeline.input_side)
        rows, scores = evaluate(
            pipeline, manifest.test_keys, EmbeddingReader(index), loader,
            manifest.task_order, iou_mode=cfg.eval.iou_mode,
        )
        reports_dir = run_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        rows_doc = {
            "rows": [
                {"task": r.task, "dsc": r.mean_dsc, "iou": r.mean_iou, "n": r.n_samples}
                for r in rows
            ],
            "iou_mode": cfg.eval.iou_mode,
            "metadata": {
                "checkpoint": str(ckpt_path),
                "checkpoint_sha256": _sha256(ckpt_path),
                "checkpoint_step": ckpt_meta.get("step"),
                "split_seed": manifest.split_seed,
            },
        }
        rows_path = reports_dir / "rows.json"
        rows_path.write_text(json.dumps(rows_doc, indent=2, sort_keys=True) + "\n")
        targets_path = reports_dir / "targets.csv"
        with open(targets_path, "w") as f:
            f.write("image_id,class_code,dsc,iou\n")
            for s in scores:
                f.write(f"{s.image_id},{s.class_code},{s.dsc!r},{s.iou!r}\n")
        _write_runrecord(
            run_dir, "eval", cfg,
            {
                "config": Path(config_path),
                "manifest": _manifest_path(run_dir),
                "cache_index": cache_dir / "index.tsv",
                "checkpoint": ckpt_path,
            },
            [rows_path, targets_path], started,
        )
    for r in rows:
        click.echo(f"{r.task}: DSC {r.mean_dsc:.2f}  IoU {r.mean_iou:.2f}  (n={r.n_samples})")


@main.command(name="report")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Override output.run_dir.")
@_stage
def report_cmd(config_path: str, out_dir: str | None) -> None:
    """Render the comparison table from eval rows (plus optional baseline CSV)."""
    started = time.time()
    cfg, run_dir = _load(config_path, out_dir)
    rows_path = run_dir / "reports" / "rows.json"
    if not rows_path.is_file():
        raise MissingArtifactError(f"evaluation rows not found: {rows_path}", producer="eval")
    doc = json.loads(rows_path.read_text())
    rows = [MetricsRow(r["task"], r["dsc"], r["iou"], r["n"]) for r in doc["rows"]]
    baseline = load_baseline_csv(cfg.report.baseline_csv) if cfg.report.baseline_csv else None

    with _run_lock(run_dir):
        outputs = []
        inputs = {"config": Path(config_path), "rows": rows_path}
        if cfg.report.baseline_csv:
            inputs["baseline"] = Path(cfg.report.baseline_csv)
        for fmt in cfg.report.formats:
            text = render_report(rows, baseline, fmt=fmt)
            ext = "csv" if fmt == "csv" else "md"
            path = run_dir / "reports" / f"report.{ext}"
            path.write_text(text)
            outputs.append(path)
        _write_runrecord(run_dir, "report", cfg, inputs, outputs, started)
    click.echo(f"wrote {', '.join(str(p) for p in outputs)}")


if __name__ == "__main__":
    main()
