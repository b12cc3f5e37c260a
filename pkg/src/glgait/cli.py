"""Command-line entry point: ``glgait {synth,train,extract,eval,gradcheck}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __name__ as _pkg
from .checkpoint import Checkpoint, load_embeddings, save_embeddings
from .config import RUN_PRESETS, load_run_config, parse_run_config, run_preset
from .data import default_data_root, load_dataset, save_dataset, synth_dataset
from .errors import GaitError
from .evaluation import PROTOCOLS, EmbeddingMatrix, extract_embeddings, get_protocol, rank1, report
from .gradcheck import run_all
from .training import TrainState, build_dataset, train

log = logging.getLogger(__name__)


def build_id() -> str:
    """Package version plus a digest of the installed sources (stable across runs, no clock)."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - running from a bare checkout
        version = "0+unknown"
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{version}+src.{h.hexdigest()[:12]}"


def write_manifest(path, args, *, config=None, config_path=None, seed=None, artifacts=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.argv,
        "config_path": None if config_path is None else str(config_path),
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in (artifacts or {}).items()},
        "build": build_id(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise GaitError(f"{out} is not empty; pass --force to write into it")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    _ensure_empty(out, args.force)
    ds = synth_dataset(args.subjects, args.seqs, tuple(args.views), seed=args.seed, n_frames=args.frames)
    save_dataset(ds, out)
    cfg = {"subjects": args.subjects, "seqs": args.seqs, "views": list(args.views), "frames": args.frames}
    write_manifest(out / "run_manifest.json", args, config=cfg, seed=args.seed, artifacts={"dataset": out})
    print(f"wrote {len(ds)} sequences of {len(ds.subjects)} subjects to {out}")
    return 0


def _resolve_run_config(args):
    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = run_preset(args.preset, args.data_root or default_data_root())
    patch = cfg.model_dump(mode="json")
    if args.data_root and patch["data"]["root"] is not None:
        patch["data"]["root"] = args.data_root
    if args.iterations is not None:
        patch["iterations"] = args.iterations
    return parse_run_config(patch)


def cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    out = Path(args.out)
    if not args.resume:
        _ensure_empty(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    (out / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    state = TrainState.from_checkpoint(Checkpoint.load(args.resume), np.dtype(cfg.dtype)) if args.resume else None
    result = train(cfg, state=state, log_path=out / "metrics.csv", out_dir=ckpt_dir)
    final = ckpt_dir / f"ckpt_{result.state.iteration:07d}.ckpt"
    write_manifest(
        out / "run_manifest.json",
        args,
        config=cfg.model_dump(mode="json"),
        config_path=args.config,
        seed=cfg.seed,
        artifacts={"metrics": out / "metrics.csv", "checkpoint": final, "config": out / "config.json"},
    )
    print(f"trained to iteration {result.state.iteration}; final checkpoint {final}")
    return 0


def _dataset_for(ckpt: Checkpoint, data: str | None):
    """Explicit ``--data`` wins; otherwise re-create the run's synthetic set or use the default root."""
    if data:
        return load_dataset(data)
    run = ckpt.meta.get("run_config") or {}
    if run.get("data", {}).get("synth"):
        return build_dataset(parse_run_config(run))
    root = default_data_root()
    if root is None:
        raise GaitError("no dataset given: pass --data or set GLGAIT_DATA_ROOT")
    return load_dataset(root)


def _embed(args, ckpt_path, data, conditions=None) -> EmbeddingMatrix:
    ckpt = Checkpoint.load(ckpt_path)
    model = TrainState.from_checkpoint(ckpt).model
    ds = _dataset_for(ckpt, data)
    if conditions:
        ds = ds.select(conditions=conditions)
    return extract_embeddings(model, ds, args.pad_to), model


def cmd_extract(args) -> int:
    emb, model = _embed(args, args.checkpoint, args.data, args.conditions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(out, emb.features, model.cfg.preset, model.cfg.embedding_channels, model.cfg.strips, emb.rows())
    write_manifest(
        Path(str(out) + ".manifest.json"),
        args,
        config={"checkpoint": str(args.checkpoint), "data": args.data, "conditions": args.conditions, "pad_to": args.pad_to},
        artifacts={"embeddings": out, "metadata": str(out) + ".json"},
    )
    print(f"wrote {len(emb)} embeddings of dim {emb.features.shape[1]} to {out}")
    return 0


def cmd_eval(args) -> int:
    protocol = get_protocol(args.protocol)
    if args.embeddings:
        _, feats, rows = load_embeddings(args.embeddings)
        emb = EmbeddingMatrix.from_rows(feats, rows)
    elif args.checkpoint:
        emb, _ = _embed(args, args.checkpoint, args.data)
    else:
        raise GaitError("eval needs --embeddings or --checkpoint")
    result = rank1(emb, protocol) if len(emb) else None
    text, table = report(result, protocol)
    print(text, end="")
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(str(prefix) + ".txt").write_text(text)
    Path(str(prefix) + ".csv").write_text(table)
    write_manifest(
        Path(str(prefix) + ".manifest.json"),
        args,
        config={"protocol": protocol.name, "embeddings": args.embeddings, "checkpoint": args.checkpoint},
        artifacts={"text": str(prefix) + ".txt", "csv": str(prefix) + ".csv"},
    )
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.preset, args.seed)
    width = max(len(r.layer) for r in results)
    for r in results:
        extra = f"  ({r.checked} coords, {r.kinked} kinked skipped)" if r.kinked else ""
        print(f"{r.layer.ljust(width)}  worst rel err {r.worst:.3e}  tol {r.tol:.0e}  {'PASS' if r.passed else 'FAIL'}{extra}")
    ok = all(r.passed for r in results)
    write_manifest(
        args.manifest or "gradcheck.manifest.json",
        args,
        config={"preset": args.preset},
        seed=args.seed,
        artifacts={},
    )
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _at_least_two(text: str) -> int:
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 subjects for triplets, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glgait", description="Silhouette gait recognition toolkit.")
    p.add_argument("--threads", type=_positive, default=None, help="BLAS/worker threads (1 gives bitwise determinism)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic silhouette dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--subjects", type=_at_least_two, default=8)
    s.add_argument("--seqs", type=_positive, default=4, help="sequences per subject and view")
    s.add_argument("--views", type=int, nargs="+", default=[0, 90])
    s.add_argument("--frames", type=_positive, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a JSON run config or a preset")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON run config")
    src.add_argument("--preset", choices=RUN_PRESETS, default="casia-b-tiny")
    t.add_argument("--out", required=True, help="run directory (metrics.csv, checkpoints/, manifests)")
    t.add_argument("--data-root", help="dataset root (default: $GLGAIT_DATA_ROOT)")
    t.add_argument("--iterations", type=int, help="override the configured iteration count")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--force", action="store_true", help="write into a non-empty run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="embed every sequence of a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset root (default: the run's synthetic set or $GLGAIT_DATA_ROOT)")
    e.add_argument("--out", required=True, help="embedding file")
    e.add_argument("--conditions", nargs="+", help="only these conditions")
    e.add_argument("--pad-to", type=_positive, default=30, help="cyclically pad sequences to this many frames")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="cross-view Rank-1 report")
    v.add_argument("--protocol", required=True, choices=sorted(PROTOCOLS))
    v.add_argument("--embeddings", help="embedding file from 'extract'")
    v.add_argument("--checkpoint", help="embed on the fly with this checkpoint")
    v.add_argument("--data", help="dataset root when using --checkpoint")
    v.add_argument("--pad-to", type=_positive, default=30)
    v.add_argument("--out", default="report", help="output prefix for .txt/.csv/.manifest.json")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    g.add_argument("--preset", default="casia-b-tiny", choices=["casia-b-tiny", "casia-b", "oumvlp"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--manifest", help="manifest path (default: ./gradcheck.manifest.json)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = ["glgait", *argv]
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except GaitError as exc:
        print(f"{_pkg}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
