"""``vickam`` command line: synth, stage1, stage2, eval, bench, export-maps.

Exit codes: 0 ok, 2 usage, 3 format/I-O, 4 shape, 5 numeric.  Failures print
one JSON object ``{"code", "message", "path"?}`` on stderr.

Configs are JSON files with optional ``"synth"`` and ``"train"`` sections
(a file without either key is used as-is for both).  ``--config`` also
accepts the bundled names ``small``, ``standard`` and ``hard``.  The seed
comes from ``--seed``, else ``$VICKAM_SEED``, else the config.
"""

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError, UsageError, VickamError
from .fftcorr import bench_corr, gen_action_maps
from .nnhead import augment, load_checkpoint
from .pipeline import (TrainConfig, echo_config, evaluate, latest_checkpoint, load_classifier,
                       stage1_run, stage2_run)
from .prototypes import PrototypeBank
from .relmaps import RelationMaps
from .synthgen import (SynthConfig, gen_dataset, load_annotated, load_groups, read_manifest,
                       save_dataset)
from .tensors import read_tensor

BUNDLED = ("small", "standard", "hard")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(spec):
    if spec is None:
        return {}
    path = Path(spec)
    if not path.exists() and spec in BUNDLED:
        text = resources.files("vickam").joinpath("configs", f"{spec}.json").read_text()
    else:
        try:
            text = path.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config: {exc.strerror}", path=path) from exc
    try:
        return json.loads(text)
    except ValueError as exc:
        raise FormatError(f"config is not valid JSON: {exc}", path=path) from exc


def _section(raw, name):
    if "synth" in raw or "train" in raw:
        return dict(raw.get(name, {}))
    return dict(raw)


def resolve_seed(flag, fallback):
    if flag is not None:
        return int(flag)
    env = os.environ.get("VICKAM_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"VICKAM_SEED is not an integer: {env!r}") from exc
    return int(fallback)


def _train_config(args, sizes):
    raw = _section(load_config(args.config), "train")
    try:
        cfg = TrainConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc
    cfg.seed = resolve_seed(args.seed, cfg.seed)
    return cfg.with_sizes(sizes)


def _emit(obj, stream=None):
    (stream or sys.stdout).write(json.dumps(obj, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_synth(args):
    raw = _section(load_config(args.config), "synth")
    try:
        cfg = SynthConfig.from_json(raw)
    except TypeError as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    cfg.seed = resolve_seed(args.seed, cfg.seed)
    ds = gen_dataset(cfg)
    save_dataset(ds, args.out)
    _emit({"out": str(args.out), "n_train": len(ds.train), "n_test": len(ds.test)})


def _knowledge(path):
    path = Path(path)
    return PrototypeBank.load(path / "prototypes"), RelationMaps.load(path / "relmaps")


def cmd_stage1(args):
    manifest = read_manifest(args.data)
    cfg = _train_config(args, manifest["sizes"])
    train = load_annotated(args.data)
    _, _, _, metrics = stage1_run(train, cfg, out_dir=args.out, action_names=manifest["action_names"])
    _emit(metrics.to_json())


def cmd_stage2(args):
    manifest = read_manifest(args.data)
    cfg = _train_config(args, manifest["sizes"])
    if args.no_augmentation:
        cfg.use_augmentation = False
    if args.no_semantics:
        cfg.use_semantics = False
    if args.gs_only:
        cfg.use_action_maps = False
    if args.train_fraction is not None:
        cfg.train_fraction = args.train_fraction
    cfg.validate()
    bank, relmaps = _knowledge(args.knowledge)
    init = None
    stage1_dir = Path(args.knowledge) / "stage1"
    if (stage1_dir / "manifest.json").exists():
        init, _ = load_checkpoint(stage1_dir)
    train = load_groups(args.data, "train")
    test = load_groups(args.data, "test") or None
    _, metrics = stage2_run(train, bank, relmaps, cfg, out_dir=args.out, init_params=init, test_set=test)
    _emit(metrics.to_json())


def cmd_eval(args):
    bank, relmaps = _knowledge(args.knowledge)
    ck = latest_checkpoint(args.checkpoint)
    clf, cfg = load_classifier(ck, bank, relmaps)
    manifest = read_manifest(args.data)
    if manifest["sizes"]["h"] != cfg.h or manifest["sizes"]["w"] != cfg.w or manifest["sizes"]["C"] != cfg.C:
        raise ShapeError(f"data grid {manifest['sizes']} does not match checkpoint config", path=args.data)
    samples = load_groups(args.data, args.split)
    metrics = evaluate(samples, clf)
    metrics.extra = {"split": args.split, "checkpoint": ck.name}
    out = Path(args.out) if args.out else (ck.parent.parent / "eval" if ck.parent.name == "checkpoints"
                                           else ck / "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(echo_config(cfg), indent=2, sort_keys=True) + "\n")
    (out / "final_metrics.json").write_text(json.dumps(metrics.to_json(), indent=2, sort_keys=True) + "\n")
    _emit(metrics.to_json())


def parse_sizes(spec):
    """``"HxWxC:p[:K]"`` items separated by commas."""
    out = []
    for item in spec.split(","):
        try:
            grid, *rest = item.strip().split(":")
            h, w, c = (int(v) for v in grid.lower().split("x"))
            p = int(rest[0])
            k = int(rest[1]) if len(rest) > 1 else 1
        except (ValueError, IndexError) as exc:
            raise UsageError(f"bad size spec {item!r}; expected HxWxC:p[:K]") from exc
        out.append((h, w, c, p, k))
    return out


def cmd_bench(args):
    seed = resolve_seed(args.seed, 0)
    sizes = parse_sizes(args.sizes)
    _emit({"config": {"sizes": args.sizes, "repeats": args.repeats, "seed": seed}}, sys.stderr)
    lines = []
    for h, w, c, p, k in sizes:
        for rec in bench_corr(h, w, c, p, K_a=k, repeats=args.repeats, seed=seed):
            lines.append(rec)
            _emit(rec)
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))


def write_pgm(path, values):
    """Binary P5 heatmap; ``round(255 * (v - min) / (max - min))``, flat maps -> 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi > lo:
        pix = np.floor(255.0 * (v - lo) / (hi - lo) + 0.5)
    else:
        pix = np.zeros_like(v)
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.astype(np.uint8).tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a P5 PGM", path=path)
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def cmd_export_maps(args):
    bank, relmaps = _knowledge(args.knowledge)
    x = read_tensor(args.sample)
    if x.ndim != 3:
        raise ShapeError(f"sample must be (h,w,C), got {x.shape}", path=args.sample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = gen_action_maps(x, bank)
    mhat = augment(m, relmaps, True)
    files = []
    for k in range(m.shape[0]):
        name = f"action_{k:02d}.pgm"
        write_pgm(out / name, m[k])
        files.append({"file": name, "action": k, "min": float(m[k].min()), "max": float(m[k].max())})
    for g in range(mhat.shape[0]):
        for k in range(mhat.shape[1]):
            name = f"augmented_g{g:02d}_a{k:02d}.pgm"
            write_pgm(out / name, mhat[g, k])
            files.append({"file": name, "group": g, "action": k})
    summary = {"sample": str(args.sample), "maps": files}
    if args.checkpoint:
        clf, _ = load_classifier(latest_checkpoint(args.checkpoint), bank, relmaps)
        probs = clf.predict_proba(x[None])[0]
        summary["probs"] = probs.tolist()
        summary["label"] = int(np.argmax(probs))
    (out / "maps.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit({"out": str(out), "n_files": len(files)})


# ---------------------------------------------------------------------- main


def build_parser():
    ap = _Parser(prog="vickam", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stage1", help="train stage 1 and extract knowledge")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="train the main model on group labels")
    p.add_argument("--data", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augmentation", action="store_true")
    p.add_argument("--no-semantics", action="store_true")
    p.add_argument("--gs-only", action="store_true")
    p.add_argument("--train-fraction", type=float)
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time naive vs FFT correlation")
    p.add_argument("--sizes", default="90x160x8:7,90x160x8:31")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-maps", help="write action maps as PGM heatmaps")
    p.add_argument("--sample", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_maps)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a command is required: synth, stage1, stage2, eval, bench, export-maps")
        args.func(args)
        return 0
    except VickamError as exc:
        err = exc
    except FileNotFoundError as exc:
        err = FormatError(f"missing file: {exc.strerror}", path=exc.filename)
    except OSError as exc:
        err = FormatError(str(exc), path=getattr(exc, "filename", None))
    except FloatingPointError as exc:
        err = NumericError(str(exc))
    except (ValueError, TypeError, KeyError) as exc:
        err = UsageError(f"invalid input: {exc}")
    sys.stderr.write(json.dumps(err.to_json(), sort_keys=True) + "\n")
    return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
