"""Command-line entry point: ``crl <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or format error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data_io, metrics, networks, training
from .sgm import SgmParams, run_sgm

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        _err(f"output directory {out} is not writable: {exc}")
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    if args.spec:
        raw = json.loads(Path(args.spec).read_text())
        rects = [data_io.Rect(**r) for r in raw.pop("rects", [])]
        base = data_io.SceneSpec(rects=rects, **raw)
        specs = [data_io.SceneSpec(base.width, base.height, base.background, base.rects,
                                   int(rng.integers(0, 2**31 - 1)), base.noise_sigma) for _ in range(args.count)]
    else:
        opts = data_io.PRESETS[args.preset]
        specs = [data_io.random_scene(rng, **opts) for _ in range(args.count)]
    ids = []
    for i, spec in enumerate(specs):
        try:
            sample = data_io.generate_stereogram(spec, sample_id=f"{i:06d}")
        except ValueError as exc:
            _err(str(exc))
            return EXIT_USAGE
        data_io.save_sample(out, sample, "." + args.disp_format)
        ids.append(sample.id)
    source = f"spec={args.spec}" if args.spec else f"preset={args.preset}"
    lines = [f"# crlstereo synth seed={args.seed} {source} count={args.count}"] + ids
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(ids)} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _resolve_dataset(spec: str, base: Path, seed: int) -> list:
    if spec.startswith("synth:"):
        parts = spec.split(":")
        count = int(parts[1])
        sseed = int(parts[2]) if len(parts) > 2 else seed
        preset = parts[3] if len(parts) > 3 else "desk"
        return data_io.synthesize_dataset(count, sseed, preset)
    path = Path(spec)
    if not path.is_absolute():
        path = base / path
    if not path.is_dir():
        raise training.ConfigError(f"dataset directory {path} does not exist")
    fmt = "png" if any((path / "disp").glob("*.png")) else "pfm"
    return data_io.load_dataset(path, fmt, screen=True)


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    try:
        cfg = training.parse_config(cfg_path.read_text())
    except OSError as exc:
        _err(f"cannot read config: {exc}")
        return EXIT_USAGE
    except training.ConfigError as exc:
        _err(f"{cfg_path}: {exc}")
        return EXIT_USAGE
    out = Path(args.out or cfg.out)
    if not out.is_absolute() and args.out is None:
        out = cfg_path.parent / out
    out.mkdir(parents=True, exist_ok=True)
    phases = training.parse_schedule(cfg.schedule)
    train_sets, val_sets = {}, {}
    try:
        for tag in sorted({p.tag for p in phases}):
            if tag not in cfg.datasets:
                raise training.ConfigError(f"no dataset configured for tag {tag!r}")
            samples = _resolve_dataset(cfg.datasets[tag], cfg_path.parent, cfg.seed)
            train_sets[tag], val_sets[tag] = training.split_dataset(samples, cfg.train_frac, cfg.seed)
    except (training.ConfigError, data_io.IngestionError, data_io.FormatError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE

    config = networks.CRLConfig(cfg.width1, cfg.width2, cfg.max_disp, -1, cfg.scale_values)
    model = networks.CRLModel.build(config, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    log_path = Path(cfg.log) if cfg.log else out / "train_log.csv"
    summary = [["phase", "label", "stage1_sha256", "stage2_sha256", "val_epe_stage1", "val_epe_stage2"]]
    step = 0
    with open(log_path, "w") as log_fh:
        log_fh.write(f"# seed={cfg.seed} schedule={cfg.schedule}\n")
        log_fh.write(",".join(training.LOG_COLUMNS) + "\n")
        for i, phase in enumerate(phases):
            before = (model.stage1.checksum(), model.stage2.checksum())
            try:
                hist = training.run_phase(model, phase, train_sets, cfg, rng=rng, step_offset=step,
                                          on_log=lambda line: log_fh.write(line + "\n"))
            except training.DivergenceError as exc:
                _err(str(exc))
                return EXIT_DIVERGED
            step += len(hist)
            after = (model.stage1.checksum(), model.stage2.checksum())
            ev = training.evaluate_model(model, val_sets[phase.tag])
            ckpt = out / f"phase{i + 1}_{phase.label}.ckpt"
            networks.save_checkpoint(ckpt, model, meta={"phase": phase.label, "index": i + 1, "seed": cfg.seed})
            frozen = "unchanged" if phase.stage == 2 and after[0] == before[0] else "updated"
            print(f"phase {i + 1} {phase.label}: stage1 {frozen} ({after[0][:12]}), "
                  f"val EPE d1={ev['stage1']:.4f} d2={ev['stage2']:.4f} -> {ckpt.name}")
            summary.append([str(i + 1), phase.label, after[0], after[1], repr(ev["stage1"]), repr(ev["stage2"])])
    networks.save_checkpoint(out / "final.ckpt", model, meta={"phase": "final", "seed": cfg.seed})
    (out / "phases.csv").write_text("\n".join(",".join(r) for r in summary) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- infer


def cmd_infer(args) -> int:
    try:
        left = data_io.read_image(args.left)
        right = data_io.read_image(args.right)
    except OSError as exc:
        _err(f"cannot read images: {exc}")
        return EXIT_USAGE
    if left.shape != right.shape:
        _err(f"left {left.shape} and right {right.shape} sizes differ")
        return EXIT_USAGE
    fmt = args.format or Path(args.out).suffix.lstrip(".").lower()
    if fmt not in ("pfm", "png"):
        _err(f"cannot infer output format from {args.out!r}; use --format")
        return EXIT_USAGE
    out_path = Path(args.out)
    if out_path.suffix.lower() != "." + fmt:
        out_path = out_path.with_suffix("." + fmt)
    res = None
    if args.method == "sgm":
        sample = data_io.StereoSample("input", left, right, np.zeros(left.shape[1:], np.float32),
                                      np.ones(left.shape[1:], bool))
        dm = run_sgm(sample, SgmParams(max_disp=args.max_disp))
        disp, valid = dm.numpy()[0, 0], dm.valid_mask[0, 0]
    else:
        if not args.ckpt:
            _err("--ckpt is required for --method crl")
            return EXIT_USAGE
        try:
            model, _ = networks.load_checkpoint(args.ckpt)
        except (OSError, networks.CheckpointError) as exc:
            _err(str(exc))
            return EXIT_USAGE
        disp, res = networks.predict(model, left, right, stage=args.stage)
        valid = None
    data_io.write_disparity(out_path, disp, valid)
    if args.dump_residual:
        if res is None:
            _err("--dump-residual needs --stage 2 with --method crl")
            return EXIT_USAGE
        data_io.write_pfm(args.dump_residual, res)
    print(f"wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _disparity_files(d: Path) -> dict[str, Path]:
    if (d / "disp").is_dir():
        d = d / "disp"
    return {f.stem: f for f in sorted(d.iterdir()) if f.suffix.lower() in (".pfm", ".png")}


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        _err("--pred and --gt must be directories")
        return EXIT_USAGE
    preds, gts = _disparity_files(pred_dir), _disparity_files(gt_dir)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        _err(f"unmatched ids: {', '.join(unmatched)}")
        return EXIT_USAGE
    if not gts:
        _err("no disparity files found")
        return EXIT_USAGE
    entries = []
    for sid in sorted(gts):
        try:
            gt, valid = data_io.read_disparity(gts[sid])
            t0 = time.perf_counter()
            pred, _ = data_io.read_disparity(preds[sid])
        except (OSError, data_io.FormatError) as exc:
            _err(str(exc))
            return EXIT_USAGE
        if pred.shape != gt.shape:
            _err(f"{sid}: prediction {pred.shape} vs ground truth {gt.shape}")
            return EXIT_USAGE
        entries.append(metrics.evaluate_sample(args.method, sid, pred, gt, valid, args.mode,
                                               time.perf_counter() - t0))
    text = metrics.render_csv(metrics.make_report(entries))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .verify import OPS, run_gradchecks

    ops = [o for o in args.ops.split(",") if o] if args.ops else None
    if ops and any(o not in OPS for o in ops):
        _err(f"unknown operators; choose from {', '.join(OPS)}")
        return EXIT_USAGE
    results = run_gradchecks(ops, seed=args.seed, eps=args.eps)
    print(f"# gradcheck seed={args.seed} eps={args.eps} tol={args.tol}")
    print(f"{'op':<22}{'max_rel_error':>16}  status")
    worst = None
    for r in results:
        ok = r["max_rel_error"] < args.tol
        print(f"{r['op']:<22}{r['max_rel_error']:>16.3e}  {'pass' if ok else 'FAIL'}")
        if not ok and (worst is None or r["max_rel_error"] > worst["max_rel_error"]):
            worst = r
    if worst is not None:
        print(f"worst: {worst['op']} input {worst['input']} coordinate {worst['coord']} "
              f"error {worst['max_rel_error']:.3e}")
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- screen / report


def cmd_screen(args) -> int:
    d = Path(args.gt)
    if not d.is_dir():
        _err(f"{d} is not a directory")
        return EXIT_USAGE
    kept, removed = [], []
    for sid, f in _disparity_files(d).items():
        try:
            disp, valid = data_io.read_disparity(f)
        except (OSError, data_io.FormatError) as exc:
            _err(str(exc))
            return EXIT_USAGE
        keep = training.screen_sample(disp, valid, args.threshold, args.fraction)
        (kept if keep else removed).append(sid)
    print(f"kept {len(kept)} removed {len(removed)}")
    for sid in removed:
        print(f"removed {sid}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for f in args.csv:
        try:
            reports += metrics.parse_csv(Path(f).read_text())
        except (OSError, ValueError) as exc:
            _err(f"{f}: {exc}")
            return EXIT_USAGE
    print(metrics.render_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crl", description="Cascade residual stereo toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic stereogram dataset")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--spec", help="JSON scene description")
    g.add_argument("--preset", default="desk", choices=sorted(data_io.PRESETS))
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--disp-format", choices=("pfm", "png"), default="pfm")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run a staged training schedule")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict a disparity map for one stereo pair")
    s.add_argument("--ckpt")
    s.add_argument("--left", required=True)
    s.add_argument("--right", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stage", type=int, choices=(1, 2), default=2)
    s.add_argument("--dump-residual")
    s.add_argument("--format", choices=("pfm", "png"))
    s.add_argument("--method", choices=("crl", "sgm"), default="crl")
    s.add_argument("--max-disp", type=int, default=64, help="SGM search range")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="EPE / 3PE of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mode", choices=("plain", "kitti"), default="plain")
    s.add_argument("--method", default="pred")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference certification of every operator")
    s.add_argument("--ops")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("screen", help="apply the large-disparity screening rule")
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float, default=300.0)
    s.add_argument("--fraction", type=float, default=0.25)
    s.set_defaults(func=cmd_screen)

    s = sub.add_parser("report", help="render evaluation CSVs as a table")
    s.add_argument("csv", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
