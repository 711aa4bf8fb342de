"""``sprkit`` command line: gen-data, solve, train, eval and ablate.

Every command writes ``config.yaml`` (the fully resolved configuration) into
its output directory; passing that file back through ``--config`` reproduces
the outputs byte for byte.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure.

Images are 16-bit grayscale PNGs. Phase maps use the phase in ``[0, 2*pi)``
and error maps the absolute difference of shifted phases in ``[0, 2*pi]``;
both map value ``v`` to ``round(v / (2*pi) * 65535)``.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import config as C
from . import dataset as D
from . import metrics as Mx
from . import model as M
from . import solvers as S
from .autodiff import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ABLATION_AXES = ("input-size", "defocus", "dropout", "fc-width", "attention", "residual", "kfold")
SUMMARY_COLUMNS = ("axis", "value", "fold", "n_train", "n_test", "params", "flops",
                   "final_loss", "train_psnr", "test_psnr")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared helpers ----------------------------------------------------------

def to_u16(values: np.ndarray) -> np.ndarray:
    """Linear map of ``[0, 2*pi]`` onto ``[0, 65535]``."""
    return np.clip(np.round(np.asarray(values) / (2 * math.pi) * 65535.0), 0, 65535).astype(np.uint16)


def write_png16(path: Path, values: np.ndarray) -> None:
    Image.fromarray(to_u16(values)).save(path, format="PNG")


def phase_map(z: np.ndarray) -> np.ndarray:
    return Mx.to_mag_phase(np.real(z), np.imag(z))[1]


def error_map(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.abs(Mx.shifted_phase(pred) - Mx.shifted_phase(target))


def _safe_name(sid: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in sid)


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def resolve(args) -> C.RunConfig:
    """Preset, then ``--config`` file, then individual flags and ``--set`` overrides."""
    cfg = C.preset(args.preset) if args.preset else C.RunConfig()
    if args.config:
        cfg = C.load(args.config, cfg)
    if args.seed is not None:
        cfg = (cfg.with_section("data", {"seed": args.seed})
                  .with_section("train", {"seed": args.seed})
                  .with_section("solver", {"seed": args.seed}))
    for flag, (section, key) in FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg = cfg.with_section(section, {key: value})
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise C.ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg = cfg.override(key, value)
    return cfg


FLAG_MAP = {
    "synthetic": ("data", "synthetic"),
    "src": ("data", "source"),
    "encoding": ("synthesis", "encoding"),
    "defocus_L": ("synthesis", "defocus_distance"),
    "alg": ("solver", "algorithm"),
    "iters": ("solver", "max_iters"),
    "trials": ("solver", "trials"),
    "constraint": ("solver", "constraint"),
    "epochs": ("train", "epochs"),
    "batch": ("train", "batch"),
    "lr": ("train", "lr"),
    "checkpoint_every": ("train", "checkpoint_every"),
}


def _sources(cfg: C.RunConfig) -> list[tuple[str, D.SourceImage]]:
    extent = cfg.synthesis.object_extent
    if cfg.data.source:
        try:
            src = D.load_sources(cfg.data.source, extent)
        except OSError as e:
            raise DataError(f"cannot read source directory {cfg.data.source}: {e}") from e
    elif cfg.data.synthetic:
        src = D.synthetic_corpus(cfg.data.synthetic, extent, cfg.data.seed)
    else:
        raise UsageError("give --src DIR or --synthetic N")
    if not src:
        raise DataError(f"no readable images in {cfg.data.source}")
    return src


def _read(path) -> D.Dataset:
    ds = D.read_dataset(path)
    if not ds.samples:
        raise DataError(f"{path}: dataset is empty")
    return ds


def _check_model_fits(mcfg: M.ModelConfig, ds: D.Dataset) -> None:
    k, t = ds.samples[0].input.shape[0], ds.samples[0].target_re.shape[0]
    if (mcfg.input_crop, mcfg.output_extent) != (k, t):
        raise DataError(f"model expects {mcfg.input_crop}px input / {mcfg.output_extent}px output, "
                        f"dataset has {k}px / {t}px")


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve(args)
    out = Path(args.out)
    _outdir(out.parent)
    ds = D.build_dataset(_sources(cfg), cfg.synthesis)
    ds.extra = {"data": C.RunConfig.to_dict(cfg)["data"]}
    try:
        D.write_dataset(ds, out)
    except OSError as e:
        raise DataError(f"cannot write {out}: {e}") from e
    cfg.dump(out.parent / "config.yaml")
    full = D.saturation_fraction(ds)
    crop = D.crop_saturation_fraction(ds.samples, cfg.synthesis.cap)
    print(f"samples={len(ds)} saturated_fraction={full:.6g} crop_saturated_fraction={crop:.6g}")
    return EXIT_OK


# -- solve -------------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg = resolve(args)
    ds = _read(args.dataset)
    if ds.config is None:
        raise DataError(f"{args.dataset}: no synthesis metadata sidecar; full frames cannot be rebuilt")
    cfg = replace(cfg, synthesis=ds.config).with_section("solver", {"support": ds.config.object_extent})
    out = _outdir(args.out)
    (out / "phase").mkdir(exist_ok=True)
    outputs, targets, seconds, trace_rows = [], [], [], []
    for s in ds.samples:
        t0 = time.perf_counter()
        rep = S.solve(ds.measurement(s), cfg.solver)
        seconds.append(time.perf_counter() - t0)
        if not np.isfinite(rep.residuals).all():
            raise NonFiniteError(f"solver residual trace for {s.id}")
        outputs.append(rep.reconstruction.data)
        targets.append(s.target)
        trace_rows.append([s.id, rep.trial, len(rep.residuals), repr(rep.final_residual),
                           int(bool(np.all(np.diff(rep.residuals) <= 1e-10)))])
        write_png16(out / "phase" / f"{_safe_name(s.id)}.png", phase_map(rep.reconstruction.data))
    report = Mx.evaluate_set(outputs, targets, ds.ids, align=True,
                             magnitude=cfg.synthesis.encoding == "magnitude-phase", seconds=seconds)
    report.to_csv(out / "report.csv")
    with open(out / "residuals.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("id", "trial", "iterations", "final_residual", "monotone"))
        w.writerows(trace_rows)
    cfg.dump(out / "config.yaml")
    mean_res = math.fsum(float(r[3]) for r in trace_rows) / len(trace_rows)
    print(f"samples={len(ds)} mean_final_residual={mean_res:.6g} "
          f"mean_phase_psnr={report.mean['phase_psnr']:.4f}")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _dry_run(mcfg: M.ModelConfig) -> int:
    counts = M.count_params(mcfg)
    print(f"params={counts['total']} fc={counts['fc']} ur={counts['ur']} post={counts['post']} "
          f"flops={Mx.count_flops(mcfg)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    if args.resume:
        ck = M.load_checkpoint(args.resume)
        cfg = replace(cfg, model=M.ModelConfig.from_dict(ck.config["model"]))
    if args.dry_run:
        return _dry_run(cfg.model)
    if not args.dataset:
        raise UsageError("train needs a dataset (or --dry-run)")
    ds = _read(args.dataset)
    _check_model_fits(cfg.model, ds)
    out = _outdir(args.out)
    data = M.TrainData.from_samples(ds.samples)
    if args.resume:
        params, state, start = M.from_checkpoint(ck), ck.state, ck.epoch
    else:
        params, state, start = M.build(cfg.model, seed=cfg.train.seed), None, 0
    extra = {"train": cfg.train.to_dict()}

    def checkpoint(epoch, p, st):
        M.save_checkpoint(p, st, epoch, out / f"epoch{epoch:05d}.sprc", extra)

    def progress(rec):
        if args.verbose:
            print(f"epoch={rec.epoch} lr={rec.lr:.6g} loss={rec.train_loss:.6g} psnr={rec.eval_psnr:.4f}",
                  file=sys.stderr)

    res = M.train(params, data, cfg.train, state, start, checkpoint=checkpoint, on_epoch=progress)
    M.save_checkpoint(res.params, res.state, res.epochs_done, out / "final.sprc", extra)
    M.write_history(res.history, out / "history.csv", append=bool(args.resume))
    cfg.dump(out / "config.yaml")
    if res.history:
        first, last = res.history[0], res.history[-1]
        print(f"epochs={start + 1}..{last.epoch} first_loss={first.train_loss:.6g} "
              f"final_loss={last.train_loss:.6g} ratio={last.train_loss / first.train_loss:.6g} "
              f"final_psnr={last.eval_psnr:.4f}")
    else:
        print(f"nothing to do: checkpoint already at epoch {start}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = resolve(args)
    ck = M.load_checkpoint(args.checkpoint)
    params = M.from_checkpoint(ck)
    cfg = replace(cfg, model=params.cfg)
    ds = _read(args.dataset)
    _check_model_fits(params.cfg, ds)
    out = _outdir(args.out)
    (out / "phase").mkdir(exist_ok=True)
    (out / "error").mkdir(exist_ok=True)
    data = M.TrainData.from_samples(ds.samples)
    preds = M.predict(params, data.inputs)
    if not np.isfinite(preds).all():
        raise NonFiniteError("model output")
    targets = [s.target for s in ds.samples]
    for s, p, t in zip(ds.samples, preds, targets):
        write_png16(out / "phase" / f"{_safe_name(s.id)}.png", phase_map(p))
        write_png16(out / "error" / f"{_safe_name(s.id)}.png", error_map(p, t))
    enc = ds.samples[0].encoding
    report = Mx.evaluate_set(list(preds), targets, ds.ids, magnitude=enc == "magnitude-phase")
    report.to_csv(out / "report.csv")
    cfg.dump(out / "config.yaml")
    print(f"samples={len(ds)} " + " ".join(f"{k}={v:.6g}" for k, v in report.mean.items()))
    return EXIT_OK


# -- ablate ------------------------------------------------------------------

def _parse_grid(axis: str, grid: str) -> list:
    items = [g.strip() for g in grid.split(",") if g.strip()]
    if not items:
        raise UsageError("--grid must list at least one value")
    try:
        return [float(v) if axis == "defocus" else int(v) for v in items]
    except ValueError:
        raise UsageError(f"invalid grid value in {grid!r} for axis {axis}") from None


def _point(cfg: C.RunConfig, axis: str, value) -> C.RunConfig:
    m = cfg.model.to_dict()
    if axis == "input-size":
        m["input_crop"] = value
        cfg = cfg.with_section("synthesis", {"crop": value})
    elif axis == "defocus":
        cfg = cfg.with_section("synthesis", {"defocus_distance": value})
    elif axis == "dropout":
        m["dropout_count"] = value
    elif axis == "fc-width":
        side = math.isqrt(value)
        r = m["shuffle_factor"]
        n_up, ext = 0, side
        while ext < m["output_extent"]:
            ext *= r
            n_up += 1
        if side * side != value or ext != m["output_extent"]:
            raise UsageError(f"fc-width {value}: sqrt must reach the output extent by factors of {r}")
        m["fc_width"] = value
        m["ur_blocks"] = max(m["ur_blocks"], n_up, 1)
        m["upsample_blocks"] = n_up
    elif axis == "attention":
        m["attention_per_ur"] = value
    elif axis == "residual":
        m["residual_units_per_ur"] = value
    try:
        return replace(cfg, model=M.ModelConfig.from_dict(m))
    except ValueError as e:
        raise UsageError(f"axis {axis} value {value}: {e}") from e


def _fit(cfg: C.RunConfig, train_s, test_s) -> tuple[float, float, float]:
    params = M.build(cfg.model, seed=cfg.train.seed)
    tr = M.TrainData.from_samples(train_s)
    res = M.train(params, tr, cfg.train)
    test_psnr = M.mean_phase_psnr(res.params, M.TrainData.from_samples(test_s)) if test_s else math.nan
    return res.history[-1].train_loss, res.history[-1].eval_psnr, test_psnr


def cmd_ablate(args) -> int:
    cfg = resolve(args)
    axis = args.axis
    values = _parse_grid(axis, args.grid)
    out = _outdir(args.out)
    rows = []
    if axis == "kfold":
        if len(values) != 1 or values[0] < 2:
            raise UsageError("kfold takes a single K >= 2 in --grid")
        K = values[0]
        ds = D.build_dataset(_sources(cfg), cfg.synthesis)
        plan = D.split_kfold(ds.ids, K, cfg.data.seed)
        verify_partition(plan, ds.ids)
        counts, flops = M.count_params(cfg.model)["total"], Mx.count_flops(cfg.model)
        for f in range(K):
            loss = trp = tep = math.nan
            if not args.dry_run:
                _check_model_fits(cfg.model, ds)
                loss, trp, tep = _fit(cfg, ds.by_id(plan.train[f]), ds.by_id(plan.test[f]))
            rows.append([axis, K, f + 1, len(plan.train[f]), len(plan.test[f]), counts, flops, loss, trp, tep])
    else:
        for v in values:
            pc = _point(cfg, axis, v)
            counts, flops = M.count_params(pc.model)["total"], Mx.count_flops(pc.model)
            loss = trp = math.nan
            n = 0
            if not args.dry_run:
                ds = D.build_dataset(_sources(pc), pc.synthesis)
                _check_model_fits(pc.model, ds)
                n = len(ds)
                loss, trp, _ = _fit(pc, ds.samples, [])
            rows.append([axis, v, "", n, 0, counts, flops, loss, trp, math.nan])
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow(["" if isinstance(x, float) and math.isnan(x) else (repr(x) if isinstance(x, float) else x)
                        for x in r])
    cfg.dump(out / "config.yaml")
    for r in rows:
        print(" ".join(f"{k}={'' if isinstance(x, float) and math.isnan(x) else x}"
                       for k, x in zip(SUMMARY_COLUMNS, r)))
    return EXIT_OK


def verify_partition(plan: D.FoldPlan, ids: Sequence[str]) -> None:
    """Test folds are disjoint and cover ``ids``; each train set is the complement."""
    seen = [i for fold in plan.test for i in fold]
    if sorted(seen) != sorted(ids) or len(set(seen)) != len(seen):
        raise DataError("k-fold test sets do not partition the dataset")
    for tr, te in zip(plan.train, plan.test):
        if set(tr) & set(te) or len(tr) + len(te) != len(ids):
            raise DataError("k-fold train set is not the complement of its test set")


# -- entry point -------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=C.PRESETS, help="base configuration (default: full)")
    p.add_argument("--seed", type=int, help="seed for data, training and solver trials")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic sources")
    p.add_argument("--src", help="directory of source images")
    p.add_argument("--encoding", choices=D.ENCODINGS)
    p.add_argument("--defocus-L", dest="defocus_L", type=float, metavar="METRES",
                   help="defocus distance; 0 disables the kernel")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dry-run", action="store_true", help="print params and FLOPs, then exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sprkit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthesize an SPR1 dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", required=True, help="output .spr1 path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve", help="run a classical solver on every sample")
    _common(p)
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alg", choices=S.ALGORITHMS)
    p.add_argument("--iters", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--constraint", choices=S.CONSTRAINTS)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the network")
    _common(p)
    _train_flags(p)
    p.add_argument("dataset", nargs="?")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", metavar="CKPT", help="continue from an SPRC checkpoint")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch to stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    _common(p)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--grid", required=True, help="comma-separated values (K for kfold)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, C.ConfigError) as e:
        print(f"sprkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, D.DatasetFormatError, M.CheckpointError, FileNotFoundError) as e:
        print(f"sprkit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, M.TrainingError, FloatingPointError) as e:
        print(f"sprkit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
