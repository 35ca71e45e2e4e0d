"""Command-line entry point: ``python -m boxseq <command>``.

Commands: ``gen``, ``train``, ``eval``, ``compare``, ``gradcheck`` and ``vocab``.

Exit codes:
    0  success
    2  configuration error (bad field, bad flag value, run dir already used)
    3  I/O or dataset-format error
    4  numeric abort during training (last good checkpoint is named)
    5  checkpoint incompatible with the dataset or vocabulary
    6  reports cover different splits
    7  gradient check failed
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluation as E
from . import model as M
from . import scenegen as S
from . import train as T
from .codec import Vocab

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_SPLIT, EXIT_GRADCHECK = 2, 3, 4, 5, 6, 7
RUN_ROOT_ENV = "BOXSEQ_RUN_ROOT"

log = logging.getLogger("boxseq")


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: not valid JSON ({e})", EXIT_CONFIG) from e
    if not isinstance(d, dict):
        raise CliError(f"{path}: expected a JSON object", EXIT_CONFIG)
    return d


# -- run directory -------------------------------------------------------------------

class RunDir:
    """Layout: ``config.json``, ``checkpoints/``, ``logs/``, ``reports/``, ``overlays/``."""

    LOCK = ".lock"

    def __init__(self, root):
        self.root = Path(root)
        self._locked = False

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def overlays(self) -> Path:
        return self.root / "overlays"

    def lock(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.root / self.LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.root} is locked by another command "
                           f"(remove {self.LOCK} if that process is gone)", EXIT_CONFIG) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._locked = True

    def unlock(self) -> None:
        if self._locked:
            (self.root / self.LOCK).unlink(missing_ok=True)
            self._locked = False

    def __enter__(self):
        self.lock()
        return self

    def __exit__(self, *exc):
        self.unlock()

    def latest_checkpoint(self) -> Path | None:
        ckpts = sorted(self.checkpoints.glob("step_*.ckpt"))
        return ckpts[-1] if ckpts else None


def default_run_dir(name: str) -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / name


# -- gen -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    d = _load_json(args.config)
    for flag, key in (("seed", "seed"), ("n_scenes", "n_scenes"), ("test_fraction", "test_fraction")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = v
    try:
        cfg = S.GenConfig.from_dict(d)
    except TypeError as e:
        raise CliError(f"generator config: {e}", EXIT_CONFIG) from e
    vocab = Vocab.default()
    ds = S.build_dataset(cfg, vocab)
    out = Path(args.out)
    S.write_dataset(ds, out, vocab)
    hist = S.state_histogram(ds)
    with open(out / "histogram.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["category", "state", "train", "test"], lineterminator="\n")
        w.writeheader()
        w.writerows(hist)
    n_test = sum(1 for s in ds.scenes if ds.split[s.scene_id] == "test")
    n_objects = sum(len(s.objects) for s in ds.scenes)
    summary = {
        "n_scenes": len(ds.scenes),
        "n_test_scenes": n_test,
        "test_fraction_target": cfg.test_fraction,
        "test_fraction_realized": n_test / len(ds.scenes),
        "n_objects": n_objects,
        "n_samples": len(ds.samples),
        "n_expressions": ds.n_expressions(),
        "n_train_samples": len(ds.samples_in("train")),
        "n_test_samples": len(ds.samples_in("test")),
        "n_ambiguity_skips": 12 * n_objects - len(ds.samples),
        "samples_per_task": {t: sum(x.task == t for x in ds.samples) for t in ("detection", "affordance")},
    }
    (out / "summary.json").write_text(_dump_json(summary))
    print(f"wrote {summary['n_samples']} samples over {summary['n_scenes']} scenes to {out}")
    return 0


# -- train ---------------------------------------------------------------------------

_TRAIN_FLAGS = ("steps", "seed", "alpha", "beta", "gamma", "delta", "lr", "batch_size",
                "scenes_per_batch", "checkpoint_every", "eval_every", "head_variant",
                "prompt_variant", "warmup_fraction")


def _train_config(args) -> T.TrainConfig:
    d = _load_json(args.config)
    if args.regime is not None:
        d["regime"] = args.regime.replace("-", "_")
    for k in _TRAIN_FLAGS:
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    if args.no_squash:
        d["squash"] = False
    try:
        return T.TrainConfig.from_dict(d)
    except TypeError as e:
        raise CliError(f"train config: {e}", EXIT_CONFIG) from e


def _read_dataset(path) -> S.Dataset:
    try:
        return S.read_dataset(path)
    except FileNotFoundError as e:
        raise CliError(f"dataset not found: {e.filename}", EXIT_IO) from e


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _read_dataset(args.data)
    run = RunDir(args.run_dir or default_run_dir(f"{cfg.regime}-seed{cfg.seed}"))
    snapshot = {"train": cfg.to_dict(), "dataset": {"path": str(args.data),
                                                    "fingerprint": T.dataset_fingerprint(ds)}}
    with run:
        resume_from = None
        if run.config_path.exists():
            if not args.resume:
                raise CliError(f"{run.root} already holds a run; pass --resume to continue it",
                               EXIT_CONFIG)
            old = json.loads(run.config_path.read_text())
            if old["train"] != snapshot["train"] or \
                    old["dataset"]["fingerprint"] != snapshot["dataset"]["fingerprint"]:
                raise CliError("--resume with a different config or dataset", EXIT_CONFIG)
            resume_from = run.latest_checkpoint()
        else:
            run.config_path.write_text(_dump_json(snapshot))
        vocab = Vocab.default()
        on_eval = None
        if cfg.eval_every:
            run.logs.mkdir(parents=True, exist_ok=True)
            eval_log = run.logs / "eval_log.csv"
            if resume_from is None:
                eval_log.write_text(",".join(EVAL_LOG_FIELDS) + "\n")

            def on_eval(step, params, mcfg):
                rec = eval_record(step, params, mcfg, ds, cfg, vocab)
                with open(eval_log, "a") as f:
                    f.write(",".join(str(rec[k]) for k in EVAL_LOG_FIELDS) + "\n")
                return rec
        try:
            _, _, records, _ = T.train_run(ds, cfg, vocab, out_dir=run.root,
                                           resume_from=resume_from, on_eval=on_eval)
        except T.TrainingAborted as e:
            raise CliError(f"training aborted: {e}; last good checkpoint: {e.last_checkpoint}",
                           EXIT_NUMERIC) from e
    last = records[-1] if records else None
    if last:
        print(f"step {last['step']}: total {last['total']:.6f} clm {last['clm']:.6f} "
              f"arl {last['arl']:.6f}; checkpoints in {run.checkpoints}")
    return 0


EVAL_LOG_FIELDS = ("step", "split", "loss", "acc_detection", "acc_affordance",
                   "exc_detection", "exc_affordance")


def eval_record(step, params, mcfg, ds, cfg, vocab, split="test") -> dict:
    loss = T.split_loss(params, mcfg, ds, split, cfg, vocab)
    rep = E.evaluate_params(params, mcfg, ds, split, vocab)
    m = rep.metrics
    return {"step": step, "split": split, "loss": repr(loss["total"]),
            "acc_detection": m["detection"]["acc@0.5"], "acc_affordance": m["affordance"]["acc@0.5"],
            "exc_detection": m["detection"]["exception_rate"],
            "exc_affordance": m["affordance"]["exception_rate"]}


# -- eval ----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ds = _read_dataset(args.data)
    ckpt = Path(args.checkpoint)
    run = RunDir(args.run_dir or ckpt.resolve().parent.parent)
    try:
        _, _, _, meta = M.load_checkpoint(ckpt)
    except FileNotFoundError as e:
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_IO) from e
    regime = meta.get("regime", "clm_arl")
    with run:
        rep = E.evaluate(ckpt, ds, args.split, seed=args.seed)
        run.reports.mkdir(parents=True, exist_ok=True)
        out = run.reports / f"eval_{args.split}_{ckpt.stem}.jsonl"
        rep.write(out)
        for r in E.pick_overlay_samples(rep.samples, args.overlays, args.seed):
            run.overlays.mkdir(parents=True, exist_ok=True)
            (run.overlays / f"{ckpt.stem}_sample{r.sample_id:05d}.svg").write_text(
                E.overlay_for_result(ds, r, regime))
    for t in ("detection", "affordance"):
        m = rep.metrics[t]
        if m["n"]:
            print(f"{t:<11} n={m['n']:<4} acc@0.5={m['acc@0.5']:.3f} "
                  f"exception_rate={m['exception_rate']:.3f} mean_iou={m['mean_iou']:.3f}")
        else:
            print(f"{t:<11} n=0")
    print(f"report: {out}")
    return 0


# -- compare -------------------------------------------------------------------------

def merge_curves(paths, labels) -> str:
    rows = []
    for path, label in zip(paths, labels):
        for r in T.read_train_log(path):
            rows.append((r["step"], label, r))
    rows.sort(key=lambda x: (x[0], x[1]))
    lines = ["step,regime," + ",".join(T.LOG_FIELDS[1:])]
    for step, label, r in rows:
        lines.append(f"{step},{label}," + ",".join(repr(r[k]) for k in T.LOG_FIELDS[1:]))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    try:
        a = E.EvalReport.read(args.report_a)
        b = E.EvalReport.read(args.report_b)
    except FileNotFoundError as e:
        raise CliError(f"report not found: {e.filename}", EXIT_IO) from e
    rows = E.compare(a, b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    la, lb = args.labels
    table = E.render_table(rows, la, lb)
    (out / "compare.txt").write_text(table)
    (out / "compare.csv").write_text(E.rows_to_csv(rows))
    if args.curves:
        (out / "curves.csv").write_text(merge_curves(args.curves, args.labels))
    print(table, end="")
    return 0


# -- gradcheck / vocab ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    cfg = T.TrainConfig.from_dict(_load_json(args.config))
    rep = T.gradcheck(cfg, seed=args.seed, n_probes=args.probes, fault=args.inject_fault)
    print(json.dumps(rep, indent=2, sort_keys=True, default=float))
    if not rep["passed"]:
        raise CliError(f"gradient check failed: max relative error {rep['max_rel_err']:.3e} "
                       f"in tensor {rep['worst_tensor']}", EXIT_GRADCHECK)
    return 0


def cmd_vocab(args) -> int:
    text = Vocab.default().dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxseq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON generator config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--test-fraction", type=float)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="dataset directory written by `gen`")
    t.add_argument("--config", help="JSON training config; flags override it")
    t.add_argument("--run-dir", help=f"run directory (default ${RUN_ROOT_ENV}/<regime>-seed<seed>)")
    t.add_argument("--regime", choices=["clm", "clm-arl", "clm_arl"])
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    for w in ("alpha", "beta", "gamma", "delta", "lr", "warmup_fraction"):
        t.add_argument("--" + w.replace("_", "-"), type=float, dest=w)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--scenes-per-batch", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--head-variant", choices=list(M.HEAD_VARIANTS))
    t.add_argument("--prompt-variant", choices=["simple", "concrete"])
    t.add_argument("--no-squash", action="store_true", help="raw (unsquashed) box head output")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--run-dir", help="defaults to the checkpoint's run directory")
    e.add_argument("--overlays", type=int, default=0, help="number of SVG overlays to render")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="compare two evaluation reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--out", required=True)
    c.add_argument("--labels", nargs=2, default=["clm", "clm_arl"])
    c.add_argument("--curves", nargs=2, metavar=("LOG_A", "LOG_B"),
                   help="training logs to merge into curves.csv")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("gradcheck", help="finite-difference gradient check")
    k.add_argument("--config")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--probes", type=int, default=200)
    k.add_argument("--inject-fault", metavar="TENSOR", help=argparse.SUPPRESS)
    k.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("vocab", help="print the vocabulary, one token per line")
    v.add_argument("--out")
    v.set_defaults(func=cmd_vocab)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except E.CheckpointMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except E.SplitMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SPLIT
    except M.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (S.SchemaViolation, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (T.TrainError, S.SceneError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
