"""Greedy-decoding evaluation, Acc@0.5 / exception-rate reports, comparison and overlays.

Reports are line-delimited JSON: the first line is the aggregate header, every
following line one :class:`SampleResult` in sample-id order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import model as M
from .codec import EXCEPTION_REASONS, TASKS, BoxException, Vocab, parse_box, response_text
from .geometry import BoxN, iou
from .scenegen import Dataset, SceneSpec, rasterize

IOU_THRESHOLD = 0.5
DECODE_CHUNK = 64


class EvalError(ValueError):
    pass


class CheckpointMismatch(EvalError):
    pass


class SplitMismatch(EvalError):
    pass


@dataclass(frozen=True)
class SampleResult:
    sample_id: int
    scene_id: int
    task: str
    gold: list
    pred: list | None
    exception: str | None
    iou: float
    hit: bool
    text: str


def score(sample, response_ids, vocab: Vocab) -> SampleResult:
    """Parse one decoded response and score it against the sample's gold box."""
    parsed = parse_box(response_ids, vocab)
    text = response_text(response_ids, vocab)
    if isinstance(parsed, BoxException):
        return SampleResult(sample.sample_id, sample.scene_id, sample.task, sample.gold.to_list(),
                            None, parsed.reason, 0.0, False, text)
    v = min(max(iou(parsed, sample.gold), 0.0), 1.0)
    return SampleResult(sample.sample_id, sample.scene_id, sample.task, sample.gold.to_list(),
                        parsed.to_list(), None, v, v >= IOU_THRESHOLD, text)


def summarize(results) -> dict:
    """Per-task and overall aggregates; tasks with no samples get null metrics."""
    out = {}
    groups = {t: [r for r in results if r.task == t] for t in TASKS}
    groups["overall"] = list(results)
    for name, rs in groups.items():
        n = len(rs)
        reasons = {k: sum(r.exception == k for r in rs) for k in EXCEPTION_REASONS}
        n_exc = sum(reasons.values())
        out[name] = {
            "n": n,
            "hits": sum(r.hit for r in rs),
            "exceptions": n_exc,
            "acc@0.5": sum(r.hit for r in rs) / n if n else None,
            "exception_rate": n_exc / n if n else None,
            "mean_iou": float(sum(r.iou for r in rs) / n) if n else None,
            "exceptions_by_reason": reasons,
        }
    return out


@dataclass
class EvalReport:
    checkpoint: str
    dataset: str
    split: str
    seed: int
    metrics: dict
    samples: list

    def header(self) -> dict:
        return {"checkpoint": self.checkpoint, "dataset": self.dataset, "split": self.split,
                "seed": self.seed, "tasks": {t: self.metrics[t] for t in TASKS},
                "overall": self.metrics["overall"]}

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.samples]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "EvalReport":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise EvalError(f"{path}: empty report")
        h = json.loads(lines[0])
        samples = [SampleResult(**json.loads(x)) for x in lines[1:]]
        metrics = dict(h["tasks"])
        metrics["overall"] = h["overall"]
        return cls(h["checkpoint"], h["dataset"], h["split"], h["seed"], metrics, samples)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def check_compatible(mcfg: M.ModelConfig, ds: Dataset, vocab: Vocab) -> None:
    if mcfg.vocab_size != len(vocab):
        raise CheckpointMismatch(f"checkpoint vocab size {mcfg.vocab_size} != {len(vocab)}")
    if mcfg.grid_size != ds.config.grid_size:
        raise CheckpointMismatch(
            f"checkpoint grid size {mcfg.grid_size} != dataset grid size {ds.config.grid_size}")


def decode_samples(params, mcfg: M.ModelConfig, ds: Dataset, samples, vocab: Vocab,
                   max_len: int = 64) -> dict[int, list[int]]:
    """Greedy responses keyed by sample id, decoded in scene-grouped chunks."""
    by_scene: dict[int, list] = {}
    for x in samples:
        by_scene.setdefault(x.scene_id, []).append(x)
    out = {}
    for sid in sorted(by_scene):
        grid = rasterize(ds.scene(sid), ds.config.grid_size)[None]
        group = by_scene[sid]
        for i in range(0, len(group), DECODE_CHUNK):
            chunk = group[i:i + DECODE_CHUNK]
            resp = M.decode_batch(params, mcfg, vocab, grid, [0] * len(chunk),
                                  [x.prompt for x in chunk], max_len)
            out.update({x.sample_id: r for x, r in zip(chunk, resp)})
    return out


def evaluate_params(params, mcfg: M.ModelConfig, ds: Dataset, split: str = "test",
                    vocab: Vocab | None = None, checkpoint_id: str = "in-memory",
                    seed: int = 0) -> EvalReport:
    vocab = vocab or Vocab.default()
    check_compatible(mcfg, ds, vocab)
    samples = sorted(ds.samples_in(split), key=lambda x: x.sample_id)
    if not samples:
        raise EvalError(f"split {split!r} has no samples")
    decoded = decode_samples(params, mcfg, ds, samples, vocab)
    results = [score(x, decoded[x.sample_id], vocab) for x in samples]
    return EvalReport(checkpoint_id, _dataset_id(ds), split, seed, summarize(results), results)


def evaluate(checkpoint_path, ds: Dataset, split: str = "test", vocab: Vocab | None = None,
             seed: int = 0) -> EvalReport:
    """Load a checkpoint and evaluate it on ``split``."""
    mcfg, params, _, _ = M.load_checkpoint(checkpoint_path)
    return evaluate_params(params, mcfg, ds, split, vocab, file_digest(checkpoint_path), seed)


def _dataset_id(ds: Dataset) -> str:
    from .train import dataset_fingerprint

    return dataset_fingerprint(ds)


# -- comparison ----------------------------------------------------------------------

COMPARE_FIELDS = ("task", "n", "acc_a", "acc_b", "delta_acc", "exc_a", "exc_b", "delta_exc",
                  "miou_a", "miou_b", "delta_miou")


def _delta(a, b):
    return None if a is None or b is None else b - a


def compare(a: EvalReport, b: EvalReport) -> list[dict]:
    """Per-task deltas; every delta is signed so that positive means ``b`` is better.

    For the exception rate that means ``delta_exc = exc_a - exc_b``.
    """
    if (a.dataset, a.split, a.seed) != (b.dataset, b.split, b.seed):
        raise SplitMismatch(f"reports differ in dataset/split/seed: "
                            f"{(a.dataset, a.split, a.seed)} vs {(b.dataset, b.split, b.seed)}")
    if [r.sample_id for r in a.samples] != [r.sample_id for r in b.samples]:
        raise SplitMismatch("reports cover different samples")
    rows = []
    for t in TASKS + ("overall",):
        ma, mb = a.metrics[t], b.metrics[t]
        rows.append({
            "task": t, "n": ma["n"],
            "acc_a": ma["acc@0.5"], "acc_b": mb["acc@0.5"],
            "delta_acc": _delta(ma["acc@0.5"], mb["acc@0.5"]),
            "exc_a": ma["exception_rate"], "exc_b": mb["exception_rate"],
            "delta_exc": _delta(mb["exception_rate"], ma["exception_rate"]),
            "miou_a": ma["mean_iou"], "miou_b": mb["mean_iou"],
            "delta_miou": _delta(ma["mean_iou"], mb["mean_iou"]),
        })
    return rows


def _pct(v):
    return "-" if v is None else f"{100 * v:.1f}"


def render_table(rows, label_a: str = "A", label_b: str = "B") -> str:
    """Plain-text table: accuracy and exception rate (%) per task, then mean IoU."""
    head = (f"{'task':<12}{'n':>5} | {'Acc ' + label_a:>12}{'Acc ' + label_b:>12}{'dAcc':>8} | "
            f"{'Exc ' + label_a:>12}{'Exc ' + label_b:>12}{'dExc':>8} | "
            f"{'mIoU ' + label_a:>13}{'mIoU ' + label_b:>13}")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['task']:<12}{r['n']:>5} | {_pct(r['acc_a']):>12}{_pct(r['acc_b']):>12}"
                     f"{_pct(r['delta_acc']):>8} | {_pct(r['exc_a']):>12}{_pct(r['exc_b']):>12}"
                     f"{_pct(r['delta_exc']):>8} | {_pct(r['miou_a']):>13}{_pct(r['miou_b']):>13}")
    lines.append("all values in %; positive deltas favour " + label_b)
    return "\n".join(lines) + "\n"


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARE_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in COMPARE_FIELDS})
    return buf.getvalue()


# -- overlays ------------------------------------------------------------------------

GOLD_COLOR = "#2ca02c"
PRED_COLORS = {"clm_arl": "#17becf", "clm": "#ff7f0e"}
SVG_ELEMENTS = frozenset({"svg", "rect", "text", "g", "title"})


def _rect(b, size, stroke, width=2, dash=None, fill="none"):
    x1, y1, x2, y2 = (v * size for v in b)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" height="{y2 - y1:.2f}" '
            f'fill="{fill}" stroke="{stroke}" stroke-width="{width}"{extra}/>')


def render_overlay(scene: SceneSpec, gold: BoxN, prediction, regime: str = "clm_arl",
                   size: int = 400, caption: str | None = None) -> str:
    """SVG of a scene with the gold box and either a predicted box or an exception badge.

    Args:
        scene: the scene whose objects are drawn as labeled grey rectangles.
        gold: gold box (green).
        prediction: a :class:`BoxN`, a 4-list, or a :class:`BoxException`.
        regime: selects the prediction colour (teal for ``clm_arl``, orange for ``clm``).
        size: canvas side in pixels; normalized coordinates scale linearly.
    """
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="#fafafa" stroke="#333" '
             f'stroke-width="1"/>']
    if caption:
        parts.append(f"<title>{escape(caption)}</title>")
    parts.append('<g id="objects">')
    for o in scene.objects:
        b = o.box.to_list()
        parts.append(_rect(b, size, "#888", 1, fill="#e8e8e8"))
        parts.append(f'<text x="{b[0] * size + 3:.2f}" y="{b[1] * size + 12:.2f}" '
                     f'font-size="10" fill="#333">{escape(o.category)}: {escape(o.state)}</text>')
    parts.append("</g>")
    parts.append('<g id="gold">' + _rect(gold.to_list(), size, GOLD_COLOR, 3) + "</g>")
    if isinstance(prediction, BoxException):
        parts.append(f'<g id="exception"><rect x="4" y="{size - 22}" width="{size - 8}" height="18" '
                     f'fill="#fff3cd" stroke="#c00" stroke-width="1"/>'
                     f'<text x="8" y="{size - 9}" font-size="11" fill="#c00">exception: '
                     f'{escape(prediction.reason)}</text></g>')
    elif prediction is not None:
        b = prediction.to_list() if isinstance(prediction, BoxN) else list(prediction)
        parts.append('<g id="prediction">'
                     + _rect(b, size, PRED_COLORS.get(regime, "#17becf"), 2, dash="6,3") + "</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def overlay_for_result(ds: Dataset, r: SampleResult, regime: str, size: int = 400) -> str:
    pred = BoxException(r.exception) if r.exception else r.pred
    caption = f"sample {r.sample_id} ({r.task}): {r.text}"
    return render_overlay(ds.scene(r.scene_id), BoxN(*r.gold), pred, regime, size, caption)


def pick_overlay_samples(results, n: int, seed: int = 0) -> list:
    if n <= 0 or not results:
        return []
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(results), size=min(n, len(results)), replace=False))
    return [results[i] for i in idx]
