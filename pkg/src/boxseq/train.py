"""Losses, gradients, optimizer and the two-regime training loop.

Regimes:

* ``clm``      -- next-token cross-entropy on response tokens only. The box
  loss is still computed and logged but enters the objective with weight 0.
* ``clm_arl``  -- ``alpha * CLM + beta * (gamma * L1 + delta * GIoU loss)``
  with the regression head reading mean-pooled hidden states.

Per-sample CLM is a sum over supervised positions; batch losses are means
over samples.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import geometry
from . import model as M
from .codec import Vocab
from .geometry import LossWeights
from .scenegen import Dataset, rasterize

log = logging.getLogger(__name__)

REGIMES = ("clm", "clm_arl")
LOG_FIELDS = ("step", "total", "clm", "arl", "lr")


class TrainError(ValueError):
    pass


class EmptyMask(TrainError):
    pass


class NonFiniteGradient(ArithmeticError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name


class NonFiniteUpdate(ArithmeticError):
    def __init__(self, name):
        super().__init__(f"non-finite update for tensor {name!r}")
        self.name = name


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "clm_arl"
    alpha: float = 0.2
    beta: float = 0.8
    gamma: float = 0.2
    delta: float = 0.8
    lr: float = 3e-4
    warmup_fraction: float = 0.05
    steps: int = 5000
    batch_size: int = 16
    scenes_per_batch: int = 2
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 0
    precision: str = "fp64"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 2
    head_variant: str = "two_layer_relu"
    prompt_variant: str = "simple"
    squash: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise TrainError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.steps < 1:
            raise TrainError("steps must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if not 1 <= self.scenes_per_batch:
            raise TrainError("scenes_per_batch must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise TrainError("warmup_fraction must be in [0, 1]")
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise TrainError("lr must be positive")
        if self.precision != "fp64":
            raise TrainError("only fp64 training is supported")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.delta)

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.regime == "clm" else self.beta

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.steps)))

    def model_config(self, vocab_size: int, grid_size: int) -> M.ModelConfig:
        return M.ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                             n_heads=self.n_heads, grid_size=grid_size, ff_mult=self.ff_mult,
                             head_variant=self.head_variant, prompt_variant=self.prompt_variant,
                             squash=self.squash)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- batches -------------------------------------------------------------------------

@dataclass
class Batch:
    grids: np.ndarray       # [S, G*G, F]
    sidx: np.ndarray        # [B] scene slot of each sample
    tokens: np.ndarray      # [B, L] context + response, PAD-filled
    lengths: np.ndarray     # [B]
    targets: np.ndarray     # [B, L] next-token ids (0 where unsupervised)
    mask: np.ndarray        # [B, L] bool, True where position t predicts targets[t]
    gold: np.ndarray        # [B, 4]
    sample_ids: list = field(default_factory=list)


class GridCache:
    def __init__(self, ds: Dataset):
        self.ds = ds
        self._grids: dict[int, np.ndarray] = {}

    def __call__(self, scene_id: int) -> np.ndarray:
        g = self._grids.get(scene_id)
        if g is None:
            g = rasterize(self.ds.scene(scene_id), self.ds.config.grid_size)
            self._grids[scene_id] = g
        return g


def make_batch(samples, grids: GridCache, vocab: Vocab, mcfg: M.ModelConfig) -> Batch:
    scene_ids = sorted({x.scene_id for x in samples})
    slot = {s: i for i, s in enumerate(scene_ids)}
    seqs, starts = [], []
    for x in samples:
        ctx = M.context_tokens(vocab, mcfg, x.prompt)
        starts.append(len(ctx))
        seqs.append(ctx + list(x.response))
    B, L = len(samples), max(len(s) for s in seqs)
    tokens = np.full((B, L), vocab.pad_id, dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, (s, st) in enumerate(zip(seqs, starts)):
        tokens[b, :len(s)] = s
        targets[b, :len(s) - 1] = s[1:]
        mask[b, st:len(s) - 1] = True
    return Batch(
        grids=np.stack([grids(s) for s in scene_ids]),
        sidx=np.array([slot[x.scene_id] for x in samples]),
        tokens=tokens,
        lengths=np.array([len(s) for s in seqs]),
        targets=targets,
        mask=mask,
        gold=np.array([x.gold.to_list() for x in samples]),
        sample_ids=[x.sample_id for x in samples],
    )


def sample_batch(train_samples_by_scene: dict, step: int, cfg: TrainConfig) -> list:
    """Scene-grouped batch drawn from a per-step RNG (so resuming needs no RNG state)."""
    rng = np.random.default_rng([cfg.seed, step])
    scene_ids = sorted(train_samples_by_scene)
    k = min(cfg.scenes_per_batch, len(scene_ids))
    chosen = sorted(rng.choice(len(scene_ids), size=k, replace=False))
    per = [cfg.batch_size // k + (1 if i < cfg.batch_size % k else 0) for i in range(k)]
    out = []
    for i, n in zip(chosen, per):
        pool = train_samples_by_scene[scene_ids[i]]
        idx = rng.choice(len(pool), size=n, replace=n > len(pool))
        out.extend(pool[j] for j in sorted(idx))
    return out


# -- losses --------------------------------------------------------------------------

def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def clm_loss(logits: np.ndarray, tokens, loss_mask) -> float:
    """``-sum_t log softmax(z_t)[y_{t+1}]`` over positions with ``loss_mask[t]``.

    Args:
        logits: ``[T, V]``.
        tokens: the ``T`` token ids; row ``t`` is scored against ``tokens[t+1]``.
        loss_mask: ``[T]`` booleans; the last position can never be supervised.
    """
    tokens = np.asarray(tokens)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if loss_mask[-1]:
        raise TrainError("the last position has no next token")
    pos = np.flatnonzero(loss_mask)
    if pos.size == 0:
        raise EmptyMask("no supervised positions")
    lp = _log_softmax(np.asarray(logits, dtype=np.float64)[pos])
    return float(-lp[np.arange(pos.size), tokens[pos + 1]].sum())


def total_loss(clm: float, arl: float, w: LossWeights = LossWeights(), regime: str = "clm_arl") -> float:
    beta = 0.0 if regime == "clm" else w.beta
    return w.alpha * clm + beta * arl


@dataclass
class LossParts:
    total: float
    clm: float
    arl: float
    clm_per_sample: np.ndarray
    arl_per_sample: np.ndarray
    pred_boxes: np.ndarray


def _heads_forward(params, mcfg, batch, H_P, H_X):
    rows = np.nonzero(batch.mask)
    Hm = H_X[rows]
    logits = Hm @ params["lm_w"]
    lp = _log_softmax(logits)
    tgt = batch.targets[rows]
    nll = -lp[np.arange(tgt.size), tgt]
    B = batch.tokens.shape[0]
    if np.any(batch.mask.sum(axis=1) == 0):
        raise EmptyMask("a sample has no supervised positions")
    clm_b = np.bincount(rows[0], weights=nll, minlength=B)
    pooled, valid = M.pool_streams(H_P, H_X, batch.sidx, batch.lengths)
    box, hc = M.arl_head_forward(params, mcfg, pooled)
    return dict(rows=rows, Hm=Hm, lp=lp, tgt=tgt, clm_b=clm_b, pooled=pooled, valid=valid,
                box=box, hc=hc)


def loss_and_grads(params, mcfg: M.ModelConfig, batch: Batch, cfg: TrainConfig,
                   need_grads: bool = True):
    """Forward pass, loss assembly and (optionally) the full reverse pass.

    Returns:
        ``(parts, grads, kinks)``; ``grads`` is ``None`` without ``need_grads``.
        ``kinks`` is a tuple of boolean arrays recording which side of every
        non-smooth point (ReLU, L1, min/max) the evaluation landed on.
    """
    w = cfg.weights
    beta = cfg.effective_beta
    P0, X0 = M.embed_streams(params, mcfg, batch.grids, batch.tokens)
    H_P, H_X, cache = M.forward_stack(params, mcfg, P0, X0, batch.sidx, keep_cache=need_grads)
    hf = _heads_forward(params, mcfg, batch, H_P, H_X)
    arl_b, dbox, _ = geometry.arl_with_grad(hf["box"], batch.gold, w)
    B = batch.tokens.shape[0]
    clm_mean = float(hf["clm_b"].mean())
    arl_mean = float(arl_b.mean())
    parts = LossParts(total=w.alpha * clm_mean + beta * arl_mean, clm=clm_mean, arl=arl_mean,
                      clm_per_sample=hf["clm_b"], arl_per_sample=arl_b, pred_boxes=hf["box"])
    g, box = batch.gold, hf["box"]
    kinks = (box > g, box < g, batch.gold[:, :2] < box[:, 2:], box[:, :2] < batch.gold[:, 2:])
    if "z" in hf["hc"] and mcfg.head_variant == "two_layer_relu":
        kinks = kinks + (hf["hc"]["z"] > 0,)
    if not need_grads:
        return parts, None, kinks

    grads: dict[str, np.ndarray] = {}
    # language-modeling head
    dlogits = np.exp(hf["lp"])
    dlogits[np.arange(hf["tgt"].size), hf["tgt"]] -= 1.0
    dlogits *= w.alpha / B
    grads["lm_w"] = hf["Hm"].T @ dlogits
    dH_X = np.zeros_like(H_X)
    dH_X[hf["rows"]] = dlogits @ params["lm_w"].T
    # regression head; beta = 0 zeroes this whole branch exactly
    dpooled, hgrads = M.arl_head_backward(params, mcfg, hf["hc"], dbox * (beta / B))
    grads.update(hgrads)
    dP_pool, dX_pool = M.pool_backward(dpooled, batch.sidx, batch.lengths, hf["valid"],
                                       batch.grids.shape[0], mcfg.n_prefix)
    dH_X = dH_X + dX_pool
    dP0, dX0, sgrads = M.backward_stack(params, mcfg, cache, dP_pool, dH_X)
    grads.update(sgrads)
    M.backward_embed(params, mcfg, batch.grids, batch.tokens, dP0, dX0, grads)
    ordered = {}
    for name in params:
        gr = grads[name]
        if not np.all(np.isfinite(gr)):
            raise NonFiniteGradient(name)
        ordered[name] = gr
    return parts, ordered, kinks


def backward(params, mcfg: M.ModelConfig, batch: Batch, cfg: TrainConfig):
    parts, grads, _ = loss_and_grads(params, mcfg, batch, cfg, need_grads=True)
    return grads, parts


# -- optimizer -----------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` (steps count from 1), then constant."""
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out["adam.m." + k] = self.m[k]
            out["adam.v." + k] = self.v[k]
        return out

    def load_state(self, extra: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = extra["adam.m." + k].copy()
            self.v[k] = extra["adam.v." + k].copy()


def optimizer_step(params, grads, step: int, cfg: TrainConfig, opt: Adam):
    """One bias-corrected Adam update, applied in declared tensor order."""
    lr = lr_at(step, cfg)
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = b1 * opt.m[name] + (1.0 - b1) * g
        v = b2 * opt.v[name] + (1.0 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if not np.all(np.isfinite(upd)):
            raise NonFiniteUpdate(name)
        opt.m[name], opt.v[name] = m, v
        new[name] = p - upd
    return new


def split_loss(params, mcfg: M.ModelConfig, ds: Dataset, split: str, cfg: TrainConfig,
               vocab: Vocab, chunk: int = 32) -> dict:
    """Teacher-forced mean losses over every sample of a split (no gradients)."""
    samples = sorted(ds.samples_in(split), key=lambda x: (x.scene_id, x.sample_id))
    if not samples:
        raise TrainError(f"split {split!r} has no samples")
    grids = GridCache(ds)
    clm = arl = 0.0
    for i in range(0, len(samples), chunk):
        batch = make_batch(samples[i:i + chunk], grids, vocab, mcfg)
        parts, _, _ = loss_and_grads(params, mcfg, batch, cfg, need_grads=False)
        clm += float(parts.clm_per_sample.sum())
        arl += float(parts.arl_per_sample.sum())
    clm, arl = clm / len(samples), arl / len(samples)
    return {"total": cfg.weights.alpha * clm + cfg.effective_beta * arl, "clm": clm, "arl": arl}


# -- training loop -------------------------------------------------------------------

def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    for x in ds.samples:
        h.update(repr((x.sample_id, x.scene_id, x.task, x.prompt, x.response,
                       x.gold.to_list())).encode())
    return h.hexdigest()[:16]


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.ckpt"


def train_run(ds: Dataset, cfg: TrainConfig, vocab: Vocab | None = None, out_dir=None,
              resume_from=None, on_eval=None):
    """Train one model.

    Args:
        ds: dataset; only ``train`` scenes are used.
        cfg: training configuration.
        out_dir: if given, checkpoints go to ``out_dir/checkpoints`` and the
            step log to ``out_dir/logs/train_log.csv``.
        resume_from: checkpoint path to continue from.
        on_eval: optional ``callback(step, params, mcfg) -> dict`` run every
            ``eval_every`` steps; its records are appended to the eval log.

    Returns:
        ``(params, mcfg, log, eval_log)``.
    """
    vocab = vocab or Vocab.default()
    mcfg = cfg.model_config(len(vocab), ds.config.grid_size)
    train = ds.samples_in("train")
    if not train:
        raise TrainError("dataset has no training samples")
    by_scene: dict[int, list] = {}
    for x in train:
        by_scene.setdefault(x.scene_id, []).append(x)
    grids = GridCache(ds)
    meta_base = {"regime": cfg.regime, "train_config": cfg.to_dict(),
                 "dataset": dataset_fingerprint(ds)}

    params = M.init_params(mcfg, cfg.seed)
    opt = Adam(params)
    start = 1
    records: list[dict] = []
    eval_records: list[dict] = []
    ckpt_dir = log_path = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "logs").mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "logs" / "train_log.csv"
    if resume_from is not None:
        rcfg, params, extra, meta = M.load_checkpoint(resume_from)
        if rcfg != mcfg:
            raise TrainError("checkpoint model config does not match the training config")
        opt.load_state(extra)
        start = int(meta["step"]) + 1
        if log_path is not None and log_path.exists():
            records = [r for r in read_train_log(log_path) if r["step"] < start]

    last_ckpt = None

    def save(step):
        nonlocal last_ckpt
        if ckpt_dir is None:
            return
        path = ckpt_dir / checkpoint_name(step)
        M.save_checkpoint(path, mcfg, params, extra=opt.state(), meta={**meta_base, "step": step})
        last_ckpt = path

    for step in range(start, cfg.steps + 1):
        batch = make_batch(sample_batch(by_scene, step, cfg), grids, vocab, mcfg)
        try:
            grads, parts = backward(params, mcfg, batch, cfg)
            params = optimizer_step(params, grads, step, cfg, opt)
        except (ArithmeticError, M.NonFiniteActivation) as e:
            if log_path is not None:
                write_train_log(log_path, records)
            raise TrainingAborted(f"step {step}: {e}", last_ckpt) from e
        records.append({"step": step, "total": parts.total, "clm": parts.clm,
                        "arl": parts.arl, "lr": lr_at(step, cfg)})
        if step % 100 == 0:
            log.info("step %d total %.4f clm %.4f arl %.4f", step, parts.total, parts.clm, parts.arl)
        if cfg.eval_every and step % cfg.eval_every == 0 and on_eval is not None:
            eval_records.append({"step": step, **on_eval(step, params, mcfg)})
        if step == cfg.steps or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0):
            save(step)
            if log_path is not None:
                write_train_log(log_path, records)
    return params, mcfg, records, eval_records


def write_train_log(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def read_train_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{"step": int(r["step"]), **{k: float(r[k]) for k in LOG_FIELDS[1:]}} for r in rows]


# -- gradient verification -----------------------------------------------------------

def relative_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


GRAD_FLOOR = 1e-6


def _probe_indices(params, batch, mcfg, rng, n_probes):
    """Spread probes over all tensors; embedding probes hit rows the batch uses."""
    names = list(params)
    used_tokens = np.unique(batch.tokens[batch.tokens != 0]) if batch.tokens.size else np.array([0])
    max_pos = mcfg.n_prefix + batch.tokens.shape[1]
    out = []
    for i in range(n_probes):
        name = names[i % len(names)]
        shape = params[name].shape
        if name == "tok_emb":
            idx = (int(rng.choice(used_tokens)), int(rng.integers(shape[1])))
        elif name == "pos_emb":
            idx = (int(rng.integers(max_pos)), int(rng.integers(shape[1])))
        else:
            idx = tuple(int(rng.integers(s)) for s in shape)
        out.append((name, idx))
    return out


def gradcheck_batch(params, mcfg, batch, cfg: TrainConfig, n_probes: int, seed: int = 0,
                    eps: float = 1e-5, tol: float = 1e-4, fault: str | None = None) -> dict:
    """Central finite differences against :func:`loss_and_grads` on probed scalars.

    A probe is skipped (and counted) when the two perturbed evaluations land on
    different sides of a non-smooth point.
    """
    if n_probes == 0:
        return {"passed": True, "max_rel_err": 0.0, "worst_tensor": None, "n_probes": 0,
                "n_skipped_kinks": 0, "per_tensor": {}}
    _, grads, _ = loss_and_grads(params, mcfg, batch, cfg)
    if fault is not None:
        if fault not in grads:
            raise TrainError(f"unknown tensor {fault!r} for fault injection")
        grads = dict(grads)
        grads[fault] = grads[fault] * 1.5 + 1e-3
    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    worst, worst_name, skipped = 0.0, None, 0
    for name, idx in _probe_indices(params, batch, mcfg, rng, n_probes):
        base = params[name][idx]
        vals, sigs = [], []
        for sgn in (1.0, -1.0):
            p = dict(params)
            p[name] = params[name].copy()
            p[name][idx] = base + sgn * eps
            parts, _, kinks = loss_and_grads(p, mcfg, batch, cfg, need_grads=False)
            vals.append(parts.total)
            sigs.append(kinks)
        if any(not np.array_equal(a, b) for a, b in zip(*sigs)):
            skipped += 1
            continue
        fd = (vals[0] - vals[1]) / (2 * eps)
        err = relative_error(float(grads[name][idx]), fd, GRAD_FLOOR)
        per_tensor[name] = max(per_tensor.get(name, 0.0), err)
        if err > worst:
            worst, worst_name = err, name
    return {"passed": worst <= tol, "max_rel_err": worst, "worst_tensor": worst_name,
            "n_probes": n_probes, "n_skipped_kinks": skipped, "per_tensor": per_tensor}


def gradcheck_geometry(n_pairs: int, seed: int = 0, eps: float = 1e-6, tol: float = 1e-4,
                       w: LossWeights = LossWeights()) -> dict:
    """Finite-difference check of the box-loss gradient on random ordered pairs."""
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    while checked < n_pairs:
        p = _random_box(rng)
        g = _random_box(rng)
        if np.min(np.abs(p - g)) <= 1e-4 or _touching(p, g):
            continue
        analytic = geometry.grad_arl(p, geometry.BoxN(*g), w)
        gb = geometry.BoxN(*g)
        for i in range(4):
            e = np.zeros(4)
            e[i] = eps
            fd = (geometry.arl(p + e, gb, w) - geometry.arl(p - e, gb, w)) / (2 * eps)
            worst = max(worst, relative_error(analytic[i], fd, 1e-2))
        checked += 1
    return {"passed": worst <= tol, "max_rel_err": worst, "n_pairs": n_pairs}


def _random_box(rng):
    w, h = rng.uniform(0.05, 0.6, 2)
    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return np.array([x, y, x + w, y + h])


def _touching(p, g, tol=1e-4):
    iw = min(p[2], g[2]) - max(p[0], g[0])
    ih = min(p[3], g[3]) - max(p[1], g[1])
    return abs(iw) < tol or abs(ih) < tol


def gradcheck(cfg: TrainConfig | None = None, seed: int = 0, n_probes: int = 200,
              fault: str | None = None, grid_size: int = 16) -> dict:
    """Full-model finite-difference check on a one-sample batch.

    Parameters are randomized (including the zero-initialized box-head output
    layer) so every tensor family carries signal.
    """
    from .scenegen import GenConfig, build_dataset

    cfg = cfg or TrainConfig()
    cfg = replace(cfg, regime="clm_arl") if cfg.regime != "clm_arl" else cfg
    vocab = Vocab.default()
    ds = build_dataset(GenConfig(n_scenes=2, seed=seed, grid_size=grid_size,
                                 complexity_mix=0.0, test_fraction=0.5), vocab)
    mcfg = cfg.model_config(len(vocab), grid_size)
    params = M.init_params(mcfg, seed)
    rng = np.random.default_rng([seed, 1])
    for name in params:
        if name.startswith("arl_") or name.endswith("_b"):
            params[name] = params[name] + 0.1 * rng.standard_normal(params[name].shape)
    sample = ds.samples[int(rng.integers(len(ds.samples)))]
    batch = make_batch([sample], GridCache(ds), vocab, mcfg)
    report = gradcheck_batch(params, mcfg, batch, cfg, n_probes, seed=seed, fault=fault)
    if n_probes:
        report["geometry"] = gradcheck_geometry(max(100, n_probes // 2), seed=seed)
        report["passed"] = report["passed"] and report["geometry"]["passed"]
    return report
