"""Small causal vision-language sequence model in numpy, with manual backprop.

Input sequence: ``G*G`` projected grid cells (visual prefix), then text tokens
(system prompt, user prompt, response). A pre-LN causal transformer produces
hidden states ``H``; a language-modeling head maps ``H`` to logits and an
auxiliary regression head mean-pools ``H`` into a box.

Batches are held as two row streams: one prefix per distinct scene
(``[S, G*G, d]``) and one text stream per sample (``[B, L, d]``). Because the
prefix comes first under a causal mask, its rows do not depend on the text
and can be shared by every sample drawn from the same scene.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .codec import SYSTEM_PROMPTS, Vocab
from .scenegen import FEATURE_WIDTH

HEAD_VARIANTS = ("two_layer_relu", "one_layer", "two_layer_gelu", "two_layer_sigmoid")
PROMPT_VARIANTS = ("simple", "concrete")
INIT_BOX = np.array([0.25, 0.25, 0.75, 0.75])
CHECKPOINT_MAGIC = b"BOXSEQ-CKPT\n"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


class ModelError(ValueError):
    pass


class TokenOutOfVocab(ModelError):
    pass


class NonFiniteActivation(ArithmeticError):
    def __init__(self, layer, msg=""):
        super().__init__(f"non-finite activation in layer {layer}{': ' + msg if msg else ''}")
        self.layer = layer


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    grid_size: int = 16
    feature_width: int = FEATURE_WIDTH
    max_text_len: int = 192
    ff_mult: int = 2
    head_variant: str = "two_layer_relu"
    prompt_variant: str = "simple"
    squash: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.d_model // 2 < 4:
            raise ModelError("intermediate width d_model/2 must be >= 4")
        if self.head_variant not in HEAD_VARIANTS:
            raise ModelError(f"head_variant must be one of {HEAD_VARIANTS}")
        if self.prompt_variant not in PROMPT_VARIANTS:
            raise ModelError(f"prompt_variant must be one of {PROMPT_VARIANTS}")

    @property
    def n_prefix(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def head_width(self) -> int:
        return self.d_model // 2

    @property
    def max_len(self) -> int:
        return self.n_prefix + self.max_text_len

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared tensor order and shapes."""
    d, V, f = cfg.d_model, cfg.vocab_size, cfg.ff_mult * cfg.d_model
    shapes = {
        "tok_emb": (V, d),
        "cell_w": (cfg.feature_width, d),
        "cell_b": (d,),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.n_layers):
        shapes.update({
            f"l{i}.ln1_g": (d,), f"l{i}.ln1_b": (d,),
            f"l{i}.qkv_w": (d, 3 * d), f"l{i}.qkv_b": (3 * d,),
            f"l{i}.out_w": (d, d), f"l{i}.out_b": (d,),
            f"l{i}.ln2_g": (d,), f"l{i}.ln2_b": (d,),
            f"l{i}.ff1_w": (d, f), f"l{i}.ff1_b": (f,),
            f"l{i}.ff2_w": (f, d), f"l{i}.ff2_b": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "lm_w": (d, V)})
    if cfg.head_variant == "one_layer":
        shapes.update({"arl_w2": (d, 4), "arl_b2": (4,)})
    else:
        m = cfg.head_width
        shapes.update({"arl_w1": (d, m), "arl_b1": (m,), "arl_w2": (m, 4), "arl_b2": (4,)})
    return shapes


ARL_PARAMS = ("arl_w1", "arl_b1", "arl_w2", "arl_b2")
INIT_SCHEME = "normal(0, 1/sqrt(d)) matrices; zero biases; unit LN gains; zero arl_w2; arl_b2 -> [0.25,0.25,0.75,0.75]"


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(cfg.d_model)
    params = {}
    for name, shape in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if short.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "arl_w2":
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) * scale
    if cfg.squash:
        params["arl_b2"] = np.log(INIT_BOX / (1.0 - INIT_BOX))
    else:
        params["arl_b2"] = INIT_BOX.copy()
    return params


def n_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


# -- primitives ----------------------------------------------------------------

def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_back(dy, cache, g):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _split_heads(x, h):
    n, t, d = x.shape
    return x.reshape(n, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * dh)


def _causal_bias(n):
    """Additive attention mask: 0 on and below the diagonal, -inf above."""
    return np.triu(np.full((n, n), -np.inf), k=1)


def _attend(q, k, v, mask):
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q * scale) @ k.transpose(0, 1, 3, 2)
    if mask.dtype == bool:
        mask = np.where(mask, 0.0, -np.inf)
    s += mask
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v, p


def _attend_back(do, q, k, v, p):
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = p.transpose(0, 1, 3, 2) @ do
    dp = do @ v.transpose(0, 1, 3, 2)
    dp -= (dp * p).sum(axis=-1, keepdims=True)
    dp *= p
    dp *= scale
    ds = dp
    return ds @ k, ds.transpose(0, 1, 3, 2) @ q, dv


def _gather_sum(x, sidx, n):
    """Sum rows of ``x`` (indexed by sample) into ``n`` scene slots, in fixed order."""
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    for s in range(n):
        sel = np.flatnonzero(sidx == s)
        if sel.size:
            out[s] = x[sel].sum(axis=0)
    return out


def _check(x, layer, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(layer, what)


# -- stack ---------------------------------------------------------------------

def embed_streams(params, cfg: ModelConfig, grids: np.ndarray, tokens: np.ndarray | None):
    """Embed prefixes ``[S, G*G, F]`` and padded token ids ``[B, L]``."""
    P0 = grids @ params["cell_w"] + params["cell_b"] + params["pos_emb"][:cfg.n_prefix]
    if tokens is None:
        return P0, None
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenOutOfVocab(f"token ids must be in [0, {cfg.vocab_size})")
    L = tokens.shape[1]
    if L > cfg.max_text_len:
        raise ModelError(f"text length {L} exceeds max_text_len {cfg.max_text_len}")
    X0 = params["tok_emb"][tokens] + params["pos_emb"][cfg.n_prefix:cfg.n_prefix + L]
    return P0, X0


def forward_stack(params, cfg: ModelConfig, P: np.ndarray, X: np.ndarray | None,
                  sidx: np.ndarray | None = None, keep_cache: bool = True):
    """Run the transformer blocks and the final layer norm.

    Args:
        P: ``[S, Tp, d]`` prefix rows (plain causal attention within each).
        X: ``[B, L, d]`` text rows or ``None``. Text row ``t`` of sample ``b``
            attends to all prefix rows of scene ``sidx[b]`` and to text rows
            ``<= t`` of its own sample.

    Returns:
        ``(H_P, H_X, cache)``; ``H_X`` is ``None`` when ``X`` is.
    """
    h = cfg.n_heads
    d = cfg.d_model
    Tp = P.shape[1]
    mask_p = _causal_bias(Tp)
    if X is not None:
        L = X.shape[1]
        mask_x = np.concatenate([np.zeros((L, Tp)), _causal_bias(L)], axis=1)
    layers = []
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        c = {}
        streams = [P] if X is None else [P, X]
        normed, qkv_heads = [], []
        for x in streams:
            a, lc = _ln(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
            qkv = a @ params[pre + "qkv_w"] + params[pre + "qkv_b"]
            normed.append((a, lc))
            qkv_heads.append(tuple(_split_heads(qkv[..., j * d:(j + 1) * d], h) for j in range(3)))
        qp, kp, vp = qkv_heads[0]
        op, pp = _attend(qp, kp, vp, mask_p)
        outs = [op]
        if X is not None:
            qx, kx, vx = qkv_heads[1]
            kcat = np.concatenate([kp[sidx], kx], axis=2)
            vcat = np.concatenate([vp[sidx], vx], axis=2)
            ox, px = _attend(qx, kcat, vcat, mask_x)
            outs.append(ox)
            c["attn_x"] = (qx, kcat, vcat, px)
        c["attn_p"] = (qp, kp, vp, pp)
        new_streams, mids = [], []
        for x, o, (a, lc) in zip(streams, outs, normed):
            om = _merge_heads(o)
            x1 = x + om @ params[pre + "out_w"] + params[pre + "out_b"]
            a2, lc2 = _ln(x1, params[pre + "ln2_g"], params[pre + "ln2_b"])
            z = a2 @ params[pre + "ff1_w"] + params[pre + "ff1_b"]
            g, t = _gelu(z)
            x2 = x1 + g @ params[pre + "ff2_w"] + params[pre + "ff2_b"]
            _check(x2, i, "block output")
            new_streams.append(x2)
            mids.append(dict(a=a, lc=lc, om=om, a2=a2, lc2=lc2, z=z, g=g, t=t))
        c["mids"] = mids
        if keep_cache:
            layers.append(c)
        P = new_streams[0]
        X = new_streams[1] if X is not None else None
    H_P, lcp = _ln(P, params["lnf_g"], params["lnf_b"])
    H_X, lcx = (None, None) if X is None else _ln(X, params["lnf_g"], params["lnf_b"])
    cache = dict(layers=layers, lnf=(lcp, lcx), sidx=sidx, S=P.shape[0])
    return H_P, H_X, cache


def backward_stack(params, cfg: ModelConfig, cache, dH_P, dH_X):
    """Backprop through :func:`forward_stack`; returns ``(dP0, dX0, grads)``."""
    h = cfg.n_heads
    grads: dict[str, np.ndarray] = {}
    lcp, lcx = cache["lnf"]
    sidx, S = cache["sidx"], cache["S"]
    dP, gg, gb = _ln_back(dH_P, lcp, params["lnf_g"])
    grads["lnf_g"], grads["lnf_b"] = gg, gb
    dX = None
    if dH_X is not None:
        dX, gg, gb = _ln_back(dH_X, lcx, params["lnf_g"])
        grads["lnf_g"] = grads["lnf_g"] + gg
        grads["lnf_b"] = grads["lnf_b"] + gb
    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        c = cache["layers"][i]
        douts = [dP] if dX is None else [dP, dX]
        acc = {k: 0.0 for k in ("out_w", "out_b", "ln2_g", "ln2_b", "ff1_w", "ff1_b",
                                "ff2_w", "ff2_b", "ln1_g", "ln1_b", "qkv_w", "qkv_b")}
        d_om, d_x1s = [], []
        for dx2, m in zip(douts, c["mids"]):
            red = tuple(range(dx2.ndim - 1))
            acc["ff2_w"] = acc["ff2_w"] + np.tensordot(m["g"], dx2, axes=(red, red))
            acc["ff2_b"] = acc["ff2_b"] + dx2.sum(axis=red)
            dg = dx2 @ params[pre + "ff2_w"].T
            dz = _gelu_back(dg, m["z"], m["t"])
            acc["ff1_w"] = acc["ff1_w"] + np.tensordot(m["a2"], dz, axes=(red, red))
            acc["ff1_b"] = acc["ff1_b"] + dz.sum(axis=red)
            da2 = dz @ params[pre + "ff1_w"].T
            dx1, lg, lb = _ln_back(da2, m["lc2"], params[pre + "ln2_g"])
            acc["ln2_g"] = acc["ln2_g"] + lg
            acc["ln2_b"] = acc["ln2_b"] + lb
            dx1 = dx1 + dx2
            acc["out_w"] = acc["out_w"] + np.tensordot(m["om"], dx1, axes=(red, red))
            acc["out_b"] = acc["out_b"] + dx1.sum(axis=red)
            d_om.append(_split_heads(dx1 @ params[pre + "out_w"].T, h))
            d_x1s.append(dx1)
        qp, kp, vp, pp = c["attn_p"]
        dqp, dkp, dvp = _attend_back(d_om[0], qp, kp, vp, pp)
        dqkv = [None, None]
        if dX is not None:
            qx, kcat, vcat, px = c["attn_x"]
            dqx, dkcat, dvcat = _attend_back(d_om[1], qx, kcat, vcat, px)
            Tp = kp.shape[2]
            dkp = dkp + _gather_sum(dkcat[:, :, :Tp], sidx, S)
            dvp = dvp + _gather_sum(dvcat[:, :, :Tp], sidx, S)
            dqkv[1] = np.concatenate([_merge_heads(dqx), _merge_heads(dkcat[:, :, Tp:]),
                                      _merge_heads(dvcat[:, :, Tp:])], axis=-1)
        dqkv[0] = np.concatenate([_merge_heads(dqp), _merge_heads(dkp), _merge_heads(dvp)], axis=-1)
        new = []
        for dq, m, dx1 in zip(dqkv, c["mids"], d_x1s):
            red = tuple(range(dq.ndim - 1))
            acc["qkv_w"] = acc["qkv_w"] + np.tensordot(m["a"], dq, axes=(red, red))
            acc["qkv_b"] = acc["qkv_b"] + dq.sum(axis=red)
            da = dq @ params[pre + "qkv_w"].T
            dx, lg, lb = _ln_back(da, m["lc"], params[pre + "ln1_g"])
            acc["ln1_g"] = acc["ln1_g"] + lg
            acc["ln1_b"] = acc["ln1_b"] + lb
            new.append(dx + dx1)
        dP = new[0]
        dX = new[1] if dX is not None else None
        for k, v in acc.items():
            grads[pre + k] = v
    return dP, dX, grads


def backward_embed(params, cfg: ModelConfig, grids, tokens, dP0, dX0, grads):
    grads["cell_w"] = np.tensordot(grids, dP0, axes=((0, 1), (0, 1)))
    grads["cell_b"] = dP0.sum(axis=(0, 1))
    dpos = np.zeros_like(params["pos_emb"])
    dpos[:cfg.n_prefix] = dP0.sum(axis=0)
    dtok = np.zeros_like(params["tok_emb"])
    if dX0 is not None:
        L = dX0.shape[1]
        dpos[cfg.n_prefix:cfg.n_prefix + L] = dX0.sum(axis=0)
        np.add.at(dtok, np.asarray(tokens).reshape(-1), dX0.reshape(-1, dX0.shape[-1]))
    grads["pos_emb"] = dpos
    grads["tok_emb"] = dtok
    return grads


# -- heads ---------------------------------------------------------------------

def lm_logits(params, H: np.ndarray) -> np.ndarray:
    return H @ params["lm_w"]


def arl_head_forward(params, cfg: ModelConfig, pooled: np.ndarray):
    """Map pooled ``[..., d]`` vectors to boxes ``[..., 4]``."""
    c = {"pooled": pooled}
    if cfg.head_variant == "one_layer":
        hidden = pooled
    else:
        z = pooled @ params["arl_w1"] + params["arl_b1"]
        c["z"] = z
        if cfg.head_variant == "two_layer_relu":
            hidden = np.maximum(z, 0.0)
        elif cfg.head_variant == "two_layer_gelu":
            hidden, c["t"] = _gelu(z)
        else:
            hidden = _sigmoid(z)
    c["hidden"] = hidden
    out = hidden @ params["arl_w2"] + params["arl_b2"]
    if cfg.squash:
        out = _sigmoid(out)
    c["out"] = out
    return out, c


def arl_head_backward(params, cfg: ModelConfig, c, dout):
    grads = {}
    if cfg.squash:
        dout = dout * c["out"] * (1.0 - c["out"])
    red = tuple(range(dout.ndim - 1))
    grads["arl_w2"] = np.tensordot(c["hidden"], dout, axes=(red, red))
    grads["arl_b2"] = dout.sum(axis=red)
    dhidden = dout @ params["arl_w2"].T
    if cfg.head_variant == "one_layer":
        return dhidden, grads
    z = c["z"]
    if cfg.head_variant == "two_layer_relu":
        dz = dhidden * (z > 0)
    elif cfg.head_variant == "two_layer_gelu":
        dz = _gelu_back(dhidden, z, c["t"])
    else:
        s = c["hidden"]
        dz = dhidden * s * (1.0 - s)
    grads["arl_w1"] = np.tensordot(c["pooled"], dz, axes=(red, red))
    grads["arl_b1"] = dz.sum(axis=red)
    return dz @ params["arl_w1"].T, grads


def arl_head(params, cfg: ModelConfig, H: np.ndarray) -> np.ndarray:
    """Box from a single ``T x d`` hidden-state matrix (mean over all rows)."""
    return arl_head_forward(params, cfg, H.mean(axis=0))[0]


def pool_streams(H_P, H_X, sidx, lengths):
    """Per-sample mean over the shared prefix rows and the sample's own text rows."""
    Tp = H_P.shape[1]
    L = H_X.shape[1]
    valid = (np.arange(L)[None, :] < lengths[:, None]).astype(H_X.dtype)
    total = H_P.sum(axis=1)[sidx] + (H_X * valid[..., None]).sum(axis=1)
    return total / (Tp + lengths)[:, None], valid


def pool_backward(dpooled, sidx, lengths, valid, S, Tp):
    scaled = dpooled / (Tp + lengths)[:, None]
    dH_X = scaled[:, None, :] * valid[..., None]
    dH_P = np.broadcast_to(_gather_sum(scaled, sidx, S)[:, None, :],
                           (S, Tp, dpooled.shape[-1])).copy()
    return dH_P, dH_X


# -- single-sequence API -----------------------------------------------------------

def embed_inputs(params, cfg: ModelConfig, grid: np.ndarray, tokens) -> np.ndarray:
    """``T x d`` input matrix: projected grid cells then embedded tokens."""
    tokens = np.asarray(list(tokens), dtype=np.int64).reshape(1, -1)
    P0, X0 = embed_streams(params, cfg, np.asarray(grid)[None], tokens)
    return np.concatenate([P0[0], X0[0]], axis=0)


def forward_hidden(params, cfg: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    """Hidden states of one sequence under a plain causal mask."""
    if not np.all(np.isfinite(inputs)):
        raise NonFiniteActivation(-1, "inputs")
    H, _, _ = forward_stack(params, cfg, np.asarray(inputs)[None], None, keep_cache=False)
    return H[0]


def context_tokens(vocab: Vocab, cfg: ModelConfig, prompt) -> list[int]:
    """System prompt followed by the user prompt."""
    return vocab.encode(SYSTEM_PROMPTS[cfg.prompt_variant]) + list(prompt)


def _prefix_cache(params, cfg, grids):
    """Per-layer prefix keys/values for decoding."""
    P, _ = embed_streams(params, cfg, grids, None)
    kv = []
    d, h = cfg.d_model, cfg.n_heads
    mask = np.tril(np.ones((P.shape[1],) * 2, dtype=bool))
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        a, _ = _ln(P, params[pre + "ln1_g"], params[pre + "ln1_b"])
        qkv = a @ params[pre + "qkv_w"] + params[pre + "qkv_b"]
        q, k, v = (_split_heads(qkv[..., j * d:(j + 1) * d], h) for j in range(3))
        kv.append((k, v))
        o, _ = _attend(q, k, v, mask)
        P = P + _merge_heads(o) @ params[pre + "out_w"] + params[pre + "out_b"]
        a2, _ = _ln(P, params[pre + "ln2_g"], params[pre + "ln2_b"])
        g, _ = _gelu(a2 @ params[pre + "ff1_w"] + params[pre + "ff1_b"])
        P = P + g @ params[pre + "ff2_w"] + params[pre + "ff2_b"]
    return kv


def _text_last_hidden(params, cfg, kv, sidx, tokens):
    """Final-LN hidden state of the last text position, attending to cached prefixes."""
    _, X = embed_streams(params, cfg, np.zeros((1, cfg.n_prefix, cfg.feature_width)), tokens)
    d, h = cfg.d_model, cfg.n_heads
    L = X.shape[1]
    Tp = cfg.n_prefix
    mask = np.concatenate([np.ones((L, Tp), dtype=bool), np.tril(np.ones((L, L), dtype=bool))], 1)
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        kp, vp = kv[i]
        a, _ = _ln(X, params[pre + "ln1_g"], params[pre + "ln1_b"])
        qkv = a @ params[pre + "qkv_w"] + params[pre + "qkv_b"]
        q, k, v = (_split_heads(qkv[..., j * d:(j + 1) * d], h) for j in range(3))
        o, _ = _attend(q, np.concatenate([kp[sidx], k], 2), np.concatenate([vp[sidx], v], 2), mask)
        X = X + _merge_heads(o) @ params[pre + "out_w"] + params[pre + "out_b"]
        a2, _ = _ln(X, params[pre + "ln2_g"], params[pre + "ln2_b"])
        g, _ = _gelu(a2 @ params[pre + "ff1_w"] + params[pre + "ff1_b"])
        X = X + g @ params[pre + "ff2_w"] + params[pre + "ff2_b"]
    H, _ = _ln(X[:, -1], params["lnf_g"], params["lnf_b"])
    return H


def decode_batch(params, cfg: ModelConfig, vocab: Vocab, grids, sidx, prompts,
                 max_len: int = 64) -> list[list[int]]:
    """Greedy decoding for many prompts; the regression head is never used.

    Args:
        grids: ``[S, G*G, F]`` scene features.
        sidx: scene index of each prompt.
        prompts: user-prompt token lists.
        max_len: maximum response length, counting the leading BOS.

    Returns:
        One response per prompt, starting with BOS and ending with EOS unless
        the length limit was hit first. Ties in argmax go to the lowest id.
    """
    sidx = np.asarray(sidx)
    kv = _prefix_cache(params, cfg, np.asarray(grids))
    contexts = [context_tokens(vocab, cfg, p) + [vocab.bos_id] for p in prompts]
    responses = [[vocab.bos_id] for _ in prompts]
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(contexts):
        groups.setdefault(len(c), []).append(i)
    for n in sorted(groups):
        active = list(groups[n])
        seqs = np.array([contexts[i] for i in active], dtype=np.int64)
        while active:
            H = _text_last_hidden(params, cfg, kv, sidx[active], seqs)
            nxt = np.argmax(lm_logits(params, H), axis=-1)
            keep = []
            for j, i in enumerate(active):
                responses[i].append(int(nxt[j]))
                if nxt[j] != vocab.eos_id and len(responses[i]) < max_len:
                    keep.append(j)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)[keep]
            active = [active[j] for j in keep]
    return responses


def decode_greedy(params, cfg: ModelConfig, vocab: Vocab, grid, prompt, max_len: int = 64):
    return decode_batch(params, cfg, vocab, np.asarray(grid)[None], [0], [list(prompt)], max_len)[0]


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params, extra: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write config + tensors to a self-describing binary container.

    Layout: magic line, 8-byte header length, JSON header (config, metadata,
    tensor names/shapes in declared order), then raw little-endian float64
    data for each tensor in the same order. ``extra`` tensors (optimizer
    state) follow the model tensors.
    """
    tensors = list(params.items()) + list((extra or {}).items())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "init_scheme": INIT_SCHEME,
        "meta": meta or {},
        "tensors": [[k, list(v.shape), k in params] for k, v in tensors],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    for _, v in tensors:
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(cfg, params, extra, meta)``."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    try:
        header = json.loads(data[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    off += n
    cfg = ModelConfig(**header["config"])
    params, extra = {}, {}
    for name, shape, is_param in header["tensors"]:
        size = int(np.prod(shape)) * 8
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
        off += size
        (params if is_param else extra)[name] = arr
    if list(params) != list(param_shapes(cfg)):
        raise CheckpointError(f"{path}: tensor list does not match the declared config")
    return cfg, params, extra, header["meta"]
