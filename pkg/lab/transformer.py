"""
Toy pre-norm decoder-only transformer with hidden-state capture and injection
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from lab import autodiff as ad
from lab.autodiff import Tape, Tensor
from lab.core.exceptions import ShapeError
from lab.models.config import ModelConfig

logger = logging.getLogger(__name__)

INIT_STD = 0.02
LN_EPS = 1e-5

# RNG stream ids, shared with the other modules through default_rng((seed, stream, ...))
STREAM_INIT = 0


@dataclass
class Injection:
    """Replace the block output at (layer, position) with ``vector``"""
    layer: int
    position: int
    vector: np.ndarray


@dataclass
class BatchInjection:
    """One injection per batch row, all at the same layer"""
    layer: int
    positions: np.ndarray
    vectors: np.ndarray


@dataclass
class ForwardTrace:
    """Outputs of a forward pass.

    ``hidden[l]`` is Z^(l) position-major ([B, p, d], or [p, d] for a single
    sequence); ``last_hidden[l]`` is always kept, even without capture.
    """
    logits: Tensor
    last_hidden: List[np.ndarray]
    lengths: np.ndarray
    hidden: Optional[List[Tensor]] = None
    attn: Optional[List[Tensor]] = None

    def select(self, b: int) -> "ForwardTrace":
        """Single-sequence view of batch row ``b`` trimmed to its length"""
        n = int(self.lengths[b])
        return ForwardTrace(
            logits=Tensor(self.logits.data[b, :n]),
            last_hidden=[h[b] for h in self.last_hidden],
            lengths=np.array([n]),
            hidden=None if self.hidden is None else [Tensor(h.data[b, :n]) for h in self.hidden],
            attn=None if self.attn is None else [Tensor(a.data[b, :, :n, :n]) for a in self.attn],
        )


@dataclass
class TransformerModel:
    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def watch(self, tape: Tape) -> None:
        for p in self.params.values():
            tape.watch(p)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _block(l: int, name: str) -> str:
    return f"blocks.{l}.{name}"


def init_model(config: ModelConfig) -> TransformerModel:
    """Scaled normal initialization, reproducible from ``config.seed``"""
    rng = np.random.default_rng((config.seed, STREAM_INIT))
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    resid_std = INIT_STD / np.sqrt(2 * config.n_layers)

    def normal(shape, std=INIT_STD):
        return Tensor(rng.normal(0.0, std, size=shape))

    params: Dict[str, Tensor] = {
        "tok_emb": normal((V, d)),
        "pos_emb": normal((config.p_max, d)),
    }
    for l in range(config.n_layers):
        params[_block(l, "ln1.g")] = Tensor(np.ones(d))
        params[_block(l, "ln1.b")] = Tensor(np.zeros(d))
        params[_block(l, "attn.wq")] = normal((d, d))
        params[_block(l, "attn.wk")] = normal((d, d))
        params[_block(l, "attn.wv")] = normal((d, d))
        params[_block(l, "attn.wo")] = normal((d, d), resid_std)
        params[_block(l, "attn.bo")] = Tensor(np.zeros(d))
        params[_block(l, "ln2.g")] = Tensor(np.ones(d))
        params[_block(l, "ln2.b")] = Tensor(np.zeros(d))
        params[_block(l, "mlp.w1")] = normal((d, f))
        params[_block(l, "mlp.b1")] = Tensor(np.zeros(f))
        params[_block(l, "mlp.w2")] = normal((f, d), resid_std)
        params[_block(l, "mlp.b2")] = Tensor(np.zeros(d))
    params["ln_f.g"] = Tensor(np.ones(d))
    params["ln_f.b"] = Tensor(np.zeros(d))
    params["head.w"] = normal((d, V))
    params["head.b"] = Tensor(np.zeros(V))

    model = TransformerModel(config, params)
    logger.debug(f"Initialized model L={config.n_layers} d={d} heads={config.n_heads} "
                 f"({model.parameter_count()} parameters)")
    return model


def _check_ids(model: TransformerModel, ids: np.ndarray) -> None:
    cfg = model.config
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ShapeError(f"token batch must be [B, p] with p >= 1, got {list(ids.shape)}")
    if ids.shape[1] > cfg.p_max:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds p_max={cfg.p_max}")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        raise ShapeError(f"token id {int(ids[bad][0])} outside vocabulary of size {cfg.vocab_size}")


def _check_injection(model: TransformerModel, inj: BatchInjection, lengths: np.ndarray) -> None:
    L, d = model.config.n_layers, model.config.d_model
    if not 1 <= inj.layer <= L:
        raise ShapeError(f"injection layer {inj.layer} outside [1, {L}]")
    if inj.vectors.shape != (len(lengths), d):
        raise ShapeError(f"injection vectors must be [{len(lengths)}, {d}], got {list(inj.vectors.shape)}")
    if np.any(inj.positions < 0) or np.any(inj.positions >= lengths):
        raise ShapeError("injection position outside the sequence")


def _attention(model: TransformerModel, l: int, h: Tensor, tape: Optional[Tape]) -> Tensor:
    """Attention map [B, H, p, p] of block ``l`` from normalized input ``h``"""
    cfg = model.config
    P = model.params
    B, p, _ = h.shape
    H, hd = cfg.n_heads, cfg.head_dim

    def heads(w: str) -> Tensor:
        x = ad.matmul(h, P[_block(l, w)], tape=tape)
        return ad.transpose(ad.reshape(x, (B, p, H, hd), tape=tape), (0, 2, 1, 3), tape=tape)

    q, k = heads("attn.wq"), heads("attn.wk")
    kt = ad.transpose(k, (0, 1, 3, 2), tape=tape)
    if cfg.attention_kind == "softmax":
        scores = ad.scale(ad.matmul(q, kt, tape=tape), 1.0 / np.sqrt(hd), tape=tape)
        return ad.softmax_rows(scores, mask=np.triu(np.ones((p, p), dtype=bool), k=1), tape=tape)

    if cfg.feature_map == "elu_plus_one":
        q, kt = ad.elu_plus_one(q, tape=tape), ad.elu_plus_one(kt, tape=tape)
    # row i averages over its i+1 visible tokens
    weights = np.tril(np.ones((p, p))) / np.arange(1, p + 1)[:, None]
    return ad.mul(ad.matmul(q, kt, tape=tape), weights, tape=tape)


def forward_batch(
    model: TransformerModel,
    ids: Union[np.ndarray, Sequence[Sequence[int]]],
    lengths: Optional[Sequence[int]] = None,
    capture: bool = True,
    injection: Optional[BatchInjection] = None,
    tape: Optional[Tape] = None,
    watch_attention: bool = False,
) -> ForwardTrace:
    """Run a right-padded batch [B, p]; padding never affects real positions (causal mask)"""
    cfg = model.config
    P = model.params
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(model, ids)
    B, p = ids.shape
    lengths = np.full(B, p, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or np.any(lengths < 1) or np.any(lengths > p):
        raise ShapeError(f"lengths must be {B} values in [1, {p}]")
    if injection is not None:
        _check_injection(model, injection, lengths)

    rows = np.arange(B)
    last = lengths - 1
    H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model

    x = ad.add(ad.take(P["tok_emb"], ids, tape=tape), ad.take(P["pos_emb"], np.arange(p), tape=tape), tape=tape)
    hidden = [x] if capture else None
    attn: Optional[List[Tensor]] = [] if (capture or watch_attention) else None
    last_hidden = [x.data[rows, last].copy()]

    for l in range(cfg.n_layers):
        h = ad.layer_norm(x, P[_block(l, "ln1.g")], P[_block(l, "ln1.b")], LN_EPS, tape=tape)
        a = _attention(model, l, h, tape)
        if watch_attention and tape is not None:
            tape.watch(a)
        if attn is not None:
            attn.append(a)
        v = ad.transpose(ad.reshape(ad.matmul(h, P[_block(l, "attn.wv")], tape=tape), (B, p, H, hd), tape=tape),
                         (0, 2, 1, 3), tape=tape)
        o = ad.reshape(ad.transpose(ad.matmul(a, v, tape=tape), (0, 2, 1, 3), tape=tape), (B, p, d), tape=tape)
        o = ad.add(ad.matmul(o, P[_block(l, "attn.wo")], tape=tape), P[_block(l, "attn.bo")], tape=tape)
        x = ad.add(x, o, tape=tape)

        h = ad.layer_norm(x, P[_block(l, "ln2.g")], P[_block(l, "ln2.b")], LN_EPS, tape=tape)
        m = ad.gelu(ad.add(ad.matmul(h, P[_block(l, "mlp.w1")], tape=tape), P[_block(l, "mlp.b1")], tape=tape),
                    tape=tape)
        m = ad.add(ad.matmul(m, P[_block(l, "mlp.w2")], tape=tape), P[_block(l, "mlp.b2")], tape=tape)
        x = ad.add(x, m, tape=tape)

        if injection is not None and injection.layer == l + 1:
            x = ad.scatter_rows(x, (rows, injection.positions), injection.vectors, tape=tape)
        if hidden is not None:
            hidden.append(x)
        last_hidden.append(x.data[rows, last].copy())

    logits = _classify(model, x, tape)
    return ForwardTrace(logits=logits, last_hidden=last_hidden, lengths=lengths, hidden=hidden, attn=attn)


def forward(
    model: TransformerModel,
    tokens: Sequence[int],
    capture: bool = True,
    injection: Optional[Injection] = None,
) -> ForwardTrace:
    """Single-sequence forward; hidden[l] is [p, d] and logits [p, V]"""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    batch_inj = None
    if injection is not None:
        vec = np.asarray(injection.vector, dtype=np.float64).reshape(1, -1)
        batch_inj = BatchInjection(injection.layer, np.array([injection.position]), vec)
    return forward_batch(model, ids, capture=capture, injection=batch_inj).select(0)


def _classify(model: TransformerModel, h: Tensor, tape: Optional[Tape]) -> Tensor:
    P = model.params
    z = ad.layer_norm(h, P["ln_f.g"], P["ln_f.b"], LN_EPS, tape=tape)
    return ad.add(ad.matmul(z, P["head.w"], tape=tape), P["head.b"], tape=tape)


def apply_classifier(model: TransformerModel, h: Union[np.ndarray, Tensor]) -> np.ndarray:
    """Final norm then unembedding, for h of shape [d] or [n, d]"""
    h = ad.as_tensor(h)
    if h.ndim == 0 or h.shape[-1] != model.config.d_model:
        raise ShapeError(f"classifier input width {list(h.shape)} does not match d={model.config.d_model}")
    return _classify(model, h, None).data


@dataclass
class LinearAttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    feature_map: str = "identity"

    def phi(self, x: np.ndarray) -> np.ndarray:
        if self.feature_map == "identity":
            return x
        if self.feature_map == "elu_plus_one":
            return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
        raise ValueError(f"unknown feature map {self.feature_map}")


def linear_attention_terms(demos: np.ndarray, query: np.ndarray, params: LinearAttentionParams) -> np.ndarray:
    """The K+1 terms a_i = z_i v_i (demonstrations first, query term last)"""
    h = np.vstack([np.asarray(demos, dtype=np.float64).reshape(-1, query.shape[-1]), query[None, :]])
    q = params.phi(params.wq @ query)
    k = params.phi(h @ params.wk.T)
    v = h @ params.wv.T
    z = k @ q
    return z[:, None] * v


def linear_attention_step(
    demos: Sequence[np.ndarray], query: np.ndarray, params: LinearAttentionParams
) -> np.ndarray:
    """Normalized linear-attention output at the query: mean of the K+1 terms z_i v_i"""
    query = np.asarray(query, dtype=np.float64)
    d = query.shape[-1]
    for w in (params.wq, params.wk, params.wv):
        if w.shape != (d, d):
            raise ShapeError(f"weight shape {list(w.shape)} does not match d={d}")
    demos = np.asarray(demos, dtype=np.float64).reshape(-1, d) if len(demos) else np.zeros((0, d))
    terms = linear_attention_terms(demos, query, params)
    return terms.sum(axis=0) / terms.shape[0]


def save_model(model: TransformerModel, path: Union[str, Path]) -> Path:
    """Write ``<path>`` (f64 container) and ``<path>.json`` (ModelConfig)"""
    from lab.io.container import save_tensors

    path = Path(path)
    save_tensors(path, {k: v.data for k, v in model.params.items()}, dtype="f64")
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(model.config.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Saved checkpoint {path}")
    return path


def load_model(path: Union[str, Path]) -> TransformerModel:
    from lab.io.container import load_tensors

    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    config = ModelConfig.model_validate_json(sidecar.read_text(encoding="utf-8"))
    reference = init_model(config)
    tensors = load_tensors(path)
    missing = sorted(set(reference.params) - set(tensors))
    if missing:
        raise ShapeError(f"checkpoint {path} lacks parameters: {', '.join(missing[:5])}")
    params = {}
    for name, ref in reference.params.items():
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != ref.shape:
            raise ShapeError(f"parameter {name} has shape {list(arr.shape)}, expected {list(ref.shape)}")
        params[name] = Tensor(arr)
    logger.info(f"Loaded checkpoint {path}")
    return TransformerModel(config, params)
