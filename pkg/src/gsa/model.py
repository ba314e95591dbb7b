"""Small pre-norm decoder-only language model built around the attention layer."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from gsa import tensor as T
from gsa.attention import ConfigError, GsaConfig, LayerParams, LayerTrace, layer_forward
from gsa.indexer import SparsityState
from gsa.rng import Rng, init_matrix
from gsa.tensor import Tensor


@dataclass
class ModelConfig:
    n_layers: int = 2
    vocab_size: int = 256
    ffn_width: int = 128
    attention: GsaConfig = field(default_factory=GsaConfig)
    norm_eps: float = 1e-6

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = GsaConfig.from_dict(self.attention)
        for name in ("n_layers", "vocab_size", "ffn_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class TransformerLM:
    """Embedding -> n_layers x (attention + SwiGLU FFN, pre-RMSNorm) -> RMSNorm -> vocab head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        acfg = cfg.attention
        rng = Rng(seed, "init")
        d, std = acfg.d, acfg.init_std
        out_std = std / np.sqrt(2 * cfg.n_layers)
        self.embed = init_matrix(cfg.vocab_size, d, "normal", rng.child("embed"), std, dtype)
        self.layers: list[LayerParams] = []
        self.blocks: list[dict[str, Tensor]] = []
        self.states: list[SparsityState] = []
        for i in range(cfg.n_layers):
            lr = rng.child(f"layer{i}")
            self.layers.append(LayerParams.init(acfg, lr.child("attn"), dtype, out_std=out_std))
            self.blocks.append({
                "norm1": Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                "norm2": Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                "W1": init_matrix(d, cfg.ffn_width, "normal", lr.child("W1"), std, dtype),
                "W3": init_matrix(d, cfg.ffn_width, "normal", lr.child("W3"), std, dtype),
                "W2": init_matrix(cfg.ffn_width, d, "normal", lr.child("W2"), out_std, dtype),
            })
            self.states.append(SparsityState(decay=acfg.ema_decay))
        self.norm_f = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.head = init_matrix(d, cfg.vocab_size, "normal", rng.child("head"), std, dtype)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        out["embed"] = self.embed
        for i, (layer, block) in enumerate(zip(self.layers, self.blocks)):
            for k, v in layer.named().items():
                out[f"layers.{i}.attn.{k}"] = v
            for k, v in block.items():
                out[f"layers.{i}.{k}"] = v
        out["norm_f"] = self.norm_f
        out["head"] = self.head
        return out

    def param_groups(self) -> dict[str, str]:
        """Map every parameter name to its optimizer group: base, indexer or gates."""
        groups = {}
        for name in self.named_parameters():
            if ".attn.indexer." in name:
                groups[name] = "indexer"
            elif ".attn.gates." in name:
                groups[name] = "gates"
            else:
                groups[name] = "base"
        return groups

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    # -- forward ------------------------------------------------------------
    def _rope(self, length: int):
        acfg = self.cfg.attention
        if not acfg.rope:
            return None
        if length not in self._rope_cache:
            cos_k, sin_k = T.rope_tables(length, acfg.d_k, acfg.rope_base)
            cos_i, sin_i = T.rope_tables(length, acfg.d_I, acfg.rope_base)
            self._rope_cache[length] = ((cos_k, sin_k), (cos_i, sin_i))
        return self._rope_cache[length]

    def forward(self, tokens: np.ndarray, phase: str = "sparse", update_state: bool = False,
                counted_topk: bool | None = None) -> tuple[Tensor, list[LayerTrace]]:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.max(initial=0) >= self.cfg.vocab_size or tokens.min(initial=0) < 0:
            raise ValueError("token id out of range")
        B, L = tokens.shape
        rope = self._rope(L)
        eps = self.cfg.norm_eps
        x = T.embedding(self.embed, tokens)
        traces = []
        for layer, block, state in zip(self.layers, self.blocks, self.states):
            h = T.rms_norm(x, block["norm1"], eps)
            u, tr = layer_forward(h, layer, self.cfg.attention, state, phase, update_state,
                                  rope=rope, counted_topk=counted_topk)
            traces.append(tr)
            x = x + u
            h2 = T.rms_norm(x, block["norm2"], eps)
            f = T.mul(T.silu(h2 @ block["W1"]), h2 @ block["W3"]) @ block["W2"]
            x = x + f
        x = T.rms_norm(x, self.norm_f, eps)
        return x @ self.head, traces

