"""RFOP network: per-modality projections, attention-gated fusion, linear head.

Also owns the ``RFOP1`` checkpoint format::

    b"RFOP1" | uint64 LE manifest length | UTF-8 JSON manifest | float64 LE blob

The manifest lists every parameter as ``{"name", "shape", "offset"}`` with the
offset in bytes from the start of the blob, plus the model config and any
caller-supplied metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MAGIC = b"RFOP1"
PARAM_NAMES = ("Wf", "bf", "Wv", "bv", "K", "c", "Wc", "bc")


@dataclass(frozen=True)
class ModelConfig:
    face_dim: int = 4096
    voice_dim: int = 512
    latent_dim: int = 128
    num_identities: int = 100
    conv_kernel: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("face_dim", "voice_dim", "latent_dim", "num_identities", "conv_kernel"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive int, got {v!r}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class RFOPParams:
    Wf: Tensor  # d x Df
    bf: Tensor  # d
    Wv: Tensor  # d x Dv
    bv: Tensor  # d
    K: Tensor  # 2 x kappa
    c: Tensor  # (1,)
    Wc: Tensor  # C x d
    bc: Tensor  # C
    config: ModelConfig = field(default_factory=ModelConfig)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "RFOPParams":
        return RFOPParams(
            *(Tensor(t.data.copy(), requires_grad=t.requires_grad) for t in self.tensors()),
            config=self.config,
        )

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named():
            if state[n].shape != t.shape:
                raise ValueError(f"{n}: shape {state[n].shape} does not match {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)

    def validate(self) -> None:
        cfg = self.config
        d = cfg.latent_dim
        want = {
            "Wf": (d, cfg.face_dim),
            "bf": (d,),
            "Wv": (d, cfg.voice_dim),
            "bv": (d,),
            "K": (2, cfg.conv_kernel),
            "c": (1,),
            "Wc": (cfg.num_identities, d),
            "bc": (cfg.num_identities,),
        }
        for n, t in self.named():
            if t.shape != want[n]:
                raise ValueError(f"{n}: expected shape {want[n]}, got {t.shape}")
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"{n}: non-finite entries")


class LatentPair(NamedTuple):
    Xf: Tensor
    Xv: Tensor


class ForwardOutput(NamedTuple):
    latent: LatentPair
    attention: Tensor
    fused: Tensor
    logits: Tensor


def init_params(cfg: ModelConfig) -> RFOPParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.latent_dim

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return RFOPParams(
        Wf=uniform((d, cfg.face_dim), cfg.face_dim),
        bf=zeros(d),
        Wv=uniform((d, cfg.voice_dim), cfg.voice_dim),
        bv=zeros(d),
        K=uniform((2, cfg.conv_kernel), 2 * cfg.conv_kernel),
        c=zeros(1),
        Wc=uniform((cfg.num_identities, d), d),
        bc=zeros(cfg.num_identities),
        config=cfg,
    )


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def project(params: RFOPParams, face_feats, voice_feats) -> LatentPair:
    face_feats, voice_feats = _as_input(face_feats), _as_input(voice_feats)
    if face_feats.data.ndim != 2 or face_feats.shape[1] != params.Wf.shape[1]:
        raise ValueError(f"face features {face_feats.shape} do not match face_dim {params.Wf.shape[1]}")
    if voice_feats.data.ndim != 2 or voice_feats.shape[1] != params.Wv.shape[1]:
        raise ValueError(f"voice features {voice_feats.shape} do not match voice_dim {params.Wv.shape[1]}")
    return LatentPair(
        ag.linear(face_feats, params.Wf, params.bf),
        ag.linear(voice_feats, params.Wv, params.bv),
    )


def attention_weights(latent: LatentPair) -> Tensor:
    """Per-coordinate gates ``sigmoid(tanh(Xf) + tanh(Xv))``, strictly inside (0, 1)."""
    return ag.sigmoid(ag.add(ag.tanh(latent.Xf), ag.tanh(latent.Xv)))


def fuse(latent: LatentPair, params: RFOPParams, return_attention: bool = False):
    if latent.Xf.shape != latent.Xv.shape:
        raise ValueError(f"latent shapes differ: {latent.Xf.shape} vs {latent.Xv.shape}")
    w = attention_weights(latent)
    stacked = ag.concat_channels(ag.mul(w, latent.Xf), ag.mul(w, latent.Xv))
    fused = ag.conv1d_mix(stacked, params.K, params.c)
    return (fused, w) if return_attention else fused


def classify(fused: Tensor, params: RFOPParams) -> Tensor:
    """Identity logits; softmax is left to the loss."""
    if fused.data.ndim != 2 or fused.shape[1] != params.Wc.shape[1]:
        raise ValueError(f"fused embedding {fused.shape} does not match latent_dim {params.Wc.shape[1]}")
    return ag.linear(fused, params.Wc, params.bc)


def forward(params: RFOPParams, face_feats, voice_feats) -> ForwardOutput:
    face_feats, voice_feats = _as_input(face_feats), _as_input(voice_feats)
    if face_feats.shape[0] != voice_feats.shape[0]:
        raise ValueError(f"batch sizes differ: {face_feats.shape[0]} faces vs {voice_feats.shape[0]} voices")
    latent = project(params, face_feats, voice_feats)
    fused, w = fuse(latent, params, return_attention=True)
    return ForwardOutput(latent, w, fused, classify(fused, params))


def embed_faces(params: RFOPParams, feats: np.ndarray) -> np.ndarray:
    """Face latents as a plain array (no graph)."""
    return feats @ params.Wf.data.T + params.bf.data


def embed_voices(params: RFOPParams, feats: np.ndarray) -> np.ndarray:
    return feats @ params.Wv.data.T + params.bv.data


# ---------------------------------------------------------------------------
# checkpoint I/O


def checkpoint_bytes(params: RFOPParams, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in params.named():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"config": asdict(params.config), "meta": meta or {}, "params": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_checkpoint(path, params: RFOPParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def parse_checkpoint(buf: bytes) -> tuple[RFOPParams, dict]:
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError("not an RFOP1 checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise ValueError("truncated checkpoint header")
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    try:
        manifest = json.loads(buf[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint manifest: {exc}") from exc
    blob = buf[pos + n :]
    cfg = ModelConfig(**manifest["config"])
    tensors = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 8 * count
        if start < 0 or end > len(blob):
            raise ValueError(f"parameter {entry['name']} lies outside the checkpoint blob")
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(arr, requires_grad=True)
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    params = RFOPParams(**tensors, config=cfg)
    params.validate()
    return params, manifest.get("meta", {})


def load_checkpoint(path) -> tuple[RFOPParams, dict]:
    return parse_checkpoint(Path(path).read_bytes())
