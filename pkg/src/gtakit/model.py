"""Encoder-decoder transformer for rotation-only novel view synthesis.

Each context view becomes one token (flattened image through a 2-layer MLP)
tagged with its camera rotation. Pre-LN self-attention blocks encode the
tokens; a learned constant query tagged with the target rotation
cross-attends to them, and a 2-layer MLP maps it to the predicted image.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attn, reps
from . import diffcore as dc
from .diffcore import Tensor
from .scene import Dataset, N_CONTEXT

log = logging.getLogger(__name__)

# CLI spelling -> attention variant
VARIANT_ALIASES = {"ape": "ape", "rpe": "rpe_bias", "rpe_bias": "rpe_bias", "gta": "gta",
                   "gta-euclid": "gta_euclid", "gta_euclid": "gta_euclid",
                   "gta-kron": "gta_kron", "gta_kron": "gta_kron", "vanilla": "vanilla"}
PSNR_CAP = 99.0


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    token_dim: int = 126
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    mlp_hidden: int = 256
    ffn_mult: int = 2
    variant: str = "gta"
    n_heads: int = 1
    seed: int = 0
    image_size: int = 32
    dtype: str = "float32"
    transform_values: bool = True
    rpe_keep_value_bias: bool = False

    def __post_init__(self):
        self.variant = VARIANT_ALIASES.get(self.variant, self.variant)
        if self.variant not in attn.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.token_dim % self.n_heads:
            raise ValueError("token_dim must be divisible by n_heads")
        hd = self.head_dim
        if self.variant in ("gta", "gta_euclid") and hd % 3:
            raise ValueError(f"{self.variant} needs a head dim divisible by 3, got {hd}")
        if self.variant == "gta_kron" and hd % 16:
            raise ValueError(f"gta_kron needs a head dim divisible by 16, got {hd}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def rep_spec(self):
        if self.variant in ("gta", "gta_euclid"):
            return reps.rotation_stack_spec(self.head_dim)
        if self.variant == "gta_kron":
            return reps.kronecker_spec(self.head_dim // 16)
        return None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-3
    batch_size: int = 16
    steps: int = 20000
    eval_interval: int = 1000
    eval_scenes: int = 500
    warmup: int = 0
    view_shuffle: bool = False
    seed: int = 0
    train_data: str = ""
    test_data: str = ""

    def __post_init__(self):
        for name in ("lr", "batch_size", "steps", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup < 0:
            raise ValueError("weight_decay and warmup must be non-negative")


# ---------------------------------------------------------------- model

class NvsModel:
    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        dt = cfg.np_dtype
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        d, hid = cfg.token_dim, cfg.mlp_hidden
        pix = cfg.image_size * cfg.image_size * 3
        self.params: dict[str, Tensor] = {}
        P = self.params

        def lin(name, fan_in, fan_out):
            P[name + ".w"] = dc.xavier_uniform(rng, fan_in, fan_out, dt)
            P[name + ".b"] = dc.zeros((fan_out,), dt)

        def ln(name):
            P[name + ".g"] = dc.ones((d,), dt)
            P[name + ".b"] = dc.zeros((d,), dt)

        lin("enc_in.0", pix, hid)
        lin("enc_in.1", hid, d)
        acfg = attn.AttnConfig(cfg.n_heads, cfg.head_dim, cfg.variant, cfg.rep_spec(),
                               cfg.transform_values, cfg.rpe_keep_value_bias)
        self.attn = {}
        for part, n_layers in (("enc", cfg.n_enc_layers), ("dec", cfg.n_dec_layers)):
            for l in range(n_layers):
                pre = f"{part}.{l}."
                ln(pre + "ln1")
                ln(pre + "ln2")
                mha = attn.MultiHeadAttention(d, acfg, rng, dt, prefix=pre + "attn.")
                self.attn[pre] = mha
                P.update(mha.params)
                lin(pre + "ffn.0", d, cfg.ffn_mult * d)
                lin(pre + "ffn.1", cfg.ffn_mult * d, d)
                if cfg.variant == "ape":
                    P[pre + "pe.w"] = dc.xavier_uniform(rng, 9, d, dt)
        ln("enc_out")
        P["query"] = Tensor(rng.normal(0.0, 0.02, size=(d,)).astype(dt), requires_grad=True)
        ln("dec_out")
        lin("out.0", d, hid)
        lin("out.1", hid, pix)

    # -- helpers

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return dc.linear(x, self.params[name + ".w"], self.params[name + ".b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return dc.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def geometry(self, R: np.ndarray):
        """Per-token geometry for rotations ``batch + (3, 3)``."""
        cfg = self.config
        dt = cfg.np_dtype
        if cfg.variant in ("gta", "gta_euclid"):
            return _cast(reps.build_rep_arrays(cfg.rep_spec(), R=R.astype(np.float64)), dt)
        if cfg.variant == "gta_kron":
            shape = R.shape[:-2]
            kr = reps.build_rep_kronecker_arrays(cfg.rep_spec(), R.astype(np.float64),
                                                 np.zeros(shape + (3,)), np.zeros(shape),
                                                 np.zeros(shape))
            return reps.KroneckerRep(kr.spec, _cast(kr.left, dt), _cast(kr.right, dt))
        if cfg.variant == "rpe_bias":
            return R.astype(dt)
        return None

    def _block(self, pre: str, x: Tensor, kv: Optional[Tensor], geom, geom_kv, R, R_kv,
               record) -> Tensor:
        h = self._ln(x, pre + "ln1")
        ape = None
        if self.config.variant == "ape":
            w = self.params[pre + "pe.w"]
            E = dc.matmul(Tensor(_flat_rot(R, x.dtype)), w)
            E_kv = E if R_kv is None else dc.matmul(Tensor(_flat_rot(R_kv, x.dtype)), w)
            ape = (E, E_kv)
        rec = [] if record is not None else None
        a = self.attn[pre](h, geom, kv, geom_kv, ape=ape, record=rec)
        if record is not None:
            record.append((pre, rec[0]))
        x = x + a
        f = self._lin(dc.gelu(self._lin(self._ln(x, pre + "ln2"), pre + "ffn.0")), pre + "ffn.1")
        return x + f

    # -- forward

    def encode(self, images: np.ndarray, rotations: np.ndarray, record=None) -> Tensor:
        """Tokens ``(B, 8, d)`` from context images ``(B, 8, S, S, 3)``."""
        cfg = self.config
        S = cfg.image_size
        if images.ndim != 5 or images.shape[1:] != (N_CONTEXT, S, S, 3):
            raise ValueError(f"expected context images (B, {N_CONTEXT}, {S}, {S}, 3), got {images.shape}")
        if rotations.shape != images.shape[:2] + (3, 3):
            raise ValueError(f"rotations shape {rotations.shape} does not match images")
        B = images.shape[0]
        x = Tensor(images.reshape(B, N_CONTEXT, -1).astype(cfg.np_dtype))
        x = self._lin(dc.gelu(self._lin(x, "enc_in.0")), "enc_in.1")
        geom = self.geometry(rotations)
        for l in range(cfg.n_enc_layers):
            x = self._block(f"enc.{l}.", x, None, geom, None, rotations, None, record)
        return self._ln(x, "enc_out")

    def decode(self, tokens: Tensor, ctx_rotations: np.ndarray, target_rotation: np.ndarray,
               record=None) -> Tensor:
        """Predicted target images ``(B, S, S, 3)``."""
        cfg = self.config
        B = tokens.shape[0]
        q = dc.broadcast_rows(self.params["query"], (B, 1, cfg.token_dim))
        Rq = target_rotation.reshape(B, 1, 3, 3)
        geom_q = self.geometry(Rq)
        geom_kv = self.geometry(ctx_rotations)
        for l in range(cfg.n_dec_layers):
            q = self._block(f"dec.{l}.", q, tokens, geom_q, geom_kv, Rq, ctx_rotations, record)
        y = self._ln(q, "dec_out")
        y = self._lin(dc.gelu(self._lin(y, "out.0")), "out.1")
        S = cfg.image_size
        return dc.reshape(y, (B, S, S, 3))

    def forward(self, ctx_images, ctx_rotations, target_rotation, record=None) -> Tensor:
        tokens = self.encode(ctx_images, ctx_rotations, record)
        return self.decode(tokens, ctx_rotations, target_rotation, record)

    __call__ = forward

    def loss(self, ctx_images, ctx_rotations, target_rotation, target_images) -> Tensor:
        pred = self.forward(ctx_images, ctx_rotations, target_rotation)
        return dc.mse_loss(pred, target_images.astype(self.config.np_dtype))

    def predict(self, ctx_images, ctx_rotations, target_rotation, batch_size: int = 64) -> np.ndarray:
        out = []
        with dc.no_grad():
            for s in range(0, len(ctx_images), batch_size):
                sl = slice(s, s + batch_size)
                out.append(self.forward(ctx_images[sl], ctx_rotations[sl],
                                        target_rotation[sl]).data)
        return np.concatenate(out) if out else np.zeros((0,) + (self.config.image_size,) * 2 + (3,))

    def record_attention(self, ctx_images, ctx_rotations, target_rotation) -> attn.AttnRecord:
        """Run one batch and collect encoder self-attention weights."""
        raw = []
        with dc.no_grad():
            self.forward(ctx_images, ctx_rotations, target_rotation, record=raw)
        rec = attn.AttnRecord()
        enc = [(pre, w) for pre, w in raw if pre.startswith("enc.")]
        for pre, w in enc:
            rec.add(int(pre.split(".")[1]), w)
        rec.token_view = np.arange(N_CONTEXT)
        rec.token_patch = np.zeros(N_CONTEXT, dtype=int)
        return rec

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _cast(P: reps.Representation, dtype) -> reps.Representation:
    return reps.Representation(P.spec, [None if a is None else a.astype(dtype) for a in P.runs],
                               P.batch_shape)


def _flat_rot(R: np.ndarray, dtype) -> np.ndarray:
    return R.reshape(R.shape[:-2] + (9,)).astype(dtype)


# ---------------------------------------------------------------- metrics

def mse_per_image(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return (diff * diff).reshape(len(diff), -1).mean(axis=1)


def psnr(mse: float) -> float:
    """``-10 log10(mse)`` for pixels in [0, 1], capped at 99 dB."""
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def evaluate(model: NvsModel, data: Dataset, batch_size: int = 64) -> dict:
    pred = model.predict(data.context_images, data.context_rotations, data.target_rotations,
                         batch_size)
    mse = float(mse_per_image(pred, data.target_images).mean()) if len(data) else float("nan")
    return {"mse": mse, "psnr": psnr(mse)}


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GTAC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict                      # name -> float array
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = self.config.hash()

    @classmethod
    def from_training(cls, model: NvsModel, opt: Optional[dc.AdamW], step: int) -> Checkpoint:
        m = dict(opt.state.m) if opt else {}
        v = dict(opt.state.v) if opt else {}
        return cls(model.config, {k: p.data for k, p in model.params.items()}, step, m, v)

    def build_model(self) -> NvsModel:
        model = NvsModel(self.config)
        for name, p in model.params.items():
            if name not in self.params:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            arr = self.params[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        return model


def _put_blob(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)) + nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _get_blob(buf: bytes, off: int):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    name = buf[off:off + n].decode()
    off += n
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
    return name, arr, off + 4 * count


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian container: header, config, then named f32 blobs.

    Blob layout: u32 name length, name bytes, u32 rank, rank x u32 dims,
    f32 payload. Optimizer moments are stored as ``adam.m/<name>`` and
    ``adam.v/<name>``.
    """
    cfg = ckpt.config.to_json().encode()
    h = ckpt.config_hash.encode()
    blobs = list(ckpt.params.items())
    blobs += [("adam.m/" + k, v) for k, v in ckpt.adam_m.items()]
    blobs += [("adam.v/" + k, v) for k, v in ckpt.adam_v.items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, ckpt.step))
        fh.write(struct.pack("<I", len(h)) + h)
        fh.write(struct.pack("<I", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            _put_blob(fh, name, np.asarray(arr))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None


def _parse_checkpoint(buf: bytes, path) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, step = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    (n,) = struct.unpack_from("<I", buf, off)
    stored_hash = buf[off + 4:off + 4 + n].decode()
    off += 4 + n
    (n,) = struct.unpack_from("<I", buf, off)
    config = ModelConfig(**json.loads(buf[off + 4:off + 4 + n]))
    off += 4 + n
    if config.hash() != stored_hash:
        raise CheckpointError(f"{path}: config hash mismatch")
    (n_blobs,) = struct.unpack_from("<I", buf, off)
    off += 4
    params, m, v = {}, {}, {}
    for _ in range(n_blobs):
        name, arr, off = _get_blob(buf, off)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return Checkpoint(config, params, step, m, v, stored_hash)


# ---------------------------------------------------------------- training

METRIC_FIELDS = ("step", "split", "mse", "psnr")


@dataclass
class TrainResult:
    metrics: list          # dict rows with METRIC_FIELDS
    checkpoint: Checkpoint
    seconds: float

    def final(self, split: str = "test") -> dict:
        rows = [r for r in self.metrics if r["split"] == split]
        return rows[-1] if rows else {}


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        wr.writeheader()
        for r in rows:
            wr.writerow({"step": r["step"], "split": r["split"],
                         "mse": f"{r['mse']:.9g}", "psnr": f"{r['psnr']:.6f}"})


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "split": r["split"], "mse": float(r["mse"]),
                 "psnr": float(r["psnr"])} for r in csv.DictReader(fh)]


def shuffle_views(rotations: np.ndarray, images: np.ndarray, rng: np.random.Generator):
    """Random view roles per scene, re-expressed in the first context's frame.

    Returns ``(ctx_images, ctx_rotations, target_rotation, target_image)``.
    """
    B, V = rotations.shape[:2]
    order = np.argsort(rng.random((B, V)), axis=1)
    rows = np.arange(B)[:, None]
    R = rotations[rows, order].astype(np.float64)
    imgs = images[rows, order]
    R = R @ np.swapaxes(R[:, :1], -1, -2)
    R = R.astype(rotations.dtype)
    return imgs[:, :-1], R[:, :-1], R[:, -1], imgs[:, -1]


def train(tcfg: TrainConfig, mcfg: ModelConfig, train_data: Optional[Dataset] = None,
          test_data: Optional[Dataset] = None, metrics_path=None, progress=None) -> TrainResult:
    """AdamW on per-pixel MSE; evaluates train/test every ``eval_interval`` steps."""
    from .scene import read_dataset

    if train_data is None:
        if not tcfg.train_data or not Path(tcfg.train_data).exists():
            raise FileNotFoundError(f"training data not found: {tcfg.train_data!r}")
        train_data = read_dataset(tcfg.train_data)
    if test_data is None and tcfg.test_data:
        test_data = read_dataset(tcfg.test_data)
    n_train = len(train_data)
    if n_train == 0:
        raise ValueError("empty training set")
    model = NvsModel(mcfg)
    opt = dc.AdamW(model.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 2]))
    train_eval = train_data.subset(min(tcfg.eval_scenes, n_train))
    test_eval = test_data.subset(min(tcfg.eval_scenes, len(test_data))) if test_data is not None else None
    rows = []
    t0 = time.time()
    perm, pos = order_rng.permutation(n_train), 0
    ctx_img, ctx_rot = train_data.context_images, train_data.context_rotations
    tgt_rot, tgt_img = train_data.target_rotations, train_data.target_images

    def log_eval(step):
        for split, data in (("train", train_eval), ("test", test_eval)):
            if data is None:
                continue
            m = evaluate(model, data)
            rows.append({"step": step, "split": split, **m})
        if metrics_path:
            write_metrics(metrics_path, rows)
        if progress:
            progress(step, rows)

    for step in range(1, tcfg.steps + 1):
        if pos + tcfg.batch_size > n_train:
            perm, pos = order_rng.permutation(n_train), 0
        idx = np.sort(perm[pos:pos + tcfg.batch_size])
        pos += tcfg.batch_size
        if tcfg.warmup:
            opt.state.lr = tcfg.lr * min(1.0, step / tcfg.warmup)
        opt.zero_grad()
        if tcfg.view_shuffle:
            batch = shuffle_views(train_data.rotations[idx], train_data.images[idx], order_rng)
        else:
            batch = (ctx_img[idx], ctx_rot[idx], tgt_rot[idx], tgt_img[idx])
        loss = model.loss(*batch)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss {float(loss.data)} at step {step}; "
                                   f"lr={opt.state.lr}, batch={idx.tolist()}")
        loss.backward()
        opt.step()
        if step % tcfg.eval_interval == 0 or step == tcfg.steps:
            log_eval(step)
    return TrainResult(rows, Checkpoint.from_training(model, opt, tcfg.steps), time.time() - t0)
