"""Full model assembly, checkpointing, accounting, and the training loop."""

from __future__ import annotations

import struct

import numpy as np

from . import metrics, nn, optim
from . import tensor as T
from .aux_stream import AuxStream
from .backbone import Backbone
from .config import ModelConfig
from .fusion import TokenFusion
from .head import PredictionHead, ppa_loss
from .smim import ModalityInjection
from .tensor import ShapeError, Tensor

CKPT_MAGIC = b"HRTK"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointFormatError(RuntimeError):
    """File is not a checkpoint, or is truncated/garbled."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint version is one this build cannot read."""


class CheckpointConfigError(RuntimeError):
    """Checkpoint was written for a different model configuration."""


class CheckpointKeyError(RuntimeError):
    """Parameter names/shapes in the file disagree with the model."""


class TrainDivergenceError(RuntimeError):
    """Loss left the realm of finite numbers."""


class Model(nn.Module):
    """RGB + supplementary input -> saliency logits at input resolution."""

    def __init__(self, config, seed=0):
        rng = nn.make_rng(seed)
        self.aux = AuxStream(config, rng)
        self.inject = [ModalityInjection(c, rng, init_scale=config.init_scale)
                       for c in config.branch_channels]
        self.trunk = Backbone(config, rng)
        self.fusion = TokenFusion(config, rng)
        self.head = PredictionHead(config, rng)
        self.config = config

    def forward(self, image, supp):
        """image (B,3,H,W); supp (B,supp_channels,H,W); returns logits."""
        if supp.shape[0] != image.shape[0]:
            raise ShapeError("image/supp batch sizes differ")
        if supp.shape[2:] != image.shape[2:]:
            raise ShapeError(
                f"supp spatial size {supp.shape[2:]} != image {image.shape[2:]}")
        supp_feats = self.aux(supp)
        feats = self.trunk.forward_with_entries(
            image, lambda i, raw: self.inject[i](raw, supp_feats[i]))
        fused = self.fusion(feats)
        return self.head(fused)

    def predict_prob(self, image, supp):
        with T.no_grad():
            return T.sigmoid(self.forward(image, supp)).data


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model, step=0):
    """Binary dump: magic, version, step, config text, named raw arrays."""
    params = model.named_parameters()
    cfg = model.config.canonical_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(p.data)
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.blob):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self):
        return self.take(1)[0]


def read_checkpoint(path):
    """Parse a checkpoint into (config_text, step, {name: array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    step = r.u64()
    cfg_len = r.u32()
    try:
        cfg_text = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"config block is not UTF-8: {e}") from None
    n = r.u32()
    arrays = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        tag = r.u8()
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name!r}")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        dt = _TAG_DTYPES[tag]
        raw = r.take(count * dt.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.off != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - r.off} trailing bytes after last parameter")
    return cfg_text, step, arrays


def load_checkpoint(path, model, expect_config=True):
    """Load arrays into `model`; returns the stored step."""
    cfg_text, step, arrays = read_checkpoint(path)
    if expect_config and cfg_text != model.config.canonical_text():
        raise CheckpointConfigError(
            "checkpoint was written for a different configuration:\n"
            f"--- file ---\n{cfg_text}--- model ---\n{model.config.canonical_text()}")
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointKeyError(
            f"parameter names disagree; missing={missing[:4]} extra={extra[:4]}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointKeyError(
                f"{name}: file has shape {arr.shape}, model wants {p.data.shape}")
        p.data = arr.astype(p.data.dtype) if arr.dtype != p.data.dtype else arr
    return step


# -- accounting --------------------------------------------------------------


def count_params_flops(model, batch=1):
    """Exact parameter count plus multiply-add FLOPs of one forward pass.

    FLOPs are counted at runtime: every matmul contributes 2*M*K*N and
    every convolution 2 * out_elems * (C_in * kh * kw); resizes ride on
    their interpolation matmuls; elementwise work is not charged.
    """
    cfg = model.config
    n_params = sum(p.size for p in model.parameters())
    h, w = cfg.input_hw
    image = Tensor(np.zeros((batch, 3, h, w)))
    supp = Tensor(np.zeros((batch, cfg.supp_channels, h, w)))
    with T.no_grad(), T.flop_counter() as count:
        model.forward(image, supp)
    return n_params, count[0]


# -- training ----------------------------------------------------------------


def _as_batches(arrays, batch_size, order):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield tuple(a[idx] for a in arrays)


def train_loop(model, images, supps, gts, train_cfg, log=None,
               on_eval=None):
    """Optimize with decoupled-decay Adam; returns a history dict.

    images/supps/gts are numpy arrays (N,3,H,W), (N,C,H,W), (N,1,H,W).
    Early-stops once the train-set MAE and adaptive F targets are both
    met (if enabled in train_cfg). Raises TrainDivergenceError when the
    loss goes non-finite.
    """
    rng = np.random.Generator(np.random.PCG64(train_cfg.seed))
    clip = train_cfg.grad_clip if train_cfg.grad_clip > 0 else None
    opt = optim.AdamW(model.named_parameters(), lr=train_cfg.lr,
                      weight_decay=train_cfg.weight_decay, grad_clip=clip)
    dt = images.dtype.type
    history = {"steps": [], "loss": [], "eval_steps": [], "mae": [], "fmeasure": []}

    def evaluate():
        probs = []
        with T.no_grad():
            for im, sp, _ in _as_batches((images, supps, gts),
                                         train_cfg.batch_size,
                                         np.arange(len(images))):
                probs.append(T.sigmoid(model(Tensor(im, dtype=dt),
                                             Tensor(sp, dtype=dt))).data)
        res = metrics.evaluate_batch(np.concatenate(probs, axis=0), gts)
        return res["mae"], res["fmeasure"]

    step = 0
    stop = False
    while step < train_cfg.steps and not stop:
        order = rng.permutation(len(images))
        for im, sp, gt in _as_batches((images, supps, gts),
                                      train_cfg.batch_size, order):
            try:
                loss = ppa_loss(model(Tensor(im, dtype=dt), Tensor(sp, dtype=dt)),
                                gt.astype(np.float64))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainDivergenceError(f"loss became {value} at step {step}")
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            except T.NonFiniteError as e:
                raise TrainDivergenceError(f"step {step}: {e}") from None
            step += 1
            history["steps"].append(step)
            history["loss"].append(value)
            if log is not None and (step % 10 == 0 or step == 1):
                log(f"step {step:5d}  loss {value:.4f}")
            hit_eval = (train_cfg.eval_every and step % train_cfg.eval_every == 0)
            if hit_eval or step >= train_cfg.steps:
                m, f = evaluate()
                history["eval_steps"].append(step)
                history["mae"].append(m)
                history["fmeasure"].append(f)
                if log is not None:
                    log(f"step {step:5d}  eval mae {m:.4f}  F {f:.4f}")
                if on_eval is not None:
                    on_eval(step, m, f)
                if (train_cfg.target_mae > 0 and m < train_cfg.target_mae
                        and f > train_cfg.target_fmeasure):
                    stop = True
            if step >= train_cfg.steps or stop:
                break
    return history


def default_toy_config(**overrides):
    """Small configuration that trains in minutes on a laptop CPU."""
    base = dict(
        input_hw=(64, 64),
        branch_channels=(16, 32, 64, 128),
        blocks_per_stage=(1, 1, 1, 1),
        attention_heads=4,
        window_size=8,
        token_dim=64,
        triple_it_depth=2,
        ffn_ratio=2,
        supp_channels=1,
        init_scale=1.0,
    )
    base.update(overrides)
    return ModelConfig(**base)
