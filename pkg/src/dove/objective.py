"""Loss computations for dynamic-length tokenizer training.

Covers the weighted reconstruction loss (MSE + perceptual + GAN), the
rolling dynamic threshold that decides whether the EOS loss pushes
termination later or rewards earlier termination, the linear EOS-weight
warmup, the total loss, and the query-conditioned region losses with
their extra early-termination penalty.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .codec import Discriminator, PerceptualExtractor, generator_gan_loss
from .corpus import bilinear_weight_matrix
from .nncore import ConfigError, ShapeMismatch, Tensor, constant


class ObjectiveError(Exception):
    pass


class DegenerateBoxError(ObjectiveError):
    pass


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    perc: float = 0.1
    gan: float = 5e-10
    rec: float = 1.0
    eos_max: float = 0.1
    warmup_fraction: float = 0.5
    lambda_o: float = 1e-10
    kl_beta: float = 1e-3
    commit: float = 0.25

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


class ThresholdState:
    """Rolling statistic of recent reconstruction losses (float64).

    The default is the arithmetic mean of the last `window` values; an
    exponential moving average is available behind mode="ema". An empty
    state reads as 0.0, so the very first sample always compares as
    above-threshold.
    """

    def __init__(self, window: int = 100, mode: str = "window", ema_decay: float = 0.99):
        if mode not in ("window", "ema"):
            raise ConfigError(f"unknown threshold mode {mode!r}")
        if window < 1:
            raise ConfigError(f"threshold window must be >= 1, got {window}")
        self.window = int(window)
        self.mode = mode
        self.ema_decay = float(ema_decay)
        self.values: deque[float] = deque(maxlen=self.window)
        self._ema: float | None = None

    def current(self) -> float:
        if self.mode == "ema":
            return 0.0 if self._ema is None else self._ema
        if not self.values:
            return 0.0
        return float(np.mean(np.fromiter(self.values, dtype=np.float64)))

    def push(self, value: float) -> None:
        v = float(value)
        if not np.isfinite(v):
            raise ObjectiveError(f"non-finite loss pushed to threshold state: {v}")
        self.values.append(v)
        self._ema = v if self._ema is None else self.ema_decay * self._ema + (1 - self.ema_decay) * v

    def __len__(self) -> int:
        return len(self.values)

    def state_dict(self) -> dict:
        return {"window": self.window, "mode": self.mode, "ema_decay": self.ema_decay,
                "values": list(self.values), "ema": self._ema}

    @classmethod
    def from_state_dict(cls, d: dict) -> "ThresholdState":
        st = cls(window=d["window"], mode=d["mode"], ema_decay=d["ema_decay"])
        for v in d["values"]:
            st.values.append(float(v))
        st._ema = d["ema"]
        return st


def update_threshold(state: ThresholdState, rec_loss_value: float) -> float:
    """Push a new loss and return the statistic over the updated buffer."""
    state.push(rec_loss_value)
    return state.current()


# ---------------------------------------------------------------------------
# Reconstruction loss


def rec_loss(x: Tensor, xhat: Tensor, weights: LossWeights,
             extractor: PerceptualExtractor,
             discriminator: Discriminator | None = None):
    """Weighted per-sample reconstruction loss; returns ((N,), parts dict).

    total = mse_w * MSE + perc_w * perceptual + gan_w * generator GAN term.
    The GAN term is only computed when a discriminator is supplied and its
    weight is nonzero, so a zero weight reduces the loss to the first two
    terms exactly.
    """
    if x.shape != xhat.shape:
        raise ShapeMismatch(f"rec_loss: shapes differ {x.shape} vs {xhat.shape}")
    diff = nn.sub(x, xhat)
    mse = nn.mean(nn.mul(diff, diff), axis=(1, 2, 3))
    perc = extractor.distance(x, xhat)
    parts = {"mse": mse, "perc": perc}
    total = nn.add(nn.mul(mse, weights.mse), nn.mul(perc, weights.perc))
    if discriminator is not None and weights.gan != 0.0:
        gan = generator_gan_loss(discriminator, xhat)
        parts["gan"] = gan
        total = nn.add(total, nn.mul(gan, weights.gan))
    else:
        parts["gan"] = constant(np.zeros(x.shape[0], dtype=np.float32))
    return total, parts


# ---------------------------------------------------------------------------
# EOS loss and schedule


def _as_prob_vector(p_eos) -> Tensor:
    p = p_eos if isinstance(p_eos, Tensor) else constant(np.asarray(p_eos, dtype=np.float32))
    if p.ndim != 1:
        raise ShapeMismatch(f"eos_loss expects a per-slot probability vector, got {p.shape}")
    return p


def eos_loss(p_eos, m: int, rec_loss_value: float, threshold: float) -> Tensor:
    """Termination loss for one sample.

    Above threshold (strict >): the reconstruction is still poor, so
    penalize the EOS probability at the current stop position m (pushing
    termination later). Otherwise reward earlier termination by maximizing
    the mean EOS probability over positions before m; at m=1 the empty
    mean is defined as zero. When no stop fired, callers pass m = K.
    """
    p = _as_prob_vector(p_eos)
    k = p.shape[0]
    if not 1 <= m <= k:
        raise ObjectiveError(f"eos position m={m} outside 1..{k}")
    if rec_loss_value > threshold:
        return nn.reshape(p[m - 1:m], ())
    if m == 1:
        return constant(np.zeros((), dtype=p.dtype))
    return nn.neg(nn.mean(p[0:m - 1]))


def lambda_eos_at(step: int, total_steps: int, weights: LossWeights) -> float:
    """Linear ramp to eos_max over the warmup fraction, constant after."""
    if not 0 <= step <= total_steps:
        raise ObjectiveError(f"step {step} outside 0..{total_steps}")
    warmup = weights.warmup_fraction * total_steps
    if warmup <= 0:
        return weights.eos_max
    return weights.eos_max * min(1.0, step / warmup)


def total_loss(l_rec, l_eos, lambda_rec: float, lambda_eos: float) -> Tensor:
    l_rec = l_rec if isinstance(l_rec, Tensor) else constant(np.float32(l_rec))
    l_eos = l_eos if isinstance(l_eos, Tensor) else constant(np.float32(l_eos))
    return nn.add(nn.mul(l_rec, lambda_rec), nn.mul(l_eos, lambda_eos))


# ---------------------------------------------------------------------------
# Query-conditioned losses


def _upsample_box(img: Tensor, box, out_h: int, out_w: int) -> Tensor:
    """Crop an (H,W,C) tensor to an inclusive box and bilinearly upsample."""
    x0, y0, x1, y1 = box
    if x1 < x0 or y1 < y0:
        raise DegenerateBoxError(f"box {box} has no area")
    h, w = img.shape[0], img.shape[1]
    if not (0 <= x0 and x1 < w and 0 <= y0 and y1 < h):
        raise DegenerateBoxError(f"box {box} outside {h}x{w} image")
    crop = img[y0:y1 + 1, x0:x1 + 1, :]
    ch, cw = y1 - y0 + 1, x1 - x0 + 1
    c = img.shape[2]
    rows = constant(bilinear_weight_matrix(ch, out_h, dtype=np.float32))
    cols = constant(bilinear_weight_matrix(cw, out_w, dtype=np.float32))
    up = nn.matmul(rows, nn.reshape(crop, (ch, cw * c)))          # (H, cw*c)
    up = nn.transpose(nn.reshape(up, (out_h, cw, c)), (1, 0, 2))  # (cw, H, c)
    up = nn.matmul(cols, nn.reshape(up, (cw, out_h * c)))         # (W, H*c)
    return nn.transpose(nn.reshape(up, (out_w, out_h, c)), (1, 0, 2))


def outside_mask(boxes, h: int, w: int) -> np.ndarray:
    """Boolean (H,W) mask of pixels covered by none of the boxes."""
    inside = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in boxes:
        inside[y0:y1 + 1, x0:x1 + 1] = True
    return ~inside


def query_loss(x: Tensor, xhat: Tensor, boxes, weights: LossWeights,
               extractor: PerceptualExtractor,
               discriminator: Discriminator | None = None):
    """Region-weighted reconstruction loss for one queried sample.

    Each box region of both images is upsampled to the full canvas and
    scored with the reconstruction loss; the outside region contributes
    a plain MSE, down-weighted by lambda_o. Returns (total, per-box
    losses, outside loss).
    """
    if x.shape != xhat.shape or x.ndim != 3:
        raise ShapeMismatch(f"query_loss wants matching (H,W,C) pairs, got {x.shape}/{xhat.shape}")
    if not boxes:
        raise ObjectiveError("query_loss needs at least one box; route null queries to rec_loss")
    h, w, _c = x.shape
    rel = []
    for box in boxes:
        up_x = _upsample_box(x, box, h, w)
        up_hat = _upsample_box(xhat, box, h, w)
        per_sample, _ = rec_loss(nn.reshape(up_x, (1, *up_x.shape)),
                                 nn.reshape(up_hat, (1, *up_hat.shape)),
                                 weights, extractor, discriminator)
        rel.append(nn.reshape(per_sample, ()))
    mask = outside_mask(boxes, h, w)
    n_out = int(mask.sum())
    if n_out:
        diff = nn.sub(x, xhat)
        masked = nn.mul(nn.mul(diff, diff), constant(mask[..., None].astype(np.float32)))
        irr = nn.mul(nn.sum_(masked), 1.0 / (n_out * x.shape[2]))
    else:
        irr = constant(np.zeros((), dtype=np.float32))
    total = nn.mul(rel[0], 1.0 / len(rel))
    for r in rel[1:]:
        total = nn.add(total, nn.mul(r, 1.0 / len(rel)))
    total = nn.add(total, nn.mul(irr, weights.lambda_o))
    return total, rel, irr


def qdove_eos_loss(p_eos, m: int, rel_mean: float, rel_threshold: float,
                   irr: float, irr_threshold: float) -> Tensor:
    """Termination loss under query conditioning.

    The base branch logic runs on the box-region loss against its own
    rolling threshold; when the outside-region loss is also below its
    threshold, an extra reward for earlier termination is added.
    """
    p = _as_prob_vector(p_eos)
    base = eos_loss(p, m, rel_mean, rel_threshold)
    if irr < irr_threshold and m > 1:
        base = nn.add(base, nn.neg(nn.mean(p[0:m - 1])))
    return base


# ---------------------------------------------------------------------------
# Reporting


@dataclass
class LossReport:
    """Per-step scalar losses, as logged to the metrics CSV."""

    l_mse: float = 0.0
    l_perc: float = 0.0
    l_gan: float = 0.0
    l_rec: float = 0.0
    l_eos: float = 0.0
    l_total: float = 0.0
    l_rel: float | None = None
    l_irr: float | None = None
    l_qry: float | None = None
    l_pen: float | None = None
    kl: float | None = None
    l_disc: float | None = None
    threshold: float = 0.0
    lambda_eos: float = 0.0

    CSV_FIELDS = ("l_mse", "l_perc", "l_gan", "l_rec", "l_eos", "l_total",
                  "l_rel", "l_irr", "l_qry", "l_pen", "kl", "l_disc",
                  "threshold", "lambda_eos")

    def check_consistency(self, lambda_rec: float, extra: float = 0.0,
                          tol: float = 1e-6) -> bool:
        """The reported total must reproduce the weighted sum of its parts."""
        want = lambda_rec * self.l_rec + self.lambda_eos * self.l_eos + extra
        return abs(self.l_total - want) <= tol * max(1.0, abs(want))

    def csv_values(self) -> list[str]:
        out = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            out.append("" if v is None else repr(float(v)))
        return out
