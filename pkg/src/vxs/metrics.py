"""PSNR / SSIM on [0, 1] volumes and the rate-distortion point record.

PSNR peak is fixed at 1.0 (all pipelines normalize first) and capped at
100 dB so exact matches stay finite in CSV output.  SSIM is computed
slice-wise along depth with the standard 11x11 Gaussian window (sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2, peak 1) over the valid interior, then averaged
over slices.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .volume import Volume

__all__ = ["PSNR_CAP", "psnr", "ssim", "RDPoint", "write_rd_csv", "read_rd_csv", "write_rd_json"]

PSNR_CAP = 100.0
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_WIN = 11
_SIGMA = 1.5


def _as_array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` on the [0, 1] scale, capped at 100 dB."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: dims {a.shape} vs {b.shape}")
    err = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(err * err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_taps(n=_WIN, sigma=_SIGMA):
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, taps):
    """Separable valid-mode correlation of a 2-D image."""
    n = len(taps)
    rows = sum(taps[i] * img[:, i:img.shape[1] - n + 1 + i] for i in range(n))
    return sum(taps[i] * rows[i:rows.shape[0] - n + 1 + i, :] for i in range(n))


def ssim(a, b) -> float:
    """Mean slice SSIM over the depth axis; 1.0 exactly for identical volumes."""
    a, b = _as_array(a).astype(np.float64), _as_array(b).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: dims {a.shape} vs {b.shape}")
    if a.shape[1] < _WIN or a.shape[2] < _WIN:
        raise DimensionError(f"ssim: slices {a.shape[1:]} smaller than the {_WIN}x{_WIN} window")
    taps = _gaussian_taps()
    scores = []
    for sa, sb in zip(a, b):
        mu_a = _filter_valid(sa, taps)
        mu_b = _filter_valid(sb, taps)
        var_a = _filter_valid(sa * sa, taps) - mu_a * mu_a
        var_b = _filter_valid(sb * sb, taps) - mu_b * mu_b
        cov = _filter_valid(sa * sb, taps) - mu_a * mu_b
        num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class RDPoint:
    """One operating point of the rate-distortion sweep."""

    ratio: float
    psnr_db: float
    ssim: float
    encode_seconds: float
    decode_seconds: float
    config_digest: str

    def __post_init__(self):
        if self.ratio <= 0:
            raise ArgumentError(f"ratio must be positive, got {self.ratio}")
        if not -1.0 <= self.ssim <= 1.0:
            raise ArgumentError(f"ssim must lie in [-1, 1], got {self.ssim}")


_CSV_FIELDS = ("ratio", "psnr_db", "ssim", "encode_s", "decode_s", "config_digest")


def write_rd_csv(points, path=None) -> str:
    """Emit ``ratio,psnr_db,ssim,encode_s,decode_s,config_digest`` rows.

    Floats are written with repr precision so the CSV re-parses to
    bit-equal points.
    """
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(_CSV_FIELDS)
    for p in points:
        w.writerow([repr(p.ratio), repr(p.psnr_db), repr(p.ssim),
                    repr(p.encode_seconds), repr(p.decode_seconds), p.config_digest])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_rd_csv(source) -> list[RDPoint]:
    text = source if "\n" in str(source) else open(source).read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != _CSV_FIELDS:
        raise ArgumentError(f"unexpected CSV header {rows[:1]}")
    return [
        RDPoint(ratio=float(r[0]), psnr_db=float(r[1]), ssim=float(r[2]),
                encode_seconds=float(r[3]), decode_seconds=float(r[4]), config_digest=r[5])
        for r in rows[1:]
    ]


def write_rd_json(points, path=None) -> str:
    text = json.dumps([asdict(p) for p in points], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
