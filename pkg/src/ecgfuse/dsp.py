"""Signal conditioning and spectrogram generation.

The pipeline per lead is: band-pass (first-order high-pass then truncated
Gaussian smoothing), fixed-overlap window segmentation, Hann-windowed STFT
magnitudes, and max-referenced log normalization. Default parameters give
26 frequency bins x 91 time frames per 1 s window at 500 Hz, and 19 windows
per 10 s record.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .ingest import EcgRecord, LeadId, LEAD_ORDER

__all__ = [
    "Window",
    "Spectrogram",
    "WindowSet",
    "DspError",
    "InvalidCutoff",
    "EmptySignal",
    "WindowTooLong",
    "ChunkTooLong",
    "AlreadyNormalized",
    "NotNormalized",
    "DegenerateRange",
    "bandpass",
    "segment_windows",
    "stft",
    "normalize_spectrogram",
    "render_image",
    "export_png",
    "colormap_lut",
    "record_spectrograms",
]


class DspError(Exception):
    pass


class InvalidCutoff(DspError):
    pass


class EmptySignal(DspError):
    pass


class WindowTooLong(DspError):
    pass


class ChunkTooLong(DspError):
    pass


class AlreadyNormalized(DspError):
    pass


class NotNormalized(DspError):
    pass


class DegenerateRange(UserWarning):
    """Spectrogram had zero dynamic range; image rendered at mid-colormap."""


@dataclass
class Window:
    """One fixed-length analysis window cut from a lead signal."""

    samples: np.ndarray
    rate: int
    index: int = 0
    record_id: str = ""
    lead: LeadId | None = None

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Spectrogram:
    """Frequency (rows, low to high) x time (columns) magnitude array."""

    values: np.ndarray
    bin_hz: float
    frame_s: float
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class WindowSet:
    """Per-lead windows of one record; every lead carries the same count."""

    record_id: str
    windows: dict[LeadId, list]

    def __post_init__(self) -> None:
        counts = {len(v) for v in self.windows.values()}
        if len(counts) > 1:
            raise DspError(f"per-lead window counts differ: {sorted(counts)}")

    @property
    def gamma(self) -> int:
        return len(next(iter(self.windows.values())))


def bandpass(
    signal: np.ndarray,
    rate: int,
    hp_cutoff: float = 0.5,
    gauss_sigma: float = 0.002,
) -> np.ndarray:
    """First-order high-pass at `hp_cutoff` Hz, then Gaussian smoothing.

    The high-pass is the discrete RC filter y[k] = a*(y[k-1] + x[k] - x[k-1])
    with a = RC/(RC + 1/rate), initialised so a constant input maps to zero.
    The smoother is a unit-sum Gaussian FIR with sigma = gauss_sigma*rate
    samples, truncated at radius 4*sigma, applied with reflect padding so the
    output length equals the input length.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise EmptySignal("empty input signal")
    if rate <= 0:
        raise InvalidCutoff(f"rate must be positive, got {rate}")
    if not 0 < hp_cutoff < rate / 2:
        raise InvalidCutoff(f"hp_cutoff must lie in (0, rate/2), got {hp_cutoff}")
    if gauss_sigma <= 0:
        raise InvalidCutoff(f"gauss_sigma must be positive, got {gauss_sigma}")

    rc = 1.0 / (2.0 * math.pi * hp_cutoff)
    alpha = rc / (rc + 1.0 / rate)
    # Direct-form state chosen so y[0] = alpha*(0 + x[0] - x[0]) = 0.
    hp, _ = lfilter([alpha, -alpha], [1.0, -alpha], x, zi=np.array([-alpha * x[0]]))

    sigma = gauss_sigma * rate
    radius = max(1, int(math.ceil(4.0 * sigma)))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (k / sigma) ** 2)
    kernel /= kernel.sum()
    if hp.size == 1:
        return hp.copy()
    pad = np.pad(hp, radius, mode="reflect")
    return np.convolve(pad, kernel, mode="valid")


def segment_windows(
    signal: np.ndarray,
    rate: int,
    window_s: float = 1.0,
    overlap_fraction: float = 0.5,
) -> list[Window]:
    """Cut fixed-length windows with the given overlap; remainder is dropped.

    hop = window*(1-overlap) samples; windows start at 0, hop, 2*hop, ...
    """
    x = np.asarray(signal, dtype=np.float64)
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must lie in [0, 1), got {overlap_fraction}")
    w = int(round(window_s * rate))
    if w <= 0:
        raise ValueError(f"window of {window_s}s at {rate}Hz is empty")
    if w > x.size:
        raise WindowTooLong(f"window of {w} samples exceeds signal of {x.size}")
    hop = max(1, int(round(w * (1.0 - overlap_fraction))))
    count = (x.size - w) // hop + 1
    return [
        Window(samples=x[i * hop : i * hop + w].copy(), rate=rate, index=i)
        for i in range(count)
    ]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window w[k] = 0.5*(1 - cos(2*pi*k/n))."""
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * math.pi * k / n))


def stft(window: Window, chunk_s: float = 0.1, chunk_overlap: float = 0.9) -> Spectrogram:
    """Hann-windowed one-sided DFT magnitudes of overlapping chunks.

    Rows are the C/2+1 frequency bins (low to high), columns the time frames.
    """
    if not 0 <= chunk_overlap < 1:
        raise ValueError(f"chunk_overlap must lie in [0, 1), got {chunk_overlap}")
    c = int(round(chunk_s * window.rate))
    if c < 2:
        raise ValueError(f"chunk of {chunk_s}s at {window.rate}Hz has {c} samples, need >= 2")
    if c > len(window):
        raise ChunkTooLong(f"chunk of {c} samples exceeds window of {len(window)}")
    hop = max(1, int(round(c * (1.0 - chunk_overlap))))
    chunks = sliding_window_view(np.asarray(window.samples, dtype=np.float64), c)[::hop]
    mags = np.abs(np.fft.rfft(chunks * hann_window(c), axis=1))
    return Spectrogram(
        values=mags.T.copy(),
        bin_hz=window.rate / c,
        frame_s=hop / window.rate,
        normalized=False,
    )


def normalize_spectrogram(spec: Spectrogram, floor_eps: float = 1e-6) -> Spectrogram:
    """Max-reference log scaling: ln(max(F/max(F), floor_eps) * 255).

    Scale-invariant by construction; an all-zero spectrogram maps to the
    constant ln(floor_eps*255).
    """
    if spec.normalized:
        raise AlreadyNormalized("spectrogram is already normalized")
    if not 0 < floor_eps < 1:
        raise ValueError(f"floor_eps must lie in (0, 1), got {floor_eps}")
    peak = float(spec.values.max(initial=0.0))
    if peak <= 0.0:
        out = np.full(spec.values.shape, math.log(floor_eps * 255.0))
    else:
        out = np.log(np.maximum(spec.values / peak, floor_eps) * 255.0)
    return replace(spec, values=out, normalized=True)


def colormap_lut(colormap: str) -> np.ndarray:
    """256-entry uint8 RGB lookup table for `viridis` or `grayscale`."""
    if colormap == "grayscale":
        ramp = np.arange(256, dtype=np.uint8)
        return np.stack([ramp, ramp, ramp], axis=1)
    if colormap == "viridis":
        from matplotlib import colormaps

        rgba = colormaps["viridis"](np.arange(256) / 255.0)
        return np.round(rgba[:, :3] * 255.0).astype(np.uint8)
    raise ValueError(f"unknown colormap {colormap!r}")


def render_image(spec: Spectrogram, colormap: str = "viridis") -> np.ndarray:
    """Map a normalized spectrogram through a colormap to an 8-bit RGB image.

    Values are min-max scaled to [0, 255] per spectrogram. Row 0 of the image
    is the highest frequency bin so low frequencies sit at the bottom.
    """
    if not spec.normalized:
        raise NotNormalized("render_image expects a normalized spectrogram")
    lut = colormap_lut(colormap)
    v = spec.values
    vmin, vmax = float(v.min()), float(v.max())
    if vmax == vmin:
        warnings.warn(
            f"degenerate spectrogram range ({vmin}); rendering mid-colormap",
            DegenerateRange,
        )
        idx = np.full(v.shape, 128, dtype=np.intp)
    else:
        idx = np.rint((v - vmin) / (vmax - vmin) * 255.0).astype(np.intp)
    return lut[np.flipud(idx)]


def export_png(image: np.ndarray, path) -> None:
    """Write an 8-bit RGB array as a lossless PNG."""
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(
        path, format="PNG"
    )


def record_spectrograms(
    rec: EcgRecord,
    window_s: float = 1.0,
    overlap: float = 0.5,
    chunk_s: float = 0.1,
    chunk_overlap: float = 0.9,
    hp_cutoff: float = 0.5,
    gauss_sigma: float = 0.002,
    floor_eps: float = 1e-6,
) -> dict[LeadId, list[Spectrogram]]:
    """Full per-lead pipeline: band-pass, segment, STFT, normalize."""
    out: dict[LeadId, list[Spectrogram]] = {}
    for lead in LEAD_ORDER:
        filtered = bandpass(rec.signal(lead), rec.sampling_rate, hp_cutoff, gauss_sigma)
        specs = []
        for win in segment_windows(filtered, rec.sampling_rate, window_s, overlap):
            win.record_id = rec.record_id
            win.lead = lead
            specs.append(normalize_spectrogram(stft(win, chunk_s, chunk_overlap), floor_eps))
        out[lead] = specs
    counts = {len(v) for v in out.values()}
    assert len(counts) == 1, "equal lead lengths imply equal window counts"
    return out
