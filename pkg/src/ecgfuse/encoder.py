"""Deep-feature encoding of spectrograms through pluggable backends.

A backend maps colormapped spectrogram pixels to a tau-dimensional vector.
Two implementations exist: a deterministic seeded random-projection fallback
(keeps the pipeline testable with no external weights) and a file-loaded
ONNX feature extractor whose declared output width must match its kind
(2048 for inception_class, 1056 for mnasnet_class).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import onnxlite
from .dsp import Spectrogram, colormap_lut, render_image
from .fusion import FeatureVector, StackedSpectrogram, data_fuse
from .ingest import LEAD_ORDER, LeadId

__all__ = [
    "EncoderError",
    "BackendLoadFailure",
    "ShapeMismatch",
    "NonFiniteOutput",
    "UnsupportedFormat",
    "TauMismatch",
    "EmbeddingBackend",
    "FallbackBackend",
    "OnnxBackend",
    "KIND_TAU",
    "fallback_backend",
    "load_backend",
    "backend_from_spec",
    "encode",
    "encode_record",
    "resize_bilinear",
    "fit_to_input",
]


class EncoderError(Exception):
    pass


class BackendLoadFailure(EncoderError):
    pass


class ShapeMismatch(EncoderError):
    pass


class NonFiniteOutput(EncoderError):
    pass


class UnsupportedFormat(BackendLoadFailure):
    pass


class TauMismatch(BackendLoadFailure):
    pass


KIND_TAU = {"inception_class": 2048, "mnasnet_class": 1056}

_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float64)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float64)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample of an (..., H, W, 3) image stack.

    Uses endpoint-aligned coordinates: output pixel i samples input position
    i*(H-1)/(out_h-1), so corners map to corners.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if n_out == 1 or n_in == 1:
            lo = np.zeros(n_out, dtype=np.intp)
            return lo, lo, np.zeros(n_out)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.floor(pos).astype(np.intp)
        lo = np.minimum(lo, n_in - 2)
        return lo, lo + 1, pos - lo

    r0, r1, rf = axis_coords(h, out_h)
    c0, c1, cf = axis_coords(w, out_w)
    rows = img[..., r0, :, :] * (1 - rf)[:, None, None] + img[..., r1, :, :] * rf[:, None, None]
    out = rows[..., :, c0, :] * (1 - cf)[:, None] + rows[..., :, c1, :] * cf[:, None]
    return out


def fit_to_input(
    img: np.ndarray, out_h: int, out_w: int, pad_color: np.ndarray
) -> np.ndarray:
    """Aspect-preserving bilinear fit of (H, W, 3) pixels onto an (out_h, out_w)
    canvas, centered, padded with `pad_color`."""
    h, w = img.shape[0], img.shape[1]
    scale = min(out_h / h, out_w / w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    resized = resize_bilinear(img, new_h, new_w)
    canvas = np.empty((out_h, out_w, 3), dtype=np.float64)
    canvas[:] = np.asarray(pad_color, dtype=np.float64)
    top = (out_h - new_h) // 2
    left = (out_w - new_w) // 2
    canvas[top : top + new_h, left : left + new_w] = resized
    return canvas


@dataclass
class EmbeddingBackend:
    """Interface: deterministic pixels -> tau-vector map."""

    backend_id: str
    tau: int
    expected_input: tuple[int, int]
    colormap: str = "viridis"

    def encode_pixels(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def pad_color(self) -> np.ndarray:
        return colormap_lut(self.colormap)[0].astype(np.float64)


class FallbackBackend(EmbeddingBackend):
    """Seeded Gaussian random projection + ReLU over 32x32 RGB pixels.

    Deterministic given (tau, seed); needs no external weight files.
    """

    def __init__(self, tau: int, seed: int, colormap: str = "viridis"):
        if tau < 1:
            raise ValueError(f"tau must be >= 1, got {tau}")
        super().__init__(
            backend_id=f"fallback:{tau}:{seed}",
            tau=tau,
            expected_input=(32, 32),
            colormap=colormap,
        )
        self.seed = seed
        rng = np.random.default_rng(seed)
        n_in = 32 * 32 * 3
        self.projection = rng.standard_normal((tau, n_in)) / np.sqrt(n_in)

    def encode_pixels(self, pixels: np.ndarray) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64).reshape(-1) / 255.0
        if x.size != self.projection.shape[1]:
            raise ShapeMismatch(
                f"expected {self.projection.shape[1]} pixel values, got {x.size}"
            )
        return np.maximum(self.projection @ x, 0.0)

    def encode_pixel_batch(self, batch: np.ndarray) -> np.ndarray:
        """(B, 32, 32, 3) pixels -> (B, tau); same math as encode_pixels."""
        x = np.asarray(batch, dtype=np.float64).reshape(batch.shape[0], -1) / 255.0
        return np.maximum(x @ self.projection.T, 0.0)


def fallback_backend(tau: int, seed: int, colormap: str = "viridis") -> FallbackBackend:
    return FallbackBackend(tau, seed, colormap)


class OnnxBackend(EmbeddingBackend):
    """Feature extractor loaded from an ONNX file.

    The graph's (sole) output is treated as the penultimate-layer features;
    its declared width must match the backend kind. Pixels are scaled to
    [0, 1], ImageNet mean/std normalized, and fed as NCHW float32.
    """

    def __init__(self, path: str | Path, kind: str, colormap: str = "viridis"):
        if kind not in KIND_TAU:
            raise UnsupportedFormat(f"unknown backend kind {kind!r}")
        path = Path(path)
        try:
            model = onnxlite.load_model(path)
        except onnxlite.OnnxParseError as exc:
            raise UnsupportedFormat(f"{path}: {exc}") from exc
        out_shape = model.outputs[0][1]
        width = next((d for d in reversed(out_shape) if d is not None and d > 1), None)
        expected = KIND_TAU[kind]
        if width != expected:
            raise TauMismatch(
                f"{path}: declared feature width {width} does not match "
                f"{kind} (expects {expected})"
            )
        in_shape = model.inputs[0][1]
        if len(in_shape) != 4:
            raise UnsupportedFormat(f"{path}: expected NCHW image input, got {in_shape}")
        h = in_shape[2] if in_shape[2] else (299 if kind == "inception_class" else 224)
        w = in_shape[3] if in_shape[3] else h
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
        super().__init__(
            backend_id=f"onnx:{digest}:{kind}",
            tau=expected,
            expected_input=(int(h), int(w)),
            colormap=colormap,
        )
        self.kind = kind
        self.path = path
        self._model = model

    def encode_pixels(self, pixels: np.ndarray) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64) / 255.0
        x = (x - _IMAGENET_MEAN) / _IMAGENET_STD
        nchw = np.ascontiguousarray(x.transpose(2, 0, 1)[None], dtype=np.float32)
        out = self._model.run({self._model.input_name: nchw})[self._model.output_name]
        return np.asarray(out, dtype=np.float64).reshape(-1)


def load_backend(path: str | Path, kind: str, colormap: str = "viridis") -> OnnxBackend:
    """Load an ONNX feature extractor; checks the declared tau against `kind`."""
    path = Path(path)
    if not path.exists():
        raise BackendLoadFailure(f"no such backend file: {path}")
    return OnnxBackend(path, kind, colormap)


def backend_from_spec(spec: str, colormap: str = "viridis") -> EmbeddingBackend:
    """Build a backend from a CLI spec string.

    `fallback:<tau>:<seed>` or `onnx:<path>:<kind>`.
    """
    parts = spec.split(":")
    if parts[0] == "fallback" and len(parts) == 3:
        return fallback_backend(int(parts[1]), int(parts[2]), colormap)
    if parts[0] == "onnx" and len(parts) == 3:
        return load_backend(parts[1], parts[2], colormap)
    raise BackendLoadFailure(f"bad backend spec {spec!r}")


def _pixels_for(backend: EmbeddingBackend, spec: Spectrogram | StackedSpectrogram) -> np.ndarray:
    if isinstance(spec, StackedSpectrogram):
        if not spec.normalized:
            raise ShapeMismatch("stacked spectrogram must be normalized")
        as_spec = Spectrogram(
            values=spec.values, bin_hz=spec.bin_hz, frame_s=spec.frame_s, normalized=True
        )
    else:
        as_spec = spec
    if not np.isfinite(as_spec.values).all():
        raise NonFiniteOutput("spectrogram contains non-finite values")
    img = render_image(as_spec, backend.colormap)
    h, w = backend.expected_input
    return fit_to_input(img.astype(np.float64), h, w, backend.pad_color)


def encode(
    backend: EmbeddingBackend,
    spec: Spectrogram | StackedSpectrogram,
    lead: LeadId | None = None,
    n: int | None = None,
) -> FeatureVector:
    """Colormap, resize to the backend's input, and embed one spectrogram."""
    pixels = _pixels_for(backend, spec)
    values = backend.encode_pixels(pixels)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != backend.tau:
        raise ShapeMismatch(f"backend returned {values.shape[0]} values, tau={backend.tau}")
    if not np.isfinite(values).all():
        raise NonFiniteOutput("backend produced non-finite features")
    source = ("single_lead", lead.value, n) if lead is not None else ("fused", n)
    return FeatureVector(values=values, backend_id=backend.backend_id, source=source)


def encode_record(
    backend: EmbeddingBackend,
    specs_by_lead: dict[LeadId, list[Spectrogram]],
    fusion_input: str,
) -> np.ndarray:
    """Encode one record's spectrograms into a (n_leads, gamma, tau) array.

    `per-lead` encodes all 12 leads separately; `stacked` data-fuses the 12
    tiles per window first and encodes the grid (n_leads axis becomes 1).
    """
    gamma = len(next(iter(specs_by_lead.values())))
    if fusion_input == "stacked":
        out = np.empty((1, gamma, backend.tau))
        for n in range(gamma):
            stacked = data_fuse({lead: specs_by_lead[lead][n] for lead in LEAD_ORDER}, n)
            out[0, n] = encode(backend, stacked, n=n).values
        return out
    if fusion_input != "per-lead":
        raise ValueError(f"unknown fusion input {fusion_input!r}")
    if isinstance(backend, FallbackBackend):
        pixels = np.stack(
            [
                _pixels_for(backend, specs_by_lead[lead][n])
                for lead in LEAD_ORDER
                for n in range(gamma)
            ]
        )
        flat = backend.encode_pixel_batch(pixels)
        return flat.reshape(len(LEAD_ORDER), gamma, backend.tau)
    out = np.empty((len(LEAD_ORDER), gamma, backend.tau))
    for j, lead in enumerate(LEAD_ORDER):
        for n in range(gamma):
            out[j, n] = encode(backend, specs_by_lead[lead][n], lead=lead, n=n).values
    return out
