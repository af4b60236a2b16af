"""12-lead ECG record ingestion: parsing, validation, resampling, truncation.

Two on-disk formats are supported:

* delimited text: UTF-8 CSV whose first row names the 12 leads (any order),
  one row per sample in millivolts, plus a ``<name>.meta.json`` sidecar with
  ``{record_id, sampling_rate_hz, label}``.
* a WFDB-style profile: a text header declaring format-16 signals
  (16-bit little-endian integers, interleaved by lead) with per-lead gain,
  enough to read the public PTB records. Annotations, multi-segment records
  and other WFDB formats are out of scope.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "LeadId",
    "DiagnosisLabel",
    "EcgRecord",
    "LeadFlags",
    "ValidationReport",
    "IngestError",
    "MissingLead",
    "LengthMismatch",
    "MalformedHeader",
    "UnreadableFile",
    "EmptySignal",
    "TooShort",
    "parse_record",
    "validate_record",
    "resample",
    "truncate",
    "canonicalize",
    "write_record_csv",
    "onset_class_index",
    "binary_class_index",
    "task_classes",
]


class LeadId(str, Enum):
    """The 12 standard ECG leads, in canonical order."""

    I = "I"
    II = "II"
    III = "III"
    aVR = "aVR"
    aVL = "aVL"
    aVF = "aVF"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V4 = "V4"
    V5 = "V5"
    V6 = "V6"


LEAD_ORDER: tuple[LeadId, ...] = tuple(LeadId)

# Accepts the capitalisations found in the wild (PTB headers use lowercase).
_LEAD_ALIASES = {lead.value.upper(): lead for lead in LeadId}


def lead_from_name(name: str) -> LeadId | None:
    return _LEAD_ALIASES.get(name.strip().upper())


class DiagnosisLabel(str, Enum):
    """Four-class MI onset label; MI = {acute, recent, old}."""

    ACUTE = "acute"
    RECENT = "recent"
    OLD = "old"
    NORMAL = "normal"

    @property
    def is_mi(self) -> bool:
        return self is not DiagnosisLabel.NORMAL


ONSET_CLASSES: tuple[DiagnosisLabel, ...] = tuple(DiagnosisLabel)
BINARY_CLASSES: tuple[str, str] = ("mi", "normal")


def onset_class_index(label: DiagnosisLabel) -> int:
    return ONSET_CLASSES.index(label)


def binary_class_index(label: DiagnosisLabel) -> int:
    return 0 if label.is_mi else 1


def task_classes(task: str) -> tuple[str, ...]:
    """Class names, in index order, for a classification task."""
    if task == "onset":
        return tuple(lbl.value for lbl in ONSET_CLASSES)
    if task == "binary":
        return BINARY_CLASSES
    raise ValueError(f"unknown task {task!r}")


def class_index(label: DiagnosisLabel, task: str) -> int:
    return onset_class_index(label) if task == "onset" else binary_class_index(label)


class IngestError(Exception):
    """Base class for ingest failures."""


class MissingLead(IngestError):
    pass


class LengthMismatch(IngestError):
    pass


class MalformedHeader(IngestError):
    pass


class UnreadableFile(IngestError):
    pass


class EmptySignal(IngestError):
    pass


class TooShort(IngestError):
    pass


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass
class EcgRecord:
    """One patient's 12 synchronized lead signals, immutable after construction."""

    record_id: str
    sampling_rate: int
    leads: dict[LeadId, np.ndarray]
    label: DiagnosisLabel | None = None

    def __post_init__(self) -> None:
        if self.sampling_rate <= 0:
            raise MalformedHeader(f"sampling rate must be positive, got {self.sampling_rate}")
        missing = [lead.value for lead in LEAD_ORDER if lead not in self.leads]
        if missing:
            raise MissingLead(f"record {self.record_id!r} missing leads: {missing}")
        # Re-key in canonical order so iteration order is always I..V6.
        signals = {lead: _readonly(self.leads[lead]) for lead in LEAD_ORDER}
        lengths = {len(sig) for sig in signals.values()}
        if len(lengths) != 1:
            raise LengthMismatch(f"record {self.record_id!r} lead lengths differ: {sorted(lengths)}")
        self.leads = signals

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.leads.values())))

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate

    def signal(self, lead: LeadId) -> np.ndarray:
        return self.leads[lead]

    def as_array(self) -> np.ndarray:
        """Signals stacked in canonical lead order, shape (12, n_samples)."""
        return np.stack([self.leads[lead] for lead in LEAD_ORDER])


@dataclass
class LeadFlags:
    missing: bool = False
    flatline: bool = False
    out_of_range: bool = False

    @property
    def any(self) -> bool:
        return self.missing or self.flatline or self.out_of_range


@dataclass
class ValidationReport:
    record_id: str
    flags: dict[LeadId, LeadFlags] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return not any(f.any for f in self.flags.values())

    def flagged_leads(self) -> list[LeadId]:
        return [lead for lead, f in self.flags.items() if f.any]


def parse_record(path: str | Path, format: str) -> EcgRecord:
    """Read a 12-lead record from disk; see module docstring for the formats.

    ``format`` is ``"csv"`` (delimited text) or ``"wfdb"`` (binary profile).
    """
    path = Path(path)
    if not path.exists():
        raise UnreadableFile(f"no such file: {path}")
    if format in ("csv", "delimited_text"):
        return _parse_csv(path)
    if format in ("wfdb", "wfdb_binary"):
        return _parse_wfdb(path)
    raise ValueError(f"unknown format {format!r}")


def _parse_csv(path: Path) -> EcgRecord:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise MalformedHeader(f"{path}: empty file")

    header = [tok.strip() for tok in lines[0].split(",")]
    leads_in_order: list[LeadId] = []
    for tok in header:
        lead = lead_from_name(tok)
        if lead is None:
            raise MalformedHeader(f"{path}: unknown lead name {tok!r} in header")
        leads_in_order.append(lead)
    if len(set(leads_in_order)) != len(leads_in_order):
        raise MalformedHeader(f"{path}: duplicate lead columns")
    have = set(leads_in_order)
    if have != set(LEAD_ORDER):
        missing = [lead.value for lead in LEAD_ORDER if lead not in have]
        raise MissingLead(f"{path}: header names {len(have)} leads, missing {missing}")

    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 12:
            raise LengthMismatch(f"{path}:{ln}: expected 12 values, got {len(fields)}")
        try:
            rows.append([float(tok) for tok in fields])
        except ValueError as exc:
            raise MalformedHeader(f"{path}:{ln}: non-numeric sample: {exc}") from exc
    if not rows:
        raise EmptySignal(f"{path}: no sample rows")
    data = np.asarray(rows, dtype=np.float64)

    # Sidecar is `<name>.meta.json` next to the data file.
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise MalformedHeader(f"{path}: missing sidecar {meta_path.name}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{meta_path}: {exc}") from exc
    if "sampling_rate_hz" not in meta:
        raise MalformedHeader(f"{meta_path}: missing sampling_rate_hz")
    rate = int(meta["sampling_rate_hz"])
    record_id = str(meta.get("record_id", path.stem))
    label = None
    if meta.get("label") is not None:
        label = DiagnosisLabel(meta["label"])

    signals = {lead: data[:, col] for col, lead in enumerate(leads_in_order)}
    return EcgRecord(record_id=record_id, sampling_rate=rate, leads=signals, label=label)


def write_record_csv(rec: EcgRecord, path: str | Path) -> Path:
    """Write the delimited-text format (plus sidecar). Round-trips bit-exactly."""
    path = Path(path)
    cols = [rec.leads[lead] for lead in LEAD_ORDER]
    lines = [",".join(lead.value for lead in LEAD_ORDER)]
    for row in zip(*cols):
        lines.append(",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "record_id": rec.record_id,
        "sampling_rate_hz": rec.sampling_rate,
        "label": rec.label.value if rec.label is not None else None,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return path


_HEA_COMMENT = re.compile(r"^\s*#")


def _parse_wfdb(path: Path) -> EcgRecord:
    """Read the format-16 WFDB profile: `<stem>.hea` header plus one `.dat`."""
    hea = path if path.suffix == ".hea" else path.with_suffix(".hea")
    if not hea.exists():
        raise UnreadableFile(f"no header file: {hea}")
    try:
        lines = [ln for ln in hea.read_text(encoding="utf-8", errors="replace").splitlines()
                 if ln.strip() and not _HEA_COMMENT.match(ln)]
    except OSError as exc:
        raise UnreadableFile(f"cannot read {hea}: {exc}") from exc
    if not lines:
        raise MalformedHeader(f"{hea}: empty header")

    rec_fields = lines[0].split()
    if len(rec_fields) < 4:
        raise MalformedHeader(f"{hea}: record line needs name/nsig/fs/nsamp, got {lines[0]!r}")
    record_name = rec_fields[0].split("/")[-1]
    try:
        n_sig = int(rec_fields[1])
        rate = int(float(rec_fields[2]))
        n_samp = int(rec_fields[3])
    except ValueError as exc:
        raise MalformedHeader(f"{hea}: bad record line: {exc}") from exc
    if len(lines) - 1 < n_sig:
        raise MalformedHeader(f"{hea}: {n_sig} signals declared, {len(lines) - 1} signal lines")

    dat_names: list[str] = []
    gains: list[float] = []
    baselines: list[float] = []
    descs: list[str] = []
    for ln in lines[1 : 1 + n_sig]:
        toks = ln.split()
        if len(toks) < 3:
            raise MalformedHeader(f"{hea}: short signal line {ln!r}")
        dat_names.append(toks[0])
        if toks[1] != "16":
            raise MalformedHeader(f"{hea}: unsupported signal format {toks[1]!r} (profile reads format 16 only)")
        # Gain spec is gain(baseline)/units; baseline defaults to the ADC zero field.
        gain_tok = toks[2].split("/")[0]
        m = re.match(r"^(-?[\d.]+)(?:\((-?\d+)\))?$", gain_tok)
        if not m:
            raise MalformedHeader(f"{hea}: bad gain field {toks[2]!r}")
        gain = float(m.group(1))
        if gain == 0:
            gain = 200.0  # WFDB default gain for unspecified calibration
        baseline = float(m.group(2)) if m.group(2) else (float(toks[4]) if len(toks) > 4 else 0.0)
        gains.append(gain)
        baselines.append(baseline)
        descs.append(toks[-1])
    if len(set(dat_names)) != 1:
        raise MalformedHeader(f"{hea}: profile supports a single .dat file, got {sorted(set(dat_names))}")

    dat = hea.with_name(dat_names[0])
    if not dat.exists():
        raise UnreadableFile(f"no signal file: {dat}")
    raw = np.fromfile(dat, dtype="<i2")
    if n_samp <= 0:
        n_samp = len(raw) // n_sig
    if len(raw) < n_samp * n_sig:
        raise LengthMismatch(f"{dat}: file holds {len(raw)} samples, header wants {n_samp * n_sig}")
    adc = raw[: n_samp * n_sig].reshape(n_samp, n_sig)

    signals: dict[LeadId, np.ndarray] = {}
    for col, desc in enumerate(descs):
        lead = lead_from_name(desc)
        if lead is None or lead in signals:
            continue  # skip non-standard leads (vx/vy/vz in PTB) and duplicates
        signals[lead] = (adc[:, col].astype(np.float64) - baselines[col]) / gains[col]
    missing = [lead.value for lead in LEAD_ORDER if lead not in signals]
    if missing:
        raise MissingLead(f"{hea}: standard leads missing from header: {missing}")

    return EcgRecord(record_id=record_name, sampling_rate=rate, leads=signals, label=None)


def validate_record(
    rec: EcgRecord, flatline_eps: float = 0.01, range_limit: float = 25.0
) -> ValidationReport:
    """Flag flatlined or out-of-range leads; accepted iff no lead is flagged.

    `flatline_eps` and `range_limit` are in mV. Does not mutate the record.
    """
    report = ValidationReport(record_id=rec.record_id)
    for lead in LEAD_ORDER:
        sig = rec.leads[lead]
        flags = LeadFlags()
        if sig.size == 0:
            flags.missing = True
        else:
            if float(sig.max() - sig.min()) < flatline_eps:
                flags.flatline = True
            if float(np.abs(sig).max()) > range_limit:
                flags.out_of_range = True
        report.flags[lead] = flags
    return report


def resample(rec: EcgRecord, target_hz: int) -> EcgRecord:
    """Linear-interpolation resampling of every lead to `target_hz`."""
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if rec.n_samples == 0:
        raise EmptySignal(f"record {rec.record_id!r} has no samples")
    if target_hz == rec.sampling_rate:
        return rec
    n_in = rec.n_samples
    n_out = int(round(n_in * target_hz / rec.sampling_rate))
    t_in = np.arange(n_in) / rec.sampling_rate
    t_out = np.arange(n_out) / target_hz
    leads = {lead: np.interp(t_out, t_in, sig) for lead, sig in rec.leads.items()}
    return EcgRecord(rec.record_id, target_hz, leads, rec.label)


def truncate(rec: EcgRecord, seconds: float) -> EcgRecord:
    """Keep the first `seconds` of every lead."""
    n_keep = int(np.floor(seconds * rec.sampling_rate))
    if rec.n_samples < n_keep:
        raise TooShort(
            f"record {rec.record_id!r} is {rec.duration_s:.3f}s, need {seconds}s"
        )
    if n_keep == rec.n_samples:
        return rec
    leads = {lead: sig[:n_keep] for lead, sig in rec.leads.items()}
    return EcgRecord(rec.record_id, rec.sampling_rate, leads, rec.label)


def canonicalize(rec: EcgRecord, rate: int = 500, seconds: float = 10.0) -> EcgRecord:
    """Resample to the pipeline rate then truncate to the analysis duration."""
    return truncate(resample(rec, rate), seconds)
