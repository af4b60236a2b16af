import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_record
from ecgfuse.ingest import (
    DiagnosisLabel,
    EcgRecord,
    LEAD_ORDER,
    LeadId,
    MalformedHeader,
    MissingLead,
    TooShort,
    canonicalize,
    parse_record,
    resample,
    truncate,
    validate_record,
    write_record_csv,
)
from ecgfuse.synth import pulse_train


def test_lead_enum_is_canonical():
    assert [lead.value for lead in LeadId] == [
        "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
    ]
    assert len(set(LeadId)) == 12


def test_binary_view_consistent():
    for label in DiagnosisLabel:
        assert label.is_mi == (label is not DiagnosisLabel.NORMAL)


def test_record_reorders_leads_canonically():
    rng = np.random.default_rng(1)
    scrambled = {lead: rng.normal(size=100) for lead in reversed(LEAD_ORDER)}
    rec = EcgRecord("r", 500, scrambled)
    assert list(rec.leads) == list(LEAD_ORDER)


def test_csv_roundtrip_bit_exact(tmp_path):
    rec = random_record(7, n=250)
    path = write_record_csv(rec, tmp_path / "r7.csv")
    back = parse_record(path, "csv")
    assert back.record_id == rec.record_id
    assert back.sampling_rate == rec.sampling_rate
    assert back.label == rec.label
    for lead in LEAD_ORDER:
        assert np.array_equal(back.leads[lead], rec.leads[lead])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_csv_roundtrip_property(seed, n, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("rt")
    rec = random_record(seed, n=n)
    back = parse_record(write_record_csv(rec, tmp / "x.csv"), "csv")
    for lead in LEAD_ORDER:
        assert np.array_equal(back.leads[lead], rec.leads[lead])


def test_csv_header_any_order(tmp_path):
    rec = random_record(3, n=10)
    path = write_record_csv(rec, tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    perm = header[::-1]
    cols = {name: i for i, name in enumerate(header)}
    rows = [line.split(",") for line in lines[1:]]
    shuffled = [",".join(row[cols[name]] for name in perm) for row in rows]
    path.write_text(",".join(perm) + "\n" + "\n".join(shuffled) + "\n")
    back = parse_record(path, "csv")
    for lead in LEAD_ORDER:
        assert np.array_equal(back.leads[lead], rec.leads[lead])


def test_missing_lead_column_rejected(tmp_path):
    rec = random_record(4, n=6)
    path = write_record_csv(rec, tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    trimmed = [",".join(line.split(",")[:11]) for line in lines]
    path.write_text("\n".join(trimmed) + "\n")
    with pytest.raises(MissingLead):
        parse_record(path, "csv")


def test_missing_sidecar_rejected(tmp_path):
    rec = random_record(5, n=6)
    path = write_record_csv(rec, tmp_path / "r.csv")
    (tmp_path / "r.csv.meta.json").unlink()
    with pytest.raises(MalformedHeader):
        parse_record(path, "csv")


def test_parser_does_not_resample(tmp_path):
    rec = random_record(6, n=10_000, rate=1000)
    back = parse_record(write_record_csv(rec, tmp_path / "r.csv"), "csv")
    assert back.sampling_rate == 1000
    assert back.n_samples == 10_000


def _write_wfdb(tmp_path, n=400, rate=500, gain=2000.0, extra_leads=("vx", "vy", "vz")):
    rng = np.random.default_rng(11)
    names = [lead.value.lower() for lead in LEAD_ORDER] + list(extra_leads)
    adc = rng.integers(-3000, 3000, size=(n, len(names)), dtype=np.int16)
    hea = [f"synth {len(names)} {rate} {n}"]
    for name in names:
        hea.append(f"synth.dat 16 {gain:g} 16 0 0 0 0 {name}")
    (tmp_path / "synth.hea").write_text("\n".join(hea) + "\n")
    adc.astype("<i2").tofile(tmp_path / "synth.dat")
    return adc, gain


def test_wfdb_profile_reader(tmp_path):
    adc, gain = _write_wfdb(tmp_path)
    rec = parse_record(tmp_path / "synth.hea", "wfdb")
    assert rec.sampling_rate == 500
    assert rec.n_samples == 400
    for col, lead in enumerate(LEAD_ORDER):
        assert np.allclose(rec.leads[lead], adc[:, col] / gain)


def test_wfdb_missing_lead(tmp_path):
    _write_wfdb(tmp_path)
    hea = (tmp_path / "synth.hea").read_text().splitlines()
    hea[1] = hea[1].replace(" i", " junk")  # lead I renamed away
    (tmp_path / "synth.hea").write_text("\n".join(hea) + "\n")
    with pytest.raises(MissingLead):
        parse_record(tmp_path / "synth.hea", "wfdb")


def test_wfdb_rejects_other_formats(tmp_path):
    _write_wfdb(tmp_path)
    hea = (tmp_path / "synth.hea").read_text().replace(" 16 ", " 212 ", 1)
    lines = hea.splitlines()
    lines[1] = lines[1].replace("synth.dat 16", "synth.dat 212")
    (tmp_path / "synth.hea").write_text("\n".join(lines) + "\n")
    with pytest.raises(MalformedHeader):
        parse_record(tmp_path / "synth.hea", "wfdb")


def test_validate_flatline():
    rec = random_record(8, n=100)
    leads = {lead: sig for lead, sig in rec.leads.items()}
    leads[LeadId.II] = np.zeros(100)
    flat = EcgRecord("f", 500, leads)
    report = validate_record(flat, flatline_eps=0.01)
    assert report.flags[LeadId.II].flatline
    assert not report.accepted
    assert report.flagged_leads() == [LeadId.II]


def test_validate_accepts_pulse_train():
    sig = pulse_train(rate=500, seconds=2.0)
    rec = EcgRecord("p", 500, {lead: sig for lead in LEAD_ORDER})
    report = validate_record(rec, range_limit=25.0)
    assert report.accepted


def test_validate_out_of_range():
    rec = random_record(9, n=100)
    leads = dict(rec.leads)
    spiky = leads[LeadId.V3].copy()
    spiky[50] = 100.0
    leads[LeadId.V3] = spiky
    report = validate_record(EcgRecord("s", 500, leads), range_limit=25.0)
    assert report.flags[LeadId.V3].out_of_range
    assert not report.accepted


def test_validate_does_not_mutate(record):
    before = {lead: sig.copy() for lead, sig in record.leads.items()}
    validate_record(record)
    for lead in LEAD_ORDER:
        assert np.array_equal(record.leads[lead], before[lead])


def test_records_are_readonly(record):
    with pytest.raises(ValueError):
        record.leads[LeadId.I][0] = 99.0


def test_resample_2to1():
    rec = random_record(10, n=10_000, rate=1000)
    out = resample(rec, 500)
    assert out.sampling_rate == 500
    assert out.n_samples == 5000
    # 2:1 decimation aligns; interpolation must hit original samples exactly
    assert np.array_equal(out.leads[LeadId.I], rec.leads[LeadId.I][::2])


def test_resample_identity_and_idempotent():
    rec = random_record(11, n=1000)
    assert resample(rec, 500) is rec
    once = resample(rec, 250)
    twice = resample(once, 250)
    assert twice is once


def test_resample_preserves_constants():
    leads = {lead: np.full(300, 2.5) for lead in LEAD_ORDER}
    rec = EcgRecord("c", 300, leads)
    out = resample(rec, 500)
    assert np.allclose(out.leads[LeadId.V6], 2.5, atol=1e-12)
    assert out.n_samples == 500


def test_truncate():
    rec = random_record(12, n=16_000, rate=500)  # 32 s
    out = truncate(rec, 10.0)
    assert out.n_samples == 5000
    assert np.array_equal(out.leads[LeadId.I], rec.leads[LeadId.I][:5000])
    assert truncate(out, 10.0) is out
    with pytest.raises(TooShort):
        truncate(random_record(13, n=2500), 10.0)


def test_canonicalize_ptb_style():
    rec = random_record(14, n=32_000, rate=1000)  # 32 s at 1 kHz
    out = canonicalize(rec, rate=500, seconds=10.0)
    assert out.sampling_rate == 500
    assert out.n_samples == 5000
