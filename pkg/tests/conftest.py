import numpy as np
import pytest

from ecgfuse.ingest import DiagnosisLabel, EcgRecord, LEAD_ORDER


def random_record(seed: int, n: int = 5000, rate: int = 500, label=DiagnosisLabel.NORMAL) -> EcgRecord:
    rng = np.random.default_rng(seed)
    leads = {lead: rng.normal(0.0, 1.0, size=n) for lead in LEAD_ORDER}
    return EcgRecord(record_id=f"rec{seed}", sampling_rate=rate, leads=leads, label=label)


@pytest.fixture
def record():
    return random_record(0)
