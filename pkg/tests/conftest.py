import numpy as np

from cbx.synthgen import TransactionRecord


def make_records(
    n,
    d=5,
    k=4,
    fraud_rate=0.3,
    golden_rate=1.0,
    seed=0,
    split="train",
    noisy_equals_golden=False,
):
    """Small in-memory record pool for training and metric tests."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        golden = rng.integers(0, 2, size=k).astype(np.int8)
        noisy = golden.copy() if noisy_equals_golden else (
            rng.integers(0, 2, size=k).astype(np.int8)
        )
        records.append(
            TransactionRecord(
                id=i,
                features=rng.standard_normal(d),
                y_d=int(rng.random() < fraud_rate),
                triggered_rules=(),
                golden_concepts=golden,
                noisy_concepts=noisy,
                split=split,
                label_source="golden" if rng.random() < golden_rate else "noisy",
            )
        )
    return records
