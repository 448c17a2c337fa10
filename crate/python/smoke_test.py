"""End-to-end smoke test for the protoseg_py extension.

Build first:  pip install --no-build-isolation ./crates/python  (needs maturin)
Run:          python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import protoseg_py as ps


def check_helpers():
    assert ps.lr_schedule(0) == 1e-3
    assert ps.lr_schedule(50) == 1e-6
    rows = ps.softmax([[0.0, 0.0], [1.0, 3.0]])
    assert abs(rows[0][0] - 0.5) < 1e-12
    assert abs(sum(rows[1]) - 1.0) < 1e-12

    # 2x2 image, one channel; class 1 covers the left column.
    pooled = ps.masked_average_pool([1.0, 5.0, 3.0, 7.0], 2, 2, 1, [1, 0, 1, 0], 1, 0.0)
    assert abs(pooled[0] - 2.0) < 1e-12

    cm = ps.confusion_matrix([0, 1, 1, 0], [0, 1, 0, 0], 2)
    assert cm == [[2, 1], [0, 1]]
    m = ps.compute_metrics(cm)
    assert all(math.isfinite(v) for v in m.values())
    assert abs(m["miou_no_bg"] - 0.5) < 1e-12


def check_pipeline(root: Path):
    meta = json.loads(ps.generate_dataset(str(root), count=400, seed=7))
    assert meta["count"] == 400

    ds = ps.Dataset.load(str(root))
    assert len(ds) == 400 and ds.num_classes == 9

    ep = ds.split("train").sample_episode(n_ways=2, k_shots=5, seed=7)
    assert len(ep.support_ids) == 10 and len(ep.query_ids) == 1

    model = ps.Model("desk", seed=7)
    losses = model.pretrain(ds, episodes=3, n_ways=4, k_shots=2, seed=7)
    assert len(losses) == 3 and all(math.isfinite(l) for l in losses)
    model.finetune(ds, episodes=3, attention="sa", seed=7)
    assert model.stage == "finetune" and model.attention == "sa"

    shape, probs = model.predict(ep)
    assert shape == [1, ds.image_size, ds.image_size, 3]
    assert abs(sum(probs[:3]) - 1.0) < 1e-4

    ckpt = root / "model.bin"
    model.save(str(ckpt))
    again = ps.Model.load(str(ckpt))
    assert again.predict(ep)[1] == probs

    metrics = again.evaluate(ds, episodes=3, seed=7)
    assert 0.0 <= metrics["miou_no_bg"] <= 1.0
    print("metrics:", {k: round(v, 3) for k, v in sorted(metrics.items())})


def main():
    check_helpers()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(Path(tmp) / "synth")
    print("smoke test passed")


if __name__ == "__main__":
    main()
