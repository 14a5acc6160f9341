"""Quick check of the compiled extension.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml`, or
`cargo build -p fevpr-python --release` and put the produced library on
PYTHONPATH as `fevpr.so`.
"""

import math
import sys
import tempfile
from pathlib import Path

import fevpr


def main() -> int:
    print("fevpr", fevpr.__version__)

    presets = fevpr.ablation_presets()
    assert "full" in presets and "frame_only" in presets, presets
    assert fevpr.parse_ablation("frame_only")[0] == "frame_only"
    assert fevpr.parse_ablation("single_scale:16,no_attention") == ("fused", False, "single_scale:16", False)
    try:
        fevpr.parse_ablation("frame_only,event_only")
    except ValueError:
        pass
    else:
        raise AssertionError("contradictory switches accepted")

    q = [1.0, 0.0]
    assert fevpr.triplet_loss(q, [q], [[-1.0, 0.0]]) == 0.0
    assert math.isclose(fevpr.triplet_loss(q, [q], [q, q]), 0.2)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        names = fevpr.synth(str(root / "world"), places=8, image_size=64)
        assert "database" in names and "heldout" in names, names

        model = fevpr.Model(compact=True, seed=3)
        print(model)
        db = fevpr.Traverse.load(str(root / "world" / "database"), model)
        query = fevpr.Traverse.load(str(root / "world" / "heldout"), model)
        assert len(db) == 8 and len(db.positions) == 8

        rows = model.describe(db)
        assert len(rows) == 8 and len(rows[0]) == model.descriptor_len
        for r in rows:
            assert abs(math.sqrt(sum(v * v for v in r)) - 1.0) < 1e-4

        d = fevpr.distances(rows, rows)
        assert all(abs(d[i][i]) < 1e-6 for i in range(8))
        rec = fevpr.recall_at(d, db.positions, db.positions, 75.0, [1, 5])
        assert rec[1] == 1.0, rec

        report = fevpr.evaluate(model, db, query)
        assert 0.0 <= report["recall_at_1"] <= 1.0
        assert len(report["success"]) == len(query)

        ck = root / "m.safetensors"
        ident = model.save(str(ck))
        again = fevpr.Model.load(str(ck))
        assert again.describe(db) == rows, "reload changed outputs"
        print("checkpoint", ident)

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
